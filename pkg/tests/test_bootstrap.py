import json
import threading
import time
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from rcinstruct.bootstrap import (
    BootstrapAborted,
    BootstrapConfig,
    HTTPModelClient,
    TranscriptClient,
    describe_prompt,
    ground_prompt,
    read_expressions,
    refilter,
    run_bootstrap,
    self_consistent_filter,
    strip_coords,
    summarize,
    write_expressions,
)
from rcinstruct.geometry import NormBox, normalize, quantize
from rcinstruct.model import ExpressionSource

from conftest import OracleClient, corner_transform, grid_bundles, make_bundle, shift_transform


def plain_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


FIXTURE = grid_bundles(20, 10)  # 200 candidate objects, each 100x100 px


def test_perfect_oracle_keeps_everything():
    exprs, rep = run_bootstrap(OracleClient(), FIXTURE)
    assert rep.generated == 200 and rep.retained == 200
    assert all(e.iou == pytest.approx(1.0) for e in exprs)
    assert rep.conserved
    assert all(e.problems(0.5) == [] for e in exprs)


def test_corner_oracle_keeps_nothing():
    exprs, rep = run_bootstrap(OracleClient(corner_transform), FIXTURE)
    assert rep.generated == 200 and rep.retained == 0 and rep.filtered == 200
    assert rep.mean_iou_retained == 0.0


def test_jitter_matches_brute_force():
    client = OracleClient()
    deltas = [0.01 * k for k in range(1, 31)]
    client.transform = lambda box: shift_transform(deltas[int(box[0] * 1000 + box[1] * 10) % len(deltas)])(box)
    exprs, rep = run_bootstrap(client, FIXTURE)
    want = set()
    for e in exprs:
        gt = [float(v) for v in quantize(normalize(e.box, FIXTURE[0].record)).strip("[]").split(",")]
        pred = [float(v) for v in client.emitted[e.text].strip("[]").split(",")]
        if plain_iou(gt, pred) >= 0.5:
            want.add((e.image_id, e.object_id))
    got = {(e.image_id, e.object_id) for e in exprs if e.retained}
    assert got == want
    assert 0 < len(got) < 200

    counts = [refilter(exprs, lam / 20)[1].retained for lam in range(21)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert counts[0] == 200


def test_filter_boundary_inclusive():
    b = NormBox(0.0, 0.0, 0.5, 1.0)
    half = NormBox(0.25, 0.0, 0.5, 1.0)  # IoU exactly 0.5
    assert self_consistent_filter(b, half, 0.5)
    assert not self_consistent_filter(b, half, 0.5000001)
    assert not self_consistent_filter(b, None, 0.0)


def test_no_box_and_empty_description():
    bundles = grid_bundles(1, 3)
    client = OracleClient(transform=lambda b: None if b[0] > 0 else b)
    exprs, rep = run_bootstrap(client, bundles)
    assert (rep.generated, rep.retained, rep.no_box_parsed) == (3, 1, 2)
    assert all(e.predicted_box is None for e in exprs if not e.retained)

    silent = OracleClient(describe_fn=lambda uri, c: f"{c}")  # only a tuple, stripped to ""
    exprs, rep = run_bootstrap(silent, bundles)
    assert rep.filtered == 3 and all(e.text == "" for e in exprs)
    assert silent.calls == 3  # no grounding call for an empty description


def test_strip_coords():
    assert strip_coords("a red [0.1,0.2,0.3,0.4] hat [0.5, 0.5]") == "a red hat"
    assert strip_coords("the 2 dogs") == "the 2 dogs"


class FlakyClient(OracleClient):
    def __init__(self, fail_times):
        super().__init__()
        self.fail_times = fail_times
        self.lock = threading.Lock()
        self.seen = {}

    def describe(self, uri, coord):
        with self.lock:
            n = self.seen.get((uri, coord), 0)
            self.seen[(uri, coord)] = n + 1
        if n < self.fail_times:
            raise TimeoutError("slow model")
        return super().describe(uri, coord)


def test_retry_within_limit():
    exprs, rep = run_bootstrap(FlakyClient(2), grid_bundles(1, 4), BootstrapConfig(retry_limit=2))
    assert rep.retained == 4 and rep.request_failures == 0


def test_failures_recorded_then_abort():
    bundles = grid_bundles(2, 4)
    cfg = BootstrapConfig(retry_limit=0, abort_failure_rate=1.0)
    _, rep = run_bootstrap(FlakyClient(1), bundles, cfg)
    assert rep.request_failures == 8 and rep.generated == 0
    assert rep.failures[0]["error"].startswith("TimeoutError")
    with pytest.raises(BootstrapAborted) as e:
        run_bootstrap(FlakyClient(1), bundles, BootstrapConfig(retry_limit=0, abort_failure_rate=0.5))
    assert e.value.report.request_failures > 4


@pytest.mark.parametrize("inflight", [1, 3, 16])
def test_order_independent_of_concurrency(inflight):
    base, _ = run_bootstrap(OracleClient(), FIXTURE[:5], BootstrapConfig(max_inflight_requests=1))
    got, _ = run_bootstrap(OracleClient(), FIXTURE[:5], BootstrapConfig(max_inflight_requests=inflight))
    assert got == base


def test_only_candidates_bootstrapped():
    b = make_bundle([("small", "a", (0, 0, 40, 50)), ("big", "a", (100, 100, 200, 200))])
    exprs, _ = run_bootstrap(OracleClient(), [b])
    assert [e.object_id for e in exprs] == ["big"]


def test_refilter_and_store(tmp_path):
    exprs, rep = run_bootstrap(OracleClient(shift_transform(0.03)), grid_bundles(1, 5))
    write_expressions(tmp_path / "e.jsonl", exprs)
    back = read_expressions(tmp_path / "e.jsonl")
    assert back == exprs
    again, rep2 = refilter(back, 0.5)
    assert again == exprs and rep2.to_dict() == rep.to_dict()
    strict, rep3 = refilter(back, 1.0)
    assert rep3.retained == 0 and rep3.conserved
    assert all(e.source is ExpressionSource.BOOTSTRAPPED for e in strict)


def test_report_identity_at_scale():
    # Counters only; the magnitudes come from the published corpus.
    generated, filtered = 4_961_822, 2_528_619
    assert generated - filtered == 2_433_203
    assert summarize([], 0.5).conserved


def test_transcript_client(tmp_path):
    (b,) = grid_bundles(1, 1)
    coord = quantize(normalize(b.objects[0].box, b.record))
    lines = [
        {"image": b.record.uri, "prompt": describe_prompt(coord), "response": "a grey box"},
        {"image": b.record.uri, "prompt": ground_prompt("a grey box"), "response": coord},
    ]
    path = tmp_path / "t.jsonl"
    path.write_text("".join(json.dumps(x) + "\n" for x in lines))
    exprs, rep = run_bootstrap(TranscriptClient.from_file(path), [b])
    assert rep.retained == 1 and exprs[0].text == "a grey box"


class _Handler(BaseHTTPRequestHandler):
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.seen.append((self.headers.get("Authorization"), body))
        if "locate" in body["prompt"].lower() or "[" not in body["prompt"]:
            text = "[0.000,0.000,0.100,0.100]"
        else:
            text = "a small box"
        if body.get("image_uri") == "slow":
            time.sleep(0.5)
        payload = json.dumps({"text": text}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{srv.server_port}/"
    srv.shutdown()


def test_http_client(server):
    _Handler.seen.clear()
    client = HTTPModelClient(server, token="secret", timeout=5)
    assert client.describe("images/x.jpg", "[0.000,0.000,0.100,0.100]") == "a small box"
    auth, body = _Handler.seen[0]
    assert auth == "Bearer secret"
    assert body == {"prompt": describe_prompt("[0.000,0.000,0.100,0.100]"), "image_uri": "images/x.jpg"}


def test_http_timeout_counts_as_failure(server):
    b = make_bundle([("o", "a", (0, 0, 100, 100))], image_id="slow")
    b = type(b)(type(b.record)("slow", "slow", 1000, 1000), b.objects, (), ())
    client = HTTPModelClient(server, timeout=0.1)
    _, rep = run_bootstrap(client, [b], BootstrapConfig(retry_limit=1, abort_failure_rate=1.0))
    assert rep.request_failures == 1 and rep.generated == 0
