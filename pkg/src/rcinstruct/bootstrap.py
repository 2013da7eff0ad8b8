"""Self-consistent bootstrapping of referring expressions from detection boxes.

For every candidate object the model is asked to caption the box, then to
ground its own caption. The pair is kept when the re-grounded box overlaps
the original with IoU of at least ``lam``.
"""

from __future__ import annotations

import base64
import json
import logging
import re
import urllib.request
from collections import defaultdict
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .geometry import NormBox, iou, normalize, parse_coords, quantize
from .ingestion import bootstrap_candidates
from .model import ExpressionSource, ImageBundle, ImageRecord, ObjectAnn, ReferringExpression
from .templates import instantiate_template, load_bank

logger = logging.getLogger(__name__)

_TUPLE_RE = re.compile(r"\[\s*[-+.\d]+(?:\s*,\s*[-+.\d]+)*\s*\]")


@dataclass(frozen=True)
class BootstrapConfig:
    lam: float = 0.5
    max_objects_per_image: int = 15
    min_object_area: float = 2000.0
    max_inflight_requests: int = 4
    retry_limit: int = 2
    request_timeout: float = 60.0
    abort_failure_rate: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.max_inflight_requests < 1:
            raise ValueError("max_inflight_requests must be >= 1")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")


class ModelClient(Protocol):
    def describe(self, image_uri: str, coord_text: str) -> str: ...

    def ground(self, image_uri: str, description: str) -> str: ...


def describe_prompt(coord_text: str) -> str:
    return instantiate_template(load_bank()[("ground_caption", 1)][0], {"object": coord_text})


def ground_prompt(description: str) -> str:
    return instantiate_template(load_bank()[("grounding", 1)][0], {"expr": description})


class HTTPModelClient:
    """POSTs ``{"image_uri" | "image", "prompt"}`` and reads ``{"text"}`` back.

    With ``inline_images=True`` the image file is read and sent base64-encoded
    under ``image`` instead of its URI.
    """

    def __init__(self, endpoint: str, token: str | None = None, timeout: float = 60.0, inline_images: bool = False):
        self.endpoint = endpoint
        self.token = token
        self.timeout = timeout
        self.inline_images = inline_images

    def _post(self, image_uri: str, prompt: str) -> str:
        payload = {"prompt": prompt}
        if self.inline_images:
            payload["image"] = base64.b64encode(Path(image_uri).read_bytes()).decode("ascii")
        else:
            payload["image_uri"] = image_uri
        req = urllib.request.Request(
            self.endpoint,
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        if self.token:
            req.add_header("Authorization", f"Bearer {self.token}")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            body = json.loads(resp.read().decode("utf-8"))
        text = body.get("text")
        if not isinstance(text, str):
            raise ValueError(f"response has no string 'text' field: {body!r}")
        return text

    def describe(self, image_uri: str, coord_text: str) -> str:
        return self._post(image_uri, describe_prompt(coord_text))

    def ground(self, image_uri: str, description: str) -> str:
        return self._post(image_uri, ground_prompt(description))


class TranscriptClient:
    """Replays canned responses keyed by ``(image, prompt)``.

    ``image`` is matched against the URI the pipeline passes in; unknown keys
    raise ``KeyError`` and so count as request failures.
    """

    def __init__(self, responses: dict[tuple[str, str], str]):
        self.responses = dict(responses)

    @classmethod
    def from_file(cls, path: str | Path) -> TranscriptClient:
        responses = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    responses[(str(rec["image"]), rec["prompt"])] = rec["response"]
                except (json.JSONDecodeError, KeyError) as e:
                    raise ValueError(f"{path}:{lineno}: malformed transcript entry: {e}") from None
        return cls(responses)

    def describe(self, image_uri: str, coord_text: str) -> str:
        return self.responses[(image_uri, describe_prompt(coord_text))]

    def ground(self, image_uri: str, description: str) -> str:
        return self.responses[(image_uri, ground_prompt(description))]


class RequestFailure(RuntimeError):
    pass


class BootstrapAborted(RuntimeError):
    def __init__(self, message: str, report: BootstrapReport):
        super().__init__(message)
        self.report = report


@dataclass
class BootstrapReport:
    generated: int = 0
    retained: int = 0
    filtered: int = 0
    no_box_parsed: int = 0
    request_failures: int = 0
    mean_iou_retained: float = 0.0
    lam: float = 0.5
    failures: list[dict] = field(default_factory=list)

    @property
    def conserved(self) -> bool:
        return self.generated == self.retained + self.filtered + self.no_box_parsed

    def to_dict(self) -> dict:
        return asdict(self)


def _call(fn, *args, retry_limit: int):
    last = None
    for _ in range(retry_limit + 1):
        try:
            return fn(*args)
        except Exception as e:  # any client error is retried
            last = e
    raise RequestFailure(f"{type(last).__name__}: {last}") from last


def strip_coords(text: str) -> str:
    return " ".join(_TUPLE_RE.sub(" ", text).split())


def describe_object(client: ModelClient, image: ImageRecord, obj: ObjectAnn, retry_limit: int = 2) -> str:
    """Caption one object's box; coordinate tuples are stripped from the reply."""
    coord = quantize(normalize(obj.box, image))
    return strip_coords(_call(client.describe, image.uri, coord, retry_limit=retry_limit))


def ground_description(client: ModelClient, image: ImageRecord, description: str, retry_limit: int = 2) -> NormBox | None:
    """First box the model outputs for ``description``, or None."""
    raw = _call(client.ground, image.uri, description, retry_limit=retry_limit)
    boxes = parse_coords(raw)
    return boxes[0] if boxes else None


def self_consistent_filter(gt: NormBox, predicted: NormBox | None, lam: float) -> bool:
    return predicted is not None and iou(gt, predicted) >= lam


def _bootstrap_one(client, image: ImageRecord, obj: ObjectAnn, config: BootstrapConfig) -> ReferringExpression:
    desc = describe_object(client, image, obj, config.retry_limit)
    base = dict(image_id=image.image_id, box=obj.box, source=ExpressionSource.BOOTSTRAPPED, object_id=obj.object_id)
    if not desc:
        return ReferringExpression(text="", retained=False, **base)
    pred = ground_description(client, image, desc, config.retry_limit)
    if pred is None:
        return ReferringExpression(text=desc, retained=False, **base)
    gt = normalize(obj.box, image)
    score = iou(gt, pred)
    return ReferringExpression(
        text=desc,
        predicted_box=pred.as_tuple(),
        iou=score,
        retained=self_consistent_filter(gt, pred, config.lam),
        **base,
    )


def _sort_key(e: ReferringExpression):
    return (e.image_id, e.object_id or "")


def summarize(expressions: Iterable[ReferringExpression], lam: float, request_failures: int = 0) -> BootstrapReport:
    """Rebuild report counters from bootstrapped records."""
    rep = BootstrapReport(lam=lam, request_failures=request_failures)
    ious = []
    for e in expressions:
        if e.source is not ExpressionSource.BOOTSTRAPPED:
            continue
        rep.generated += 1
        if e.retained:
            rep.retained += 1
            ious.append(e.iou)
        elif e.text and e.predicted_box is None:
            rep.no_box_parsed += 1
        else:
            rep.filtered += 1
    rep.mean_iou_retained = float(np.mean(ious)) if ious else 0.0
    return rep


def run_bootstrap(
    client: ModelClient, bundles: Iterable[ImageBundle], config: BootstrapConfig = BootstrapConfig()
) -> tuple[list[ReferringExpression], BootstrapReport]:
    """Bootstrap every candidate object of ``bundles``.

    Returns one record per object that got through both client calls, sorted
    by (image_id, object_id), and the run report. Raises BootstrapAborted once
    failures exceed ``abort_failure_rate`` of all candidates.
    """
    jobs: list[tuple[ImageRecord, ObjectAnn]] = []
    for b in bundles:
        cands = set(b.candidates if b.candidates is not None else bootstrap_candidates(b, config.min_object_area))
        jobs.extend((b.record, o) for o in b.objects if o.object_id in cands)

    results: list[ReferringExpression] = []
    failures: list[dict] = []
    budget = config.abort_failure_rate * len(jobs)

    with ThreadPoolExecutor(max_workers=config.max_inflight_requests) as pool:
        pending = {pool.submit(_bootstrap_one, client, img, obj, config): (img, obj) for img, obj in jobs}
        while pending:
            done, _ = wait(pending, return_when=FIRST_COMPLETED)
            for fut in done:
                img, obj = pending.pop(fut)
                try:
                    results.append(fut.result())
                except RequestFailure as e:
                    failures.append({"image_id": img.image_id, "object_id": obj.object_id, "error": str(e)})
            if len(failures) > budget:
                for fut in pending:
                    fut.cancel()
                report = summarize(results, config.lam, len(failures))
                report.failures = sorted(failures, key=lambda f: (f["image_id"], f["object_id"]))
                raise BootstrapAborted(
                    f"{len(failures)} of {len(jobs)} candidates failed (abort rate {config.abort_failure_rate})", report
                )

    results.sort(key=_sort_key)
    report = summarize(results, config.lam, len(failures))
    report.failures = sorted(failures, key=lambda f: (f["image_id"], f["object_id"]))
    logger.info("bootstrap: %d generated, %d retained, %d failures", report.generated, report.retained, len(failures))
    return results, report


def refilter(expressions: Sequence[ReferringExpression], lam: float) -> tuple[list[ReferringExpression], BootstrapReport]:
    """Re-apply the IoU threshold to saved records without calling the model."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    scores = np.array([e.iou if e.iou is not None else -1.0 for e in expressions], dtype=np.float64)
    keep = scores >= lam
    out = []
    for e, k in zip(expressions, keep):
        if e.source is ExpressionSource.BOOTSTRAPPED:
            e = replace(e, retained=bool(k) and e.predicted_box is not None)
        out.append(e)
    return out, summarize(out, lam)


def attach_expressions(bundles: Iterable[ImageBundle], expressions: Iterable[ReferringExpression]) -> list[ImageBundle]:
    by_image = defaultdict(list)
    for e in expressions:
        by_image[e.image_id].append(e)
    return [
        ImageBundle(b.record, b.objects, b.relations, b.regions, tuple(by_image.get(b.image_id, ())), b.candidates)
        for b in bundles
    ]


def write_expressions(path: str | Path, expressions: Iterable[ReferringExpression]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for e in expressions:
            f.write(json.dumps(e.to_dict(), ensure_ascii=False, separators=(",", ":")) + "\n")
            n += 1
    return n


def read_expressions(path: str | Path) -> list[ReferringExpression]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(ReferringExpression.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: malformed expression record: {e}") from None
    return out
