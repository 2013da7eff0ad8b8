"""Command-line entry point: ingest, bootstrap, refilter, generate, eval, stats."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from .assembler import CorpusFormatError, build_corpus, deserialize, load_multichoice, serialize
from .bootstrap import (
    BootstrapAborted,
    HTTPModelClient,
    TranscriptClient,
    attach_expressions,
    read_expressions,
    refilter,
    run_bootstrap,
    write_expressions,
)
from .config import ConfigError, PipelineConfig, load_config
from .evalharness import EvalFormatError, attach_predictions, evaluate, load_items, load_predictions
from .ingestion import IngestError, filter_for_bootstrap, load_detection, load_scene_graph, read_bundles, write_bundles
from .model import Task
from .taskgen import BUNDLE_TASKS, source_of
from .templates import TemplateError, load_bank

logger = logging.getLogger("rcinstruct")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_CLIENT = 0, 2, 3, 4


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _bundle_path(cfg: PipelineConfig, name: str) -> Path:
    return cfg.output_dir / "bundles" / f"{name}.jsonl"


def _expr_path(cfg: PipelineConfig, name: str) -> Path:
    return cfg.output_dir / "bootstrap" / f"{name}.expressions.jsonl"


def _bootstrapped_sources(cfg: PipelineConfig) -> list[str]:
    return [n for n, s in cfg.sources().items() if s["kind"] != "multichoice" and s.get("bootstrap", s["kind"] == "detection")]


def cmd_ingest(cfg: PipelineConfig, args) -> int:
    cfg.check_inputs(("scene_graph", "detection"))
    sources = {n: s for n, s in cfg.sources().items() if s["kind"] != "multichoice"}
    if not sources:
        raise ConfigError("no scene_graph or detection sources configured")
    boot = set(_bootstrapped_sources(cfg))
    f = cfg.raw["filter"]
    parsed = {}
    for name, s in sources.items():
        if s["kind"] == "scene_graph":
            opt = lambda k: cfg.resolve(s[k]) if s.get(k) else None  # noqa: E731
            bundles, stats = load_scene_graph(opt("objects") or opt("path"), opt("relations"), opt("regions"))
        else:
            bundles, stats = load_detection(cfg.resolve(s["path"]))
        entry = {"parsed": stats.to_dict()}
        if name in boot:
            bundles, fstats = filter_for_bootstrap(bundles, int(f["max_objects"]), float(f["min_object_area"]))
            entry["filtered"] = fstats.to_dict()
        parsed[name] = (bundles, entry)
    # everything parsed before anything is written
    stats_doc = {}
    (cfg.output_dir / "bundles").mkdir(parents=True, exist_ok=True)
    for name, (bundles, entry) in parsed.items():
        write_bundles(_bundle_path(cfg, name), bundles)
        stats_doc[name] = entry
        logger.info("ingest %s: %d bundles", name, len(bundles))
    _dump(cfg.output_dir / "stats.json", stats_doc)
    return EXIT_OK


def _client(cfg: PipelineConfig):
    b = cfg.raw["bootstrap"]
    if b.get("transcript"):
        return TranscriptClient.from_file(cfg.resolve(b["transcript"]))
    if b.get("endpoint"):
        return HTTPModelClient(b["endpoint"], cfg.token, float(b["request_timeout"]), bool(b.get("inline_images")))
    raise ConfigError("bootstrap needs bootstrap.endpoint or bootstrap.transcript")


def cmd_bootstrap(cfg: PipelineConfig, args) -> int:
    names = _bootstrapped_sources(cfg)
    if not names:
        raise ConfigError("no source is marked for bootstrapping")
    for name in names:
        if not _bundle_path(cfg, name).exists():
            raise ConfigError(f"no ingested bundles for {name}; run ingest first")
    bcfg = cfg.bootstrap_config()
    client = _client(cfg)
    for name in names:
        bundles = list(read_bundles(_bundle_path(cfg, name)))
        report_path = cfg.output_dir / "bootstrap" / f"{name}.report.json"
        try:
            exprs, report = run_bootstrap(client, bundles, bcfg)
        except BootstrapAborted as e:
            _dump(report_path, {**e.report.to_dict(), "aborted": str(e)})
            logger.error("bootstrap %s aborted: %s", name, e)
            return EXIT_CLIENT
        _expr_path(cfg, name).parent.mkdir(parents=True, exist_ok=True)
        write_expressions(_expr_path(cfg, name), exprs)
        _dump(report_path, report.to_dict())
        logger.info("bootstrap %s: %d/%d retained", name, report.retained, report.generated)
    return EXIT_OK


def cmd_refilter(cfg: PipelineConfig, args) -> int:
    lam = float(cfg.raw["bootstrap"]["lambda"])
    for name in _bootstrapped_sources(cfg):
        path = _expr_path(cfg, name)
        if not path.exists():
            raise ConfigError(f"no bootstrap output for {name}; run bootstrap first")
        exprs, report = refilter(read_expressions(path), lam)
        write_expressions(path, exprs)
        old = cfg.output_dir / "bootstrap" / f"{name}.report.json"
        failures = json.loads(old.read_text())["request_failures"] if old.exists() else 0
        report.request_failures = failures
        _dump(old, report.to_dict())
        logger.info("refilter %s at lambda=%s: %d/%d retained", name, lam, report.retained, report.generated)
    return EXIT_OK


def cmd_generate(cfg: PipelineConfig, args) -> int:
    cfg.check_inputs(("multichoice",))
    bank = load_bank(cfg.resolve(cfg.raw["templates"])) if cfg.raw.get("templates") else None
    exclude = set(cfg.raw["mix"].get("exclude") or [])
    items = {}
    for name, s in cfg.sources().items():
        if name in exclude:
            continue
        if s["kind"] == "multichoice":
            items[name] = load_multichoice(cfg.resolve(s["path"]))
            continue
        path = _bundle_path(cfg, name)
        if not path.exists():
            raise ConfigError(f"no ingested bundles for {name}; run ingest first")
        bundles = list(read_bundles(path))
        if _expr_path(cfg, name).exists():
            bundles = attach_expressions(bundles, read_expressions(_expr_path(cfg, name)))
        items[name] = bundles
    tasks = cfg.raw["mix"].get("tasks")
    try:
        allowed = tuple(Task(t) for t in tasks) if tasks else BUNDLE_TASKS
    except ValueError as e:
        raise ConfigError(str(e)) from None
    spec = cfg.mix_spec(list(items))
    result = build_corpus(items, spec, allowed, bank, workers=int(cfg.raw["workers"]))
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "corpus.jsonl").write_bytes(serialize(result.samples))
    _dump(out / "manifest.json", result.manifest)
    logger.info("generate: %d samples", len(result.samples))
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig, args) -> int:
    e = cfg.raw["eval"]
    if not e.get("items"):
        raise ConfigError("eval needs eval.items (or --items)")
    items_path = cfg.resolve(e["items"])
    if not items_path.exists():
        raise ConfigError(f"eval items file {items_path} does not exist")
    items = load_items(items_path)
    if e.get("predictions"):
        pred_path = cfg.resolve(e["predictions"])
        if not pred_path.exists():
            raise ConfigError(f"predictions file {pred_path} does not exist")
        items = attach_predictions(items, load_predictions(pred_path))
    results = evaluate(items, float(e["iou_threshold"]))
    doc = {task: r.to_dict() for task, r in results.items()}
    _dump(cfg.output_dir / "eval" / "results.json", doc)
    if e.get("per_item"):
        _dump(cfg.output_dir / "eval" / "per_item.json", {t: r.to_dict(with_items=True)["per_item"] for t, r in results.items()})
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_stats(cfg: PipelineConfig, args) -> int:
    out = cfg.output_dir
    doc = {}
    if (out / "stats.json").exists():
        doc["ingest"] = json.loads((out / "stats.json").read_text())
    reports = sorted((out / "bootstrap").glob("*.report.json")) if (out / "bootstrap").exists() else []
    if reports:
        doc["bootstrap"] = {p.name[: -len(".report.json")]: json.loads(p.read_text()) for p in reports}
    if (out / "corpus.jsonl").exists():
        samples = deserialize((out / "corpus.jsonl").read_bytes())
        doc["corpus"] = {
            "samples": len(samples),
            "tasks": dict(sorted(Counter(s.task.value for s in samples).items())),
            "sources": dict(sorted(Counter(source_of(s.provenance) for s in samples).items())),
        }
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "ingest": (cmd_ingest, "parse corpora into validated bundles and apply preprocessing filters"),
    "bootstrap": (cmd_bootstrap, "describe and re-ground candidate objects with a model client"),
    "refilter": (cmd_refilter, "re-apply the IoU threshold to saved bootstrap records"),
    "generate": (cmd_generate, "mix sources and write the instruction-tuning corpus"),
    "eval": (cmd_eval, "score model predictions"),
    "stats": (cmd_stats, "print ingestion, bootstrap and corpus statistics"),
}

# convenience flags mapped onto dotted config keys
FLAG_KEYS = {
    "seed": "seed",
    "output_dir": "output_dir",
    "workers": "workers",
    "lam": "bootstrap.lambda",
    "endpoint": "bootstrap.endpoint",
    "transcript": "bootstrap.transcript",
    "epoch_size": "mix.epoch_size",
    "items": "eval.items",
    "predictions": "eval.predictions",
    "iou_threshold": "eval.iou_threshold",
    "templates": "templates",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set bootstrap.retry_limit=5")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir")
    common.add_argument("--workers", type=int)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--endpoint")
    common.add_argument("--transcript")
    common.add_argument("--epoch-size", type=int)
    common.add_argument("--exclude", action="append", default=None, help="source to leave out of the mix")
    common.add_argument("--items")
    common.add_argument("--predictions")
    common.add_argument("--iou-threshold", type=float)
    common.add_argument("--templates")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="rcinstruct", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        for attr, key in FLAG_KEYS.items():
            v = getattr(args, attr)
            if v is not None:
                overrides.append(f"{key}={json.dumps(v)}")
        if args.exclude is not None:
            overrides.append(f"mix.exclude={json.dumps(args.exclude)}")
        cfg = load_config(args.config, overrides)
        level = logging.DEBUG if args.verbose else str(cfg.raw.get("log_level", "INFO")).upper()
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command][0](cfg, args)
    except (ConfigError, TemplateError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestError, CorpusFormatError, EvalFormatError, ValueError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
