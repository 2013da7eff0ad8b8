"""Pipeline configuration: a YAML file plus dotted-key command-line overrides."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .assembler import DEFAULT_WEIGHTS, MixSpec
from .bootstrap import BootstrapConfig

TOKEN_ENV = "RCINSTRUCT_API_TOKEN"

SOURCE_KINDS = ("scene_graph", "detection", "multichoice")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "log_level": "INFO",
    "output_dir": "rc_out",
    "templates": None,
    "workers": 1,
    "sources": {},
    "filter": {"max_objects": 15, "min_object_area": 2000},
    "bootstrap": {
        "lambda": 0.5,
        "max_inflight_requests": 4,
        "retry_limit": 2,
        "request_timeout": 60.0,
        "abort_failure_rate": 0.5,
        "endpoint": None,
        "inline_images": False,
        "transcript": None,
    },
    "mix": {"epoch_size": None, "exclude": [], "tasks": None},
    "eval": {"items": None, "predictions": None, "iou_threshold": 0.5, "per_item": False},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def set_dotted(cfg: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a mapping")
    node[keys[-1]] = value


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw) if raw else None


@dataclass
class PipelineConfig:
    raw: dict
    base_dir: Path

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.raw["output_dir"])

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def sources(self) -> dict[str, dict]:
        out = {}
        for name, s in (self.raw.get("sources") or {}).items():
            if not isinstance(s, dict) or s.get("kind") not in SOURCE_KINDS:
                raise ConfigError(f"source {name!r} needs kind in {SOURCE_KINDS}")
            out[name] = s
        return out

    def input_paths(self, kinds=SOURCE_KINDS) -> list[Path]:
        paths = []
        for s in self.sources().values():
            if s["kind"] not in kinds:
                continue
            for key in ("path", "objects", "relations", "regions"):
                if s.get(key):
                    paths.append(self.resolve(s[key]))
        return paths

    def check_inputs(self, kinds=SOURCE_KINDS) -> None:
        missing = [str(p) for p in self.input_paths(kinds) if not p.exists()]
        if missing:
            raise ConfigError(f"input path(s) do not exist: {', '.join(missing)}")

    def bootstrap_config(self) -> BootstrapConfig:
        b = self.raw["bootstrap"]
        f = self.raw["filter"]
        try:
            return BootstrapConfig(
                lam=float(b["lambda"]),
                max_objects_per_image=int(f["max_objects"]),
                min_object_area=float(f["min_object_area"]),
                max_inflight_requests=int(b["max_inflight_requests"]),
                retry_limit=int(b["retry_limit"]),
                request_timeout=float(b["request_timeout"]),
                abort_failure_rate=float(b["abort_failure_rate"]),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad bootstrap settings: {e}") from None

    def mix_spec(self, available: list[str]) -> MixSpec:
        m = self.raw["mix"]
        exclude = set(m.get("exclude") or [])
        entries = []
        for name in available:
            if name in exclude:
                continue
            s = self.raw["sources"][name]
            entries.append((name, float(s.get("weight", DEFAULT_WEIGHTS.get(name, 1.0)))))
        if not entries:
            raise ConfigError("no sources left to mix")
        epoch = m.get("epoch_size")
        try:
            return MixSpec(tuple(entries), None if epoch is None else int(epoch), self.seed)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def token(self) -> str | None:
        return os.environ.get(TOKEN_ENV)


def load_config(path: str | Path | None, overrides: list[str] = ()) -> PipelineConfig:
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{p}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        base = p.resolve().parent
    cfg = _merge(DEFAULTS, raw)
    for item in overrides:
        key, value = parse_override(item)
        set_dotted(cfg, key, value)
    return PipelineConfig(cfg, base)
