"""Weighted source mixing, per-image task selection and corpus serialization."""

from __future__ import annotations

import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from . import __version__
from .model import DialogueSample, ImageBundle, Role, Task, Turn
from .taskgen import (
    BUNDLE_TASKS,
    Skipped,
    TaskSpec,
    feasible_tasks,
    gen_multichoice,
    generate,
    source_of,
    stable_hash,
)
from .templates import TemplateBank

DEFAULT_WEIGHTS = {"object365": 0.1}


class MixError(ValueError):
    pass


class CorpusFormatError(ValueError):
    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class MixSpec:
    entries: tuple[tuple[str, float], ...]
    epoch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.entries:
            raise MixError("a mix needs at least one source")
        for name, w in self.entries:
            if not w > 0:
                raise MixError(f"weight for {name!r} must be positive, got {w}")
            if "/" in name:
                raise MixError(f"source name {name!r} may not contain '/'")
        if len({n for n, _ in self.entries}) != len(self.entries):
            raise MixError("duplicate source names in mix")

    def to_dict(self) -> dict:
        return {"entries": [[n, w] for n, w in self.entries], "epoch_size": self.epoch_size, "seed": self.seed}


@dataclass(frozen=True)
class MultiChoiceItem:
    image_id: str
    question: str
    options: tuple[str, ...]
    answer_index: int


def _rng(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, stable_hash(*names)])


def select_task(bundle: ImageBundle, allowed: Sequence[Task], rng: np.random.Generator) -> TaskSpec | None:
    """Uniform pick among feasible (task, variant) pairs; None if nothing fits."""
    pairs = feasible_tasks(bundle, allowed)
    if not pairs:
        return None
    task, variant = pairs[int(rng.integers(len(pairs)))]
    return TaskSpec(task, variant, int(rng.integers(0, 2**63)))


def mix(sources: Mapping[str, Sequence[Any]], spec: MixSpec) -> Iterator[tuple[str, Any]]:
    """Yield ``(source_name, item)`` for each slot of the epoch.

    Each slot picks a source with probability proportional to its weight, then
    takes the next item from that source's shuffled cycle (reshuffled when it
    runs out).
    """
    for name, _ in spec.entries:
        if name not in sources:
            raise MixError(f"source {name!r} is not available")
        if len(sources[name]) == 0:
            raise MixError(f"source {name!r} is empty")
    names = [n for n, _ in spec.entries]
    weights = np.array([w for _, w in spec.entries], dtype=np.float64)
    epoch = spec.epoch_size if spec.epoch_size is not None else sum(len(sources[n]) for n in names)
    draws = _rng(spec.seed, "mix").choice(len(names), size=epoch, p=weights / weights.sum())

    cycles = {n: _rng(spec.seed, "cycle", n) for n in names}
    perms: dict[str, np.ndarray] = {}
    ptr = dict.fromkeys(names, 0)
    for k in draws:
        name = names[k]
        items = sources[name]
        if name not in perms or ptr[name] == len(items):
            perms[name] = cycles[name].permutation(len(items))
            ptr[name] = 0
        yield name, items[perms[name][ptr[name]]]
        ptr[name] += 1


@dataclass
class CorpusResult:
    samples: list[DialogueSample]
    manifest: dict


def build_corpus(
    sources: Mapping[str, Sequence[Any]],
    spec: MixSpec,
    allowed_tasks: Sequence[Task] = BUNDLE_TASKS,
    bank: TemplateBank | None = None,
    workers: int = 1,
) -> CorpusResult:
    """Mix sources and materialize one dialogue per slot.

    Source items are ``ImageBundle`` (a task is picked per slot) or
    ``MultiChoiceItem``. Bundles with no feasible task are removed before
    mixing. Output order follows the mixer and does not depend on ``workers``.
    """
    usable = {}
    infeasible = {}
    for name, items in sources.items():
        keep = [it for it in items if not isinstance(it, ImageBundle) or feasible_tasks(it, allowed_tasks)]
        infeasible[name] = len(items) - len(keep)
        usable[name] = keep
    draws = list(mix(usable, spec))

    def materialize(slot: int) -> DialogueSample | None:
        name, item = draws[slot]
        rng = _rng(spec.seed, "slot", slot)
        if isinstance(item, MultiChoiceItem):
            ts = TaskSpec(Task.MULTICHOICE_VQA, 1, int(rng.integers(0, 2**63)))
            return gen_multichoice(
                item.question, item.options, item.answer_index, ts, image_id=item.image_id, source=name, bank=bank
            )
        ts = select_task(item, allowed_tasks, rng)
        if ts is None:
            return None
        try:
            return generate(item, ts, source=name, bank=bank)
        except Skipped:
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            made = list(pool.map(materialize, range(len(draws))))
    else:
        made = [materialize(i) for i in range(len(draws))]

    samples = [s for s in made if s is not None]
    manifest = {
        "generator": f"rcinstruct-{__version__}",
        "mix": spec.to_dict(),
        "allowed_tasks": [t.value for t in allowed_tasks],
        "epoch_size": len(draws),
        "draws": dict(sorted(Counter(n for n, _ in draws).items())),
        "emitted": dict(sorted(Counter(source_of(s.provenance) for s in samples).items())),
        "tasks": dict(sorted(Counter(s.task.value for s in samples).items())),
        "skipped": len(made) - len(samples),
        "infeasible_items": dict(sorted(infeasible.items())),
    }
    return CorpusResult(samples, manifest)


def sample_to_record(s: DialogueSample) -> dict:
    return {
        "image": s.image_id,
        "conversations": [{"from": t.role.value, "value": t.text} for t in s.turns],
        "task": s.task.value,
        "provenance": s.provenance,
    }


def record_to_sample(d: dict) -> DialogueSample:
    return DialogueSample(
        image_id=str(d["image"]),
        task=Task(d["task"]),
        turns=tuple(Turn(Role(c["from"]), c["value"]) for c in d["conversations"]),
        provenance=d["provenance"],
    )


def serialize(samples: Sequence[DialogueSample]) -> bytes:
    lines = [json.dumps(sample_to_record(s), ensure_ascii=False, separators=(",", ":")) for s in samples]
    return "".join(line + "\n" for line in lines).encode("utf-8")


def deserialize(data: bytes | str) -> list[DialogueSample]:
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(record_to_sample(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise CorpusFormatError(f"malformed sample ({e})", lineno) from None
    return out


def load_multichoice(path: str | Path) -> list[MultiChoiceItem]:
    """Read ``{image_id, question, options, answer_index}`` records, one per line."""
    items = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                items.append(
                    MultiChoiceItem(str(d["image_id"]), d["question"], tuple(d["options"]), int(d["answer_index"]))
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise CorpusFormatError(f"malformed multi-choice record ({e})", lineno) from None
    return items
