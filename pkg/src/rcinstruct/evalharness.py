"""Scoring of model transcripts: grounding accuracy, VQA score, counting accuracy."""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from ._kernels import paired_iou
from .geometry import NormBox, parse_coords

VQA_NOTE = "VQA Score = min(#references equal to the normalized prediction / 3, 1), averaged over items"

_PUNCT = str.maketrans("", "", string.punctuation)
_ARTICLES = {"a", "an", "the"}
_INT_RE = re.compile(r"-?\d+")


class EvalTask(str, Enum):
    GROUNDING = "grounding"
    VQA = "vqa"
    COUNTING = "counting"


class EvalFormatError(ValueError):
    def __init__(self, message: str, lineno: int | None = None, path: str | None = None):
        where = f"{path or '<input>'}:{lineno}: " if lineno is not None else ""
        super().__init__(where + message)
        self.lineno = lineno


GroundTruth = Union[NormBox, tuple[str, ...], int]


@dataclass(frozen=True)
class EvalItem:
    item_id: str
    task: EvalTask
    ground_truth: GroundTruth
    prediction_text: str = ""

    def __post_init__(self):
        ok = {
            EvalTask.GROUNDING: isinstance(self.ground_truth, NormBox),
            EvalTask.VQA: isinstance(self.ground_truth, tuple) and len(self.ground_truth) > 0,
            EvalTask.COUNTING: isinstance(self.ground_truth, int) and not isinstance(self.ground_truth, bool),
        }[self.task]
        if not ok:
            raise EvalFormatError(f"item {self.item_id}: ground truth {self.ground_truth!r} does not fit task {self.task.value}")


@dataclass(frozen=True)
class EvalResult:
    metric_name: str
    value: float
    item_count: int
    per_item: tuple[tuple[str, float], ...] = ()
    notes: dict = field(default_factory=dict)

    def to_dict(self, with_items: bool = False) -> dict:
        d = {"metric": self.metric_name, "value": self.value, "count": self.item_count, "config": self.notes}
        if with_items:
            d["per_item"] = [{"item_id": i, "score": s} for i, s in self.per_item]
        return d


def _result(name: str, ids: Sequence[str], scores: Sequence[float], notes: dict) -> EvalResult:
    total = float(sum(scores))
    value = 100.0 * total / len(scores) if scores else 0.0
    return EvalResult(name, value, len(scores), tuple(zip(ids, (float(s) for s in scores))), notes)


def eval_grounding(items: Sequence[EvalItem], iou_threshold: float = 0.5) -> EvalResult:
    """Accuracy: share of items whose first predicted box reaches ``iou_threshold``."""
    ids = [it.item_id for it in items]
    scores = np.zeros(len(items))
    gts, preds, idx = [], [], []
    for i, it in enumerate(items):
        boxes = parse_coords(it.prediction_text)
        if boxes:
            gts.append(it.ground_truth.as_tuple())
            preds.append(boxes[0].as_tuple())
            idx.append(i)
    if idx:
        ious = paired_iou(np.array(gts), np.array(preds))
        scores[idx] = (ious >= iou_threshold).astype(np.float64)
    return _result("Accuracy", ids, list(scores), {"task": "grounding", "iou_threshold": iou_threshold})


def normalize_answer(text: str) -> str:
    words = text.lower().translate(_PUNCT).split()
    return " ".join(w for w in words if w not in _ARTICLES)


def vqa_score(prediction: str, references: Sequence[str]) -> float:
    pred = normalize_answer(prediction)
    matches = sum(1 for r in references if normalize_answer(r) == pred)
    return min(matches / 3.0, 1.0)


def eval_vqa(items: Sequence[EvalItem]) -> EvalResult:
    scores = [vqa_score(it.prediction_text, it.ground_truth) for it in items]
    return _result("VQA Score", [it.item_id for it in items], scores, {"task": "vqa", "formula": VQA_NOTE})


def first_int(text: str) -> int | None:
    m = _INT_RE.search(text)
    return int(m.group(0)) if m else None


def eval_counting(items: Sequence[EvalItem]) -> EvalResult:
    scores = [1.0 if first_int(it.prediction_text) == it.ground_truth else 0.0 for it in items]
    return _result("Accuracy", [it.item_id for it in items], scores, {"task": "counting"})


def evaluate(items: Sequence[EvalItem], iou_threshold: float = 0.5) -> dict[str, EvalResult]:
    """Score every task present in ``items``; keys are task names."""
    out = {}
    by_task = {t: [it for it in items if it.task is t] for t in EvalTask}
    if by_task[EvalTask.GROUNDING]:
        out["grounding"] = eval_grounding(by_task[EvalTask.GROUNDING], iou_threshold)
    if by_task[EvalTask.VQA]:
        out["vqa"] = eval_vqa(by_task[EvalTask.VQA])
    if by_task[EvalTask.COUNTING]:
        out["counting"] = eval_counting(by_task[EvalTask.COUNTING])
    return out


def _ground_truth(task: EvalTask, raw) -> GroundTruth:
    if task is EvalTask.GROUNDING:
        if isinstance(raw, str):
            boxes = parse_coords(raw)
            if len(boxes) != 1:
                raise ValueError(f"expected one box in {raw!r}")
            return boxes[0]
        return NormBox(*(float(v) for v in raw))
    if task is EvalTask.VQA:
        return tuple(str(a) for a in ([raw] if isinstance(raw, str) else raw))
    return int(raw)


def item_from_dict(d: dict) -> EvalItem:
    task = EvalTask(d["task"])
    return EvalItem(str(d["item_id"]), task, _ground_truth(task, d["ground_truth"]), str(d.get("prediction_text", "")))


def load_items(path: str | Path) -> list[EvalItem]:
    items = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                items.append(item_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise EvalFormatError(f"malformed eval item ({e})", lineno, str(path)) from None
    return items


def load_predictions(path: str | Path) -> dict[str, str]:
    """Read ``{item_id, prediction}`` records."""
    preds = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                preds[str(d["item_id"])] = str(d["prediction"])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise EvalFormatError(f"malformed prediction ({e})", lineno, str(path)) from None
    return preds


def attach_predictions(items: Sequence[EvalItem], predictions: dict[str, str]) -> list[EvalItem]:
    """Items missing from ``predictions`` get an empty prediction (scored 0)."""
    return [replace(it, prediction_text=predictions.get(it.item_id, "")) for it in items]
