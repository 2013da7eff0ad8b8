"""Canonical in-memory annotation model.

All records are frozen dataclasses. ``to_dict``/``from_dict`` give a plain
JSON-compatible form that round-trips exactly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

PLACEHOLDER_RE = re.compile(r"<[^<>\s]+>")
_WS_RE = re.compile(r"\s+")


def canonical_category(name: str) -> str:
    """Lowercase a category name and collapse internal whitespace."""
    return _WS_RE.sub(" ", name.strip().lower())


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    uri: str
    width: int
    height: int

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "uri": self.uri, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> ImageRecord:
        return cls(str(d["image_id"]), str(d.get("uri", "")), int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class PixelBox:
    """Corner-form box in pixels. Not validated on construction; see ``problems``."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> PixelBox:
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def problems(self, image: ImageRecord | None = None) -> list[str]:
        out = []
        if min(self.as_tuple()) < 0:
            out.append("non-negative coordinates")
        if not self.x_min < self.x_max:
            out.append("x_min < x_max")
        if not self.y_min < self.y_max:
            out.append("y_min < y_max")
        if image is not None:
            if self.x_max > image.width:
                out.append("x_max <= width")
            if self.y_max > image.height:
                out.append("y_max <= height")
        return out

    def to_list(self) -> list[float]:
        return list(self.as_tuple())

    @classmethod
    def from_list(cls, v: Sequence[float]) -> PixelBox:
        x0, y0, x1, y1 = v
        return cls(float(x0), float(y0), float(x1), float(y1))


@dataclass(frozen=True)
class ObjectAnn:
    object_id: str
    image_id: str
    box: PixelBox
    category: str

    def to_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "image_id": self.image_id,
            "box": self.box.to_list(),
            "category": self.category,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ObjectAnn:
        return cls(str(d["object_id"]), str(d["image_id"]), PixelBox.from_list(d["box"]), d["category"])


@dataclass(frozen=True)
class RelationTriplet:
    subject_id: str
    predicate: str
    object_id: str

    def to_dict(self) -> dict:
        return {"subject_id": self.subject_id, "predicate": self.predicate, "object_id": self.object_id}

    @classmethod
    def from_dict(cls, d: dict) -> RelationTriplet:
        return cls(str(d["subject_id"]), d["predicate"], str(d["object_id"]))


@dataclass(frozen=True)
class RegionDesc:
    image_id: str
    box: PixelBox
    phrase: str

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "box": self.box.to_list(), "phrase": self.phrase}

    @classmethod
    def from_dict(cls, d: dict) -> RegionDesc:
        return cls(str(d["image_id"]), PixelBox.from_list(d["box"]), d["phrase"])


class ExpressionSource(str, Enum):
    ANNOTATED = "annotated"
    BOOTSTRAPPED = "bootstrapped"


@dataclass(frozen=True)
class ReferringExpression:
    """A referring-expression / box pair.

    ``predicted_box`` is the box the model grounded the text back to, in
    normalized ``[x_min, y_min, x_max, y_max]`` form. It is ``None`` for
    annotated pairs and for bootstrapped pairs whose grounding produced no
    parseable box (those are never retained).
    """

    image_id: str
    box: PixelBox
    text: str
    source: ExpressionSource = ExpressionSource.ANNOTATED
    predicted_box: tuple[float, float, float, float] | None = None
    iou: float | None = None
    retained: bool = True
    object_id: str | None = None

    def problems(self, lam: float | None = None) -> list[str]:
        out = []
        if self.iou is not None and not 0.0 <= self.iou <= 1.0:
            out.append("iou in [0,1]")
        if self.source is ExpressionSource.BOOTSTRAPPED and self.retained:
            if self.predicted_box is None or self.iou is None:
                out.append("retained bootstrapped pair has predicted_box and iou")
            elif lam is not None and self.iou < lam:
                out.append("retained bootstrapped pair has iou >= lambda")
        if (self.predicted_box is None) != (self.iou is None):
            out.append("predicted_box and iou present together")
        return out

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "object_id": self.object_id,
            "box": self.box.to_list(),
            "text": self.text,
            "source": self.source.value,
            "predicted_box": list(self.predicted_box) if self.predicted_box is not None else None,
            "iou": self.iou,
            "retained": self.retained,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ReferringExpression:
        pred = d.get("predicted_box")
        return cls(
            image_id=str(d["image_id"]),
            box=PixelBox.from_list(d["box"]),
            text=d["text"],
            source=ExpressionSource(d.get("source", "annotated")),
            predicted_box=tuple(float(v) for v in pred) if pred is not None else None,
            iou=None if d.get("iou") is None else float(d["iou"]),
            retained=bool(d.get("retained", True)),
            object_id=None if d.get("object_id") is None else str(d["object_id"]),
        )


class Task(str, Enum):
    RELATION_QA = "relation_qa"
    RELATION_DETECT = "relation_detect"
    SPATIAL = "spatial"
    COUNTING = "counting"
    DETECTION = "detection"
    GROUNDING = "grounding"
    GROUND_CAPTION = "ground_caption"
    MULTICHOICE_VQA = "multichoice_vqa"


class Role(str, Enum):
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class Turn:
    role: Role
    text: str


@dataclass(frozen=True)
class DialogueSample:
    image_id: str
    task: Task
    turns: tuple[Turn, ...]
    provenance: str

    def problems(self) -> list[str]:
        out = []
        if not self.turns:
            return ["turns non-empty"]
        if self.turns[0].role is not Role.USER:
            out.append("first role is user")
        if self.turns[-1].role is not Role.ASSISTANT:
            out.append("last role is assistant")
        for prev, cur in zip(self.turns, self.turns[1:]):
            if prev.role is cur.role:
                out.append("roles alternate")
                break
        for t in self.turns:
            m = PLACEHOLDER_RE.search(t.text)
            if m:
                out.append(f"unsubstituted placeholder {m.group(0)}")
                break
        return out


@dataclass(frozen=True)
class Violation:
    subject: str
    rule: str

    def __str__(self) -> str:
        return f"{self.subject}: {self.rule}"


@dataclass(frozen=True)
class ImageBundle:
    """Everything known about one image.

    ``candidates`` lists the object ids eligible for bootstrapping; ``None``
    means the bundle has not been through ``filter_for_bootstrap``.
    """

    record: ImageRecord
    objects: tuple[ObjectAnn, ...] = ()
    relations: tuple[RelationTriplet, ...] = ()
    regions: tuple[RegionDesc, ...] = ()
    expressions: tuple[ReferringExpression, ...] = ()
    candidates: tuple[str, ...] | None = field(default=None)

    @property
    def image_id(self) -> str:
        return self.record.image_id

    def object_map(self) -> dict[str, ObjectAnn]:
        return {o.object_id: o for o in self.objects}

    def to_dict(self) -> dict:
        d = {
            "image": self.record.to_dict(),
            "objects": [o.to_dict() for o in self.objects],
            "relations": [r.to_dict() for r in self.relations],
            "regions": [r.to_dict() for r in self.regions],
        }
        if self.expressions:
            d["expressions"] = [e.to_dict() for e in self.expressions]
        if self.candidates is not None:
            d["candidates"] = list(self.candidates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ImageBundle:
        cands = d.get("candidates")
        return cls(
            record=ImageRecord.from_dict(d["image"]),
            objects=tuple(ObjectAnn.from_dict(o) for o in d.get("objects", ())),
            relations=tuple(RelationTriplet.from_dict(r) for r in d.get("relations", ())),
            regions=tuple(RegionDesc.from_dict(r) for r in d.get("regions", ())),
            expressions=tuple(ReferringExpression.from_dict(e) for e in d.get("expressions", ())),
            candidates=tuple(str(c) for c in cands) if cands is not None else None,
        )


def validate_image_bundle(
    record: ImageRecord,
    objects: Iterable[ObjectAnn],
    relations: Iterable[RelationTriplet] = (),
    regions: Iterable[RegionDesc] = (),
) -> list[Violation]:
    """Check every model invariant for one image; an empty list means valid."""
    report: list[Violation] = []
    if record.width < 1:
        report.append(Violation(f"image {record.image_id}", "width >= 1"))
    if record.height < 1:
        report.append(Violation(f"image {record.image_id}", "height >= 1"))

    seen: set[str] = set()
    for obj in objects:
        who = f"object {obj.object_id}"
        if obj.object_id in seen:
            report.append(Violation(who, "object_id unique within image"))
        seen.add(obj.object_id)
        if obj.image_id != record.image_id:
            report.append(Violation(who, "image_id matches image"))
        if not obj.category:
            report.append(Violation(who, "category non-empty"))
        report.extend(Violation(who, p) for p in obj.box.problems(record))

    for rel in relations:
        who = f"relation {rel.subject_id}-{rel.predicate}-{rel.object_id}"
        if rel.subject_id == rel.object_id:
            report.append(Violation(who, "subject != object"))
        for ref in (rel.subject_id, rel.object_id):
            if ref not in seen:
                report.append(Violation(who, f"id {ref} resolves to an object"))

    for i, reg in enumerate(regions):
        who = f"region {i}"
        if not reg.phrase.strip():
            report.append(Violation(who, "phrase non-empty"))
        if reg.image_id != record.image_id:
            report.append(Violation(who, "image_id matches image"))
        report.extend(Violation(who, p) for p in reg.box.problems(record))
    return report
