"""Box normalization, the 3-decimal coordinate text codec, IoU and quadrants."""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum

from .model import ImageRecord, PixelBox

_STEP = Decimal("0.001")


class GeometryError(ValueError):
    """A box is degenerate or outside the unit square."""


@dataclass(frozen=True)
class NormBox:
    """Corner-form box normalized to [0, 1] by the image size.

    Positive area is required, except for point boxes (all four corners
    collapsed to one point) which only come out of ``parse_coords``.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        v = self.as_tuple()
        if not all(0.0 <= c <= 1.0 for c in v):
            raise GeometryError(f"coordinates outside [0,1]: {v}")
        if self.is_point:
            return
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"inverted or empty box: {v}")

    @property
    def is_point(self) -> bool:
        return self.x_min == self.x_max and self.y_min == self.y_max

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


class CoarsePosition(str, Enum):
    TOP_LEFT = "top_left"
    TOP_RIGHT = "top_right"
    BOTTOM_LEFT = "bottom_left"
    BOTTOM_RIGHT = "bottom_right"

    @property
    def label(self) -> str:
        """Phrase used inside instructions, e.g. ``top-left``."""
        return self.value.replace("_", "-")


# index order matches the quadrant codes of the batch kernels
POSITIONS = (CoarsePosition.TOP_LEFT, CoarsePosition.TOP_RIGHT, CoarsePosition.BOTTOM_LEFT, CoarsePosition.BOTTOM_RIGHT)


def clamp_box(box: PixelBox, image: ImageRecord) -> PixelBox:
    """Clip a pixel box to the image; raise if nothing is left."""
    clamped = PixelBox(
        min(max(box.x_min, 0.0), image.width),
        min(max(box.y_min, 0.0), image.height),
        min(max(box.x_max, 0.0), image.width),
        min(max(box.y_max, 0.0), image.height),
    )
    if not (clamped.x_min < clamped.x_max and clamped.y_min < clamped.y_max):
        raise GeometryError(f"box {box.as_tuple()} is empty after clamping to {image.width}x{image.height}")
    return clamped


def _round3(v: float) -> Decimal:
    # repr gives the shortest decimal that reads back as v, so 0.3335 rounds up
    return Decimal(repr(float(v))).quantize(_STEP, rounding=ROUND_HALF_UP)


def normalize(box: PixelBox, image: ImageRecord) -> NormBox:
    """Clamp ``box`` to ``image`` and divide by its width and height.

    Raises GeometryError if the result would collapse once rounded to three
    decimals.
    """
    b = clamp_box(box, image)
    nb = NormBox(b.x_min / image.width, b.y_min / image.height, b.x_max / image.width, b.y_max / image.height)
    if _round3(nb.x_min) >= _round3(nb.x_max) or _round3(nb.y_min) >= _round3(nb.y_max):
        raise GeometryError(f"box {box.as_tuple()} collapses at 3-decimal precision")
    return nb


def quantize(box: NormBox) -> str:
    """Render ``box`` as ``[x_min,y_min,x_max,y_max]`` with 3 decimals each."""
    q = [_round3(v) for v in box.as_tuple()]
    if q[0] >= q[2] or q[1] >= q[3]:
        raise GeometryError(f"box {box.as_tuple()} collapses at 3-decimal precision")
    return "[" + ",".join(f"{d:.3f}" for d in q) + "]"


# strict wire grammar of quantize output
COORD_TEXT_RE = re.compile(r"\[(?:(?:0\.\d{3}|1\.000),){3}(?:0\.\d{3}|1\.000)\]")
_BRACKET_RE = re.compile(r"\[([^\[\]]*)\]")
_NUMBER_RE = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)")


@dataclass
class ParseDiagnostics:
    """Counts of bracketed numeric tuples that ``parse_coords`` skipped."""

    wrong_arity: int = 0
    out_of_range: int = 0
    inverted: int = 0

    @property
    def skipped(self) -> int:
        return self.wrong_arity + self.out_of_range + self.inverted


def parse_coords(text: str, diagnostics: ParseDiagnostics | None = None) -> list[NormBox]:
    """Scan free text for bracketed coordinate tuples, in order of appearance.

    Accepts 4-tuples and 2-tuples (``[x,y]`` becomes the point box
    ``(x,y,x,y)``). Brackets holding anything other than comma-separated
    numbers are ignored; numeric tuples that are malformed are skipped and
    counted in ``diagnostics``.
    """
    diag = diagnostics if diagnostics is not None else ParseDiagnostics()
    boxes = []
    for m in _BRACKET_RE.finditer(text):
        parts = [p.strip() for p in m.group(1).split(",")]
        if not all(_NUMBER_RE.fullmatch(p) for p in parts):
            continue
        vals = [float(p) for p in parts]
        if len(vals) == 2:
            vals = vals * 2
        elif len(vals) != 4:
            diag.wrong_arity += 1
            continue
        if not all(0.0 <= v <= 1.0 for v in vals):
            diag.out_of_range += 1
            continue
        try:
            boxes.append(NormBox(*vals))
        except GeometryError:
            diag.inverted += 1
    return boxes


def iou(a: NormBox, b: NormBox) -> float:
    """Intersection over union; 0 for disjoint boxes, 1 for equal boxes."""
    if a == b:
        return 1.0
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return min(inter / union, 1.0)


def quadrant(reference: NormBox, candidate: NormBox) -> CoarsePosition | None:
    """Coarse position of ``candidate``'s center relative to ``reference``'s.

    Ties on an axis go right/bottom; a candidate equal to the reference has no
    position.
    """
    if candidate == reference:
        return None
    rx, ry = reference.center
    cx, cy = candidate.center
    return POSITIONS[(cx >= rx) + 2 * (cy >= ry)]
