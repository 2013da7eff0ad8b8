from __future__ import annotations

import json

import pytest
from hypothesis import strategies as st

from rcinstruct.geometry import NormBox
from rcinstruct.model import ImageBundle, ImageRecord, ObjectAnn, PixelBox, RegionDesc, RelationTriplet


def make_bundle(objects=(), relations=(), regions=(), *, image_id="img", width=1000, height=1000, expressions=()):
    """objects: (object_id, category, (x0, y0, x1, y1)); relations: (s, pred, o); regions: (phrase, box)."""
    rec = ImageRecord(image_id, f"images/{image_id}.jpg", width, height)
    objs = tuple(ObjectAnn(oid, image_id, PixelBox(*box), cat) for oid, cat, box in objects)
    rels = tuple(RelationTriplet(*r) for r in relations)
    regs = tuple(RegionDesc(image_id, PixelBox(*box), phrase) for phrase, box in regions)
    return ImageBundle(rec, objs, rels, regs, tuple(expressions))


def ndjson(records) -> bytes:
    return "".join(json.dumps(r) + "\n" for r in records).encode()


@st.composite
def norm_boxes(draw, min_side=0.0):
    """Valid NormBox with strictly positive 3-decimal extent."""
    def span():
        lo = draw(st.floats(0.0, 1.0 - max(min_side, 0.002), allow_nan=False))
        hi = draw(st.floats(lo + max(min_side, 0.002), 1.0, allow_nan=False))
        return lo, hi

    x0, x1 = span()
    y0, y1 = span()
    return NormBox(x0, y0, x1, y1)


@st.composite
def pixel_objects(draw, n_min=0, n_max=8, size=400):
    n = draw(st.integers(n_min, n_max))
    cats = ["dog", "cat", "person", "hat"]
    objs = []
    for i in range(n):
        x0 = draw(st.integers(0, size - 10))
        y0 = draw(st.integers(0, size - 10))
        x1 = draw(st.integers(x0 + 5, size))
        y1 = draw(st.integers(y0 + 5, size))
        objs.append((f"o{i}", draw(st.sampled_from(cats)), (x0, y0, x1, y1)))
    return objs


@st.composite
def bundles(draw):
    objs = draw(pixel_objects())
    ids = [o[0] for o in objs]
    rels = []
    if len(ids) >= 2:
        for _ in range(draw(st.integers(0, 5))):
            s, o = draw(st.lists(st.sampled_from(ids), min_size=2, max_size=2, unique=True))
            rels.append((s, draw(st.sampled_from(["on", "wearing", "near", "holding"])), o))
    regs = []
    for _ in range(draw(st.integers(0, 3))):
        _, _, box = draw(pixel_objects(1, 1))[0]
        regs.append((draw(st.sampled_from(["a red hat", "the dog on the left", "sky"])), box))
    return make_bundle(objs, rels, regs, width=400, height=400, image_id=draw(st.sampled_from(["a", "b", "c"])))


@pytest.fixture
def bundle_factory():
    return make_bundle


def _coords(text: str) -> list[float]:
    return [float(v) for v in text.strip("[]").split(",")]


def _fmt(box) -> str:
    return "[" + ",".join(f"{v:.3f}" for v in box) + "]"


class OracleClient:
    """Mock model. ``describe`` encodes the box in words; ``ground`` answers via ``transform``.

    transform(box) -> box | None maps the true box to the one the model "finds".
    """

    def __init__(self, transform=lambda b: b, describe_fn=None):
        self.transform = transform
        self.describe_fn = describe_fn
        self.emitted: dict[str, str] = {}
        self.calls = 0

    def describe(self, image_uri, coord_text):
        self.calls += 1
        if self.describe_fn:
            return self.describe_fn(image_uri, coord_text)
        return "thing at " + " ".join(coord_text.strip("[]").split(",")) + f" in {image_uri}"

    def ground(self, image_uri, description):
        self.calls += 1
        box = [float(v) for v in description.split()[2:6]]
        out = self.transform(box)
        if out is None:
            return "I cannot find it."
        text = _fmt(out)
        self.emitted[description] = text
        return f"It is at {text}."


def corner_transform(box):
    """A box in the corner opposite to the object's center: IoU 0 for any box."""
    cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
    x0 = 0.0 if cx >= 0.5 else 0.999
    y0 = 0.0 if cy >= 0.5 else 0.999
    return [x0, y0, x0 + 0.001, y0 + 0.001]


def shift_transform(delta):
    def f(box):
        w = box[2] - box[0]
        x0 = min(box[0] + delta, 1.0 - w)
        return [x0, box[1], x0 + w, box[3]]

    return f


def grid_bundles(n_images, per_image, *, side=100, width=1000, height=1000, prefix="img"):
    """Non-overlapping square objects on a grid, shifted a little per image; every area is side**2."""
    out = []
    cols = (width - 50) // (side + 10)
    for k in range(n_images):
        objs = []
        shift = (7 * k) % 50
        for j in range(per_image):
            x, y = (j % cols) * (side + 10) + shift, (j // cols) * (side + 10) + shift
            objs.append((f"o{j}", "box", (x, y, x + side, y + side)))
        out.append(make_bundle(objs, image_id=f"{prefix}{k:03d}", width=width, height=height))
    return out
