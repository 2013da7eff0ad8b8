"""Parse scene-graph and detection corpora into validated image bundles.

Scene-graph sources are per-image records::

    {image_id, width, height, objects: [{object_id, x, y, w, h, names}],
     relationships: [{subject_id, predicate, object_id}],
     regions: [{x, y, w, h, phrase}]}

The three keys may live in one stream or be split over three streams keyed
by ``image_id``. Detection sources use the COCO layout
``{images, annotations, categories}``; several such fragments may be
concatenated.
"""

from __future__ import annotations

import io
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from ._kernels import box_areas
from .geometry import GeometryError, clamp_box, normalize
from .jsonstream import JsonStreamError, iter_json_records
from .model import (
    ImageBundle,
    ImageRecord,
    ObjectAnn,
    PixelBox,
    RegionDesc,
    RelationTriplet,
    canonical_category,
    validate_image_bundle,
)

logger = logging.getLogger(__name__)

MAX_OBJECTS = 15
MIN_OBJECT_AREA = 2000.0


class IngestError(ValueError):
    """A source is unreadable or violates its schema."""


@dataclass
class CorpusStats:
    image_count: int = 0
    object_count: int = 0
    relation_count: int = 0
    region_count: int = 0
    images_dropped_by_object_cap: int = 0
    objects_dropped_by_area: int = 0
    images_dropped_invalid: int = 0
    objects_dropped_invalid: int = 0
    relations_dropped_invalid: int = 0
    regions_dropped_invalid: int = 0

    def __add__(self, other: CorpusStats) -> CorpusStats:
        return CorpusStats(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CorpusStats:
        return cls(**{k: int(v) for k, v in d.items() if k in {f.name for f in fields(cls)}})


def _as_stream(src) -> BinaryIO | None:
    if src is None:
        return None
    if isinstance(src, (bytes, bytearray)):
        return io.BytesIO(src)
    if isinstance(src, (str, Path)):
        return open(src, "rb")
    return src


def _records(src, name: str, chunk_size: int) -> Iterator[tuple[int, dict]]:
    stream = _as_stream(src)
    if stream is None:
        return
    try:
        for off, rec in iter_json_records(stream, chunk_size, source=name):
            if not isinstance(rec, dict):
                raise IngestError(f"{name}: expected an object record at byte offset {off}")
            yield off, rec
    except JsonStreamError as e:
        raise IngestError(str(e)) from None
    finally:
        if isinstance(src, (str, Path)):
            stream.close()


class _LazyJoin:
    """Pull records for one image at a time from a stream keyed by image_id.

    Streams in the same image order as the driver never buffer more than one
    record; out-of-order records are parked until requested.
    """

    def __init__(self, records: Iterator[tuple[int, dict]], key: str):
        self.records = records
        self.key = key
        self.parked: dict[str, list[dict]] = defaultdict(list)

    def take(self, image_id: str) -> list[dict]:
        if image_id in self.parked:
            return self.parked.pop(image_id)
        for _, rec in self.records:
            rid = str(rec.get("image_id", rec.get("id")))
            if rid == image_id:
                return [rec]
            self.parked[rid].append(rec)
        return []

    def leftovers(self) -> Iterator[dict]:
        for recs in self.parked.values():
            yield from recs
        for _, rec in self.records:
            yield rec


def _xywh(d: dict) -> PixelBox:
    if "bbox" in d:
        return PixelBox.from_xywh(*d["bbox"])
    return PixelBox.from_xywh(d["x"], d["y"], d["w"], d["h"])


def _fit(box: PixelBox, image: ImageRecord) -> PixelBox | None:
    """Reject inverted/empty boxes, clamp the rest, and require a usable 3-decimal form."""
    if not (box.x_min < box.x_max and box.y_min < box.y_max):
        return None
    try:
        clamped = clamp_box(box, image)
        normalize(clamped, image)
    except GeometryError:
        return None
    return clamped


def _category(d: dict) -> str:
    names = d.get("names")
    if names:
        return canonical_category(str(names[0]))
    return canonical_category(str(d.get("name", d.get("category", ""))))


def _relation(d: dict) -> RelationTriplet | None:
    def ref(key):
        v = d.get(f"{key}_id")
        if v is None and isinstance(d.get(key), dict):
            v = d[key].get("object_id")
        return None if v is None else str(v)

    s, o = ref("subject"), ref("object")
    pred = str(d.get("predicate", "")).strip()
    if s is None or o is None or not pred:
        return None
    return RelationTriplet(s, pred, o)


def build_bundle(
    record: ImageRecord,
    raw_objects: Iterable[tuple[str, str, PixelBox]],
    raw_relations: Iterable[RelationTriplet | None] = (),
    raw_regions: Iterable[tuple[str, PixelBox]] = (),
) -> tuple[ImageBundle | None, CorpusStats]:
    """Validate one image's raw annotations; invalid records are dropped and counted."""
    raw_objects, raw_relations, raw_regions = list(raw_objects), list(raw_relations), list(raw_regions)
    stats = CorpusStats()
    if record.width < 1 or record.height < 1:
        stats.images_dropped_invalid = 1
        stats.objects_dropped_invalid = len(raw_objects)
        stats.relations_dropped_invalid = len(raw_relations)
        stats.regions_dropped_invalid = len(raw_regions)
        return None, stats

    objects: list[ObjectAnn] = []
    seen: set[str] = set()
    for oid, category, box in raw_objects:
        fitted = _fit(box, record)
        if fitted is None or not category or oid in seen:
            stats.objects_dropped_invalid += 1
            continue
        seen.add(oid)
        objects.append(ObjectAnn(oid, record.image_id, fitted, category))

    relations: list[RelationTriplet] = []
    for rel in raw_relations:
        if rel is None or rel.subject_id == rel.object_id or rel.subject_id not in seen or rel.object_id not in seen:
            stats.relations_dropped_invalid += 1
            continue
        relations.append(rel)

    regions: list[RegionDesc] = []
    for phrase, box in raw_regions:
        fitted = _fit(box, record)
        phrase = " ".join(phrase.split())
        if fitted is None or not phrase:
            stats.regions_dropped_invalid += 1
            continue
        regions.append(RegionDesc(record.image_id, fitted, phrase))

    report = validate_image_bundle(record, objects, relations, regions)
    if report:  # pragma: no cover - the checks above mirror the validator
        raise AssertionError(f"bundle {record.image_id} failed validation: {report}")
    stats.image_count = 1
    stats.object_count = len(objects)
    stats.relation_count = len(relations)
    stats.region_count = len(regions)
    return ImageBundle(record, tuple(objects), tuple(relations), tuple(regions)), stats


def _image_record(rec: dict, name: str, off: int) -> ImageRecord:
    try:
        iid = rec.get("image_id", rec.get("id"))
        if iid is None:
            raise KeyError("image_id")
        uri = rec.get("uri") or rec.get("url") or rec.get("file_name") or str(iid)
        return ImageRecord(str(iid), str(uri), int(rec["width"]), int(rec["height"]))
    except (KeyError, TypeError, ValueError) as e:
        raise IngestError(f"{name}: bad image record at byte offset {off}: {e!r}") from None


def iter_scene_graph(
    objects_source,
    relations_source=None,
    regions_source=None,
    *,
    stats: CorpusStats | None = None,
    chunk_size: int = 1 << 16,
) -> Iterator[ImageBundle]:
    """Stream validated bundles; ``stats`` (if given) is updated in place."""
    stats = stats if stats is not None else CorpusStats()
    rel_join = _LazyJoin(_records(relations_source, "relations", chunk_size), "relationships")
    reg_join = _LazyJoin(_records(regions_source, "regions", chunk_size), "regions")
    split_rel = relations_source is not None
    split_reg = regions_source is not None

    for off, rec in _records(objects_source, "objects", chunk_size):
        record = _image_record(rec, "objects", off)
        try:
            raw_objects = [(str(o["object_id"]), _category(o), _xywh(o)) for o in rec.get("objects", ())]
            rel_recs = rel_join.take(record.image_id) if split_rel else [rec]
            reg_recs = reg_join.take(record.image_id) if split_reg else [rec]
            raw_rel = [_relation(r) for rr in rel_recs for r in rr.get("relationships", ())]
            raw_reg = [(str(r.get("phrase", "")), _xywh(r)) for rr in reg_recs for r in rr.get("regions", ())]
        except (KeyError, TypeError, ValueError) as e:
            raise IngestError(f"objects: bad record for image {record.image_id} at byte offset {off}: {e!r}") from None
        bundle, s = build_bundle(record, raw_objects, raw_rel, raw_reg)
        _accumulate(stats, s)
        if bundle is not None:
            yield bundle

    # records joined to no known image are dropped
    if split_rel:
        stats.relations_dropped_invalid += sum(len(r.get("relationships", ())) for r in rel_join.leftovers())
    if split_reg:
        stats.regions_dropped_invalid += sum(len(r.get("regions", ())) for r in reg_join.leftovers())


def _accumulate(into: CorpusStats, other: CorpusStats):
    for f in fields(into):
        setattr(into, f.name, getattr(into, f.name) + getattr(other, f.name))


def load_scene_graph(objects_source, relations_source=None, regions_source=None, *, chunk_size: int = 1 << 16):
    """Parse a scene-graph corpus; returns ``(bundles, stats)``."""
    stats = CorpusStats()
    bundles = list(iter_scene_graph(objects_source, relations_source, regions_source, stats=stats, chunk_size=chunk_size))
    return bundles, stats


def load_detection(source, *, chunk_size: int = 1 << 16):
    """Parse a COCO-style detection corpus; returns ``(bundles, stats)``.

    Annotations are grouped by image in memory, so this is not bounded per
    image the way the scene-graph reader is.
    """
    images: dict[str, ImageRecord] = {}
    order: list[str] = []
    categories: dict[str, str] = {}
    anns: dict[str, list[tuple[str, str | None, PixelBox | None]]] = defaultdict(list)
    stats = CorpusStats()
    for off, frag in _records(source, "detection", chunk_size):
        try:
            for c in frag.get("categories", ()):
                categories[str(c["id"])] = canonical_category(str(c["name"]))
            for im in frag.get("images", ()):
                rec = _image_record(im, "detection", off)
                if rec.image_id in images:
                    raise IngestError(f"detection: duplicate image id {rec.image_id} at byte offset {off}")
                images[rec.image_id] = rec
                order.append(rec.image_id)
            for a in frag.get("annotations", ()):
                try:
                    box = _xywh(a)
                except (TypeError, ValueError):
                    box = None
                anns[str(a["image_id"])].append((str(a["id"]), str(a.get("category_id")), box))
        except (KeyError, TypeError, AttributeError) as e:
            raise IngestError(f"detection: bad fragment at byte offset {off}: {e!r}") from None

    bundles = []
    for iid in order:
        raw = []
        for aid, cid, box in anns.pop(iid, ()):
            # unknown categories and unreadable boxes become empty entries that build_bundle drops
            cat = categories.get(cid, "")
            raw.append((aid, cat, box if box is not None else PixelBox(0, 0, 0, 0)))
        bundle, s = build_bundle(images[iid], raw)
        _accumulate(stats, s)
        if bundle is not None:
            bundles.append(bundle)
    orphan_anns = sum(len(v) for v in anns.values())
    stats.objects_dropped_invalid += orphan_anns
    return bundles, stats


def bootstrap_candidates(bundle: ImageBundle, min_area: float = MIN_OBJECT_AREA) -> tuple[str, ...]:
    if not bundle.objects:
        return ()
    areas = box_areas(np.array([o.box.as_tuple() for o in bundle.objects]))
    return tuple(o.object_id for o, a in zip(bundle.objects, areas) if a > min_area)


def filter_for_bootstrap(
    bundles: Iterable[ImageBundle], max_objects: int = MAX_OBJECTS, min_area: float = MIN_OBJECT_AREA
) -> tuple[list[ImageBundle], CorpusStats]:
    """Drop images with more than ``max_objects`` objects and mark candidates.

    Objects of pixel area at most ``min_area`` stay in the bundle (they are
    still used for task generation) but are left out of ``candidates``.
    """
    kept = []
    stats = CorpusStats()
    for b in bundles:
        if len(b.objects) > max_objects:
            stats.images_dropped_by_object_cap += 1
            continue
        cands = bootstrap_candidates(b, min_area)
        kept.append(ImageBundle(b.record, b.objects, b.relations, b.regions, b.expressions, cands))
        stats.image_count += 1
        stats.object_count += len(b.objects)
        stats.relation_count += len(b.relations)
        stats.region_count += len(b.regions)
        stats.objects_dropped_by_area += len(b.objects) - len(cands)
    return kept, stats


def write_bundles(path: str | Path, bundles: Iterable[ImageBundle]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for b in bundles:
            f.write(json.dumps(b.to_dict(), ensure_ascii=False, separators=(",", ":")))
            f.write("\n")
            n += 1
    return n


def read_bundles(path: str | Path) -> Iterator[ImageBundle]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield ImageBundle.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise IngestError(f"{path}:{lineno}: malformed bundle record: {e}") from None
