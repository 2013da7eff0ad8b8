"""Turn annotation bundles into single-round instruction dialogues.

Every generator takes ``(bundle, spec)`` and is a pure function of them: the
random stream is derived from ``spec.rng_seed`` together with the image id,
task and variant. A generator raises ``Skipped`` when the bundle cannot
support the requested task.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from string import ascii_uppercase
from typing import Sequence

import numpy as np

from . import __version__
from ._kernels import SAME, quadrant_codes
from .geometry import POSITIONS, CoarsePosition, GeometryError, NormBox, clamp_box, normalize, quantize
from .model import DialogueSample, ImageBundle, ObjectAnn, PixelBox, Role, Task, Turn
from .templates import TemplateBank, instantiate_template, load_bank

VARIANTS: dict[Task, tuple[int, ...]] = {
    Task.RELATION_QA: (1,),
    Task.RELATION_DETECT: (1, 2, 3),
    Task.SPATIAL: (1, 2, 3),
    Task.COUNTING: (1, 2),
    Task.DETECTION: (1, 2),
    Task.GROUNDING: (1,),
    Task.GROUND_CAPTION: (1,),
    Task.MULTICHOICE_VQA: (1,),
}

BANK_NAME = {t: t.value for t in Task}
BANK_NAME[Task.MULTICHOICE_VQA] = "multichoice"

# tasks a bundle can feed (multichoice comes from question records instead)
BUNDLE_TASKS = tuple(t for t in Task if t is not Task.MULTICHOICE_VQA)


class Skipped(Exception):
    """The bundle does not satisfy the generator's preconditions."""


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task: Task
    variant: int
    rng_seed: int

    def __post_init__(self):
        if self.variant not in VARIANTS[self.task]:
            raise TaskError(f"variant {self.variant} is not valid for {self.task.value}")


def stable_hash(*parts) -> int:
    """64-bit hash of the parts' string forms; stable across processes."""
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def spec_rng(spec: TaskSpec, image_id: str) -> np.random.Generator:
    key = stable_hash(image_id, spec.task.value, spec.variant)
    return np.random.default_rng([spec.rng_seed & 0xFFFFFFFFFFFFFFFF, key])


def provenance_tag(source: str) -> str:
    return f"{source}/rcinstruct-{__version__}"


def source_of(provenance: str) -> str:
    return provenance.split("/", 1)[0]


def reading_order(objects: Sequence[ObjectAnn]) -> list[ObjectAnn]:
    return sorted(objects, key=lambda o: (o.box.y_min, o.box.x_min, o.object_id))


def _coords(bundle: ImageBundle, box: PixelBox) -> str:
    return quantize(normalize(box, bundle.record))


def _sample(bundle, spec, source, user, answer) -> DialogueSample:
    return DialogueSample(
        image_id=bundle.image_id,
        task=spec.task,
        turns=(Turn(Role.USER, user), Turn(Role.ASSISTANT, answer)),
        provenance=provenance_tag(source),
    )


def _template(bank: TemplateBank, spec: TaskSpec, rng: np.random.Generator) -> str:
    options = bank[(BANK_NAME[spec.task], spec.variant)]
    return options[int(rng.integers(len(options)))]


def _render_answer(bundle: ImageBundle, objs: Sequence[ObjectAnn], coords: bool, categories: bool) -> str:
    parts = []
    for o in objs:
        if coords:
            parts.append(_coords(bundle, o.box))
        if categories:
            parts.append(o.category)
    return " ".join(parts)


def _check(spec: TaskSpec, *tasks: Task):
    if spec.task not in tasks:
        raise TaskError(f"spec for {spec.task.value} passed to a {tasks[0].value} generator")


def gen_relation_qa(bundle: ImageBundle, spec: TaskSpec, *, source: str = "vg", bank: TemplateBank | None = None):
    """Ask for the predicate linking two boxed objects."""
    _check(spec, Task.RELATION_QA)
    if not bundle.relations:
        raise Skipped("no relation triplets")
    rng = spec_rng(spec, bundle.image_id)
    rel = bundle.relations[int(rng.integers(len(bundle.relations)))]
    objs = bundle.object_map()
    user = instantiate_template(
        _template(bank or load_bank(), spec, rng),
        {"subject": _coords(bundle, objs[rel.subject_id].box), "object": _coords(bundle, objs[rel.object_id].box)},
    )
    return _sample(bundle, spec, source, user, rel.predicate)


def relation_answer_set(bundle: ImageBundle, subject_id: str, predicate: str) -> list[ObjectAnn]:
    objs = bundle.object_map()
    ids = {r.object_id for r in bundle.relations if r.subject_id == subject_id and r.predicate == predicate}
    return reading_order([objs[i] for i in ids])


def gen_relation_detect(bundle: ImageBundle, spec: TaskSpec, *, source: str = "vg", bank: TemplateBank | None = None):
    """Ask for every object holding a sampled relation with a sampled subject.

    Variant 1 answers with coordinates, 2 with categories, 3 with both.
    """
    _check(spec, Task.RELATION_DETECT)
    if not bundle.relations:
        raise Skipped("no relation triplets")
    rng = spec_rng(spec, bundle.image_id)
    rel = bundle.relations[int(rng.integers(len(bundle.relations)))]
    answer = relation_answer_set(bundle, rel.subject_id, rel.predicate)
    if not answer:
        raise Skipped("empty answer set")
    subject = bundle.object_map()[rel.subject_id]
    user = instantiate_template(
        _template(bank or load_bank(), spec, rng),
        {"subject": _coords(bundle, subject.box), "relation": rel.predicate},
    )
    coords, cats = {1: (True, False), 2: (False, True), 3: (True, True)}[spec.variant]
    return _sample(bundle, spec, source, user, _render_answer(bundle, answer, coords, cats))


def _pixel_array(bundle: ImageBundle) -> np.ndarray:
    # Quadrants are compared in pixels: all boxes share one image, and dividing
    # by its size can break exact center ties by an ulp.
    if not bundle.objects:
        return np.zeros((0, 4))
    return np.array([clamp_box(o.box, bundle.record).as_tuple() for o in bundle.objects], dtype=np.float64)


def spatial_references(bundle: ImageBundle) -> list[int]:
    """Indices of objects that have at least one other object in some quadrant."""
    boxes = _pixel_array(bundle)
    return [i for i in range(len(boxes)) if np.any(quadrant_codes(boxes[i], boxes) != SAME)]


def spatial_answer_set(bundle: ImageBundle, reference_index: int, position: CoarsePosition) -> list[ObjectAnn]:
    boxes = _pixel_array(bundle)
    codes = quadrant_codes(boxes[reference_index], boxes)
    want = POSITIONS.index(position)
    return reading_order([o for o, c in zip(bundle.objects, codes) if c == want])


def gen_spatial(
    bundle: ImageBundle,
    spec: TaskSpec,
    *,
    source: str = "vg",
    bank: TemplateBank | None = None,
    reference_id: str | None = None,
    position: CoarsePosition | None = None,
):
    """Ask for every object in one coarse quadrant around a reference object.

    Positions are tried in a random order (at most four attempts) until one
    is non-empty. Passing ``position`` pins it, and an empty quadrant then
    skips. Variant 1 answers with coordinates and categories, 2 with
    categories, 3 with coordinates.
    """
    _check(spec, Task.SPATIAL)
    if len(bundle.objects) < 2:
        raise Skipped("fewer than two objects")
    rng = spec_rng(spec, bundle.image_id)
    if reference_id is None:
        refs = spatial_references(bundle)
        if not refs:
            raise Skipped("no object has a neighbour in any quadrant")
        ref = refs[int(rng.integers(len(refs)))]
    else:
        ref = next(i for i, o in enumerate(bundle.objects) if o.object_id == reference_id)
    order = [position] if position is not None else [POSITIONS[i] for i in rng.permutation(4)]
    for pos in order[:4]:
        answer = spatial_answer_set(bundle, ref, pos)
        if answer:
            break
    else:
        raise Skipped("empty quadrant")
    reference = bundle.objects[ref]
    user = instantiate_template(
        _template(bank or load_bank(), spec, rng),
        {"object": _coords(bundle, reference.box), "loc": pos.label},
    )
    coords, cats = {1: (True, True), 2: (False, True), 3: (True, False)}[spec.variant]
    return _sample(bundle, spec, source, user, _render_answer(bundle, answer, coords, cats))


def _pick_category(bundle: ImageBundle, spec: TaskSpec, rng) -> tuple[str, dict[str, str]]:
    # variant 1 prompts by class name, variant 2 by an exemplar box
    if spec.variant == 1:
        cats = sorted({o.category for o in bundle.objects})
        cat = cats[int(rng.integers(len(cats)))]
        return cat, {"category": cat}
    exemplar = bundle.objects[int(rng.integers(len(bundle.objects)))]
    return exemplar.category, {"object": _coords(bundle, exemplar.box)}


def gen_counting(bundle: ImageBundle, spec: TaskSpec, *, source: str = "vg", bank: TemplateBank | None = None):
    _check(spec, Task.COUNTING)
    if not bundle.objects:
        raise Skipped("no objects")
    rng = spec_rng(spec, bundle.image_id)
    cat, bindings = _pick_category(bundle, spec, rng)
    user = instantiate_template(_template(bank or load_bank(), spec, rng), bindings)
    count = sum(1 for o in bundle.objects if o.category == cat)
    return _sample(bundle, spec, source, user, str(count))


def gen_detection(bundle: ImageBundle, spec: TaskSpec, *, source: str = "vg", bank: TemplateBank | None = None):
    _check(spec, Task.DETECTION)
    if not bundle.objects:
        raise Skipped("no objects")
    rng = spec_rng(spec, bundle.image_id)
    cat, bindings = _pick_category(bundle, spec, rng)
    user = instantiate_template(_template(bank or load_bank(), spec, rng), bindings)
    matches = reading_order([o for o in bundle.objects if o.category == cat])
    return _sample(bundle, spec, source, user, _render_answer(bundle, matches, True, False))


def grounding_pool(bundle: ImageBundle) -> list[tuple[str, NormBox]]:
    """(phrase, box) pairs from region descriptions and retained expressions."""
    pool = []
    items = [(r.phrase, r.box) for r in bundle.regions]
    items += [(e.text, e.box) for e in bundle.expressions if e.retained and e.text.strip()]
    for phrase, box in items:
        try:
            pool.append((phrase.strip(), normalize(box, bundle.record)))
        except GeometryError:
            continue
    return pool


def _grounding_pick(bundle, spec, rng):
    pool = grounding_pool(bundle)
    if not pool:
        raise Skipped("no region descriptions or retained expressions")
    return pool[int(rng.integers(len(pool)))]


def gen_grounding(bundle: ImageBundle, spec: TaskSpec, *, source: str = "vg", bank: TemplateBank | None = None):
    """Phrase in, box out."""
    _check(spec, Task.GROUNDING)
    rng = spec_rng(spec, bundle.image_id)
    phrase, box = _grounding_pick(bundle, spec, rng)
    user = instantiate_template(_template(bank or load_bank(), spec, rng), {"expr": phrase})
    return _sample(bundle, spec, source, user, quantize(box))


def gen_ground_caption(bundle: ImageBundle, spec: TaskSpec, *, source: str = "vg", bank: TemplateBank | None = None):
    """Box in, phrase out."""
    _check(spec, Task.GROUND_CAPTION)
    rng = spec_rng(spec, bundle.image_id)
    phrase, box = _grounding_pick(bundle, spec, rng)
    user = instantiate_template(_template(bank or load_bank(), spec, rng), {"object": quantize(box)})
    return _sample(bundle, spec, source, user, phrase)


def render_options(options: Sequence[str]) -> str:
    return "\n".join(f"{ascii_uppercase[i]}. {opt}" for i, opt in enumerate(options))


def gen_multichoice(
    question: str,
    options: Sequence[str],
    correct_index: int,
    spec: TaskSpec,
    *,
    image_id: str = "",
    source: str = "aokvqa",
    bank: TemplateBank | None = None,
) -> DialogueSample:
    _check(spec, Task.MULTICHOICE_VQA)
    if not 2 <= len(options) <= len(ascii_uppercase):
        raise TaskError(f"need 2-26 options, got {len(options)}")
    if not 0 <= correct_index < len(options):
        raise TaskError(f"correct_index {correct_index} out of range for {len(options)} options")
    rng = spec_rng(spec, image_id + "\x1f" + question)
    user = instantiate_template(
        _template(bank or load_bank(), spec, rng), {"question": question, "options": render_options(options)}
    )
    answer = f"{ascii_uppercase[correct_index]}. {options[correct_index]}"
    return DialogueSample(image_id, spec.task, (Turn(Role.USER, user), Turn(Role.ASSISTANT, answer)), provenance_tag(source))


GENERATORS = {
    Task.RELATION_QA: gen_relation_qa,
    Task.RELATION_DETECT: gen_relation_detect,
    Task.SPATIAL: gen_spatial,
    Task.COUNTING: gen_counting,
    Task.DETECTION: gen_detection,
    Task.GROUNDING: gen_grounding,
    Task.GROUND_CAPTION: gen_ground_caption,
}


def feasible_tasks(bundle: ImageBundle, allowed: Sequence[Task] = BUNDLE_TASKS) -> list[tuple[Task, int]]:
    """All (task, variant) pairs whose generator preconditions hold for ``bundle``."""
    has_rel = bool(bundle.relations)
    ok = {
        Task.RELATION_QA: has_rel,
        Task.RELATION_DETECT: has_rel,
        Task.COUNTING: bool(bundle.objects),
        Task.DETECTION: bool(bundle.objects),
    }
    if Task.SPATIAL in allowed:
        ok[Task.SPATIAL] = len(bundle.objects) >= 2 and bool(spatial_references(bundle))
    if Task.GROUNDING in allowed or Task.GROUND_CAPTION in allowed:
        ok[Task.GROUNDING] = ok[Task.GROUND_CAPTION] = bool(grounding_pool(bundle))
    return [(t, v) for t in allowed if t in GENERATORS and ok.get(t, False) for v in VARIANTS[t]]


def generate(bundle: ImageBundle, spec: TaskSpec, *, source: str = "vg", bank: TemplateBank | None = None):
    return GENERATORS[spec.task](bundle, spec, source=source, bank=bank)
