import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcinstruct import _kernels
from rcinstruct.geometry import (
    COORD_TEXT_RE,
    CoarsePosition,
    GeometryError,
    NormBox,
    ParseDiagnostics,
    clamp_box,
    iou,
    normalize,
    parse_coords,
    quadrant,
    quantize,
)
from rcinstruct.model import ImageRecord, PixelBox

from conftest import norm_boxes


def raster_iou(a, b, n=1000):
    """Brute force: count pixel centers of an n x n grid covered by each box."""
    centers = (np.arange(n) + 0.5) / n

    def mask(box):
        inx = (centers >= box[0]) & (centers < box[2])
        iny = (centers >= box[1]) & (centers < box[3])
        return iny[:, None] & inx[None, :]

    ma, mb = mask(a), mask(b)
    union = np.count_nonzero(ma | mb)
    return np.count_nonzero(ma & mb) / union if union else 0.0


def img(w, h):
    return ImageRecord("i", "i.jpg", w, h)


class TestNormalize:
    def test_example_box(self):
        nb = normalize(PixelBox(222, 333, 444, 555), img(1000, 1000))
        assert nb.as_tuple() == pytest.approx((0.222, 0.333, 0.444, 0.555))
        assert quantize(nb) == "[0.222,0.333,0.444,0.555]"

    @pytest.mark.parametrize("w,h", [(1, 1), (640, 480), (37, 1999)])
    def test_full_image(self, w, h):
        assert normalize(PixelBox(0, 0, w, h), img(w, h)).as_tuple() == (0.0, 0.0, 1.0, 1.0)

    def test_clamped(self):
        nb = normalize(PixelBox(50, 50, 150, 150), img(200, 100))
        assert nb.as_tuple() == (0.25, 0.5, 0.75, 1.0)

    def test_outside_image_rejected(self):
        with pytest.raises(GeometryError):
            clamp_box(PixelBox(300, 10, 400, 20), img(200, 100))

    def test_collapses_at_three_decimals(self):
        with pytest.raises(GeometryError):
            normalize(PixelBox(100.0, 0, 100.3, 10), img(1000, 1000))


class TestQuantize:
    @pytest.mark.parametrize(
        "box,text",
        [
            ((0.222, 0.333, 0.444, 0.555), "[0.222,0.333,0.444,0.555]"),
            ((0.2224, 0.3335, 0.4, 0.5), "[0.222,0.334,0.400,0.500]"),
            ((0, 0, 1, 1), "[0.000,0.000,1.000,1.000]"),
            ((0.0005, 0.1, 0.9995, 0.2), "[0.001,0.100,1.000,0.200]"),
        ],
    )
    def test_examples(self, box, text):
        assert quantize(NormBox(*box)) == text

    def test_collapse_rejected(self):
        with pytest.raises(GeometryError):
            quantize(NormBox(0.1001, 0.1, 0.1004, 0.2))

    @given(norm_boxes())
    def test_grammar_closure(self, b):
        try:
            t = quantize(b)
        except GeometryError:
            return
        assert COORD_TEXT_RE.fullmatch(t)
        assert " " not in t

    @given(norm_boxes())
    def test_round_trip(self, b):
        try:
            t = quantize(b)
        except GeometryError:
            return
        (back,) = parse_coords(t)
        assert np.allclose(back.as_tuple(), b.as_tuple(), atol=5e-4 + 1e-12)


class TestParseCoords:
    def test_single(self):
        assert [b.as_tuple() for b in parse_coords("the cat [0.100,0.200,0.300,0.400] sleeps")] == [(0.1, 0.2, 0.3, 0.4)]

    def test_concatenated(self):
        out = parse_coords("[0.1,0.2,0.3,0.4][0.5,0.5,0.9,0.9]")
        assert [b.as_tuple() for b in out] == [(0.1, 0.2, 0.3, 0.4), (0.5, 0.5, 0.9, 0.9)]

    def test_inverted_skipped(self):
        d = ParseDiagnostics()
        assert parse_coords("[0.9,0.2,0.3,0.4]", d) == []
        assert d.inverted == 1

    def test_diagnostics(self):
        d = ParseDiagnostics()
        out = parse_coords("[0.1,0.2,0.3] [1.5,0,0.2,0.2] [-0.1,0,0.2,0.2] [word] [0.1, 0.2, 0.3, 0.4]", d)
        assert len(out) == 1
        assert (d.wrong_arity, d.out_of_range, d.inverted) == (1, 2, 0)

    def test_point(self):
        (p,) = parse_coords("look at [0.25,0.75]")
        assert p.is_point and p.as_tuple() == (0.25, 0.75, 0.25, 0.75)

    def test_nothing(self):
        assert parse_coords("I see a hat.") == []

    @given(st.text())
    def test_never_raises(self, s):
        for b in parse_coords(s):
            assert 0 <= b.x_min <= b.x_max <= 1


class TestIoU:
    def test_identity(self):
        b = NormBox(0.1, 0.2, 0.3, 0.4)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(NormBox(0, 0, 0.4, 0.4), NormBox(0.5, 0.5, 0.9, 0.9)) == 0.0

    def test_half(self):
        # intersection 0.5 x 1, union 1 x 1
        assert iou(NormBox(0, 0, 1, 1), NormBox(0.5, 0, 1, 1)) == 0.5

    @settings(max_examples=200)
    @given(norm_boxes(), norm_boxes())
    def test_symmetric_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0
        assert (v == 1.0) == (a == b) or np.allclose(a.as_tuple(), b.as_tuple())

    @settings(max_examples=40, deadline=None)
    @given(norm_boxes(min_side=0.1), norm_boxes(min_side=0.1))
    def test_matches_raster(self, a, b):
        assert abs(iou(a, b) - raster_iou(a.as_tuple(), b.as_tuple())) <= 0.02


class TestQuadrant:
    def test_top_left(self):
        assert quadrant(NormBox(0.4, 0.4, 0.6, 0.6), NormBox(0.1, 0.1, 0.3, 0.3)) is CoarsePosition.TOP_LEFT

    def test_self(self):
        b = NormBox(0.4, 0.4, 0.6, 0.6)
        assert quadrant(b, b) is None

    def test_top_right(self):
        assert quadrant(NormBox(0.4, 0.4, 0.6, 0.6), NormBox(0.6, 0.0, 0.8, 0.2)) is CoarsePosition.TOP_RIGHT

    def test_ties_go_right_and_down(self):
        ref = NormBox(0.4, 0.4, 0.6, 0.6)
        assert quadrant(ref, NormBox(0.45, 0.45, 0.55, 0.55)) is CoarsePosition.BOTTOM_RIGHT
        assert quadrant(ref, NormBox(0.0, 0.45, 0.2, 0.55)) is CoarsePosition.BOTTOM_LEFT

    def test_label(self):
        assert CoarsePosition.BOTTOM_LEFT.label == "bottom-left"

    @given(norm_boxes(), norm_boxes())
    def test_partition(self, ref, cand):
        q = quadrant(ref, cand)
        if cand == ref:
            assert q is None
        else:
            assert q in set(CoarsePosition)


class TestKernels:
    """numba and numpy paths agree with each other and with the scalar code."""

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(norm_boxes(), norm_boxes()), min_size=1, max_size=20))
    def test_paired(self, pairs):
        a = np.array([p[0].as_tuple() for p in pairs])
        b = np.array([p[1].as_tuple() for p in pairs])
        want = [iou(x, y) for x, y in pairs]
        assert np.allclose(_kernels._paired_iou_numpy(a, b), want, atol=1e-12)
        if _kernels.NUMBA_AVAILABLE:
            assert np.allclose(_kernels._paired_iou_numba(a, b), want, atol=1e-12)
        assert np.allclose(_kernels.paired_iou(a, b), want, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(norm_boxes(), st.lists(norm_boxes(), min_size=1, max_size=20))
    def test_quadrants(self, ref, boxes):
        arr = np.array([b.as_tuple() for b in boxes])
        r = np.array(ref.as_tuple())
        want = [-1 if quadrant(ref, b) is None else list(CoarsePosition).index(quadrant(ref, b)) for b in boxes]
        assert list(_kernels._quadrant_codes_numpy(r, arr)) == want
        if _kernels.NUMBA_AVAILABLE:
            assert list(_kernels._quadrant_codes_numba(r, arr)) == want

    def test_pairwise_and_areas(self):
        a = np.array([[0, 0, 1, 1], [0, 0, 0.5, 0.5]])
        b = np.array([[0.5, 0, 1, 1], [0, 0, 1, 1], [0.6, 0.6, 0.9, 0.9]])
        m = _kernels.pairwise_iou(a, b)
        assert m.shape == (2, 3)
        assert m[0, 0] == 0.5 and m[0, 1] == 1.0 and m[1, 2] == 0.0
        assert np.allclose(m, _kernels._pairwise_iou_numpy(a, b))
        assert np.allclose(_kernels.box_areas(b), [0.5, 1.0, 0.09])

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            _kernels.paired_iou(np.zeros((2, 3)), np.zeros((2, 3)))
