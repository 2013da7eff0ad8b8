"""Batch box kernels.

Each kernel has a numba implementation and a pure-numpy twin. The numba path
is used when numba imports cleanly and ``RCINSTRUCT_DISABLE_NUMBA`` is unset
(or ``0``); set it to ``1`` to force the numpy path.

Boxes are float64 arrays of shape ``(n, 4)`` laid out as
``x_min, y_min, x_max, y_max``.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("RCINSTRUCT_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and not _DISABLED

# quadrant codes; -1 marks a candidate identical to the reference
TOP_LEFT, TOP_RIGHT, BOTTOM_LEFT, BOTTOM_RIGHT, SAME = 0, 1, 2, 3, -1


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------


def _areas_numpy(boxes):
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def _paired_iou_numpy(a, b):
    ix = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0.0, None)
    iy = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0.0, None)
    inter = ix * iy
    union = _areas_numpy(a) + _areas_numpy(b) - inter
    same = np.all(a == b, axis=1)
    out = np.zeros(len(a), dtype=np.float64)
    pos = union > 0
    out[pos] = inter[pos] / union[pos]
    out[same] = 1.0
    return np.clip(out, 0.0, 1.0)


def _pairwise_iou_numpy(a, b):
    n, m = len(a), len(b)
    aa = np.repeat(a, m, axis=0)
    bb = np.tile(b, (n, 1))
    return _paired_iou_numpy(aa, bb).reshape(n, m)


def _quadrant_codes_numpy(ref, boxes):
    rx = (ref[0] + ref[2]) / 2.0
    ry = (ref[1] + ref[3]) / 2.0
    cx = (boxes[:, 0] + boxes[:, 2]) / 2.0
    cy = (boxes[:, 1] + boxes[:, 3]) / 2.0
    codes = (cx >= rx).astype(np.int8) + 2 * (cy >= ry).astype(np.int8)
    codes[np.all(boxes == ref, axis=1)] = SAME
    return codes


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @njit(cache=True)
    def _iou_scalar(ax0, ay0, ax1, ay1, bx0, by0, bx1, by1):
        if ax0 == bx0 and ay0 == by0 and ax1 == bx1 and ay1 == by1:
            return 1.0
        ix = min(ax1, bx1) - max(ax0, bx0)
        iy = min(ay1, by1) - max(ay0, by0)
        if ix <= 0.0 or iy <= 0.0:
            return 0.0
        inter = ix * iy
        union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
        if union <= 0.0:
            return 0.0
        r = inter / union
        return 1.0 if r > 1.0 else r

    @njit(cache=True)
    def _areas_numba(boxes):
        n = boxes.shape[0]
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        return out

    @njit(cache=True)
    def _paired_iou_numba(a, b):
        n = a.shape[0]
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = _iou_scalar(a[i, 0], a[i, 1], a[i, 2], a[i, 3], b[i, 0], b[i, 1], b[i, 2], b[i, 3])
        return out

    @njit(cache=True)
    def _pairwise_iou_numba(a, b):
        n, m = a.shape[0], b.shape[0]
        out = np.empty((n, m), dtype=np.float64)
        for i in range(n):
            for j in range(m):
                out[i, j] = _iou_scalar(a[i, 0], a[i, 1], a[i, 2], a[i, 3], b[j, 0], b[j, 1], b[j, 2], b[j, 3])
        return out

    @njit(cache=True)
    def _quadrant_codes_numba(ref, boxes):
        rx = (ref[0] + ref[2]) / 2.0
        ry = (ref[1] + ref[3]) / 2.0
        n = boxes.shape[0]
        out = np.empty(n, dtype=np.int8)
        for i in range(n):
            if boxes[i, 0] == ref[0] and boxes[i, 1] == ref[1] and boxes[i, 2] == ref[2] and boxes[i, 3] == ref[3]:
                out[i] = -1
                continue
            cx = (boxes[i, 0] + boxes[i, 2]) / 2.0
            cy = (boxes[i, 1] + boxes[i, 3]) / 2.0
            code = 0
            if cx >= rx:
                code += 1
            if cy >= ry:
                code += 2
            out[i] = code
        return out


def _as_boxes(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected an (n, 4) box array, got shape {arr.shape}")
    return arr


def box_areas(boxes) -> np.ndarray:
    boxes = _as_boxes(boxes)
    return _areas_numba(boxes) if USE_NUMBA else _areas_numpy(boxes)


def paired_iou(a, b) -> np.ndarray:
    """IoU of ``a[i]`` against ``b[i]`` for every row."""
    a, b = _as_boxes(a), _as_boxes(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if len(a) == 0:
        return np.zeros(0, dtype=np.float64)
    return _paired_iou_numba(a, b) if USE_NUMBA else _paired_iou_numpy(a, b)


def pairwise_iou(a, b) -> np.ndarray:
    """Full ``(len(a), len(b))`` IoU matrix."""
    a, b = _as_boxes(a), _as_boxes(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    return _pairwise_iou_numba(a, b) if USE_NUMBA else _pairwise_iou_numpy(a, b)


def quadrant_codes(ref, boxes) -> np.ndarray:
    """Quadrant of each box center relative to the center of ``ref``.

    Ties on an axis go right/bottom. Boxes equal to ``ref`` get ``SAME``.
    """
    ref = np.ascontiguousarray(ref, dtype=np.float64).reshape(4)
    boxes = _as_boxes(boxes)
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int8)
    return _quadrant_codes_numba(ref, boxes) if USE_NUMBA else _quadrant_codes_numpy(ref, boxes)
