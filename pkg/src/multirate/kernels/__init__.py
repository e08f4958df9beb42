"""Bilinear gather kernels with a compiled core and a numpy fallback.

The Cython extension is picked at import time when present; setting the
environment variable MULTIRATE_PURE_PYTHON=1 forces the numpy backend.
Both backends are bit-identical (see benchmarks/bench_kernels.py).
"""
import os

import numpy as np

from . import numpy_backend

try:
    if os.environ.get("MULTIRATE_PURE_PYTHON"):
        _ext = None
    else:
        from . import _core as _ext
except ImportError:
    _ext = None

BACKEND = "compiled" if _ext is not None else "numpy"


def _as_f64_image(img):
    img = np.ascontiguousarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    return img


def bilinear_sample(img, sx, sy):
    """Clamped bilinear gather of img (H,W,C) or (H,W) at pixel coords (sx, sy).

    Returns (values float64 with img's rank, in_bounds bool (H,W)).
    """
    squeeze = np.ndim(img) == 2
    img = _as_f64_image(img)
    if _ext is None:
        out, inb = numpy_backend.sample(img, np.asarray(sx, np.float64),
                                        np.asarray(sy, np.float64))
    else:
        sx = np.ascontiguousarray(sx, dtype=np.float64)
        sy = np.ascontiguousarray(sy, dtype=np.float64)
        out = np.empty(sx.shape + (img.shape[2],), np.float64)
        inb = np.empty(sx.shape, np.uint8)
        _ext.sample(img, sx, sy, out, inb)
        inb = inb.view(bool)
    return (out[:, :, 0] if squeeze else out), inb


def bilinear_sample_grad(img, sx, sy):
    """bilinear_sample plus per-channel derivatives wrt sx and sy."""
    squeeze = np.ndim(img) == 2
    img = _as_f64_image(img)
    if _ext is None:
        out, gx, gy, inb = numpy_backend.sample_grad(
            img, np.asarray(sx, np.float64), np.asarray(sy, np.float64))
    else:
        sx = np.ascontiguousarray(sx, dtype=np.float64)
        sy = np.ascontiguousarray(sy, dtype=np.float64)
        shape = sx.shape + (img.shape[2],)
        out = np.empty(shape, np.float64)
        gx = np.empty(shape, np.float64)
        gy = np.empty(shape, np.float64)
        inb = np.empty(sx.shape, np.uint8)
        _ext.sample_grad(img, sx, sy, out, gx, gy, inb)
        inb = inb.view(bool)
    if squeeze:
        return out[:, :, 0], gx[:, :, 0], gy[:, :, 0], inb
    return out, gx, gy, inb


def block_match(a, b, cand, cell: int):
    """Per-cell integer (dv, du) displacement from image a to image b,
    minimizing the mean squared difference over the shifted overlap.
    Candidates are scanned in the given order (ties keep the earliest);
    cells are cell x cell pixels. Returns (H//cell, W//cell, 2) int16."""
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    cand = np.ascontiguousarray(cand, dtype=np.int64)
    if a.shape != b.shape or a.shape[0] % cell or a.shape[1] % cell:
        raise ValueError("images must match and be divisible by the cell size")
    if _ext is None:
        return numpy_backend.block_match(a, b, cand, cell)
    out = np.zeros((a.shape[0] // cell, a.shape[1] // cell, 2), np.int16)
    _ext.block_match(a, b, cand, cell, out)
    return out
