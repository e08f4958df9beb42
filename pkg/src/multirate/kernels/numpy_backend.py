"""Pure-numpy bilinear gather kernels.

Fallback used when the compiled extension is unavailable. The arithmetic
mirrors _bilinear.pyx expression by expression so both backends return
bit-identical arrays; change both together.
"""
import numpy as np


def _corners(img, sx, sy):
    src_h, src_w = img.shape[0], img.shape[1]
    inb = (sx >= 0.0) & (sx <= src_w - 1.0) & (sy >= 0.0) & (sy <= src_h - 1.0)
    cx = np.clip(sx, 0.0, src_w - 1.0)
    cy = np.clip(sy, 0.0, src_h - 1.0)
    x0 = cx.astype(np.intp)  # cx >= 0, so truncation == floor
    y0 = cy.astype(np.intp)
    x1 = np.minimum(x0 + 1, src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    fx = (cx - x0)[..., None]
    fy = (cy - y0)[..., None]
    return inb, x0, y0, x1, y1, fx, fy


def sample(img, sx, sy):
    """Clamped bilinear gather of img (H,W,C) at (sx, sy) pixel coordinates.

    Returns (values (H,W,C) float64, in_bounds (H,W) bool). The in-bounds
    flag refers to the unclamped sample point.
    """
    inb, x0, y0, x1, y1, fx, fy = _corners(img, sx, sy)
    p00 = img[y0, x0]
    p01 = img[y0, x1]
    p10 = img[y1, x0]
    p11 = img[y1, x1]
    top = (1.0 - fx) * p00 + fx * p01
    bot = (1.0 - fx) * p10 + fx * p11
    out = (1.0 - fy) * top + fy * bot
    return out, inb


def sample_grad(img, sx, sy):
    """Like sample() but also returns d(value)/d(sx) and d(value)/d(sy).

    Derivatives are those of the clamped interpolation cell; they do not
    include the (zero) derivative of the clamp itself for out-of-bounds
    points, so callers must mask with the in-bounds flag.
    """
    inb, x0, y0, x1, y1, fx, fy = _corners(img, sx, sy)
    p00 = img[y0, x0]
    p01 = img[y0, x1]
    p10 = img[y1, x0]
    p11 = img[y1, x1]
    top = (1.0 - fx) * p00 + fx * p01
    bot = (1.0 - fx) * p10 + fx * p11
    out = (1.0 - fy) * top + fy * bot
    gx = (1.0 - fy) * (p01 - p00) + fy * (p11 - p10)
    gy = (1.0 - fx) * (p10 - p00) + fx * (p11 - p01)
    return out, gx, gy, inb


def block_match(a, b, cand, cell):
    """Per-cell integer displacement minimizing mean SSD over the overlap.

    a, b: (H, W) int64; cand: (n, 2) int64 (dv, du) rows in search order.
    Comparisons use exact integer cross-multiplication (ssd1 * cnt2 vs
    ssd2 * cnt1), so ties keep the earliest candidate and results match the
    compiled kernel bit for bit. Returns (gh, gw, 2) int16.
    """
    h, w = a.shape
    gh, gw = h // cell, w // cell
    best_ssd = np.zeros((gh, gw), np.int64)
    best_cnt = np.zeros((gh, gw), np.int64)
    best_d = np.zeros((gh, gw, 2), np.int16)
    diff = np.zeros((h, w), np.int64)
    valid = np.zeros((h, w), np.int64)
    for dv, du in cand:
        r0, r1 = max(0, -dv), min(h, h - dv)
        c0, c1 = max(0, -du), min(w, w - du)
        if r0 >= r1 or c0 >= c1:
            continue
        diff[:] = 0
        valid[:] = 0
        d = a[r0:r1, c0:c1] - b[r0 + dv : r1 + dv, c0 + du : c1 + du]
        diff[r0:r1, c0:c1] = d * d
        valid[r0:r1, c0:c1] = 1
        ssd = diff.reshape(gh, cell, gw, cell).sum(axis=(1, 3))
        cnt = valid.reshape(gh, cell, gw, cell).sum(axis=(1, 3))
        better = (cnt > 0) & ((best_cnt == 0) | (ssd * best_cnt < best_ssd * cnt))
        best_ssd[better] = ssd[better]
        best_cnt[better] = cnt[better]
        best_d[better] = (dv, du)
    return best_d
