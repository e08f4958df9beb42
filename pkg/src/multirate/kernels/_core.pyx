# Compiled bilinear gather kernels. Semantics and floating-point evaluation
# order are kept in lockstep with kernels/numpy_backend.py so the two
# backends produce bit-identical results; change both together.

import numpy as np

cimport numpy as cnp

cnp.import_array()


def sample(double[:, :, ::1] img, double[:, ::1] sx, double[:, ::1] sy,
           double[:, :, ::1] out, unsigned char[:, ::1] inb):
    cdef Py_ssize_t src_h = img.shape[0]
    cdef Py_ssize_t src_w = img.shape[1]
    cdef Py_ssize_t nc = img.shape[2]
    cdef Py_ssize_t h = sx.shape[0]
    cdef Py_ssize_t w = sx.shape[1]
    cdef double wm1 = src_w - 1.0
    cdef double hm1 = src_h - 1.0
    cdef Py_ssize_t i, j, c, x0, y0, x1, y1
    cdef double x, y, cx, cy, fx, fy, p00, p01, p10, p11, top, bot

    for j in range(h):
        for i in range(w):
            x = sx[j, i]
            y = sy[j, i]
            inb[j, i] = 1 if (x >= 0.0 and x <= wm1 and y >= 0.0 and y <= hm1) else 0
            cx = x if x > 0.0 else 0.0
            cx = cx if cx < wm1 else wm1
            cy = y if y > 0.0 else 0.0
            cy = cy if cy < hm1 else hm1
            x0 = <Py_ssize_t>cx
            y0 = <Py_ssize_t>cy
            x1 = x0 + 1 if x0 + 1 < src_w else src_w - 1
            y1 = y0 + 1 if y0 + 1 < src_h else src_h - 1
            fx = cx - x0
            fy = cy - y0
            for c in range(nc):
                p00 = img[y0, x0, c]
                p01 = img[y0, x1, c]
                p10 = img[y1, x0, c]
                p11 = img[y1, x1, c]
                top = (1.0 - fx) * p00 + fx * p01
                bot = (1.0 - fx) * p10 + fx * p11
                out[j, i, c] = (1.0 - fy) * top + fy * bot


def sample_grad(double[:, :, ::1] img, double[:, ::1] sx, double[:, ::1] sy,
                double[:, :, ::1] out, double[:, :, ::1] gx, double[:, :, ::1] gy,
                unsigned char[:, ::1] inb):
    cdef Py_ssize_t src_h = img.shape[0]
    cdef Py_ssize_t src_w = img.shape[1]
    cdef Py_ssize_t nc = img.shape[2]
    cdef Py_ssize_t h = sx.shape[0]
    cdef Py_ssize_t w = sx.shape[1]
    cdef double wm1 = src_w - 1.0
    cdef double hm1 = src_h - 1.0
    cdef Py_ssize_t i, j, c, x0, y0, x1, y1
    cdef double x, y, cx, cy, fx, fy, p00, p01, p10, p11, top, bot

    for j in range(h):
        for i in range(w):
            x = sx[j, i]
            y = sy[j, i]
            inb[j, i] = 1 if (x >= 0.0 and x <= wm1 and y >= 0.0 and y <= hm1) else 0
            cx = x if x > 0.0 else 0.0
            cx = cx if cx < wm1 else wm1
            cy = y if y > 0.0 else 0.0
            cy = cy if cy < hm1 else hm1
            x0 = <Py_ssize_t>cx
            y0 = <Py_ssize_t>cy
            x1 = x0 + 1 if x0 + 1 < src_w else src_w - 1
            y1 = y0 + 1 if y0 + 1 < src_h else src_h - 1
            fx = cx - x0
            fy = cy - y0
            for c in range(nc):
                p00 = img[y0, x0, c]
                p01 = img[y0, x1, c]
                p10 = img[y1, x0, c]
                p11 = img[y1, x1, c]
                top = (1.0 - fx) * p00 + fx * p01
                bot = (1.0 - fx) * p10 + fx * p11
                out[j, i, c] = (1.0 - fy) * top + fy * bot
                gx[j, i, c] = (1.0 - fy) * (p01 - p00) + fy * (p11 - p10)
                gy[j, i, c] = (1.0 - fx) * (p10 - p00) + fx * (p11 - p01)


def block_match(long[:, ::1] a, long[:, ::1] b, long[:, ::1] cand,
                Py_ssize_t cell, short[:, :, ::1] best_d):
    """Per-cell integer displacement minimizing mean SSD over the overlap.

    Candidates are visited in the given order; comparisons use exact
    integer cross-multiplication, so ties keep the earliest candidate.
    """
    cdef Py_ssize_t h = a.shape[0]
    cdef Py_ssize_t w = a.shape[1]
    cdef Py_ssize_t gh = h // cell
    cdef Py_ssize_t gw = w // cell
    cdef Py_ssize_t n = cand.shape[0]
    cdef long[:, ::1] best_ssd = np.zeros((gh, gw), dtype=np.int64)
    cdef long[:, ::1] best_cnt = np.zeros((gh, gw), dtype=np.int64)
    cdef long[:, ::1] ssd = np.empty((gh, gw), dtype=np.int64)
    cdef long[:, ::1] cnt = np.empty((gh, gw), dtype=np.int64)
    cdef Py_ssize_t k, r, c, r0, r1, c0, c1, gr, gc
    cdef long dv, du, d

    for k in range(n):
        dv = cand[k, 0]
        du = cand[k, 1]
        r0 = -dv if dv < 0 else 0
        r1 = h - dv if dv > 0 else h
        c0 = -du if du < 0 else 0
        c1 = w - du if du > 0 else w
        if r0 >= r1 or c0 >= c1:
            continue
        for gr in range(gh):
            for gc in range(gw):
                ssd[gr, gc] = 0
                cnt[gr, gc] = 0
        for r in range(r0, r1):
            gr = r // cell
            for c in range(c0, c1):
                d = a[r, c] - b[r + dv, c + du]
                ssd[gr, c // cell] += d * d
                cnt[gr, c // cell] += 1
        for gr in range(gh):
            for gc in range(gw):
                if cnt[gr, gc] == 0:
                    continue
                if best_cnt[gr, gc] == 0 or \
                        ssd[gr, gc] * best_cnt[gr, gc] < best_ssd[gr, gc] * cnt[gr, gc]:
                    best_ssd[gr, gc] = ssd[gr, gc]
                    best_cnt[gr, gc] = cnt[gr, gc]
                    best_d[gr, gc, 0] = <short>dv
                    best_d[gr, gc, 1] = <short>du
