# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot kernels (see _numpy.py for semantics)."""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def resize_bilinear(double[:, ::1] src, int out_h, int out_w):
    cdef int h = src.shape[0]
    cdef int w = src.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((out_h, out_w), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double sy = h / <double> out_h
    cdef double sx = w / <double> out_w
    cdef int i, j, y0, x0, y1, x1
    cdef double ys, xs, fy, fx, top, bot
    for i in range(out_h):
        ys = (i + 0.5) * sy - 0.5
        if ys < 0.0:
            ys = 0.0
        if ys > h - 1.0:
            ys = h - 1.0
        y0 = <int> floor(ys)
        y1 = y0 + 1 if y0 + 1 < h else h - 1
        fy = ys - y0
        for j in range(out_w):
            xs = (j + 0.5) * sx - 0.5
            if xs < 0.0:
                xs = 0.0
            if xs > w - 1.0:
                xs = w - 1.0
            x0 = <int> floor(xs)
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            fx = xs - x0
            top = (1.0 - fx) * src[y0, x0] + fx * src[y0, x1]
            bot = (1.0 - fx) * src[y1, x0] + fx * src[y1, x1]
            ov[i, j] = (1.0 - fy) * top + fy * bot
    return out


def iou_matrix(double[:, ::1] a, double[:, ::1] b):
    cdef int n = a.shape[0]
    cdef int m = b.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef int i, j
    cdef double ax0, ay0, ax1, ay1, area_a, ix0, iy0, ix1, iy1, iw, ih, inter, union
    for i in range(n):
        ax0 = a[i, 0]; ay0 = a[i, 1]; ax1 = a[i, 2]; ay1 = a[i, 3]
        area_a = (ax1 - ax0) * (ay1 - ay0)
        for j in range(m):
            ix0 = ax0 if ax0 > b[j, 0] else b[j, 0]
            iy0 = ay0 if ay0 > b[j, 1] else b[j, 1]
            ix1 = ax1 if ax1 < b[j, 2] else b[j, 2]
            iy1 = ay1 if ay1 < b[j, 3] else b[j, 3]
            iw = ix1 - ix0
            ih = iy1 - iy0
            if iw > 0.0 and ih > 0.0:
                inter = iw * ih
            else:
                inter = 0.0
            union = area_a + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter
            if union > 0.0:
                ov[i, j] = inter / union
    return out


def nms_keep(double[:, ::1] boxes, double[::1] scores, double iou_thr, int max_keep):
    cdef int n = boxes.shape[0]
    order_np = np.argsort(-np.asarray(scores), kind="stable").astype(np.int64)
    cdef long[::1] order = order_np
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] suppressed = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] sup = suppressed
    keep_np = np.empty(n, dtype=np.int64)
    cdef long[::1] keep = keep_np
    cdef int n_keep = 0
    cdef int pos, q
    cdef long i, j
    cdef double ix0, iy0, ix1, iy1, iw, ih, inter, union, iou
    cdef double bx0, by0, bx1, by1, area_i, area_j
    for pos in range(n):
        i = order[pos]
        if sup[i]:
            continue
        keep[n_keep] = i
        n_keep += 1
        if max_keep > 0 and n_keep >= max_keep:
            break
        bx0 = boxes[i, 0]; by0 = boxes[i, 1]; bx1 = boxes[i, 2]; by1 = boxes[i, 3]
        area_i = (bx1 - bx0) * (by1 - by0)
        for q in range(pos + 1, n):
            j = order[q]
            if sup[j]:
                continue
            ix0 = bx0 if bx0 > boxes[j, 0] else boxes[j, 0]
            iy0 = by0 if by0 > boxes[j, 1] else boxes[j, 1]
            ix1 = bx1 if bx1 < boxes[j, 2] else boxes[j, 2]
            iy1 = by1 if by1 < boxes[j, 3] else boxes[j, 3]
            iw = ix1 - ix0
            ih = iy1 - iy0
            if iw > 0.0 and ih > 0.0:
                inter = iw * ih
            else:
                inter = 0.0
            area_j = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            union = area_i + area_j - inter
            iou = inter / union if union > 0.0 else 0.0
            if iou > iou_thr:
                sup[j] = 1
    return keep_np[:n_keep].copy()


def roi_max_pool(double[:, :, ::1] fmap, long[:, ::1] rois, int grid):
    cdef int p = rois.shape[0]
    cdef int c = fmap.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=4] out = np.empty(
        (p, grid, grid, c), dtype=np.float64
    )
    cdef double[:, :, :, ::1] ov = out
    cdef int r, i, j, ch, yy, xx
    cdef long x0, y0, x1, y1, w, h, ry0, ry1, rx0, rx1
    cdef double best, v
    for r in range(p):
        x0 = rois[r, 0]; y0 = rois[r, 1]; x1 = rois[r, 2]; y1 = rois[r, 3]
        w = x1 - x0
        h = y1 - y0
        for i in range(grid):
            ry0 = y0 + (i * h) // grid
            ry1 = y0 + ((i + 1) * h + grid - 1) // grid
            for j in range(grid):
                rx0 = x0 + (j * w) // grid
                rx1 = x0 + ((j + 1) * w + grid - 1) // grid
                for ch in range(c):
                    best = fmap[ry0, rx0, ch]
                    for yy in range(ry0, ry1):
                        for xx in range(rx0, rx1):
                            v = fmap[yy, xx, ch]
                            if v > best:
                                best = v
                    ov[r, i, j, ch] = best
    return out
