"""Pure-numpy fallback implementations of the hot kernels.

Kept semantically interchangeable with the compiled core; the parity tests
compare the two backends at 1e-9.
"""

import numpy as np


def resize_bilinear(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-center alignment, edge clamped."""
    h, w = src.shape
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]

    v00 = src[np.ix_(y0, x0)]
    v01 = src[np.ix_(y0, x1)]
    v10 = src[np.ix_(y1, x0)]
    v11 = src[np.ix_(y1, x1)]
    top = (1.0 - fx) * v00 + fx * v01
    bot = (1.0 - fx) * v10 + fx * v11
    return (1.0 - fy) * top + fy * bot


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-form boxes (x0, y0, x1, y1), continuous areas."""
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.maximum(ix1 - ix0, 0.0)
    ih = np.maximum(iy1 - iy0, 0.0)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def nms_keep(boxes: np.ndarray, scores: np.ndarray, iou_thr: float, max_keep: int) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending-score order.

    Ties are broken by input order (stable sort). Boxes with IoU strictly
    greater than ``iou_thr`` to a kept box are suppressed. ``max_keep <= 0``
    means unlimited.
    """
    n = boxes.shape[0]
    order = np.argsort(-scores, kind="stable")
    suppressed = np.zeros(n, dtype=bool)
    keep: list[int] = []
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(int(i))
        if 0 < max_keep <= len(keep):
            break
        rest = order[pos + 1 :]
        rest = rest[~suppressed[rest]]
        if rest.size == 0:
            continue
        ix0 = np.maximum(boxes[i, 0], boxes[rest, 0])
        iy0 = np.maximum(boxes[i, 1], boxes[rest, 1])
        ix1 = np.minimum(boxes[i, 2], boxes[rest, 2])
        iy1 = np.minimum(boxes[i, 3], boxes[rest, 3])
        inter = np.maximum(ix1 - ix0, 0.0) * np.maximum(iy1 - iy0, 0.0)
        union = areas[i] + areas[rest] - inter
        iou = np.zeros_like(inter)
        np.divide(inter, union, out=iou, where=union > 0.0)
        suppressed[rest[iou > iou_thr]] = True
    return np.asarray(keep, dtype=np.int64)


def roi_max_pool(fmap: np.ndarray, rois: np.ndarray, grid: int) -> np.ndarray:
    """Max-pool feature cells inside each RoI into a fixed grid.

    ``rois`` holds integer cell ranges (x0, y0, x1, y1), end-exclusive, with
    positive extent. Bin i spans cells [floor(i*W/grid), ceil((i+1)*W/grid))
    so every bin is nonempty and the union covers the RoI.
    """
    p = rois.shape[0]
    c = fmap.shape[2]
    out = np.empty((p, grid, grid, c), dtype=np.float64)
    for r in range(p):
        x0, y0, x1, y1 = (int(v) for v in rois[r])
        w = x1 - x0
        h = y1 - y0
        for i in range(grid):
            ry0 = y0 + (i * h) // grid
            ry1 = y0 - ((-(i + 1) * h) // grid)
            for j in range(grid):
                rx0 = x0 + (j * w) // grid
                rx1 = x0 - ((-(j + 1) * w) // grid)
                out[r, i, j] = fmap[ry0:ry1, rx0:rx1].max(axis=(0, 1))
    return out
