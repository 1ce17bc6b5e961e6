"""Hot numeric kernels with a compiled core and a numpy fallback.

The compiled Cython module is preferred when importable; set
``LESIONKIT_KERNELS=numpy`` (or ``cython``) to force a backend. All public
entry points coerce inputs to contiguous float64 so both backends see the
same data layout.
"""

import os

import numpy as np

_FORCE = os.environ.get("LESIONKIT_KERNELS", "").strip().lower()

if _FORCE in ("py", "python", "numpy"):
    from lesionkit._kernels import _numpy as _backend

    KERNEL_BACKEND = "numpy"
elif _FORCE in ("c", "cython", "compiled"):
    from lesionkit._kernels import _core as _backend  # type: ignore[attr-defined]

    KERNEL_BACKEND = "cython"
else:
    try:
        from lesionkit._kernels import _core as _backend  # type: ignore[attr-defined]

        KERNEL_BACKEND = "cython"
    except ImportError:
        from lesionkit._kernels import _numpy as _backend

        KERNEL_BACKEND = "numpy"


def _as_f64(a, name: str, ndim: int) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


def resize_bilinear(src, out_h: int, out_w: int) -> np.ndarray:
    """Resample a 2-D array to (out_h, out_w) with half-pixel-center bilinear."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    return np.asarray(_backend.resize_bilinear(_as_f64(src, "src", 2), int(out_h), int(out_w)))


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two sets of corner-form boxes (N,4) x (M,4)."""
    a = _as_f64(np.atleast_2d(a), "a", 2)
    b = _as_f64(np.atleast_2d(b), "b", 2)
    if a.shape[1] != 4 or b.shape[1] != 4:
        raise ValueError("boxes must have 4 columns (x0, y0, x1, y1)")
    return np.asarray(_backend.iou_matrix(a, b))


def nms_keep(boxes, scores, iou_thr: float, max_keep: int = 0) -> np.ndarray:
    """Greedy same-set NMS; kept indices in descending-score order."""
    boxes = _as_f64(np.atleast_2d(boxes), "boxes", 2)
    scores = _as_f64(scores, "scores", 1)
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError("boxes and scores length mismatch")
    if boxes.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    return np.asarray(_backend.nms_keep(boxes, scores, float(iou_thr), int(max_keep)))


def roi_max_pool(fmap, rois, grid: int) -> np.ndarray:
    """Max-pool (rows, cols, C) feature cells into a (grid x grid) bin lattice per RoI."""
    fmap = _as_f64(fmap, "fmap", 3)
    rois = np.ascontiguousarray(np.atleast_2d(rois), dtype=np.int64)
    if rois.shape[1] != 4:
        raise ValueError("rois must have 4 columns (x0, y0, x1, y1)")
    if np.any(rois[:, 2] <= rois[:, 0]) or np.any(rois[:, 3] <= rois[:, 1]):
        raise ValueError("rois must have positive extent")
    if np.any(rois[:, :2] < 0) or np.any(rois[:, 2] > fmap.shape[1]) or np.any(rois[:, 3] > fmap.shape[0]):
        raise ValueError("rois out of feature-map bounds")
    return np.asarray(_backend.roi_max_pool(fmap, rois, int(grid)))


__all__ = ["KERNEL_BACKEND", "resize_bilinear", "iou_matrix", "nms_keep", "roi_max_pool"]
