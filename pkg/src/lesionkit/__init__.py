"""Toolkit for mining lesion diameter annotations into detection datasets.

Pipeline stages: parse bookmark records and turn diameter pairs into padded
ground-truth boxes, assemble patient-level splits and lesion patches,
discover pseudo-categories with an iterative cluster-retrain loop, train a
small two-stage detector on raster images, and report top-1 / PR-style
detection metrics.
"""

from lesionkit._kernels import KERNEL_BACKEND
from lesionkit.bookmarks import (
    BookmarkRecord,
    BoundingBox,
    DiameterPair,
    bbox_from_diameters,
    parse_bookmarks,
)
from lesionkit.raster import Raster, read_pgm, write_pgm

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "BookmarkRecord",
    "BoundingBox",
    "DiameterPair",
    "Raster",
    "bbox_from_diameters",
    "parse_bookmarks",
    "read_pgm",
    "write_pgm",
    "__version__",
]
