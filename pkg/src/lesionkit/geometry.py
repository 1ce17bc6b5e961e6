"""Box machinery for the two-stage detector: anchor grids, IoU, box-delta
regression coding, anchor assignment, RoI pooling bins, NMS, and final
detection selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from lesionkit import _kernels
from lesionkit.bookmarks import BoundingBox
from lesionkit.errors import ValidationError

DEFAULT_SCALES = (48.0, 72.0, 96.0)
DEFAULT_RATIOS = (1.0, 0.5, 2.0)  # width:height values for 1:1, 1:2, 2:1
DEFAULT_STRIDE = 8
POS_IOU = 0.7
NEG_IOU = 0.3
NMS_IOU = 0.3
MAX_DETECTIONS = 5
MIN_SCORE = 0.5


@dataclass(frozen=True)
class Anchor:
    center_x: float
    center_y: float
    width: float
    height: float
    grid_pos: tuple[int, int]
    template_index: int


@dataclass(frozen=True)
class BoxDelta:
    tx: float
    ty: float
    tw: float
    th: float


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_index: int  # >= 1; 0 is background and never emitted
    score: float


class AnchorSet:
    """Dense anchor grid stored as vectorized center-form arrays.

    Anchor order is row-major over grid cells with the template index minor:
    index = (row * cols + col) * n_templates + template.
    """

    def __init__(
        self,
        rows: int,
        cols: int,
        stride: int = DEFAULT_STRIDE,
        scales: Sequence[float] = DEFAULT_SCALES,
        ratios: Sequence[float] = DEFAULT_RATIOS,
    ):
        if rows < 1 or cols < 1:
            raise ValidationError("anchor grid must be at least 1x1")
        self.rows = rows
        self.cols = cols
        self.stride = stride
        self.scales = tuple(float(s) for s in scales)
        self.ratios = tuple(float(r) for r in ratios)
        t_w = np.array([s * math.sqrt(r) for s in self.scales for r in self.ratios])
        t_h = np.array([s / math.sqrt(r) for s in self.scales for r in self.ratios])
        n_t = len(t_w)
        cell_cx = (np.arange(cols) + 0.5) * stride
        cell_cy = (np.arange(rows) + 0.5) * stride
        cy, cx = np.meshgrid(cell_cy, cell_cx, indexing="ij")
        self.centers = np.repeat(np.stack([cx.ravel(), cy.ravel()], axis=1), n_t, axis=0)
        self.sizes = np.tile(np.stack([t_w, t_h], axis=1), (rows * cols, 1))
        self.template_index = np.tile(np.arange(n_t), rows * cols)

    @property
    def n_templates(self) -> int:
        return len(self.scales) * len(self.ratios)

    def __len__(self) -> int:
        return self.centers.shape[0]

    def __getitem__(self, i: int) -> Anchor:
        cell = i // self.n_templates
        return Anchor(
            center_x=float(self.centers[i, 0]),
            center_y=float(self.centers[i, 1]),
            width=float(self.sizes[i, 0]),
            height=float(self.sizes[i, 1]),
            grid_pos=(cell // self.cols, cell % self.cols),
            template_index=int(self.template_index[i]),
        )

    def corner_boxes(self) -> np.ndarray:
        """(N, 4) array of (x0, y0, x1, y1)."""
        half = self.sizes / 2.0
        return np.concatenate([self.centers - half, self.centers + half], axis=1)

    def inside_mask(self, image_w: float, image_h: float) -> np.ndarray:
        """True for anchors fully inside the image rectangle."""
        corners = self.corner_boxes()
        return (
            (corners[:, 0] >= 0.0)
            & (corners[:, 1] >= 0.0)
            & (corners[:, 2] <= image_w)
            & (corners[:, 3] <= image_h)
        )


def generate_anchors(
    feature_rows: int,
    feature_cols: int,
    stride: int = DEFAULT_STRIDE,
    scales: Sequence[float] = DEFAULT_SCALES,
    ratios: Sequence[float] = DEFAULT_RATIOS,
) -> AnchorSet:
    """Anchor templates tiled over every feature-map cell center.

    A template with scale s and width:height ratio r has width s*sqrt(r) and
    height s/sqrt(r), preserving area s^2 for every ratio.
    """
    return AnchorSet(feature_rows, feature_cols, stride, scales, ratios)


def boxes_to_corners(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([b.corners() for b in boxes], dtype=np.float64)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union on continuous coordinates."""
    return float(_kernels.iou_matrix([a.corners()], [b.corners()])[0, 0])


def encode_delta(gt: BoundingBox, anchor: Anchor) -> BoxDelta:
    """Regression target from an anchor to a ground-truth box (center/size form)."""
    if gt.width <= 0 or gt.height <= 0 or anchor.width <= 0 or anchor.height <= 0:
        raise ValidationError("boxes and anchors must have positive size")
    gx = gt.left_x + gt.width / 2.0
    gy = gt.top_y + gt.height / 2.0
    return BoxDelta(
        tx=(gx - anchor.center_x) / anchor.width,
        ty=(gy - anchor.center_y) / anchor.height,
        tw=math.log(gt.width / anchor.width),
        th=math.log(gt.height / anchor.height),
    )


def decode_delta(delta: BoxDelta, anchor: Anchor) -> BoundingBox:
    """Inverse of encode_delta (exact up to floating round-off)."""
    cx = anchor.center_x + delta.tx * anchor.width
    cy = anchor.center_y + delta.ty * anchor.height
    w = anchor.width * math.exp(delta.tw)
    h = anchor.height * math.exp(delta.th)
    return BoundingBox(left_x=cx - w / 2.0, top_y=cy - h / 2.0, width=w, height=h)


def encode_deltas(gt_xywh: np.ndarray, anchors_cxcywh: np.ndarray) -> np.ndarray:
    """Vectorized encode_delta; gt rows are (x, y, w, h), anchors (cx, cy, w, h)."""
    gcx = gt_xywh[:, 0] + gt_xywh[:, 2] / 2.0
    gcy = gt_xywh[:, 1] + gt_xywh[:, 3] / 2.0
    return np.stack(
        [
            (gcx - anchors_cxcywh[:, 0]) / anchors_cxcywh[:, 2],
            (gcy - anchors_cxcywh[:, 1]) / anchors_cxcywh[:, 3],
            np.log(gt_xywh[:, 2] / anchors_cxcywh[:, 2]),
            np.log(gt_xywh[:, 3] / anchors_cxcywh[:, 3]),
        ],
        axis=1,
    )


def decode_deltas(deltas: np.ndarray, anchors_cxcywh: np.ndarray) -> np.ndarray:
    """Vectorized decode_delta; returns (x, y, w, h) rows."""
    cx = anchors_cxcywh[:, 0] + deltas[:, 0] * anchors_cxcywh[:, 2]
    cy = anchors_cxcywh[:, 1] + deltas[:, 1] * anchors_cxcywh[:, 3]
    w = anchors_cxcywh[:, 2] * np.exp(deltas[:, 2])
    h = anchors_cxcywh[:, 3] * np.exp(deltas[:, 3])
    return np.stack([cx - w / 2.0, cy - h / 2.0, w, h], axis=1)


ANCHOR_POSITIVE = 1
ANCHOR_NEGATIVE = 0
ANCHOR_IGNORE = -1


@dataclass
class AnchorAssignment:
    labels: np.ndarray    # int8: 1 positive, 0 negative, -1 ignore
    gt_index: np.ndarray  # int64: matched gt per anchor, -1 if none
    max_iou: np.ndarray   # float64


def assign_anchors(
    anchors: AnchorSet,
    gt_boxes: Sequence[BoundingBox],
    pos_iou: float = POS_IOU,
    neg_iou: float = NEG_IOU,
) -> AnchorAssignment:
    """Label each anchor positive / negative / ignore against the gt boxes.

    An anchor is positive when its best IoU reaches pos_iou, or when it is an
    argmax-IoU anchor for some gt (so every overlapping gt keeps at least one
    positive). Anchors at or below neg_iou are negative, the rest ignored.
    """
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int8)
    gt_index = -np.ones(n, dtype=np.int64)
    max_iou = np.zeros(n, dtype=np.float64)
    if len(gt_boxes) == 0:
        return AnchorAssignment(labels, gt_index, max_iou)
    ious = _kernels.iou_matrix(anchors.corner_boxes(), boxes_to_corners(gt_boxes))
    max_iou = ious.max(axis=1)
    gt_index = ious.argmax(axis=1)
    labels[:] = ANCHOR_IGNORE
    labels[max_iou <= neg_iou] = ANCHOR_NEGATIVE
    labels[max_iou >= pos_iou] = ANCHOR_POSITIVE
    # argmax rule: the best anchor of each gt is positive regardless of threshold
    per_gt_best = ious.max(axis=0)
    for g in range(len(gt_boxes)):
        if per_gt_best[g] <= 0.0:
            continue
        best = np.nonzero(ious[:, g] >= per_gt_best[g] - 1e-9)[0]
        labels[best] = ANCHOR_POSITIVE
        gt_index[best] = g
    gt_index[labels != ANCHOR_POSITIVE] = -1
    return AnchorAssignment(labels, gt_index, max_iou)


def roi_pool_bins(
    box: BoundingBox, feature_stride: int, grid: int = 7
) -> tuple[np.ndarray, np.ndarray]:
    """Feature-cell index ranges of the pooling bins for one box.

    The box is mapped to feature coordinates by dividing by the stride and
    rounding outward. Bin i covers cells [floor(i*W/grid), ceil((i+1)*W/grid))
    relative to the box, so bins are never empty and their union is exactly
    the feature-space box (adjacent bins may share cells when W < grid).
    Returns (row_ranges, col_ranges), each (grid, 2) absolute half-open ranges.
    """
    x0 = math.floor(box.left_x / feature_stride)
    y0 = math.floor(box.top_y / feature_stride)
    x1 = math.ceil(box.right_x / feature_stride)
    y1 = math.ceil(box.bottom_y / feature_stride)
    w = x1 - x0
    h = y1 - y0
    if w <= 0 or h <= 0:
        raise ValidationError(f"box {box} degenerate on the feature map")
    col_ranges = np.array(
        [[x0 + (j * w) // grid, x0 + math.ceil((j + 1) * w / grid)] for j in range(grid)],
        dtype=np.int64,
    )
    row_ranges = np.array(
        [[y0 + (i * h) // grid, y0 + math.ceil((i + 1) * h / grid)] for i in range(grid)],
        dtype=np.int64,
    )
    return row_ranges, col_ranges


def nms(
    detections: Sequence[Detection],
    iou_threshold: float = NMS_IOU,
    class_wise: bool = True,
) -> list[Detection]:
    """Greedy non-maximum suppression, per class by default.

    Output is ordered by descending score; score ties keep input order.
    """
    if not detections:
        return []
    boxes = np.array([d.box.corners() for d in detections])
    scores = np.array([d.score for d in detections], dtype=np.float64)
    classes = np.array([d.class_index for d in detections])
    kept: list[int] = []
    groups = [classes == c for c in np.unique(classes)] if class_wise else [np.ones(len(detections), bool)]
    for mask in groups:
        idx = np.nonzero(mask)[0]
        keep = _kernels.nms_keep(boxes[idx], scores[idx], iou_threshold, 0)
        kept.extend(int(i) for i in idx[keep])
    kept.sort(key=lambda i: (-scores[i], i))
    return [detections[i] for i in kept]


def select_detections(
    detections: Sequence[Detection],
    max_count: int = MAX_DETECTIONS,
    min_score: float = MIN_SCORE,
) -> list[Detection]:
    """Keep the top max_count detections scoring strictly above min_score."""
    survivors = [d for d in detections if d.score > min_score]
    survivors.sort(key=lambda d: (-d.score, d.box.left_x, d.box.top_y, d.class_index))
    return survivors[:max_count]


def stable_top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties resolved to the lower index.

    Equivalent to a stable descending argsort truncated to k, in O(n).
    """
    n = scores.size
    if n <= k:
        return np.argsort(-scores, kind="stable")
    kth = np.partition(scores, n - k)[n - k]
    above = np.nonzero(scores > kth)[0]
    equal = np.nonzero(scores == kth)[0]
    cand = np.concatenate([above, equal[: k - above.size]])
    return cand[np.argsort(-scores[cand], kind="stable")]


def clip_box_xywh(box_xywh: np.ndarray, image_w: float, image_h: float) -> np.ndarray:
    """Clip (x, y, w, h) rows to the image rectangle; degenerate rows keep w/h <= 0."""
    x0 = np.clip(box_xywh[:, 0], 0.0, image_w)
    y0 = np.clip(box_xywh[:, 1], 0.0, image_h)
    x1 = np.clip(box_xywh[:, 0] + box_xywh[:, 2], 0.0, image_w)
    y1 = np.clip(box_xywh[:, 1] + box_xywh[:, 3], 0.0, image_h)
    return np.stack([x0, y0, x1 - x0, y1 - y0], axis=1)
