"""Desk-scale two-stage detector over fixed backbone features.

Stage one is a per-template logistic region-proposal scorer with linear box
regression on feature-map cells; stage two classifies and refines RoI-pooled
proposal features with a softmax head and per-class regressors. The four
losses (two classification, two regression) are optimized jointly by SGD.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from lesionkit import _kernels
from lesionkit.bookmarks import BoundingBox
from lesionkit.datasets import SourceKey, resize_for_detection
from lesionkit.errors import TrainingDivergenceError, ValidationError
from lesionkit.features import N_CHANNELS, FeatureMap, compute_feature_map
from lesionkit.geometry import (
    DEFAULT_RATIOS,
    DEFAULT_SCALES,
    DEFAULT_STRIDE,
    AnchorSet,
    Detection,
    assign_anchors,
    clip_box_xywh,
    decode_deltas,
    encode_deltas,
    generate_anchors,
    nms,
    select_detections,
    stable_top_k,
)
from lesionkit.raster import Raster

CHECKPOINT_MAGIC = b"LKDM"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    images_per_batch: int = 4
    proposals_per_image: int = 32
    base_lr: float = 0.001
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 800
    max_iterations: int = 2000
    seed: int = 0
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_sample_cap: int = 64
    proposal_fg_iou: float = 0.5
    proposal_fg_fraction: float = 0.25
    proposal_nms_iou: float = 0.7
    pre_nms_top_n: int = 2000
    smooth_l1_beta: float = 1.0
    add_gt_proposals: bool = True
    max_side: int = 512

    def __post_init__(self) -> None:
        if (
            self.images_per_batch < 1 or self.proposals_per_image < 1
            or self.base_lr <= 0 or self.lr_decay_factor <= 0
            or self.lr_decay_every < 1 or self.max_iterations < 0
            or self.rpn_sample_cap < 2
        ):
            raise ValidationError(f"non-positive training config value: {self}")

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "TrainConfig":
        with open(path) as fh:
            obj = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class DetectorModel:
    n_channels: int
    n_classes: int              # foreground classes K; head has K+1 outputs
    stride: int = DEFAULT_STRIDE
    scales: tuple[float, ...] = DEFAULT_SCALES
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    roi_grid: int = 7
    rpn_w: np.ndarray = None
    rpn_b: np.ndarray = None
    rpn_reg_w: np.ndarray = None
    rpn_reg_b: np.ndarray = None
    head_w: np.ndarray = None
    head_b: np.ndarray = None
    head_reg_w: np.ndarray = None
    head_reg_b: np.ndarray = None
    training_log: list[dict] = field(default_factory=list)

    @property
    def n_templates(self) -> int:
        return len(self.scales) * len(self.ratios)

    @property
    def pooled_dim(self) -> int:
        return self.roi_grid * self.roi_grid * self.n_channels

    def param_blocks(self) -> list[tuple[str, np.ndarray]]:
        """Weight blocks in checkpoint order."""
        return [
            ("rpn_w", self.rpn_w), ("rpn_b", self.rpn_b),
            ("rpn_reg_w", self.rpn_reg_w), ("rpn_reg_b", self.rpn_reg_b),
            ("head_w", self.head_w), ("head_b", self.head_b),
            ("head_reg_w", self.head_reg_w), ("head_reg_b", self.head_reg_b),
        ]

    def copy(self) -> "DetectorModel":
        m = DetectorModel(
            n_channels=self.n_channels, n_classes=self.n_classes, stride=self.stride,
            scales=self.scales, ratios=self.ratios, roi_grid=self.roi_grid,
            rpn_w=self.rpn_w.copy(), rpn_b=self.rpn_b.copy(),
            rpn_reg_w=self.rpn_reg_w.copy(), rpn_reg_b=self.rpn_reg_b.copy(),
            head_w=self.head_w.copy(), head_b=self.head_b.copy(),
            head_reg_w=self.head_reg_w.copy(), head_reg_b=self.head_reg_b.copy(),
            training_log=list(self.training_log),
        )
        return m


def init_detector(
    n_classes: int,
    n_channels: int = N_CHANNELS,
    seed: int = 0,
    stride: int = DEFAULT_STRIDE,
    scales: Sequence[float] = DEFAULT_SCALES,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    roi_grid: int = 7,
    init_scale: float = 0.01,
) -> DetectorModel:
    """Fresh model with small random classification weights.

    Regression weights start at zero so box refinement is the identity until
    the smooth-L1 terms have seen data; random-but-tiny classification
    weights spread early proposals across the image.
    """
    if n_classes < 1:
        raise ValidationError("need at least one foreground class")
    rng = np.random.default_rng(seed)
    t = len(scales) * len(ratios)
    f = roi_grid * roi_grid * n_channels
    return DetectorModel(
        n_channels=n_channels, n_classes=n_classes, stride=stride,
        scales=tuple(scales), ratios=tuple(ratios), roi_grid=roi_grid,
        rpn_w=rng.normal(0.0, init_scale, (t, n_channels)),
        rpn_b=np.zeros(t),
        rpn_reg_w=np.zeros((t, 4, n_channels)),
        rpn_reg_b=np.zeros((t, 4)),
        head_w=rng.normal(0.0, init_scale, (n_classes + 1, f)),
        head_b=np.zeros(n_classes + 1),
        head_reg_w=np.zeros((n_classes, 4, f)),
        head_reg_b=np.zeros((n_classes, 4)),
    )


# ---------------------------------------------------------------------------
# forward passes

def rpn_logits(model: DetectorModel, fmap: FeatureMap) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor objectness logits and regression deltas in anchor order."""
    cells = fmap.cell_features()
    if cells.shape[1] != model.n_channels:
        raise ValidationError(
            f"feature map has {cells.shape[1]} channels, model expects {model.n_channels}"
        )
    logits = cells @ model.rpn_w.T + model.rpn_b          # (cells, T)
    deltas = np.einsum("nc,tdc->ntd", cells, model.rpn_reg_w) + model.rpn_reg_b
    return logits.reshape(-1), deltas.reshape(-1, 4)


def rpn_forward(model: DetectorModel, fmap: FeatureMap) -> tuple[np.ndarray, np.ndarray]:
    """Objectness probabilities in [0, 1] and box deltas per anchor."""
    logits, deltas = rpn_logits(model, fmap)
    return _sigmoid(logits), deltas


def head_forward(
    model: DetectorModel, pooled: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Class logits (P, K+1) and per-class deltas (P, K, 4) for pooled RoIs."""
    logits = pooled @ model.head_w.T + model.head_b
    reg = np.einsum("pf,kdf->pkd", pooled, model.head_reg_w) + model.head_reg_b
    return logits, reg


def propose_regions(
    objectness: np.ndarray,
    deltas: np.ndarray,
    anchors: AnchorSet,
    image_w: float,
    image_h: float,
    n: int = 32,
    nms_iou: float = 0.7,
    pre_nms_top_n: int = 2000,
    min_size: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Decode, clip, suppress, and return the top-n proposals as (x, y, w, h).

    Candidates are capped at pre_nms_top_n by objectness before decoding and
    NMS; ties in objectness resolve to the lower anchor index. Boxes that
    collapse below min_size after clipping are dropped.
    """
    if pre_nms_top_n > 0:
        top = stable_top_k(objectness, pre_nms_top_n)
    else:
        top = np.argsort(-objectness, kind="stable")
    anchors_c = np.concatenate(
        [anchors.centers[top], anchors.sizes[top]], axis=1
    )
    boxes = clip_box_xywh(decode_deltas(deltas[top], anchors_c), image_w, image_h)
    valid = (boxes[:, 2] >= min_size) & (boxes[:, 3] >= min_size)
    boxes = boxes[valid]
    scores = objectness[top[valid]]
    if boxes.shape[0] == 0:
        return np.zeros((0, 4)), np.zeros(0)
    corners = np.empty_like(boxes)
    corners[:, :2] = boxes[:, :2]
    corners[:, 2:] = boxes[:, :2] + boxes[:, 2:]
    keep = _kernels.nms_keep(corners, scores, nms_iou, n)
    return boxes[keep], scores[keep]


def roi_features(model: DetectorModel, fmap: FeatureMap, boxes_xywh: np.ndarray) -> np.ndarray:
    """Max-pooled (P, grid*grid*C) features for each box, outward-rounded cells."""
    if boxes_xywh.shape[0] == 0:
        return np.zeros((0, model.pooled_dim))
    stride = fmap.stride
    x0 = np.floor(boxes_xywh[:, 0] / stride).astype(np.int64)
    y0 = np.floor(boxes_xywh[:, 1] / stride).astype(np.int64)
    x1 = np.ceil((boxes_xywh[:, 0] + boxes_xywh[:, 2]) / stride).astype(np.int64)
    y1 = np.ceil((boxes_xywh[:, 1] + boxes_xywh[:, 3]) / stride).astype(np.int64)
    x0 = np.clip(x0, 0, fmap.cols - 1)
    y0 = np.clip(y0, 0, fmap.rows - 1)
    x1 = np.clip(x1, x0 + 1, fmap.cols)
    y1 = np.clip(y1, y0 + 1, fmap.rows)
    rois = np.stack([x0, y0, x1, y1], axis=1)
    pooled = _kernels.roi_max_pool(fmap.data, rois, model.roi_grid)
    return pooled.reshape(pooled.shape[0], -1)


# ---------------------------------------------------------------------------
# training

@dataclass
class DetectionSample:
    source: SourceKey
    raster: Raster
    gt_boxes: list[BoundingBox]
    gt_classes: list[int]  # foreground labels in [0, K)


@dataclass
class PreparedImage:
    source: SourceKey
    fmap: FeatureMap
    anchors: AnchorSet
    rpn_pos_idx: np.ndarray      # trainable positive anchor indices
    rpn_neg_idx: np.ndarray      # trainable negative anchor indices
    rpn_pos_targets: np.ndarray  # (n_pos, 4) encoded deltas
    gt_xywh: np.ndarray          # (G, 4)
    gt_classes: np.ndarray       # (G,)
    image_w: float
    image_h: float
    scale: float


def prepare_sample(
    sample: DetectionSample,
    model: DetectorModel,
    config: TrainConfig,
    anchor_cache: Optional[dict] = None,
) -> PreparedImage:
    """Resize, compute backbone features, and cache anchor training labels."""
    if sample.gt_classes and not all(0 <= c < model.n_classes for c in sample.gt_classes):
        raise ValidationError(
            f"gt classes {sample.gt_classes} out of range for a {model.n_classes}-class model"
        )
    resized, boxes, scale = resize_for_detection(sample.raster, sample.gt_boxes, config.max_side)
    fmap = compute_feature_map(resized, model.stride)
    key = (fmap.rows, fmap.cols)
    if anchor_cache is not None and key in anchor_cache:
        anchors = anchor_cache[key]
    else:
        anchors = generate_anchors(fmap.rows, fmap.cols, model.stride, model.scales, model.ratios)
        if anchor_cache is not None:
            anchor_cache[key] = anchors
    assignment = assign_anchors(anchors, boxes, config.rpn_pos_iou, config.rpn_neg_iou)
    inside = anchors.inside_mask(resized.width, resized.height)
    pos = np.nonzero((assignment.labels == 1) & inside)[0]
    neg = np.nonzero((assignment.labels == 0) & inside)[0]
    gt_xywh = np.array(
        [[b.left_x, b.top_y, b.width, b.height] for b in boxes], dtype=np.float64
    ).reshape(-1, 4)
    if pos.size:
        anchors_c = np.concatenate([anchors.centers[pos], anchors.sizes[pos]], axis=1)
        pos_targets = encode_deltas(gt_xywh[assignment.gt_index[pos]], anchors_c)
    else:
        pos_targets = np.zeros((0, 4))
    return PreparedImage(
        source=sample.source, fmap=fmap, anchors=anchors,
        rpn_pos_idx=pos, rpn_neg_idx=neg, rpn_pos_targets=pos_targets,
        gt_xywh=gt_xywh,
        gt_classes=np.asarray(sample.gt_classes, dtype=np.int64).reshape(-1),
        image_w=float(resized.width), image_h=float(resized.height), scale=scale,
    )


@dataclass
class StepTargets:
    """Fixed sampled targets for one image; the loss is differentiable given these."""
    cellfeats: np.ndarray
    rpn_cells: np.ndarray      # cell index per sampled anchor
    rpn_templates: np.ndarray  # template index per sampled anchor
    rpn_labels: np.ndarray     # {0, 1} per sampled anchor
    rpn_reg_cells: np.ndarray
    rpn_reg_templates: np.ndarray
    rpn_reg_targets: np.ndarray  # (n_pos, 4)
    pooled: np.ndarray           # (S, F) sampled proposal features
    head_labels: np.ndarray      # (S,) in [0, K]; 0 = background
    head_reg_pooled: np.ndarray  # (n_fg, F)
    head_reg_classes: np.ndarray # (n_fg,) foreground class per row, in [0, K)
    head_reg_targets: np.ndarray # (n_fg, 4)


def build_step_targets(
    model: DetectorModel,
    image: PreparedImage,
    config: TrainConfig,
    rng: np.random.Generator,
) -> StepTargets:
    """Sample anchors and proposals for one SGD step on one image."""
    n_t = model.n_templates
    half = config.rpn_sample_cap // 2
    pos = image.rpn_pos_idx
    neg = image.rpn_neg_idx
    pos_order = np.arange(pos.size)
    if pos.size > half:
        pos_order = rng.choice(pos.size, size=half, replace=False)
    n_neg = min(neg.size, config.rpn_sample_cap - min(pos.size, half))
    neg_order = rng.choice(neg.size, size=n_neg, replace=False) if neg.size > n_neg else np.arange(neg.size)
    pos_s = pos[pos_order]
    neg_s = neg[neg_order]
    sampled = np.concatenate([pos_s, neg_s])
    rpn_labels = np.concatenate([np.ones(pos_s.size), np.zeros(neg_s.size)])

    objectness, deltas = rpn_forward(model, image.fmap)
    props, _scores = propose_regions(
        objectness, deltas, image.anchors, image.image_w, image.image_h,
        n=config.proposals_per_image, nms_iou=config.proposal_nms_iou,
        pre_nms_top_n=config.pre_nms_top_n,
    )
    if config.add_gt_proposals and image.gt_xywh.shape[0]:
        props = np.concatenate([props, image.gt_xywh], axis=0)

    if props.shape[0] and image.gt_xywh.shape[0]:
        corners = np.stack(
            [props[:, 0], props[:, 1], props[:, 0] + props[:, 2], props[:, 1] + props[:, 3]],
            axis=1,
        )
        gt_corners = np.stack(
            [
                image.gt_xywh[:, 0], image.gt_xywh[:, 1],
                image.gt_xywh[:, 0] + image.gt_xywh[:, 2],
                image.gt_xywh[:, 1] + image.gt_xywh[:, 3],
            ],
            axis=1,
        )
        ious = _kernels.iou_matrix(corners, gt_corners)
        best_iou = ious.max(axis=1)
        best_gt = ious.argmax(axis=1)
    else:
        best_iou = np.zeros(props.shape[0])
        best_gt = np.zeros(props.shape[0], dtype=np.int64)

    fg_all = np.nonzero(best_iou >= config.proposal_fg_iou)[0]
    bg_all = np.nonzero(best_iou < config.proposal_fg_iou)[0]
    max_fg = max(1, int(round(config.proposal_fg_fraction * config.proposals_per_image)))
    fg_idx = fg_all if fg_all.size <= max_fg else fg_all[rng.choice(fg_all.size, max_fg, replace=False)]
    n_bg = min(bg_all.size, config.proposals_per_image - fg_idx.size)
    bg_idx = bg_all if bg_all.size <= n_bg else bg_all[rng.choice(bg_all.size, n_bg, replace=False)]
    chosen = np.concatenate([fg_idx, bg_idx]).astype(np.int64)
    head_labels = np.zeros(chosen.size, dtype=np.int64)
    head_labels[: fg_idx.size] = image.gt_classes[best_gt[fg_idx]] + 1

    pooled = roi_features(model, image.fmap, props[chosen]) if chosen.size else np.zeros((0, model.pooled_dim))
    if fg_idx.size:
        prop_centers = np.stack(
            [
                props[fg_idx, 0] + props[fg_idx, 2] / 2.0,
                props[fg_idx, 1] + props[fg_idx, 3] / 2.0,
                props[fg_idx, 2],
                props[fg_idx, 3],
            ],
            axis=1,
        )
        head_reg_targets = encode_deltas(image.gt_xywh[best_gt[fg_idx]], prop_centers)
        head_reg_pooled = pooled[: fg_idx.size]
        head_reg_classes = image.gt_classes[best_gt[fg_idx]]
    else:
        head_reg_targets = np.zeros((0, 4))
        head_reg_pooled = np.zeros((0, model.pooled_dim))
        head_reg_classes = np.zeros(0, dtype=np.int64)

    cells = image.fmap.cell_features()
    return StepTargets(
        cellfeats=cells,
        rpn_cells=sampled // n_t,
        rpn_templates=image.anchors.template_index[sampled],
        rpn_labels=rpn_labels,
        rpn_reg_cells=pos_s // n_t,
        rpn_reg_templates=image.anchors.template_index[pos_s],
        rpn_reg_targets=image.rpn_pos_targets[pos_order] if pos_s.size else np.zeros((0, 4)),
        pooled=pooled,
        head_labels=head_labels,
        head_reg_pooled=head_reg_pooled,
        head_reg_classes=head_reg_classes,
        head_reg_targets=head_reg_targets,
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_with_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def _smooth_l1(x: np.ndarray, beta: float) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def _smooth_l1_grad(x: np.ndarray, beta: float) -> np.ndarray:
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grads(
    model: DetectorModel,
    targets: Sequence[StepTargets],
    beta: float = 1.0,
) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """Joint loss over a minibatch of fixed targets, with analytic gradients.

    Each term is the mean over its sampled units pooled across the batch:
    binary cross-entropy on sampled anchors, smooth-L1 on positive-anchor
    deltas, softmax cross-entropy on sampled proposals, and smooth-L1 on
    foreground-proposal deltas for the matched class.
    """
    grads = {name: np.zeros_like(block) for name, block in model.param_blocks()}
    losses = {"rpn_cls": 0.0, "rpn_reg": 0.0, "head_cls": 0.0, "head_reg": 0.0}

    rpn_feats, rpn_templates, rpn_labels = [], [], []
    reg_feats, reg_templates, reg_targets = [], [], []
    pooled, head_labels = [], []
    reg_pooled, reg_classes, reg_targets_h = [], [], []
    for t in targets:
        if t.rpn_cells.size:
            rpn_feats.append(t.cellfeats[t.rpn_cells])
            rpn_templates.append(t.rpn_templates)
            rpn_labels.append(t.rpn_labels)
        if t.rpn_reg_cells.size:
            reg_feats.append(t.cellfeats[t.rpn_reg_cells])
            reg_templates.append(t.rpn_reg_templates)
            reg_targets.append(t.rpn_reg_targets)
        if t.pooled.shape[0]:
            pooled.append(t.pooled)
            head_labels.append(t.head_labels)
        if t.head_reg_pooled.shape[0]:
            reg_pooled.append(t.head_reg_pooled)
            reg_classes.append(t.head_reg_classes)
            reg_targets_h.append(t.head_reg_targets)

    if rpn_feats:
        f = np.concatenate(rpn_feats)
        tpl = np.concatenate(rpn_templates)
        y = np.concatenate(rpn_labels)
        z = np.einsum("nc,nc->n", f, model.rpn_w[tpl]) + model.rpn_b[tpl]
        losses["rpn_cls"] = float(_bce_with_logits(z, y).mean())
        dz = (_sigmoid(z) - y) / y.size
        np.add.at(grads["rpn_w"], tpl, dz[:, None] * f)
        np.add.at(grads["rpn_b"], tpl, dz)

    if reg_feats:
        f = np.concatenate(reg_feats)
        tpl = np.concatenate(reg_templates)
        tgt = np.concatenate(reg_targets)
        pred = np.einsum("nc,ndc->nd", f, model.rpn_reg_w[tpl]) + model.rpn_reg_b[tpl]
        diff = pred - tgt
        losses["rpn_reg"] = float(_smooth_l1(diff, beta).mean())
        dpred = _smooth_l1_grad(diff, beta) / diff.size
        np.add.at(grads["rpn_reg_w"], tpl, dpred[:, :, None] * f[:, None, :])
        np.add.at(grads["rpn_reg_b"], tpl, dpred)

    if pooled:
        phi = np.concatenate(pooled)
        y = np.concatenate(head_labels)
        logits = phi @ model.head_w.T + model.head_b
        logp = _log_softmax(logits)
        losses["head_cls"] = float(-logp[np.arange(y.size), y].mean())
        dlogits = np.exp(logp)
        dlogits[np.arange(y.size), y] -= 1.0
        dlogits /= y.size
        grads["head_w"] += dlogits.T @ phi
        grads["head_b"] += dlogits.sum(axis=0)

    if reg_pooled:
        phi = np.concatenate(reg_pooled)
        cls = np.concatenate(reg_classes)
        tgt = np.concatenate(reg_targets_h)
        pred = np.einsum("pf,pdf->pd", phi, model.head_reg_w[cls]) + model.head_reg_b[cls]
        diff = pred - tgt
        losses["head_reg"] = float(_smooth_l1(diff, beta).mean())
        dpred = _smooth_l1_grad(diff, beta) / diff.size
        np.add.at(grads["head_reg_w"], cls, dpred[:, :, None] * phi[:, None, :])
        np.add.at(grads["head_reg_b"], cls, dpred)

    losses["total"] = sum(losses.values())
    return losses, grads


def train_step(
    model: DetectorModel,
    minibatch: Sequence[PreparedImage],
    config: TrainConfig,
    rng: np.random.Generator,
    lr: Optional[float] = None,
) -> dict[str, float]:
    """One joint SGD update over a minibatch; mutates the model in place."""
    lr = config.base_lr if lr is None else lr
    targets = [build_step_targets(model, img, config, rng) for img in minibatch]
    losses, grads = loss_and_grads(model, targets, config.smooth_l1_beta)
    for name, value in losses.items():
        if not math.isfinite(value):
            raise TrainingDivergenceError(f"non-finite loss term {name!r}")
    for name, block in model.param_blocks():
        block -= lr * grads[name]
    return losses


def learning_rate(config: TrainConfig, iteration: int) -> float:
    """Step schedule: base_lr / decay_factor^(floor(iteration / decay_every))."""
    return config.base_lr / config.lr_decay_factor ** (iteration // config.lr_decay_every)


def train(
    model: DetectorModel,
    dataset: Sequence[DetectionSample],
    config: TrainConfig,
    prepared: Optional[list[PreparedImage]] = None,
) -> DetectorModel:
    """SGD over shuffled minibatches; deterministic given the config seed."""
    if config.max_iterations == 0:
        return model
    if not dataset and not prepared:
        raise ValidationError("training set is empty")
    if prepared is None:
        anchor_cache: dict = {}
        prepared = [prepare_sample(s, model, config, anchor_cache) for s in dataset]
    rng = np.random.default_rng(config.seed)
    order: list[int] = []
    for iteration in range(config.max_iterations):
        while len(order) < config.images_per_batch:
            order.extend(rng.permutation(len(prepared)).tolist())
        batch_idx = [order.pop(0) for _ in range(config.images_per_batch)]
        lr = learning_rate(config, iteration)
        losses = train_step(model, [prepared[i] for i in batch_idx], config, rng, lr)
        model.training_log.append({"iteration": iteration, "lr": lr, **losses})
    return model


# ---------------------------------------------------------------------------
# inference

def detect(
    model: DetectorModel,
    image: Raster,
    proposals: int = 32,
    nms_iou: float = 0.3,
    max_detections: int = 5,
    min_score: float = 0.5,
    max_side: int = 512,
    class_wise_nms: bool = True,
) -> list[Detection]:
    """Full inference pass; boxes are mapped back to the input image scale."""
    resized, _, scale = resize_for_detection(image, [], max_side)
    fmap = compute_feature_map(resized, model.stride)
    anchors = generate_anchors(fmap.rows, fmap.cols, model.stride, model.scales, model.ratios)
    objectness, deltas = rpn_forward(model, fmap)
    props, _ = propose_regions(
        objectness, deltas, anchors, resized.width, resized.height,
        n=proposals, nms_iou=0.7,
    )
    if props.shape[0] == 0:
        return []
    pooled = roi_features(model, fmap, props)
    logits, reg = head_forward(model, pooled)
    probs = np.exp(_log_softmax(logits))
    prop_centers = np.stack(
        [
            props[:, 0] + props[:, 2] / 2.0,
            props[:, 1] + props[:, 3] / 2.0,
            props[:, 2],
            props[:, 3],
        ],
        axis=1,
    )
    candidates: list[Detection] = []
    for k in range(model.n_classes):
        boxes = clip_box_xywh(decode_deltas(reg[:, k, :], prop_centers), resized.width, resized.height)
        for p in range(props.shape[0]):
            w, h = boxes[p, 2], boxes[p, 3]
            if w <= 0.0 or h <= 0.0:
                continue
            candidates.append(
                Detection(
                    box=BoundingBox(
                        left_x=boxes[p, 0] / scale, top_y=boxes[p, 1] / scale,
                        width=w / scale, height=h / scale,
                    ),
                    class_index=k + 1,
                    score=float(probs[p, k + 1]),
                )
            )
    survivors = nms(candidates, iou_threshold=nms_iou, class_wise=class_wise_nms)
    return select_detections(survivors, max_count=max_detections, min_score=min_score)


# ---------------------------------------------------------------------------
# checkpoint I/O

def save_checkpoint(model: DetectorModel, path: str | os.PathLike) -> None:
    """Binary checkpoint: versioned header then little-endian f64 weight blocks."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<7I",
                CHECKPOINT_VERSION, model.n_channels, model.n_classes,
                model.n_templates, model.stride, model.roi_grid, len(model.scales),
            )
        )
        fh.write(struct.pack("<I", len(model.ratios)))
        fh.write(np.asarray(model.scales, dtype="<f8").tobytes())
        fh.write(np.asarray(model.ratios, dtype="<f8").tobytes())
        for _, block in model.param_blocks():
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_checkpoint(path: str | os.PathLike) -> DetectorModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 36 or data[:4] != CHECKPOINT_MAGIC:
        raise ValidationError(f"not a detector checkpoint: {path}")
    version, n_channels, n_classes, n_templates, stride, roi_grid, n_scales = struct.unpack(
        "<7I", data[4:32]
    )
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    (n_ratios,) = struct.unpack("<I", data[32:36])
    off = 36

    def take(count: int, label: str) -> np.ndarray:
        nonlocal off
        if off + 8 * count > len(data):
            raise ValidationError(f"corrupt checkpoint: truncated {label}")
        out = np.frombuffer(data, "<f8", count, off)
        off += 8 * count
        return out

    scales = take(n_scales, "scales")
    ratios = take(n_ratios, "ratios")
    if n_templates != n_scales * n_ratios:
        raise ValidationError("corrupt checkpoint: template count mismatch")
    model = init_detector(
        n_classes=n_classes, n_channels=n_channels, stride=stride,
        scales=tuple(scales), ratios=tuple(ratios), roi_grid=roi_grid,
    )
    for name, block in model.param_blocks():
        block[...] = take(block.size, f"block {name}").reshape(block.shape)
    if off != len(data):
        raise ValidationError("corrupt checkpoint: trailing bytes")
    return model
