"""Detection evaluation: top-1 IoU accuracy, accuracy-vs-IoU curves,
per-category precision-recall curves, and the single- vs multi-class
comparison table."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from lesionkit.bookmarks import BoundingBox
from lesionkit.errors import ValidationError
from lesionkit.geometry import Detection, iou


def _single_gt(image_id: str, gt) -> BoundingBox:
    if isinstance(gt, BoundingBox):
        return gt
    boxes = list(gt)
    if len(boxes) != 1:
        raise ValidationError(
            f"image {image_id!r} has {len(boxes)} gt boxes; the top-1 protocol "
            "assumes exactly one annotation per image"
        )
    return boxes[0]


def evaluate_top1(
    detections_by_image: Mapping[str, Sequence[Detection]],
    gt_by_image: Mapping[str, BoundingBox | Sequence[BoundingBox]],
    iou_threshold: float = 0.5,
) -> float:
    """Fraction of images whose best-scoring detection overlaps the single
    ground-truth box with IoU strictly above the threshold; class-agnostic.

    Images without detections count as misses.
    """
    if not gt_by_image:
        raise ValidationError("no ground truth to evaluate")
    correct = 0
    for image_id, gt in gt_by_image.items():
        gt_box = _single_gt(image_id, gt)
        dets = detections_by_image.get(image_id, ())
        if not dets:
            continue
        top = max(dets, key=lambda d: d.score)
        if iou(top.box, gt_box) > iou_threshold:
            correct += 1
    return correct / len(gt_by_image)


def accuracy_curve(
    detections_by_image: Mapping[str, Sequence[Detection]],
    gt_by_image: Mapping[str, BoundingBox | Sequence[BoundingBox]],
    thresholds: Sequence[float],
) -> list[tuple[float, float]]:
    """evaluate_top1 swept over an ascending threshold grid."""
    if list(thresholds) != sorted(thresholds):
        raise ValidationError("threshold grid must be sorted ascending")
    return [(float(t), evaluate_top1(detections_by_image, gt_by_image, t)) for t in thresholds]


def pr_curve(
    detections: Sequence[tuple[str, Detection]],
    gt_by_image: Mapping[str, tuple[BoundingBox, int]],
    iou_threshold: float = 0.5,
    category: int = 1,
) -> list[tuple[float, float, float]]:
    """(recall, precision, score) points for one category.

    Detections are swept by descending score; each counts as a true positive
    when it matches (IoU strictly above threshold) a still-unmatched ground
    truth of the same category. One point is emitted per distinct score.
    """
    cat_gt = {img: box for img, (box, c) in gt_by_image.items() if c == category}
    if not cat_gt:
        raise ValidationError(f"category {category} has no ground truth")
    cands = sorted(
        (pair for pair in detections if pair[1].class_index == category),
        key=lambda pair: -pair[1].score,
    )
    matched: set[str] = set()
    points: list[tuple[float, float, float]] = []
    tp = fp = 0
    for i, (image_id, det) in enumerate(cands):
        if (
            image_id in cat_gt
            and image_id not in matched
            and iou(det.box, cat_gt[image_id]) > iou_threshold
        ):
            tp += 1
            matched.add(image_id)
        else:
            fp += 1
        is_last_of_score = i + 1 == len(cands) or cands[i + 1][1].score != det.score
        if is_last_of_score:
            points.append((tp / len(cat_gt), tp / (tp + fp), det.score))
    return points


@dataclass
class EvalReport:
    overall_top1_accuracy: float
    per_cluster: list[tuple[int, int, float]] = field(default_factory=list)  # (id, size, acc)
    iou_curve: list[tuple[float, float]] = field(default_factory=list)
    pr_curves: dict[int, list[tuple[float, float, float]]] = field(default_factory=dict)
    extra_detections: int = 0  # informational: detections beyond each image's top-1


def build_report(
    detections_by_image: Mapping[str, Sequence[Detection]],
    gt_by_image: Mapping[str, tuple[BoundingBox, int]],
    thresholds: Sequence[float] = tuple(x / 10 for x in range(1, 10)),
    iou_threshold: float = 0.5,
) -> EvalReport:
    """Full evaluation against single-box ground truth with category labels."""
    boxes_only = {img: box for img, (box, _) in gt_by_image.items()}
    overall = evaluate_top1(detections_by_image, boxes_only, iou_threshold)
    curve = accuracy_curve(detections_by_image, boxes_only, thresholds)
    per_cluster = []
    categories = sorted({c for _, c in gt_by_image.values()})
    for c in categories:
        members = {img: box for img, (box, cc) in gt_by_image.items() if cc == c}
        acc = evaluate_top1(detections_by_image, members, iou_threshold)
        per_cluster.append((c, len(members), acc))
    flat = [(img, d) for img, dets in detections_by_image.items() for d in dets]
    pr_curves = {
        c: pr_curve(flat, gt_by_image, iou_threshold, category=c) for c in categories
    }
    extra = sum(max(0, len(dets) - 1) for dets in detections_by_image.values())
    return EvalReport(
        overall_top1_accuracy=overall,
        per_cluster=per_cluster,
        iou_curve=curve,
        pr_curves=pr_curves,
        extra_detections=extra,
    )


@dataclass
class ComparisonRow:
    label: str
    size: int
    acc_single: float
    acc_multi: float


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]
    total_size: int
    overall_single: float
    overall_multi: float


def compare_configs(
    report_single: EvalReport,
    report_multi: EvalReport,
    cluster_sizes: Optional[Sequence[int]] = None,
    cluster_names: Optional[Sequence[str]] = None,
) -> ComparisonTable:
    """Side-by-side per-cluster accuracies of the two detector configurations.

    Both reports must come from the identical test split (same cluster ids and
    sizes). The overall row reuses each report's overall accuracy, which for
    reports built here equals the image-count-weighted mean of the clusters.
    """
    ids_single = [(c, n) for c, n, _ in report_single.per_cluster]
    ids_multi = [(c, n) for c, n, _ in report_multi.per_cluster]
    if ids_single != ids_multi:
        raise ValidationError("reports cover different test sets")
    if cluster_sizes is not None and list(cluster_sizes) != [n for _, n in ids_single]:
        raise ValidationError("cluster_sizes disagree with the reports")
    rows = []
    for i, ((cid, size, acc_s), (_, _, acc_m)) in enumerate(
        zip(report_single.per_cluster, report_multi.per_cluster)
    ):
        label = cluster_names[i] if cluster_names else str(cid)
        rows.append(ComparisonRow(label=label, size=size, acc_single=acc_s, acc_multi=acc_m))
    return ComparisonTable(
        rows=rows,
        total_size=sum(n for _, n in ids_single),
        overall_single=report_single.overall_top1_accuracy,
        overall_multi=report_multi.overall_top1_accuracy,
    )


def render_table1(table: ComparisonTable) -> str:
    """CSV text with accuracies as percentages (two decimals)."""
    lines = ["cluster,size,acc_single,acc_multi"]
    for row in table.rows:
        lines.append(
            f"{row.label},{row.size},{100 * row.acc_single:.2f},{100 * row.acc_multi:.2f}"
        )
    lines.append(
        f"overall,{table.total_size},{100 * table.overall_single:.2f},"
        f"{100 * table.overall_multi:.2f}"
    )
    return "\n".join(lines) + "\n"


def write_table1_csv(path: str | os.PathLike, table: ComparisonTable) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(render_table1(table))


def write_iou_curve_csv(path: str | os.PathLike, curve: Sequence[tuple[float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "accuracy"])
        for t, acc in curve:
            writer.writerow([f"{t:.3f}", f"{acc:.6f}"])


def write_pr_csv(path: str | os.PathLike, points: Sequence[tuple[float, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["score", "recall", "precision"])
        for recall, precision, score in points:
            writer.writerow([f"{score:.6f}", f"{recall:.6f}", f"{precision:.6f}"])


def write_detections_csv(
    path: str | os.PathLike, detections_by_image: Mapping[str, Sequence[Detection]]
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "class_index", "score", "left_x", "top_y", "width", "height"])
        for image_id in sorted(detections_by_image):
            for d in detections_by_image[image_id]:
                writer.writerow(
                    [
                        image_id, d.class_index, f"{d.score:.6f}",
                        f"{d.box.left_x:.2f}", f"{d.box.top_y:.2f}",
                        f"{d.box.width:.2f}", f"{d.box.height:.2f}",
                    ]
                )


def read_detections_csv(path: str | os.PathLike) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["image_id"], []).append(
                Detection(
                    box=BoundingBox(
                        left_x=float(row["left_x"]), top_y=float(row["top_y"]),
                        width=float(row["width"]), height=float(row["height"]),
                    ),
                    class_index=int(row["class_index"]),
                    score=float(row["score"]),
                )
            )
    return out
