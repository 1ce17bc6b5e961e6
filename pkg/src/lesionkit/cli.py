"""Command-line pipeline: mine, synth, categorize, train, detect, evaluate, report.

Every command writes a ``run.json`` echoing its resolved configuration and
seeds into the output directory, and is byte-identical across reruns with
identical inputs. Exit codes: 0 success, 1 validation failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from lesionkit import bookmarks as bk
from lesionkit import datasets, synthetic
from lesionkit.detector import (
    DetectionSample,
    TrainConfig,
    detect,
    init_detector,
    load_checkpoint,
    save_checkpoint,
    train,
)
from lesionkit.encoder import MlpEncoder
from lesionkit.errors import ValidationError
from lesionkit.evaluation import (
    EvalReport,
    build_report,
    compare_configs,
    read_detections_csv,
    write_detections_csv,
    write_iou_curve_csv,
    write_pr_csv,
    write_table1_csv,
)
from lesionkit.ldpo import (
    LdpoConfig,
    read_pseudo_labels_csv,
    run_ldpo,
    write_history_csv,
    write_pseudo_labels_csv,
)
from lesionkit.raster import Raster, read_pgm, write_pgm

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


def _write_run_json(out_dir: Path, command: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run.json", "w") as fh:
        json.dump({"command": command, **payload}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_rasters(raster_dir: Path) -> dict[str, Raster]:
    if not raster_dir.is_dir():
        raise FileNotFoundError(f"raster directory not found: {raster_dir}")
    return {p.stem: read_pgm(p) for p in sorted(raster_dir.glob("*.pgm"))}


def cmd_mine(args: argparse.Namespace) -> int:
    out = Path(args.out)
    with open(args.bookmarks, "rb") as fh:
        records, parse_rejections = bk.parse_bookmarks(fh)
    rows = []
    rejections = [("parse", f"line {lineno}", reason) for lineno, reason in parse_rejections]
    for record in records:
        try:
            box = bk.bbox_from_diameters(
                record.diameters, record.image_w, record.image_h, args.padding
            )
            rows.append((record, box))
        except ValidationError as exc:
            rejections.append(("bbox", f"image {record.image_id}", str(exc)))
    out.mkdir(parents=True, exist_ok=True)
    bk.write_manifest(out / "manifest.csv", rows)
    with open(out / "rejections.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "ref", "reason"])
        writer.writerows(rejections)
    _write_run_json(out, "mine", {"bookmarks": str(args.bookmarks), "padding": args.padding,
                                  "seed": args.seed, "threads": args.threads})
    if rejections:
        print(f"warning: {len(rejections)} rejected records", file=sys.stderr)
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if args.config:
        spec = synthetic.SyntheticSpec.from_json(args.config)
    else:
        spec = synthetic.default_synthetic_spec()
    if args.count is not None:
        spec.num_studies = args.count
    if args.seed is None:
        args.seed = 0
    raster_dir = out / "rasters"
    raster_dir.mkdir(parents=True, exist_ok=True)
    bookmark_lines: list[bk.BookmarkRecord] = []
    truth_rows = []
    for records, raster, blobs, (patient_id, study_id, image_id) in synthetic.generate_dataset(
        spec, args.seed
    ):
        write_pgm(raster, raster_dir / f"{image_id}.pgm")
        bookmark_lines.extend(records)
        for blob in blobs:
            truth_rows.append(
                [
                    patient_id, study_id, image_id, blob.true_class,
                    f"{blob.center[0]:.3f}", f"{blob.center[1]:.3f}",
                    f"{blob.semi_axes[0]:.3f}", f"{blob.semi_axes[1]:.3f}",
                    f"{blob.theta:.6f}",
                    int(blob.box.left_x), int(blob.box.top_y),
                    int(blob.box.width), int(blob.box.height),
                ]
            )
    with open(out / "bookmarks.jsonl", "wb") as fh:
        fh.write(bk.serialize_bookmarks(bookmark_lines))
    with open(out / "truth.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["patient_id", "study_id", "image_id", "true_class",
             "cx", "cy", "axis_a", "axis_b", "theta",
             "left_x", "top_y", "width", "height"]
        )
        writer.writerows(truth_rows)
    _write_run_json(out, "synth", {"seed": args.seed, "threads": args.threads,
                                   "spec": json.loads(spec.to_json())})
    return EXIT_OK


def cmd_categorize(args: argparse.Namespace) -> int:
    out = Path(args.out)
    config = LdpoConfig.from_json(args.config) if args.config else LdpoConfig()
    if args.seed is not None:
        config.seed = args.seed
    manifest = list(bk.read_manifest(args.manifest))
    rasters = _load_rasters(Path(args.rasters))
    patches = datasets.build_patches(manifest, rasters, out_side=config.encoder.input_side)
    encoder = MlpEncoder(
        input_dim=config.encoder.input_side ** 2,
        hidden_dim=config.encoder.hidden_dim,
        seed=config.seed,
    )
    final, history, _ = run_ldpo(patches, encoder, config)
    out.mkdir(parents=True, exist_ok=True)
    write_pseudo_labels_csv(out / "pseudo_labels.csv", patches, final.assignments)
    write_history_csv(out / "history.csv", history)
    converged = final.agreement() is not None and final.agreement() >= config.threshold
    _write_run_json(out, "categorize", {
        "manifest": str(args.manifest), "rasters": str(args.rasters),
        "seed": config.seed, "threads": args.threads,
        "k": final.k, "iterations": len(history), "converged": bool(converged),
    })
    return EXIT_OK


def _samples_from_manifest(
    manifest_path: str,
    rasters: dict[str, Raster],
    labels: dict[tuple[str, str, str], int] | None,
) -> tuple[list[DetectionSample], int]:
    by_image: dict[tuple[str, str, str], DetectionSample] = {}
    n_classes = 1
    for patient_id, study_id, image_id, box in bk.read_manifest(manifest_path):
        key = (patient_id, study_id, image_id)
        if image_id not in rasters:
            raise ValidationError(f"no raster for image_id {image_id!r}")
        label = 0
        if labels is not None:
            if key not in labels:
                raise ValidationError(f"no pseudo-label for {key}")
            label = labels[key]
            n_classes = max(n_classes, label + 1)
        sample = by_image.get(key)
        if sample is None:
            sample = DetectionSample(source=key, raster=rasters[image_id], gt_boxes=[], gt_classes=[])
            by_image[key] = sample
        sample.gt_boxes.append(box)
        sample.gt_classes.append(label)
    return list(by_image.values()), n_classes


def cmd_train(args: argparse.Namespace) -> int:
    out = Path(args.out)
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    rasters = _load_rasters(Path(args.rasters))
    labels = read_pseudo_labels_csv(args.labels) if args.labels else None
    samples, n_classes = _samples_from_manifest(args.manifest, rasters, labels)
    if not samples:
        raise ValidationError("no training samples in manifest")
    if args.resume:
        try:
            model = load_checkpoint(args.resume)
        except (ValidationError, OSError) as exc:
            print(f"error: cannot resume from {args.resume}: {exc}", file=sys.stderr)
            return EXIT_IO
    else:
        model = init_detector(n_classes=n_classes, seed=config.seed)
    model = train(model, samples, config)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "lr", "rpn_cls", "rpn_reg", "head_cls", "head_reg", "total"])
        for row in model.training_log:
            writer.writerow(
                [
                    row["iteration"], f"{row['lr']:.6g}",
                    f"{row['rpn_cls']:.6f}", f"{row['rpn_reg']:.6f}",
                    f"{row['head_cls']:.6f}", f"{row['head_reg']:.6f}", f"{row['total']:.6f}",
                ]
            )
    _write_run_json(out, "train", {
        "manifest": str(args.manifest), "labels": str(args.labels) if args.labels else None,
        "classes": model.n_classes, "seed": config.seed, "threads": args.threads,
        "config": {f: getattr(config, f) for f in config.__dataclass_fields__},
    })
    return EXIT_OK


def cmd_detect(args: argparse.Namespace) -> int:
    out = Path(args.out)
    model = load_checkpoint(args.model)
    if args.expect_classes is not None and args.expect_classes != model.n_classes:
        raise ValidationError(
            f"model has {model.n_classes} classes, expected {args.expect_classes}"
        )
    raster_dir = Path(args.rasters)
    if not raster_dir.is_dir():
        raise FileNotFoundError(f"raster directory not found: {raster_dir}")
    detections = {}
    for path in sorted(raster_dir.glob("*.pgm")):
        detections[path.stem] = detect(model, read_pgm(path))
    out.mkdir(parents=True, exist_ok=True)
    write_detections_csv(out / "detections.csv", detections)
    _write_run_json(out, "detect", {
        "model": str(args.model), "rasters": str(args.rasters),
        "images": len(detections), "seed": args.seed, "threads": args.threads,
    })
    return EXIT_OK


def _parse_grid(text: str) -> list[float]:
    lo, hi, step = (float(x) for x in text.split(":"))
    return [round(lo + i * step, 10) for i in range(int(round((hi - lo) / step)) + 1)]


def cmd_evaluate(args: argparse.Namespace) -> int:
    out = Path(args.out)
    detections = read_detections_csv(args.detections)
    labels = read_pseudo_labels_csv(args.labels) if args.labels else None
    gt: dict[str, tuple[bk.BoundingBox, int]] = {}
    for patient_id, study_id, image_id, box in bk.read_manifest(args.gt):
        if image_id in gt:
            raise ValidationError(
                f"image {image_id!r} has multiple gt boxes; top-1 protocol needs one"
            )
        category = 1
        if labels is not None:
            key = (patient_id, study_id, image_id)
            if key not in labels:
                raise ValidationError(f"no label for {key}")
            category = labels[key] + 1
        gt[image_id] = (box, category)
    unknown = set(detections) - set(gt)
    if unknown:
        raise ValidationError(f"detections reference unknown image ids: {sorted(unknown)[:5]}")
    thresholds = _parse_grid(args.grid)
    report = build_report(detections, gt, thresholds, args.iou)
    out.mkdir(parents=True, exist_ok=True)
    write_iou_curve_csv(out / "iou_curve.csv", report.iou_curve)
    for category, points in report.pr_curves.items():
        write_pr_csv(out / f"pr_{category}.csv", points)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["overall_top1", f"{report.overall_top1_accuracy:.6f}"])
        writer.writerow(["extra_detections", report.extra_detections])
    with open(out / "clusters.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster", "size", "accuracy"])
        for cid, size, acc in report.per_cluster:
            writer.writerow([cid, size, f"{acc:.6f}"])
    _write_run_json(out, "evaluate", {
        "detections": str(args.detections), "gt": str(args.gt),
        "labels": str(args.labels) if args.labels else None,
        "grid": args.grid, "iou": args.iou,
        "seed": args.seed, "threads": args.threads,
    })
    return EXIT_OK


def _read_eval_dir(path: Path) -> EvalReport:
    overall = None
    with open(path / "summary.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["metric"] == "overall_top1":
                overall = float(row["value"])
    if overall is None:
        raise ValidationError(f"no overall_top1 in {path / 'summary.csv'}")
    per_cluster = []
    with open(path / "clusters.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            per_cluster.append((int(row["cluster"]), int(row["size"]), float(row["accuracy"])))
    return EvalReport(overall_top1_accuracy=overall, per_cluster=per_cluster)


def cmd_report(args: argparse.Namespace) -> int:
    out = Path(args.out)
    single = _read_eval_dir(Path(args.single))
    multi = _read_eval_dir(Path(args.multi))
    names = args.names.split(",") if args.names else None
    table = compare_configs(single, multi, cluster_names=names)
    out.mkdir(parents=True, exist_ok=True)
    write_table1_csv(out / "table1.csv", table)
    _write_run_json(out, "report", {
        "single": str(args.single), "multi": str(args.multi),
        "seed": args.seed, "threads": args.threads,
    })
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionkit",
        description="Lesion annotation mining, pseudo-categorization, detection, and evaluation.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file for the subcommand")
    common.add_argument("--seed", type=int, default=None, help="seed override")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, default=1,
                        help="reserved; kernels are currently single-threaded")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mine", parents=[common], help="bookmarks -> box manifest")
    p.add_argument("bookmarks", help="line-delimited JSON bookmark file")
    p.add_argument("--padding", type=int, default=bk.DEFAULT_PADDING)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic studies")
    p.add_argument("--count", type=int, default=None, help="override spec num_studies")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("categorize", parents=[common], help="discover pseudo-categories")
    p.add_argument("--manifest", required=True)
    p.add_argument("--rasters", required=True)
    p.set_defaults(func=cmd_categorize)

    p = sub.add_parser("train", parents=[common], help="train the detector")
    p.add_argument("--manifest", required=True)
    p.add_argument("--rasters", required=True)
    p.add_argument("--labels", help="pseudo-label CSV; omitted = single-class")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", parents=[common], help="run inference on rasters")
    p.add_argument("--model", required=True)
    p.add_argument("--rasters", required=True)
    p.add_argument("--expect-classes", type=int, default=None)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", parents=[common], help="score detections against gt")
    p.add_argument("--detections", required=True)
    p.add_argument("--gt", required=True, help="gt manifest CSV")
    p.add_argument("--labels", help="pseudo-label CSV for per-category curves")
    p.add_argument("--grid", default="0.1:0.9:0.1", help="IoU grid lo:hi:step")
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="single vs multi comparison table")
    p.add_argument("--single", required=True, help="evaluate output dir (single-class)")
    p.add_argument("--multi", required=True, help="evaluate output dir (multi-class)")
    p.add_argument("--names", help="comma-separated cluster display names")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileNotFoundError, IsADirectoryError, PermissionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
