"""Acceptance suite: one test per criterion, each printing a PASS line.

Run `pytest tests/test_acceptance.py -v -s` to see the per-criterion lines
and measured runtimes. The heavyweight end-to-end experiment (criterion 5)
is shared with criterion 6 through a session fixture.
"""

import itertools
import math
import time
from collections import Counter

import numpy as np
import pytest

from conftest import TABLE1_NAMES, TABLE1_SIZES, table1_reference_reports
from lesionkit.bookmarks import BoundingBox, DiameterPair, bbox_from_diameters
from lesionkit.clustering import kmeans_fit, nmi, purity
from lesionkit.datasets import LesionPatch, crop_patch, split_patients
from lesionkit.detector import (
    DetectionSample,
    TrainConfig,
    detect,
    init_detector,
    learning_rate,
    train,
)
from lesionkit.errors import ValidationError
from lesionkit.evaluation import (
    build_report,
    compare_configs,
    evaluate_top1,
    render_table1,
    write_pr_csv,
)
from lesionkit.geometry import Anchor, decode_delta, encode_delta, generate_anchors, iou
from lesionkit.ldpo import LdpoConfig, run_ldpo
from lesionkit.synthetic import default_synthetic_spec, generate_dataset, generate_synthetic_study, study_seed
from test_detector import finite_difference_check, tiny_instance
from test_geometry import rasterized_iou

E2E_SEED = 202
LDPO_SEED = 123


def report(line: str) -> None:
    print(f"\n{line}")


# --------------------------------------------------------------------------
# criterion 1: geometry oracle suite

def oracle_bbox(d: DiameterPair, image_w: int, image_h: int, padding: int = 20):
    """Independent min/max re-implementation with outward rounding and clip."""
    xs = sorted(p[0] for p in (*d.long_axis, *d.short_axis))
    ys = sorted(p[1] for p in (*d.long_axis, *d.short_axis))
    x0 = math.floor(xs[0] - padding)
    y0 = math.floor(ys[0] - padding)
    x1 = math.ceil(xs[-1] + padding)
    y1 = math.ceil(ys[-1] + padding)
    if x1 <= 0 or y1 <= 0 or x0 >= image_w or y0 >= image_h:
        return None
    return (max(x0, 0), max(y0, 0), min(x1, image_w) - max(x0, 0), min(y1, image_h) - max(y0, 0))


def test_criterion_1_geometry_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(11)

    for _ in range(1000):
        pts = rng.uniform(0, 600, size=8)
        d = DiameterPair(
            ((pts[0], pts[1]), (pts[2], pts[3])), ((pts[4], pts[5]), (pts[6], pts[7]))
        )
        expected = oracle_bbox(d, 512, 512)
        if expected is None:
            with pytest.raises(ValidationError):
                bbox_from_diameters(d, 512, 512)
            continue
        box = bbox_from_diameters(d, 512, 512)
        assert (box.left_x, box.top_y, box.width, box.height) == expected

    worst_iou = 0.0
    for _ in range(1000):
        a = BoundingBox(*rng.uniform(0, 60, 2), *rng.uniform(1, 50, 2))
        b = BoundingBox(*rng.uniform(0, 60, 2), *rng.uniform(1, 50, 2))
        worst_iou = max(worst_iou, abs(iou(a, b) - rasterized_iou(a, b)))
    assert worst_iou < 1e-3

    worst_rt = 0.0
    for _ in range(1000):
        gt = BoundingBox(*rng.uniform(0, 400, 2), *rng.uniform(1, 150, 2))
        ax, ay, aw, ah = rng.uniform(0, 400, 2).tolist() + rng.uniform(1, 150, 2).tolist()
        anchor = Anchor(ax, ay, aw, ah, (0, 0), 0)
        back = decode_delta(encode_delta(gt, anchor), anchor)
        worst_rt = max(worst_rt, max(abs(u - v) for u, v in zip(back.corners(), gt.corners())))
    assert worst_rt < 1e-6

    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    report(
        f"PASS criterion 1: box-mining formula exact on 1000 pairs, IoU within "
        f"{worst_iou:.2e} of rasterized counting, delta round-trip {worst_rt:.2e} "
        f"({elapsed:.1f}s < 10s)"
    )


# --------------------------------------------------------------------------
# criterion 2: clustering-metric oracles

def brute_force_purity(a, b):
    total = 0
    for ca in set(a):
        members = [b[i] for i in range(len(a)) if a[i] == ca]
        total += Counter(members).most_common(1)[0][1]
    return total / len(a)


def brute_force_nmi(a, b):
    n = len(a)
    pa = {c: v / n for c, v in Counter(a).items()}
    pb = {c: v / n for c, v in Counter(b).items()}
    joint = Counter(zip(a, b))
    ha = -sum(p * math.log(p) for p in pa.values())
    hb = -sum(p * math.log(p) for p in pb.values())
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    mi = sum((v / n) * math.log((v / n) / (pa[x] * pb[y])) for (x, y), v in joint.items())
    return mi / math.sqrt(ha * hb)


def exhaustive_two_partition(points):
    best = (np.inf, None)
    for bits in itertools.product((0, 1), repeat=len(points) - 1):
        labels = np.array((0,) + bits)
        if labels.min() == labels.max():
            continue
        inertia = sum(
            float(((points[labels == c] - points[labels == c].mean(axis=0)) ** 2).sum())
            for c in (0, 1)
        )
        if inertia < best[0] - 1e-12:
            best = (inertia, labels)
    return best


def test_criterion_2_clustering_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(22)
    for _ in range(500):
        n = int(rng.integers(2, 40))
        a = rng.integers(0, 5, size=n).tolist()
        b = rng.integers(0, 5, size=n).tolist()
        assert purity(a, b) == pytest.approx(brute_force_purity(a, b), abs=1e-12)
        assert nmi(a, b) == pytest.approx(brute_force_nmi(a, b), abs=1e-12)

    for seed in range(100):
        pts = np.random.default_rng(5000 + seed).normal(size=(6, 2))
        want_inertia, want_labels = exhaustive_two_partition(pts)
        result = kmeans_fit(pts, 2, seed=seed)
        assert result.inertia == pytest.approx(want_inertia, abs=1e-9)
        assert (
            np.array_equal(result.assignments, want_labels)
            or np.array_equal(1 - result.assignments, want_labels)
        )

    elapsed = time.perf_counter() - start
    assert elapsed < 30.0
    report(
        f"PASS criterion 2: purity/NMI exact vs brute force on 500 pairs; "
        f"6-point k-means matches exhaustive search on 100 instances ({elapsed:.1f}s < 30s)"
    )


# --------------------------------------------------------------------------
# criterion 3: pseudo-label loop convergence on synthetic classes

def test_criterion_3_ldpo_convergence():
    start = time.perf_counter()
    spec = default_synthetic_spec(num_studies=500, width=192, height=192)
    patches, truth = [], []
    for i in range(500):
        raster, blobs = generate_synthetic_study(spec, study_seed(LDPO_SEED, i))
        blob = blobs[0]
        box = bbox_from_diameters(blob.diameters, spec.width, spec.height)
        patches.append(
            LesionPatch(source=(f"P{i}", "S", f"I{i}"), box=box,
                        pixels=crop_patch(raster, box, 64))
        )
        truth.append(blob.true_class)
    truth = np.array(truth)

    config = LdpoConfig(seed=LDPO_SEED, threshold=0.9, max_iter=20)
    final, history, _ = run_ldpo(patches, None, config)

    assert final.agreement() is not None and final.agreement() >= 0.9
    assert len(history) <= 21  # converged within 20 iterations
    truth_purity = purity(final.assignments, truth)
    assert truth_purity >= 0.95
    assert final.test_top1_accuracy >= 0.90

    elapsed = time.perf_counter() - start
    assert elapsed < 300.0
    report(
        f"PASS criterion 3: converged after {len(history)} iterations at k={final.k}, "
        f"purity vs hidden classes {truth_purity:.3f} >= 0.95, held-out top-1 "
        f"{final.test_top1_accuracy:.3f} >= 0.90 ({elapsed:.0f}s < 300s)"
    )


# --------------------------------------------------------------------------
# criterion 4: detector gradient check

def test_criterion_4_gradient_check():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        model, targets = tiny_instance(seed)
        worst = max(worst, finite_difference_check(model, targets))
    assert worst < 1e-4
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    report(
        f"PASS criterion 4: gradients of all four loss terms match central finite "
        f"differences on 50 instances, worst rel. error {worst:.2e} < 1e-4 ({elapsed:.0f}s < 60s)"
    )


# --------------------------------------------------------------------------
# criterion 5 (and 6 reuse): end-to-end synthetic detection experiment

@pytest.fixture(scope="module")
def e2e_experiment():
    start = time.perf_counter()
    spec = default_synthetic_spec(num_studies=200, width=512, height=512)
    studies = list(generate_dataset(spec, E2E_SEED))

    all_records, rasters, boxes_by_key, truth_by_key = [], {}, {}, {}
    patches = []
    for records, raster, blobs, key in studies:
        mined = [bbox_from_diameters(r.diameters, spec.width, spec.height) for r in records]
        all_records.extend(records)
        rasters[key] = raster
        boxes_by_key[key] = mined
        truth_by_key[key] = blobs[0].true_class
        patches.append(LesionPatch(source=key, box=mined[0], pixels=crop_patch(raster, mined[0], 64)))

    final, history, _ = run_ldpo(patches, None, LdpoConfig(seed=E2E_SEED, threshold=0.9))
    labels = {p.source: int(l) for p, l in zip(patches, final.assignments)}

    train_m, _val_m, test_m = split_patients(all_records, (0.70, 0.15, 0.15), seed=E2E_SEED)
    train_keys, test_keys = list(train_m.members), list(test_m.members)

    def samples(keys, n_classes):
        return [
            DetectionSample(
                source=key, raster=rasters[key], gt_boxes=boxes_by_key[key],
                gt_classes=[labels[key] if n_classes > 1 else 0] * len(boxes_by_key[key]),
            )
            for key in keys
        ]

    models, reports, detections = {}, {}, {}
    for name, k_classes in (("multi", final.k), ("single", 1)):
        config = TrainConfig(seed=E2E_SEED)  # desk-scale defaults: 2000 iters, decay every 800
        model = init_detector(n_classes=k_classes, seed=E2E_SEED)
        train(model, samples(train_keys, k_classes), config)
        dets = {key[2]: detect(model, rasters[key]) for key in test_keys}
        gt = {key[2]: (boxes_by_key[key][0], labels[key] + 1) for key in test_keys}
        models[name] = model
        detections[name] = dets
        reports[name] = build_report(dets, gt, thresholds=[i / 10 for i in range(1, 10)])
    return {
        "k": final.k,
        "history": history,
        "reports": reports,
        "detections": detections,
        "models": models,
        "test_keys": test_keys,
        "rasters": rasters,
        "elapsed": time.perf_counter() - start,
    }


def test_criterion_5_end_to_end_comparison(e2e_experiment, tmp_path):
    exp = e2e_experiment
    assert exp["k"] == 5
    multi = exp["reports"]["multi"]
    single = exp["reports"]["single"]

    assert multi.overall_top1_accuracy >= 0.85
    assert multi.overall_top1_accuracy >= single.overall_top1_accuracy - 0.02

    # training made progress: loss trend over the schedule is downward
    for model in exp["models"].values():
        totals = [row["total"] for row in model.training_log]
        assert np.median(totals[-100:]) < np.median(totals[:100])

    for category, points in multi.pr_curves.items():
        path = tmp_path / f"pr_{category}.csv"
        write_pr_csv(path, points)
        assert path.stat().st_size > len("score,recall,precision\n")
    assert len(multi.pr_curves) == 5

    table = compare_configs(single, multi)
    assert len(table.rows) == 5

    assert exp["elapsed"] < 900.0
    direction = "improves on" if multi.overall_top1_accuracy >= single.overall_top1_accuracy else "trails"
    report(
        f"PASS criterion 5: multi-class top-1@0.5 = {multi.overall_top1_accuracy:.3f} >= 0.85; "
        f"single-class = {single.overall_top1_accuracy:.3f}; multi {direction} single "
        f"(not asserted); 5 PR curves emitted ({exp['elapsed']:.0f}s < 900s)"
    )


# --------------------------------------------------------------------------
# criterion 6: protocol fidelity fixtures

def test_criterion_6_protocol_fixtures(e2e_experiment):
    # IoU of exactly 0.5 is a miss ("larger than" is strict)
    gt = {"img": BoundingBox(left_x=0, top_y=0, width=10, height=10)}
    from lesionkit.geometry import Detection

    half = Detection(box=BoundingBox(left_x=0, top_y=0, width=5, height=10),
                     class_index=1, score=0.9)
    assert iou(half.box, gt["img"]) == 0.5
    assert evaluate_top1({"img": [half]}, gt, iou_threshold=0.5) == 0.0

    # detect never emits more than 5 boxes or scores <= 0.5
    exp = e2e_experiment
    total = 0
    for name in ("multi", "single"):
        for dets in exp["detections"][name].values():
            assert len(dets) <= 5
            for d in dets:
                assert d.score > 0.5
                total += 1
    assert total > 0

    # anchor templates: scales x ratios with area preservation
    anchors = generate_anchors(1, 1)
    sizes = {(round(anchors[i].width, 6), round(anchors[i].height, 6)) for i in range(9)}
    for s in (48.0, 72.0, 96.0):
        assert (s, s) in sizes
        assert (round(s * math.sqrt(2), 6), round(s / math.sqrt(2), 6)) in sizes
        assert (round(s / math.sqrt(2), 6), round(s * math.sqrt(2), 6)) in sizes
    for i in range(9):
        area = anchors[i].width * anchors[i].height
        scale = (48.0, 72.0, 96.0)[i // 3]
        assert abs(area - scale ** 2) < 1e-6

    # learning-rate schedule at the decay boundary is exactly base/10
    config = TrainConfig(base_lr=0.001, lr_decay_factor=10, lr_decay_every=20000)
    assert learning_rate(config, 20000) == config.base_lr / 10
    assert learning_rate(config, 19999) == config.base_lr

    report(
        "PASS criterion 6: strict top-1 inequality at IoU 0.5; detections capped at "
        f"5 with scores > 0.5 ({total} checked); anchor templates preserve areas "
        "(48, 72, 96)^2; schedule hits base/10 at the decay boundary"
    )


# --------------------------------------------------------------------------
# criterion 7: comparison-table renderer golden test

def test_criterion_7_table_renderer_golden(request):
    single, multi = table1_reference_reports()
    table = compare_configs(single, multi, cluster_sizes=TABLE1_SIZES, cluster_names=TABLE1_NAMES)
    rendered = render_table1(table)
    golden_path = request.path.parent / "data" / "table1_golden.csv"
    assert rendered.encode() == golden_path.read_bytes()
    report("PASS criterion 7: stored reference table renders byte-identical to the golden CSV")
