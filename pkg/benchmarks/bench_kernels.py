#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure-numpy fallback.

Sizes mirror the detector training hot path: dense-anchor IoU, proposal NMS,
RoI max-pooling, and full-slide bilinear resizing.

    python3 benchmarks/bench_kernels.py [--repeats 30]
"""

import argparse
import time

import numpy as np

from lesionkit._kernels import _numpy as numpy_backend

try:
    from lesionkit._kernels import _core as cython_backend
except ImportError:
    cython_backend = None


def timeit(fn, repeats):
    fn()  # warm-up
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def make_cases(rng):
    slide = rng.uniform(0, 65535, size=(512, 512))
    patch = rng.uniform(0, 65535, size=(92, 92))

    def boxes(n):
        xy = rng.uniform(0, 450, size=(n, 2))
        wh = rng.uniform(20, 120, size=(n, 2))
        return np.concatenate([xy, xy + wh], axis=1)

    anchors = boxes(36864)
    gts = boxes(3)
    proposals = boxes(2000)
    scores = rng.uniform(size=2000)
    fmap = rng.normal(size=(64, 64, 6))
    rois = np.stack(
        [
            rng.integers(0, 40, 36),
            rng.integers(0, 40, 36),
            rng.integers(41, 64, 36),
            rng.integers(41, 64, 36),
        ],
        axis=1,
    ).astype(np.int64)
    return [
        ("resize 512->512", lambda b: b.resize_bilinear(slide, 512, 512)),
        ("resize 92->64 (patch)", lambda b: b.resize_bilinear(patch, 64, 64)),
        ("iou 36864x3 (assign)", lambda b: b.iou_matrix(anchors, gts)),
        ("iou 2000x2000", lambda b: b.iou_matrix(proposals, proposals)),
        ("nms 2000 keep 32", lambda b: b.nms_keep(proposals, scores, 0.7, 32)),
        ("nms 2000 full", lambda b: b.nms_keep(proposals, scores, 0.3, 0)),
        ("roi pool 36x7x7x6", lambda b: b.roi_max_pool(fmap, rois, 7)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    cases = make_cases(rng)
    print(f"{'kernel':<24} {'numpy':>12} {'cython':>12} {'speedup':>9}")
    for name, call in cases:
        t_numpy = timeit(lambda: call(numpy_backend), args.repeats)
        if cython_backend is None:
            print(f"{name:<24} {t_numpy * 1e3:>10.3f}ms {'n/a':>12} {'n/a':>9}")
            continue
        t_cython = timeit(lambda: call(cython_backend), args.repeats)
        print(
            f"{name:<24} {t_numpy * 1e3:>10.3f}ms {t_cython * 1e3:>10.3f}ms "
            f"{t_numpy / t_cython:>8.1f}x"
        )
    if cython_backend is None:
        print("\ncompiled core not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
