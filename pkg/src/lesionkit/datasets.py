"""Dataset assembly: patient-level splits, patch cropping, detection resizing."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from lesionkit.bookmarks import BookmarkRecord, BoundingBox
from lesionkit.errors import ValidationError
from lesionkit.raster import Raster, resize_raster

DEFAULT_PATCH_SIDE = 64
ITERATION_FRACTIONS = (0.75, 0.10, 0.15)

SourceKey = tuple[str, str, str]  # (patient_id, study_id, image_id)


@dataclass
class SplitManifest:
    split_name: str
    members: list[SourceKey]
    seed: int

    def patients(self) -> set[str]:
        return {m[0] for m in self.members}


@dataclass
class LesionPatch:
    source: SourceKey
    box: BoundingBox
    pixels: Raster
    pseudo_label: Optional[int] = None

    def __post_init__(self) -> None:
        if self.pixels.width != self.pixels.height:
            raise ValidationError("lesion patch must be square")


def largest_remainder_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer split sizes summing exactly to n; ties go to the earlier split."""
    quotas = [n * f for f in fractions]
    sizes = [int(np.floor(q)) for q in quotas]
    remainders = [q - s for q, s in zip(quotas, sizes)]
    # stable sort on negative remainder keeps earlier splits first on ties
    order = sorted(range(len(fractions)), key=lambda i: -remainders[i])
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_patients(
    records: Sequence[BookmarkRecord],
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> tuple[SplitManifest, SplitManifest, SplitManifest]:
    """Partition records by unique patient into train/val/test manifests.

    Deterministic given the seed and independent of record order: the shuffle
    happens on the sorted unique patient list.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError("split fractions must sum to 1")
    patients = sorted({r.patient_id for r in records})
    if len(patients) < 3:
        raise ValidationError(f"need at least 3 distinct patients, got {len(patients)}")
    rng = np.random.default_rng(seed)
    shuffled = [patients[i] for i in rng.permutation(len(patients))]
    sizes = largest_remainder_sizes(len(patients), fractions)
    names = ("train", "val", "test")
    assignment: dict[str, str] = {}
    start = 0
    for name, size in zip(names, sizes):
        for p in shuffled[start : start + size]:
            assignment[p] = name
        start += size
    manifests = {name: SplitManifest(split_name=name, members=[], seed=seed) for name in names}
    for r in records:
        key = (r.patient_id, r.study_id, r.image_id)
        manifests[assignment[r.patient_id]].members.append(key)
    return manifests["train"], manifests["val"], manifests["test"]


def split_for_iteration(
    patches: Sequence, seed: int,
    fractions: tuple[float, float, float] = ITERATION_FRACTIONS,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Patch-level shuffle-split into train/val/test index arrays."""
    n = len(patches)
    if n < 10:
        raise ValidationError(f"need at least 10 patches to split, got {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    sizes = largest_remainder_sizes(n, fractions)
    train = perm[: sizes[0]]
    val = perm[sizes[0] : sizes[0] + sizes[1]]
    test = perm[sizes[0] + sizes[1] :]
    return train, val, test


def crop_patch(slide: Raster, box: BoundingBox, out_side: int = DEFAULT_PATCH_SIDE) -> Raster:
    """Crop the (integer-aligned) box region and resize it to a square patch."""
    x0, y0 = int(round(box.left_x)), int(round(box.top_y))
    x1, y1 = int(round(box.right_x)), int(round(box.bottom_y))
    if x0 < 0 or y0 < 0 or x1 > slide.width or y1 > slide.height or x1 <= x0 or y1 <= y0:
        raise ValidationError(f"box {box} outside slide {slide.width}x{slide.height}")
    region = Raster.from_array(slide.samples[y0:y1, x0:x1])
    return resize_raster(region, out_side, out_side)


def resize_for_detection(
    slide: Raster,
    boxes: Sequence[BoundingBox],
    max_side: int = 512,
) -> tuple[Raster, list[BoundingBox], float]:
    """Isotropically scale a slide so its longest dimension equals max_side."""
    s = max_side / max(slide.width, slide.height)
    if s == 1.0:
        return slide, list(boxes), 1.0
    out_w = max(1, int(round(slide.width * s)))
    out_h = max(1, int(round(slide.height * s)))
    resized = resize_raster(slide, out_w, out_h)
    return resized, [b.scaled(s) for b in boxes], s


def build_patches(
    manifest_rows: Iterable[tuple[str, str, str, BoundingBox]],
    rasters: Mapping[str, Raster],
    out_side: int = DEFAULT_PATCH_SIDE,
    labels: Optional[Mapping[SourceKey, int]] = None,
) -> list[LesionPatch]:
    """Crop one LesionPatch per manifest row; rasters are keyed by image_id."""
    patches = []
    for patient_id, study_id, image_id, box in manifest_rows:
        if image_id not in rasters:
            raise ValidationError(f"no raster for image_id {image_id!r}")
        key = (patient_id, study_id, image_id)
        patches.append(
            LesionPatch(
                source=key,
                box=box,
                pixels=crop_patch(rasters[image_id], box, out_side),
                pseudo_label=labels.get(key) if labels else None,
            )
        )
    return patches


def write_split_manifests(path: str | os.PathLike, manifests: Sequence[SplitManifest]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "patient_id", "study_id", "image_id"])
        for m in manifests:
            for patient_id, study_id, image_id in m.members:
                writer.writerow([m.split_name, patient_id, study_id, image_id])


def read_split_manifests(path: str | os.PathLike, seed: int = 0) -> dict[str, SplitManifest]:
    out: dict[str, SplitManifest] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            m = out.setdefault(row["split"], SplitManifest(row["split"], [], seed))
            m.members.append((row["patient_id"], row["study_id"], row["image_id"]))
    return out
