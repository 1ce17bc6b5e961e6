"""Seeded synthetic CT-like study generator for desk-scale experiments.

Each study is a noisy grayscale slice with elliptical blobs whose appearance
(intensity contrast, texture frequency, eccentricity) is class-specific.
Blobs carry the diameter segments a clinician would have drawn (major and
minor ellipse axes), so the full mining pipeline can run on synthetic data.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from lesionkit import _kernels
from lesionkit.bookmarks import BookmarkRecord, BoundingBox, DiameterPair
from lesionkit.errors import ValidationError
from lesionkit.raster import PGM_MAXVAL, Raster

PLACEMENT_RETRIES = 100


@dataclass
class BlobClassSpec:
    name: str
    contrast: float          # intensity shift inside the blob, in [0,1] units
    texture_freq: float      # cycles per pixel; 0 = smooth
    texture_amp: float       # additive amplitude of the texture modulation
    eccentricity: float      # long/short semi-axis ratio, >= 1
    radius: tuple[float, float] = (16.0, 26.0)  # geometric-mean radius range
    texture_mode: str = "rings"                 # "rings" (radial) or "stripes" (long axis)
    theta_jitter: float | None = None           # max |rotation| from horizontal; None = free


@dataclass
class SyntheticSpec:
    width: int = 512
    height: int = 512
    blob_count: tuple[int, int] = (1, 1)
    padding: int = 20
    max_overlap_iou: float = 0.1
    num_studies: int = 1
    studies_per_patient: tuple[int, int] = (1, 2)
    background_level: float = 0.50
    background_smooth_amplitude: float = 0.02
    background_noise_sigma: float = 0.01
    classes: list[BlobClassSpec] = field(default_factory=list)

    def validate(self) -> None:
        if not self.classes:
            raise ValidationError("synthetic spec must name at least one class")
        if self.blob_count[0] < 0 or self.blob_count[1] < self.blob_count[0]:
            raise ValidationError("bad blob_count range")
        for c in self.classes:
            if c.eccentricity < 1.0:
                raise ValidationError(f"eccentricity must be >= 1 ({c.name})")
            if c.radius[0] <= 0 or c.radius[1] < c.radius[0]:
                raise ValidationError(f"bad radius range ({c.name})")

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "SyntheticSpec":
        with open(path) as fh:
            obj = json.load(fh)
        classes = [
            BlobClassSpec(
                name=c["name"],
                contrast=float(c["contrast"]),
                texture_freq=float(c.get("texture_freq", 0.0)),
                texture_amp=float(c.get("texture_amp", 0.0)),
                eccentricity=float(c.get("eccentricity", 1.0)),
                radius=tuple(c.get("radius", (16.0, 26.0))),
                texture_mode=str(c.get("texture_mode", "rings")),
                theta_jitter=(None if c.get("theta_jitter") is None else float(c["theta_jitter"])),
            )
            for c in obj["classes"]
        ]
        bg = obj.get("background", {})
        spec = cls(
            width=int(obj["raster"]["width"]),
            height=int(obj["raster"]["height"]),
            blob_count=tuple(obj.get("blob_count", (1, 1))),
            padding=int(obj.get("padding", 20)),
            max_overlap_iou=float(obj.get("max_overlap_iou", 0.1)),
            num_studies=int(obj.get("num_studies", 1)),
            studies_per_patient=tuple(obj.get("studies_per_patient", (1, 2))),
            background_level=float(bg.get("level", 0.32)),
            background_smooth_amplitude=float(bg.get("smooth_amplitude", 0.05)),
            background_noise_sigma=float(bg.get("noise_sigma", 0.02)),
            classes=classes,
        )
        spec.validate()
        return spec

    def to_json(self) -> str:
        return json.dumps(
            {
                "raster": {"width": self.width, "height": self.height},
                "blob_count": list(self.blob_count),
                "padding": self.padding,
                "max_overlap_iou": self.max_overlap_iou,
                "num_studies": self.num_studies,
                "studies_per_patient": list(self.studies_per_patient),
                "background": {
                    "level": self.background_level,
                    "smooth_amplitude": self.background_smooth_amplitude,
                    "noise_sigma": self.background_noise_sigma,
                },
                "classes": [
                    {
                        "name": c.name,
                        "contrast": c.contrast,
                        "texture_freq": c.texture_freq,
                        "texture_amp": c.texture_amp,
                        "eccentricity": c.eccentricity,
                        "radius": list(c.radius),
                        "texture_mode": c.texture_mode,
                        "theta_jitter": c.theta_jitter,
                    }
                    for c in self.classes
                ],
            },
            indent=2,
            sort_keys=True,
        )


@dataclass
class SyntheticBlob:
    true_class: int
    center: tuple[float, float]
    semi_axes: tuple[float, float]
    theta: float
    diameters: DiameterPair
    box: BoundingBox  # padded tight box, integer-aligned


def default_synthetic_spec(
    num_studies: int = 1,
    width: int = 512,
    height: int = 512,
    blob_count: tuple[int, int] = (1, 1),
) -> SyntheticSpec:
    """Five visually distinct blob classes on a noisy background.

    Textures are phase-locked to the blob center (radial rings, or stripes
    with bounded rotation), so patches of one class stay close in pixel space
    regardless of where the blob landed.
    """
    classes = [
        BlobClassSpec("bright-smooth", 0.34, 0.0, 0.0, 1.0, radius=(20.0, 24.0)),
        BlobClassSpec("bright-ringed", 0.10, 2.0, -0.30, 1.0, radius=(20.0, 24.0)),
        BlobClassSpec(
            "striped-elongated", 0.0, 0.09, 0.30, 2.0, radius=(20.0, 24.0),
            texture_mode="stripes", theta_jitter=0.1,
        ),
        BlobClassSpec("dark-ringed", -0.12, 1.2, 0.30, 1.0, radius=(20.0, 24.0)),
        BlobClassSpec("dark-smooth", -0.34, 0.0, 0.0, 1.0, radius=(20.0, 24.0)),
    ]
    return SyntheticSpec(
        width=width, height=height, blob_count=blob_count,
        num_studies=num_studies, classes=classes,
    )


# blob mask: flat core out to rho=MASK_CORE, cubic falloff to zero at rho=MASK_EDGE
MASK_CORE = 0.8
MASK_EDGE = 1.15


def _padded_int_box(
    cx: float, cy: float, hx: float, hy: float,
    image_w: int, image_h: int, padding: int,
) -> BoundingBox:
    x0 = math.floor(cx - hx - padding)
    y0 = math.floor(cy - hy - padding)
    x1 = math.ceil(cx + hx + padding)
    y1 = math.ceil(cy + hy + padding)
    cx0, cy0 = max(x0, 0), max(y0, 0)
    cx1, cy1 = min(x1, image_w), min(y1, image_h)
    return BoundingBox(
        left_x=float(cx0), top_y=float(cy0),
        width=float(cx1 - cx0), height=float(cy1 - cy0),
        clipped=(cx0, cy0, cx1, cy1) != (x0, y0, x1, y1),
    )


def _smooth_background(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(8, 8))
    smooth = _kernels.resize_bilinear(coarse, spec.height, spec.width)
    img = spec.background_level + spec.background_smooth_amplitude * smooth
    return img


def _render_blob(
    img: np.ndarray, cls: BlobClassSpec,
    cx: float, cy: float, a: float, b: float, theta: float,
) -> None:
    h, w = img.shape
    reach_x = MASK_EDGE * math.sqrt((a * math.cos(theta)) ** 2 + (b * math.sin(theta)) ** 2)
    reach_y = MASK_EDGE * math.sqrt((a * math.sin(theta)) ** 2 + (b * math.cos(theta)) ** 2)
    x0, x1 = max(0, math.floor(cx - reach_x)), min(w, math.ceil(cx + reach_x) + 1)
    y0, y1 = max(0, math.floor(cy - reach_y)), min(h, math.ceil(cy + reach_y) + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx = xs - cx
    dy = ys - cy
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    t = np.clip((MASK_EDGE - rho) / (MASK_EDGE - MASK_CORE), 0.0, 1.0)
    mask = t * t * (3.0 - 2.0 * t)
    level = cls.contrast
    if cls.texture_freq > 0.0 and cls.texture_amp > 0.0:
        if cls.texture_mode == "stripes":
            phase_coord = u  # pixels along the long axis; freq in cycles/pixel
        else:
            # radial rings in normalized radius, so the pattern is size-invariant
            phase_coord = rho
        level = level + cls.texture_amp * np.cos(2.0 * math.pi * cls.texture_freq * phase_coord)
    img[y0:y1, x0:x1] += mask * level


def generate_synthetic_study(
    spec: SyntheticSpec, seed: int
) -> tuple[Raster, list[SyntheticBlob]]:
    """Render one study; bit-identical output for identical (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    img = _smooth_background(spec, rng)
    n_blobs = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    blobs: list[SyntheticBlob] = []
    placed_corners: list[tuple[float, float, float, float]] = []
    for _ in range(n_blobs):
        for attempt in range(PLACEMENT_RETRIES + 1):
            if attempt == PLACEMENT_RETRIES:
                raise ValidationError(
                    f"could not place {n_blobs} blobs within the overlap bound "
                    f"({spec.max_overlap_iou}) after {PLACEMENT_RETRIES} retries"
                )
            class_idx = int(rng.integers(len(spec.classes)))
            cls = spec.classes[class_idx]
            r = float(rng.uniform(*cls.radius))
            a = r * math.sqrt(cls.eccentricity)
            b = r / math.sqrt(cls.eccentricity)
            if cls.theta_jitter is None:
                theta = float(rng.uniform(0.0, math.pi))
            else:
                theta = float(rng.uniform(-cls.theta_jitter, cls.theta_jitter))
            hx = math.sqrt((a * math.cos(theta)) ** 2 + (b * math.sin(theta)) ** 2)
            hy = math.sqrt((a * math.sin(theta)) ** 2 + (b * math.cos(theta)) ** 2)
            margin_x = hx + spec.padding + 2.0
            margin_y = hy + spec.padding + 2.0
            if 2 * margin_x >= spec.width or 2 * margin_y >= spec.height:
                raise ValidationError("raster too small for the configured blob sizes")
            cx = float(rng.uniform(margin_x, spec.width - margin_x))
            cy = float(rng.uniform(margin_y, spec.height - margin_y))
            box = _padded_int_box(cx, cy, hx, hy, spec.width, spec.height, spec.padding)
            corners = box.corners()
            if placed_corners:
                ious = _kernels.iou_matrix([corners], placed_corners)
                if float(ious.max()) > spec.max_overlap_iou:
                    continue
            placed_corners.append(corners)
            long_axis = (
                (cx - a * math.cos(theta), cy - a * math.sin(theta)),
                (cx + a * math.cos(theta), cy + a * math.sin(theta)),
            )
            short_axis = (
                (cx + b * math.sin(theta), cy - b * math.cos(theta)),
                (cx - b * math.sin(theta), cy + b * math.cos(theta)),
            )
            _render_blob(img, cls, cx, cy, a, b, theta)
            blobs.append(
                SyntheticBlob(
                    true_class=class_idx,
                    center=(cx, cy),
                    semi_axes=(a, b),
                    theta=theta,
                    diameters=DiameterPair(long_axis=long_axis, short_axis=short_axis),
                    box=box,
                )
            )
            break
    img += rng.normal(0.0, spec.background_noise_sigma, size=img.shape)
    samples = np.clip(np.rint(img * PGM_MAXVAL), 0, PGM_MAXVAL).astype(np.uint16)
    return Raster.from_array(samples), blobs


def study_seed(base_seed: int, index: int) -> int:
    """Derived per-study seed, stable across runs."""
    return int(np.random.SeedSequence((base_seed, index)).generate_state(1, dtype=np.uint64)[0])


def generate_dataset(
    spec: SyntheticSpec, seed: int
) -> Iterator[tuple[list[BookmarkRecord], Raster, list[SyntheticBlob], tuple[str, str, str]]]:
    """Yield (bookmark records, raster, blobs, source key) per generated study.

    Patient ids group consecutive studies (study count per patient drawn from
    the configured range) so patient-level splitting is meaningful. One
    bookmark record is emitted per blob; blob-free studies yield an empty
    record list.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9A71E)))
    patient_idx = 0
    remaining = 0
    for i in range(spec.num_studies):
        if remaining == 0:
            patient_idx += 1
            remaining = int(rng.integers(spec.studies_per_patient[0], spec.studies_per_patient[1] + 1))
        remaining -= 1
        patient_id = f"P{patient_idx:05d}"
        study_id = f"S{i:05d}"
        image_id = f"I{i:05d}"
        raster, blobs = generate_synthetic_study(spec, study_seed(seed, i))
        records = [
            BookmarkRecord(
                patient_id=patient_id, study_id=study_id, image_id=image_id,
                image_w=spec.width, image_h=spec.height, diameters=blob.diameters,
            )
            for blob in blobs
        ]
        yield records, raster, blobs, (patient_id, study_id, image_id)
