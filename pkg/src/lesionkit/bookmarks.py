"""Bookmark annotation parsing and diameter-pair to bounding-box conversion.

A bookmark is one clinical lesion annotation: two measured diameter line
segments on an image. The box around a lesion is the coordinate extremes of
the four segment endpoints padded outward, clipped to the image.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, replace
from typing import IO, Iterable, Iterator, Union

from lesionkit.errors import ValidationError

DEFAULT_PADDING = 20

Point = tuple[float, float]
Segment = tuple[Point, Point]


@dataclass(frozen=True)
class DiameterPair:
    """Long-axis segment plus its (nominally perpendicular) short-axis segment."""

    long_axis: Segment
    short_axis: Segment

    def validate(self) -> None:
        for seg in (self.long_axis, self.short_axis):
            for x, y in seg:
                if not (math.isfinite(x) and math.isfinite(y)):
                    raise ValidationError("diameter coordinates must be finite")
                if x < 0 or y < 0:
                    raise ValidationError("diameter coordinates must be >= 0")

    def endpoints(self) -> list[Point]:
        return [*self.long_axis, *self.short_axis]


@dataclass(frozen=True)
class BookmarkRecord:
    patient_id: str
    study_id: str
    image_id: str
    image_w: int
    image_h: int
    diameters: DiameterPair

    def validate(self) -> None:
        if not (self.patient_id and self.study_id and self.image_id):
            raise ValidationError("patient/study/image ids must be nonempty")
        if self.image_w < 1 or self.image_h < 1:
            raise ValidationError("image dimensions must be >= 1")
        self.diameters.validate()


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box as (left_x, top_y, width, height) in pixels."""

    left_x: float
    top_y: float
    width: float
    height: float
    clipped: bool = False

    def __post_init__(self) -> None:
        if not (self.width > 0 and self.height > 0):
            raise ValidationError(f"box must have positive extent, got {self}")

    @property
    def right_x(self) -> float:
        return self.left_x + self.width

    @property
    def bottom_y(self) -> float:
        return self.top_y + self.height

    def corners(self) -> tuple[float, float, float, float]:
        return (self.left_x, self.top_y, self.right_x, self.bottom_y)

    def area(self) -> float:
        return self.width * self.height

    def scaled(self, s: float) -> "BoundingBox":
        return replace(
            self, left_x=self.left_x * s, top_y=self.top_y * s,
            width=self.width * s, height=self.height * s,
        )


def bbox_from_diameters(
    d: DiameterPair,
    image_w: int,
    image_h: int,
    padding: int = DEFAULT_PADDING,
) -> BoundingBox:
    """Padded box around the four diameter endpoints, clipped to the image.

    The raw box is (x_min - padding, y_min - padding, x_max - x_min + 2*padding,
    y_max - y_min + 2*padding) over the endpoint extremes. Sub-pixel inputs are
    rounded outward (floor on the origin, ceil on the far edge) so lesion
    extent is never lost, then the box is intersected with the image rectangle.
    """
    if padding < 1:
        raise ValidationError("padding must be >= 1")
    d.validate()
    xs = [p[0] for p in d.endpoints()]
    ys = [p[1] for p in d.endpoints()]
    x0 = math.floor(min(xs) - padding)
    y0 = math.floor(min(ys) - padding)
    x1 = math.ceil(max(xs) + padding)
    y1 = math.ceil(max(ys) + padding)
    if x1 <= 0 or y1 <= 0 or x0 >= image_w or y0 >= image_h:
        raise ValidationError("padded box lies entirely outside the image")
    cx0, cy0 = max(x0, 0), max(y0, 0)
    cx1, cy1 = min(x1, image_w), min(y1, image_h)
    clipped = (cx0, cy0, cx1, cy1) != (x0, y0, x1, y1)
    return BoundingBox(
        left_x=float(cx0), top_y=float(cy0),
        width=float(cx1 - cx0), height=float(cy1 - cy0),
        clipped=clipped,
    )


def _record_from_obj(obj: dict) -> BookmarkRecord:
    try:
        d1 = [float(v) for v in obj["d1"]]
        d2 = [float(v) for v in obj["d2"]]
        if len(d1) != 4 or len(d2) != 4:
            raise ValidationError(
                f"diameter arrays must hold 4 coordinates, got {len(d1)} and {len(d2)}"
            )
        record = BookmarkRecord(
            patient_id=str(obj["patient_id"]),
            study_id=str(obj["study_id"]),
            image_id=str(obj["image_id"]),
            image_w=int(obj["image_w"]),
            image_h=int(obj["image_h"]),
            diameters=DiameterPair(
                long_axis=((d1[0], d1[1]), (d1[2], d1[3])),
                short_axis=((d2[0], d2[1]), (d2[2], d2[3])),
            ),
        )
    except KeyError as exc:
        raise ValidationError(f"missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(str(exc)) from exc
    record.validate()
    return record


def parse_bookmarks(
    stream: Union[IO[bytes], IO[str], Iterable[bytes], Iterable[str]],
) -> tuple[list[BookmarkRecord], list[tuple[int, str]]]:
    """Parse line-delimited JSON bookmark records.

    Returns records in input order plus a rejection list of (1-based line
    number, reason) for malformed lines; dirty lines never abort the parse.
    """
    records: list[BookmarkRecord] = []
    rejections: list[tuple[int, str]] = []
    for lineno, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8", errors="replace")
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValidationError("record is not a JSON object")
            records.append(_record_from_obj(obj))
        except (json.JSONDecodeError, ValidationError) as exc:
            rejections.append((lineno, str(exc)))
    return records, rejections


def serialize_bookmarks(records: Iterable[BookmarkRecord]) -> bytes:
    """Inverse of parse_bookmarks for valid records (round-trips exactly)."""
    lines = []
    for r in records:
        (x11, y11), (x12, y12) = r.diameters.long_axis
        (x21, y21), (x22, y22) = r.diameters.short_axis
        lines.append(
            json.dumps(
                {
                    "patient_id": r.patient_id,
                    "study_id": r.study_id,
                    "image_id": r.image_id,
                    "image_w": r.image_w,
                    "image_h": r.image_h,
                    "d1": [x11, y11, x12, y12],
                    "d2": [x21, y21, x22, y22],
                }
            )
        )
    return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")


MANIFEST_FIELDS = [
    "patient_id", "study_id", "image_id",
    "left_x", "top_y", "width", "height", "clipped",
]


def write_manifest(
    path: str | os.PathLike,
    rows: Iterable[tuple[BookmarkRecord, BoundingBox]],
) -> int:
    """Write the mined-box manifest CSV; returns the row count."""
    n = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for record, box in rows:
            writer.writerow(
                [
                    record.patient_id, record.study_id, record.image_id,
                    int(box.left_x), int(box.top_y), int(box.width), int(box.height),
                    int(box.clipped),
                ]
            )
            n += 1
    return n


def read_manifest(path: str | os.PathLike) -> Iterator[tuple[str, str, str, BoundingBox]]:
    """Yield (patient_id, study_id, image_id, box) rows from a manifest CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"manifest missing columns: {sorted(missing)}")
        for row in reader:
            box = BoundingBox(
                left_x=float(row["left_x"]), top_y=float(row["top_y"]),
                width=float(row["width"]), height=float(row["height"]),
                clipped=bool(int(row["clipped"])),
            )
            yield row["patient_id"], row["study_id"], row["image_id"], box
