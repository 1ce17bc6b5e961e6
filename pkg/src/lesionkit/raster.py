"""Grayscale raster container and 16-bit binary PGM I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from lesionkit import _kernels
from lesionkit.errors import ValidationError

PGM_MAXVAL = 65535


@dataclass
class Raster:
    """Row-major 16-bit grayscale image."""

    width: int
    height: int
    samples: np.ndarray  # uint16, shape (height, width)

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.uint16)
        if self.samples.shape != (self.height, self.width):
            raise ValidationError(
                f"samples shape {self.samples.shape} != (height, width) = "
                f"({self.height}, {self.width})"
            )
        if self.width < 1 or self.height < 1:
            raise ValidationError("raster dimensions must be >= 1")

    @classmethod
    def from_array(cls, samples: np.ndarray) -> "Raster":
        samples = np.asarray(samples, dtype=np.uint16)
        return cls(width=samples.shape[1], height=samples.shape[0], samples=samples)

    def to_float(self) -> np.ndarray:
        """Samples as float64 in [0, 1]."""
        return self.samples.astype(np.float64) / PGM_MAXVAL


def resize_raster(raster: Raster, out_w: int, out_h: int) -> Raster:
    """Bilinear resize (half-pixel centers); values rounded back to uint16."""
    if out_w < 1 or out_h < 1:
        raise ValidationError("target size must be >= 1")
    resized = _kernels.resize_bilinear(raster.samples.astype(np.float64), out_h, out_w)
    return Raster.from_array(np.clip(np.rint(resized), 0, PGM_MAXVAL))


def write_pgm(raster: Raster, path: str | os.PathLike) -> None:
    """Write a binary 16-bit PGM (P5, maxval 65535, big-endian samples)."""
    header = f"P5\n{raster.width} {raster.height}\n{PGM_MAXVAL}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(raster.samples.astype(">u2").tobytes())


def read_pgm(path: str | os.PathLike) -> Raster:
    """Read a binary PGM; 8-bit files are accepted and widened to 16-bit."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError(f"truncated PGM header: {path}")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise ValidationError(f"not a binary PGM (P5): {path}")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ValidationError(f"bad PGM dimensions/maxval: {path}")
    dtype = ">u2" if maxval > 255 else np.uint8
    raw = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    samples = raw.astype(np.uint16).reshape(height, width)
    return Raster(width=width, height=height, samples=samples)
