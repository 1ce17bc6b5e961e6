"""Fixed filter-bank feature maps standing in for a convolutional backbone.

Six channels per feature cell, pooled from the cell's pixel window: mean
intensity, intensity std, mean horizontal / vertical gradient magnitude, and
two Laplacian-of-Gaussian responses. Channels are standardized per image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from lesionkit.raster import Raster

N_CHANNELS = 6
LOG_SIGMAS = (1.5, 3.0)

_LOG_DC: dict[float, float] = {}


def _log_response(img: np.ndarray, sigma: float) -> np.ndarray:
    """Laplacian-of-Gaussian with the truncated kernel's DC leak removed,
    so constant inputs map to (numerically) zero."""
    if sigma not in _LOG_DC:
        probe = np.ones((65, 65))
        _LOG_DC[sigma] = float(ndimage.gaussian_laplace(probe, sigma)[32, 32])
    return ndimage.gaussian_laplace(img, sigma) - _LOG_DC[sigma] * img


@dataclass
class FeatureMap:
    data: np.ndarray  # (rows, cols, channels) float64
    stride: int

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def cell_features(self) -> np.ndarray:
        """(rows*cols, channels) view in row-major cell order."""
        return self.data.reshape(-1, self.data.shape[2])


def _pool_cells(plane: np.ndarray, stride: int, rows: int, cols: int, op: str) -> np.ndarray:
    padded = np.pad(
        plane,
        ((0, rows * stride - plane.shape[0]), (0, cols * stride - plane.shape[1])),
        mode="edge",
    )
    blocks = padded.reshape(rows, stride, cols, stride)
    if op == "mean":
        return blocks.mean(axis=(1, 3))
    if op == "std":
        return blocks.std(axis=(1, 3))
    raise ValueError(op)


def compute_feature_map(
    image: Raster,
    stride: int = 8,
    log_sigmas: tuple[float, float] = LOG_SIGMAS,
    standardize: bool = True,
) -> FeatureMap:
    """Deterministic backbone features at the given stride.

    With standardize=False the raw pooled filter responses are returned
    (useful for inspecting individual channels); training and inference use
    the per-image standardized form.
    """
    img = image.to_float()
    rows = math.ceil(image.height / stride)
    cols = math.ceil(image.width / stride)
    gy, gx = np.gradient(img)
    channels = [
        _pool_cells(img, stride, rows, cols, "mean"),
        _pool_cells(img, stride, rows, cols, "std"),
        _pool_cells(np.abs(gx), stride, rows, cols, "mean"),
        _pool_cells(np.abs(gy), stride, rows, cols, "mean"),
        _pool_cells(_log_response(img, log_sigmas[0]), stride, rows, cols, "mean"),
        _pool_cells(_log_response(img, log_sigmas[1]), stride, rows, cols, "mean"),
    ]
    data = np.stack(channels, axis=2)
    if standardize:
        mean = data.mean(axis=(0, 1), keepdims=True)
        std = data.std(axis=(0, 1), keepdims=True)
        data = (data - mean) / np.maximum(std, 1e-8)
    return FeatureMap(data=data, stride=stride)
