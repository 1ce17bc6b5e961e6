"""Trainable patch encoder: a one-hidden-layer perceptron over raw pixels.

The hidden activations are the feature vectors used for clustering; the
softmax head is only exercised while fitting pseudo-labels.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from lesionkit.datasets import LesionPatch
from lesionkit.errors import TrainingDivergenceError, ValidationError


class Encoder(ABC):
    """Deterministic feature extractor that can be re-fit on pseudo-labels."""

    @property
    @abstractmethod
    def dimension(self) -> int: ...

    @abstractmethod
    def encode(self, pixels: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def train(self, pixels: np.ndarray, labels: np.ndarray, epochs: int,
              learning_rate: float) -> list[float]: ...


@dataclass
class EncoderConfig:
    input_side: int = 64
    hidden_dim: int = 128
    epochs: int = 5
    learning_rate: float = 0.01
    batch_size: int = 32


def patches_to_matrix(patches: list[LesionPatch]) -> np.ndarray:
    """Stack patch pixels into (n, side*side) float64 rows in [0, 1].

    Intensities are kept on an absolute scale (no per-patch or per-dataset
    centering): the fixed origin anchors overall brightness, which would
    otherwise be cancelled when features are length-normalized downstream.
    """
    if not patches:
        raise ValidationError("no patches to encode")
    return np.stack([p.pixels.to_float().ravel() for p in patches])


class MlpEncoder(Encoder):
    def __init__(self, input_dim: int, hidden_dim: int = 128, seed: int = 0):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self._rng = np.random.default_rng(seed)
        scale = np.sqrt(2.0 / input_dim)
        self.w1 = self._rng.normal(0.0, scale, size=(hidden_dim, input_dim))
        self.b1 = np.zeros(hidden_dim)
        self.w2: np.ndarray | None = None
        self.b2: np.ndarray | None = None

    @property
    def dimension(self) -> int:
        return self.hidden_dim

    @property
    def n_classes(self) -> int | None:
        return None if self.w2 is None else self.w2.shape[0]

    def ensure_head(self, n_classes: int) -> None:
        """(Re)create the softmax head when the class count changes."""
        if self.w2 is not None and self.w2.shape[0] == n_classes:
            return
        scale = np.sqrt(2.0 / self.hidden_dim)
        self.w2 = self._rng.normal(0.0, scale, size=(n_classes, self.hidden_dim))
        self.b2 = np.zeros(n_classes)

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        if x.shape[1] != self.input_dim:
            raise ValidationError(f"expected {self.input_dim} inputs, got {x.shape[1]}")
        return np.maximum(x @ self.w1.T + self.b1, 0.0)

    def _forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = np.maximum(x @ self.w1.T + self.b1, 0.0)
        logits = h @ self.w2.T + self.b2
        return h, logits

    def logits(self, pixels: np.ndarray) -> np.ndarray:
        if self.w2 is None:
            raise ValidationError("head not initialized; call ensure_head first")
        return self._forward(np.atleast_2d(np.asarray(pixels, dtype=np.float64)))[1]

    def predict(self, pixels: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(pixels), axis=1)

    def mean_loss(self, pixels: np.ndarray, labels: np.ndarray) -> float:
        logits = self.logits(pixels)
        return float(np.mean(_softmax_ce(logits, np.asarray(labels))))

    def train(
        self,
        pixels: np.ndarray,
        labels: np.ndarray,
        epochs: int = 5,
        learning_rate: float = 0.01,
        batch_size: int = 32,
    ) -> list[float]:
        """Mini-batch SGD on softmax cross-entropy; returns per-epoch mean loss."""
        x = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        y = np.asarray(labels, dtype=np.int64)
        if x.shape[0] != y.shape[0]:
            raise ValidationError("pixels/labels length mismatch")
        self.ensure_head(int(y.max()) + 1 if self.w2 is None else self.w2.shape[0])
        if int(y.max()) >= self.w2.shape[0]:
            raise ValidationError("label id exceeds head size")
        n = x.shape[0]
        epoch_losses: list[float] = []
        for epoch in range(epochs):
            order = self._rng.permutation(n)
            batch_losses = []
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                xb, yb = x[idx], y[idx]
                h = np.maximum(xb @ self.w1.T + self.b1, 0.0)
                logits = h @ self.w2.T + self.b2
                losses = _softmax_ce(logits, yb)
                loss = float(losses.mean())
                if not np.isfinite(loss):
                    raise TrainingDivergenceError(f"non-finite encoder loss at epoch {epoch}")
                batch_losses.append(loss)
                probs = _softmax(logits)
                probs[np.arange(len(yb)), yb] -= 1.0
                dlogits = probs / len(yb)
                dw2 = dlogits.T @ h
                db2 = dlogits.sum(axis=0)
                dh = dlogits @ self.w2
                dh[h <= 0.0] = 0.0
                dw1 = dh.T @ xb
                db1 = dh.sum(axis=0)
                self.w2 -= learning_rate * dw2
                self.b2 -= learning_rate * db2
                self.w1 -= learning_rate * dw1
                self.b1 -= learning_rate * db1
            epoch_losses.append(float(np.mean(batch_losses)))
        return epoch_losses


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_ce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    return log_norm - z[np.arange(len(labels)), labels]
