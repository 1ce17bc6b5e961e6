"""Looped pseudo-label optimization: encode, cluster, retrain, repeat.

Each iteration re-encodes all patches with the current encoder, re-clusters
the (L2-normalized) features, aligns cluster ids with the previous iteration
by maximum overlap, and fine-tunes the encoder on the fresh pseudo-labels.
The loop stops once adjacent-iteration agreement (min of purity and NMI)
clears the configured threshold.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from lesionkit.clustering import kmeans_fit, match_clusters, nmi, purity, select_k
from lesionkit.datasets import LesionPatch, split_for_iteration
from lesionkit.encoder import Encoder, EncoderConfig, MlpEncoder, patches_to_matrix
from lesionkit.errors import TrainingDivergenceError, ValidationError


@dataclass
class LdpoConfig:
    k_range: tuple[int, int] = (2, 10)
    threshold: float = 0.9
    max_iter: int = 20
    seed: int = 0
    min_patches: int = 50
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    kmeans_max_iter: int = 300
    kmeans_tol: float = 1e-6
    kmeans_restarts: int = 10

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "LdpoConfig":
        with open(path) as fh:
            obj = json.load(fh)
        enc = obj.get("encoder", {})
        km = obj.get("kmeans", {})
        return cls(
            k_range=tuple(obj.get("k_range", (2, 10))),
            threshold=float(obj.get("threshold", 0.9)),
            max_iter=int(obj.get("max_iter", 20)),
            seed=int(obj.get("seed", 0)),
            min_patches=int(obj.get("min_patches", 50)),
            encoder=EncoderConfig(
                input_side=int(enc.get("input_side", 64)),
                hidden_dim=int(enc.get("hidden_dim", 128)),
                epochs=int(enc.get("epochs", 5)),
                learning_rate=float(enc.get("learning_rate", 0.01)),
                batch_size=int(enc.get("batch_size", 32)),
            ),
            kmeans_max_iter=int(km.get("max_iter", 300)),
            kmeans_tol=float(km.get("tol", 1e-6)),
            kmeans_restarts=int(km.get("restarts", 10)),
        )


@dataclass
class ClusterState:
    iteration: int
    k: int
    assignments: np.ndarray
    centroids: np.ndarray
    purity_vs_prev: Optional[float]
    nmi_vs_prev: Optional[float]
    test_top1_accuracy: float

    def agreement(self) -> Optional[float]:
        if self.purity_vs_prev is None or self.nmi_vs_prev is None:
            return None
        return min(self.purity_vs_prev, self.nmi_vs_prev)


def l2_normalize(features: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    return np.divide(features, norms, out=np.zeros_like(features), where=norms > 1e-12)


def run_ldpo(
    patches: list[LesionPatch],
    encoder: Encoder | None,
    config: LdpoConfig,
) -> tuple[ClusterState, list[ClusterState], Encoder]:
    """Run the categorization loop; returns (final state, history, encoder).

    k is selected by silhouette at iteration 0 and then frozen, so the
    adjacent-iteration purity/NMI agreement that drives convergence is
    well-defined.
    """
    if len(patches) < config.min_patches:
        raise ValidationError(
            f"need at least {config.min_patches} patches, got {len(patches)}"
        )
    x = patches_to_matrix(patches)
    if encoder is None:
        encoder = MlpEncoder(
            input_dim=x.shape[1], hidden_dim=config.encoder.hidden_dim, seed=config.seed
        )
    history: list[ClusterState] = []
    prev: Optional[np.ndarray] = None
    k = 0
    for iteration in range(config.max_iter + 1):
        feats = l2_normalize(encoder.encode(x))
        if iteration == 0:
            k = select_k(
                feats, config.k_range, seed=config.seed,
                max_iter=config.kmeans_max_iter, tol=config.kmeans_tol,
                restarts=config.kmeans_restarts,
            )
        km = kmeans_fit(
            feats, k, seed=config.seed + iteration,
            max_iter=config.kmeans_max_iter, tol=config.kmeans_tol,
            restarts=config.kmeans_restarts,
        )
        labels = km.assignments
        centroids = km.centroids
        purity_vs_prev = nmi_vs_prev = None
        if prev is not None:
            mapping = match_clusters(labels, prev, k)
            labels = mapping[labels]
            relabeled = np.empty_like(centroids)
            relabeled[mapping] = centroids
            centroids = relabeled
            purity_vs_prev = purity(labels, prev)
            nmi_vs_prev = nmi(labels, prev)
        train_idx, _val_idx, test_idx = split_for_iteration(
            patches, seed=config.seed * 100003 + iteration
        )
        if hasattr(encoder, "ensure_head"):
            encoder.ensure_head(k)
        try:
            encoder.train(
                x[train_idx], labels[train_idx],
                epochs=config.encoder.epochs,
                learning_rate=config.encoder.learning_rate,
                batch_size=config.encoder.batch_size,
            )
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"iteration {iteration}: {exc}") from exc
        test_acc = float(np.mean(encoder.predict(x[test_idx]) == labels[test_idx]))
        state = ClusterState(
            iteration=iteration, k=k, assignments=labels, centroids=centroids,
            purity_vs_prev=purity_vs_prev, nmi_vs_prev=nmi_vs_prev,
            test_top1_accuracy=test_acc,
        )
        history.append(state)
        prev = labels
        agreement = state.agreement()
        if agreement is not None and agreement >= config.threshold:
            break
    return history[-1], history, encoder


def write_history_csv(path: str | os.PathLike, history: list[ClusterState]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "k", "purity", "nmi", "test_top1"])
        for s in history:
            writer.writerow(
                [
                    s.iteration, s.k,
                    "" if s.purity_vs_prev is None else f"{s.purity_vs_prev:.6f}",
                    "" if s.nmi_vs_prev is None else f"{s.nmi_vs_prev:.6f}",
                    f"{s.test_top1_accuracy:.6f}",
                ]
            )


def write_pseudo_labels_csv(
    path: str | os.PathLike, patches: list[LesionPatch], assignments: np.ndarray
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "study_id", "image_id", "pseudo_label"])
        for patch, label in zip(patches, assignments):
            writer.writerow([*patch.source, int(label)])


def read_pseudo_labels_csv(path: str | os.PathLike) -> dict[tuple[str, str, str], int]:
    out: dict[tuple[str, str, str], int] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[(row["patient_id"], row["study_id"], row["image_id"])] = int(row["pseudo_label"])
    return out
