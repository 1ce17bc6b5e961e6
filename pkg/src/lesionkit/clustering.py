"""K-means with k-means++ seeding, silhouette model selection, and partition
agreement metrics (purity, normalized mutual information)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lesionkit.errors import ValidationError

DEFAULT_RESTARTS = 10


def contingency(labels_a: np.ndarray, labels_b: np.ndarray) -> np.ndarray:
    """Joint count table; rows index clusters of a, columns clusters of b."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ValidationError("partitions must be equal-length 1-D with n >= 1")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def purity(labels_a, labels_b) -> float:
    """Fraction of points whose predicted cluster majority matches the reference.

    Asymmetric: labels_a is the prediction, labels_b the reference.
    """
    table = contingency(labels_a, labels_b)
    return float(table.max(axis=1).sum() / table.sum())


def nmi(labels_a, labels_b) -> float:
    """Mutual information normalized by sqrt(H(a) * H(b)), natural logs.

    Both partitions trivial (single cluster) gives 1.0; exactly one trivial
    gives 0.0.
    """
    table = contingency(labels_a, labels_b).astype(np.float64)
    n = table.sum()
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    ha = float(-np.sum(pa * np.log(pa, where=pa > 0, out=np.zeros_like(pa))))
    hb = float(-np.sum(pb * np.log(pb, where=pb > 0, out=np.zeros_like(pb))))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    pj = table / n
    outer = pa[:, None] * pb[None, :]
    nz = pj > 0
    mi = float(np.sum(pj[nz] * np.log(pj[nz] / outer[nz])))
    return float(mi / np.sqrt(ha * hb))


@dataclass
class KMeansResult:
    assignments: np.ndarray   # (n,) int64 cluster ids in [0, k)
    centroids: np.ndarray     # (k, d)
    inertia: float
    n_iter: int
    inertia_trace: list[float]


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = x[rng.integers(n)]
            continue
        probs = d2 / total
        centroids[j] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((x - centroids[j]) ** 2, axis=1))
    return centroids


def _lloyd(
    x: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float
) -> tuple[np.ndarray, np.ndarray, float, int, list[float]]:
    k = centroids.shape[0]
    trace: list[float] = []
    assignments = np.zeros(x.shape[0], dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = np.sum((x[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        assignments = np.argmin(d2, axis=1)
        # revive empty clusters one at a time with the farthest point whose
        # own cluster can spare it, so no donor cluster is emptied in turn
        counts = np.bincount(assignments, minlength=k)
        for j in range(k):
            if counts[j] > 0:
                continue
            dist_own = d2[np.arange(x.shape[0]), assignments].copy()
            dist_own[counts[assignments] <= 1] = -np.inf
            far = int(np.argmax(dist_own))
            counts[assignments[far]] -= 1
            assignments[far] = j
            counts[j] = 1
            centroids[j] = x[far]
        new_centroids = np.empty_like(centroids)
        for j in range(k):
            new_centroids[j] = x[assignments == j].mean(axis=0)
        movement = float(np.sqrt(np.sum((new_centroids - centroids) ** 2, axis=1)).max())
        centroids = new_centroids
        inertia = float(
            np.sum((x - centroids[assignments]) ** 2)
        )
        trace.append(inertia)
        if movement < tol:
            break
    return assignments, centroids, trace[-1], n_iter, trace


def _refine_single_moves(
    x: np.ndarray, assignments: np.ndarray, centroids: np.ndarray, max_passes: int = 50
) -> tuple[np.ndarray, np.ndarray, float]:
    """Greedy single-point move improvement after Lloyd has converged.

    Moving x from cluster a (size na) to b changes the inertia by
    nb/(nb+1)*||x-cb||^2 - na/(na-1)*||x-ca||^2; applying negative moves
    escapes Lloyd fixed points that are not single-swap optimal.
    """
    k = centroids.shape[0]
    counts = np.bincount(assignments, minlength=k).astype(np.float64)
    sums = np.zeros_like(centroids)
    np.add.at(sums, assignments, x)
    for _ in range(max_passes):
        improved = False
        for i in range(x.shape[0]):
            a = int(assignments[i])
            if counts[a] <= 1:
                continue
            d = np.sum((centroids - x[i]) ** 2, axis=1)
            removal_gain = counts[a] / (counts[a] - 1) * d[a]
            add_cost = counts / (counts + 1) * d
            add_cost[a] = np.inf
            b = int(np.argmin(add_cost))
            if add_cost[b] < removal_gain - 1e-12:
                sums[a] -= x[i]; counts[a] -= 1; centroids[a] = sums[a] / counts[a]
                sums[b] += x[i]; counts[b] += 1; centroids[b] = sums[b] / counts[b]
                assignments[i] = b
                improved = True
        if not improved:
            break
    inertia = float(np.sum((x - centroids[assignments]) ** 2))
    return assignments, centroids, inertia


def kmeans_fit(
    features,
    k: int,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
    restarts: int = DEFAULT_RESTARTS,
) -> KMeansResult:
    """Best of `restarts` k-means++/Lloyd runs by inertia, with a
    single-point refinement pass after Lloyd converges.

    Every returned cluster is nonempty; an empty cluster during iteration is
    re-seeded to the point currently farthest from its assigned centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        x = np.atleast_2d(x)
    n = x.shape[0]
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k > n:
        raise ValidationError(f"k = {k} exceeds the number of points ({n})")
    rng = np.random.default_rng(seed)
    best: KMeansResult | None = None
    for _ in range(max(1, restarts)):
        init = _kmeanspp_init(x, k, rng)
        assignments, centroids, inertia, n_iter, trace = _lloyd(x, init.copy(), max_iter, tol)
        if k > 1:
            assignments, centroids, inertia = _refine_single_moves(x, assignments, centroids)
            if inertia < trace[-1] - 1e-12:
                trace.append(inertia)
        if best is None or inertia < best.inertia - 1e-12:
            best = KMeansResult(assignments, centroids, inertia, n_iter, trace)
    assert best is not None
    return best


def silhouette_score(x: np.ndarray, assignments: np.ndarray) -> float:
    """Mean silhouette coefficient; singleton clusters score 0."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(assignments)
    n = x.shape[0]
    dist = np.sqrt(np.maximum(
        np.sum(x ** 2, axis=1)[:, None] + np.sum(x ** 2, axis=1)[None, :] - 2.0 * (x @ x.T),
        0.0,
    ))
    unique = np.unique(labels)
    scores = np.zeros(n, dtype=np.float64)
    cluster_masks = {int(c): labels == c for c in unique}
    sizes = {c: int(m.sum()) for c, m in cluster_masks.items()}
    for i in range(n):
        own = int(labels[i])
        if sizes[own] <= 1:
            continue
        a = dist[i, cluster_masks[own]].sum() / (sizes[own] - 1)
        b = np.inf
        for c, mask in cluster_masks.items():
            if c == own:
                continue
            b = min(b, dist[i, mask].mean())
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def select_k(
    features,
    k_range: tuple[int, int] = (2, 10),
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
    restarts: int = DEFAULT_RESTARTS,
) -> int:
    """Candidate k with the highest mean silhouette; ties favor smaller k."""
    x = np.asarray(features, dtype=np.float64)
    k_min, k_max = k_range
    if k_min < 2 or k_max < k_min:
        raise ValidationError(f"invalid k range {k_range}")
    if k_max >= x.shape[0]:
        raise ValidationError(f"k_max = {k_max} must be < number of points ({x.shape[0]})")
    best_k = k_min
    best_score = -np.inf
    for k in range(k_min, k_max + 1):
        result = kmeans_fit(x, k, seed=seed, max_iter=max_iter, tol=tol, restarts=restarts)
        score = silhouette_score(x, result.assignments)
        if score > best_score:
            best_score = score
            best_k = k
    return best_k


def match_clusters(labels: np.ndarray, reference: np.ndarray, k: int) -> np.ndarray:
    """Greedy maximum-overlap matching of `labels` ids onto `reference` ids.

    Returns a (k,) mapping array m with m[old_id] = new_id; apply it as
    m[labels]. Both partitions use ids in [0, k); unmatched ids receive the
    remaining spare ids.
    """
    labels = np.asarray(labels)
    reference = np.asarray(reference)
    overlap = np.zeros((k, k), dtype=np.int64)
    np.add.at(overlap, (labels, reference), 1)
    mapping = -np.ones(k, dtype=np.int64)
    used = np.zeros(k, dtype=bool)
    flat = np.argsort(-overlap, axis=None, kind="stable")
    for idx in flat:
        src, dst = divmod(int(idx), k)
        if mapping[src] == -1 and not used[dst]:
            mapping[src] = dst
            used[dst] = True
    spares = iter([c for c in range(k) if not used[c]])
    for src in range(k):
        if mapping[src] == -1:
            mapping[src] = next(spares)
    return mapping
