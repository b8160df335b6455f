"""k-means partitioning of (projected) style vectors into pseudo-environments.

Cluster indices are 0-based throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gramclust import kernels
from gramclust.tensor import seeded_rng, tensor_load, tensor_save


class InsufficientPointsError(ValueError):
    pass


@dataclass
class Clustering:
    k: int
    centroids: np.ndarray  # [k, dim] float64
    assignments: np.ndarray  # [n] int64
    inertia: float
    iterations_run: int
    history: list[float] = field(default_factory=list)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tensor_save(self.centroids, directory / "centroids.grtn")
        meta = {
            "k": self.k,
            "centroids": "centroids.grtn",
            "assignments": [int(a) for a in self.assignments],
            "inertia": self.inertia,
            "iterations_run": self.iterations_run,
        }
        (directory / "clustering.json").write_text(json.dumps(meta, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "Clustering":
        directory = Path(directory)
        meta = json.loads((directory / "clustering.json").read_text())
        cen = tensor_load(directory / meta["centroids"]).astype(np.float64)
        return cls(int(meta["k"]), cen, np.asarray(meta["assignments"], dtype=np.int64),
                   float(meta["inertia"]), int(meta["iterations_run"]))


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[int(rng.integers(n))]]
    d2 = np.einsum("ij,ij->i", x - centers[0], x - centers[0])
    for _ in range(1, k):
        total = d2.sum()
        # total > 0 is guaranteed by the distinct-point check
        idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        idx = min(idx, n - 1)
        centers.append(x[idx])
        diff = x - x[idx]
        d2 = np.minimum(d2, np.einsum("ij,ij->i", diff, diff))
    return np.array(centers)


def _repair_empty(labels, d2, k):
    """Give every empty cluster the point farthest from its current centroid."""
    counts = np.bincount(labels, minlength=k)
    moved = []
    for j in np.flatnonzero(counts == 0):
        donors = counts[labels] > 1
        cand = np.where(donors, d2, -1.0)
        i = int(np.argmax(cand))
        counts[labels[i]] -= 1
        labels[i] = j
        counts[j] += 1
        d2[i] = 0.0
        moved.append(i)
    return moved


def _means(x, labels, k):
    sums, counts = kernels.cluster_sums(x, labels, k)
    return sums / counts[:, None]


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float) -> Clustering:
    centroids = _kmeans_pp(x, k, rng)
    labels, d2 = kernels.assign_nearest(x, centroids)
    for i in _repair_empty(labels, d2, k):
        centroids[labels[i]] = x[i]
    inertia = float(d2.sum())
    history = [inertia]
    it = 0
    while it < max_iter:
        it += 1
        centroids = _means(x, labels, k)
        labels, d2 = kernels.assign_nearest(x, centroids)
        # a stolen point becomes its new cluster's centroid, so inertia only drops
        for i in _repair_empty(labels, d2, k):
            centroids[labels[i]] = x[i]
        new = float(d2.sum())
        history.append(new)
        improvement = inertia - new
        inertia = new
        if inertia == 0.0 or improvement <= tol * history[-2]:
            break
    return Clustering(k, centroids, labels, inertia, it, history)


def kmeans(vecs, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6, n_init: int = 10) -> Clustering:
    """Lloyd's algorithm from k-means++ seeding, best of ``n_init`` restarts.

    Each restart stops once the relative inertia improvement drops below
    ``tol`` or after ``max_iter`` update steps. The returned ``history`` (of
    the winning restart) holds the inertia after the initial assignment and
    after every subsequent assignment step. Restart ``r`` draws from RNG
    stream ``r`` of ``seed``; ties keep the earliest restart.
    """
    x = np.ascontiguousarray(vecs, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("vectors must form an [n, dim] matrix")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    if np.unique(x, axis=0).shape[0] < k:
        raise InsufficientPointsError(f"insufficient distinct points for k={k}")
    best = None
    for r in range(n_init):
        c = _lloyd(x, k, seeded_rng(seed, r), max_iter, tol)
        if best is None or c.inertia < best.inertia:
            best = c
    return best


def sse(vecs, labels, centroids) -> float:
    x = np.asarray(vecs, dtype=np.float64)
    diff = x - np.asarray(centroids)[np.asarray(labels)]
    return float(np.einsum("ij,ij->", diff, diff))


def pairwise_objective(vecs, clustering_or_labels, block: int = 1024) -> float:
    """Sum over clusters of (1/|C|) * sum over ordered pairs in C of squared distances."""
    x = np.asarray(vecs, dtype=np.float64)
    labels = getattr(clustering_or_labels, "assignments", clustering_or_labels)
    labels = np.asarray(labels)
    total = 0.0
    for c in np.unique(labels):
        pts = x[labels == c]
        sq = np.einsum("ij,ij->i", pts, pts)
        acc = 0.0
        for a in range(0, len(pts), block):
            pa = pts[a : a + block]
            dist = sq[a : a + block, None] + sq[None, :] - 2.0 * (pa @ pts.T)
            acc += float(np.maximum(dist, 0.0).sum())
        total += acc / len(pts)
    return total


def assign_to_centroids(clustering: Clustering, vecs) -> np.ndarray:
    """Nearest centroid per vector; ties go to the lowest cluster index."""
    x = np.asarray(vecs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != clustering.centroids.shape[1]:
        raise ValueError(f"dimension mismatch: centroids have dim {clustering.centroids.shape[1]}")
    labels, _ = kernels.assign_nearest(x, clustering.centroids)
    return labels
