"""Random ±1 projections of style vectors.

Sign entries are a pure function of ``(seed, row, col)`` and are generated a
chunk of rows at a time, so the full ``l0 x D`` matrix never has to exist.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gramclust import kernels
from gramclust.tensor import derive_seed, seeded_rng

ROW_CHUNK = 256


def default_projection_dim(n: int) -> int:
    """floor(100 * ln n), never below 8."""
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    return max(8, int(math.floor(100.0 * math.log(n))))


@dataclass(frozen=True)
class ProjectionMatrix:
    rows: int
    cols: int
    seed: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"projection needs rows, cols >= 1, got {self.rows}x{self.cols}")

    def sign_block(self, row0: int, nrows: int) -> np.ndarray:
        return kernels.sign_rows(self.seed, row0, nrows, self.cols)

    def dense(self) -> np.ndarray:
        """Materialize all signs. Meant for tests and small matrices."""
        return self.sign_block(0, self.rows)

    def project(self, f) -> np.ndarray:
        """(1/sqrt(l0)) P f for a vector ``[D]`` or a row matrix ``[N, D]``."""
        x = np.asarray(f, dtype=np.float64)
        single = x.ndim == 1
        x2 = x.reshape(1, -1) if single else x
        if x2.shape[1] != self.cols:
            raise ValueError(f"dimension mismatch: projection expects {self.cols}, got {x2.shape[1]}")
        out = np.empty((x2.shape[0], self.rows), dtype=np.float64)
        for r0 in range(0, self.rows, ROW_CHUNK):
            nr = min(ROW_CHUNK, self.rows - r0)
            out[:, r0 : r0 + nr] = x2 @ self.sign_block(r0, nr).T
        out /= math.sqrt(self.rows)
        return out[0] if single else out


@dataclass
class BlockProjection:
    """One independent projection per layer block, seeds derived from a master seed."""

    master_seed: int
    out_dim: int
    layer_ids: list[int]
    block_sizes: list[int]

    @property
    def matrices(self) -> list[ProjectionMatrix]:
        return [
            ProjectionMatrix(self.out_dim, d, derive_seed(self.master_seed, i))
            for i, d in enumerate(self.block_sizes)
        ]

    def project(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != sum(self.block_sizes):
            raise ValueError(f"dimension mismatch: expected {sum(self.block_sizes)}, got {x.shape[1]}")
        parts, off = [], 0
        for p in self.matrices:
            parts.append(p.project(x[:, off : off + p.cols]))
            off += p.cols
        return np.concatenate(parts, axis=1)

    def to_json(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "out_dim": self.out_dim,
            "layer_ids": list(self.layer_ids),
            "block_sizes": list(self.block_sizes),
            "block_seeds": [p.seed for p in self.matrices],
        }

    @classmethod
    def from_json(cls, meta: dict) -> "BlockProjection":
        return cls(int(meta["master_seed"]), int(meta["out_dim"]), list(meta["layer_ids"]), list(meta["block_sizes"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "BlockProjection":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class DistortionReport:
    epsilon: float
    pairs_checked: int
    pairs_within_bound: int

    @property
    def fraction_within(self) -> float:
        return self.pairs_within_bound / self.pairs_checked if self.pairs_checked else 1.0


def _decode_pairs(idx: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    # idx enumerates pairs i < j row by row: row i holds n - 1 - i pairs
    starts = np.concatenate([[0], np.cumsum(np.arange(n - 1, 0, -1))])
    i = np.searchsorted(starts, idx, side="right") - 1
    j = idx - starts[i] + i + 1
    return i, j


def distortion_check(p, vecs, epsilon: float, max_pairs: int, seed: int = 0) -> DistortionReport:
    """Count sampled pairs whose projected distance sits in [(1-eps)d, (1+eps)d].

    ``p`` is a ProjectionMatrix or BlockProjection. Pairs at distance zero
    always count as within bound.
    """
    x = np.asarray(vecs, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two vectors")
    total = n * (n - 1) // 2
    if total <= max_pairs:
        idx = np.arange(total)
    else:
        idx = np.sort(seeded_rng(seed).choice(total, size=max_pairs, replace=False))
    i, j = _decode_pairs(idx, n)
    y = p.project(x)
    d = np.linalg.norm(x[i] - x[j], axis=1)
    dt = np.linalg.norm(y[i] - y[j], axis=1)
    ok = (d == 0.0) | (((1 - epsilon) * d <= dt) & (dt <= (1 + epsilon) * d))
    return DistortionReport(float(epsilon), int(idx.size), int(ok.sum()))
