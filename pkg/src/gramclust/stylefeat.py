"""Style descriptors of feature maps: Gram blocks, MeanVar and pooled features.

A feature map is an ``[M, C]`` matrix: ``M`` spatial positions (rows) by
``C`` channels. Each descriptor is built per layer, L2-normalized per layer,
and concatenated in layer order. Blocks whose raw vector is exactly zero stay
zero and are counted instead of raising.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from gramclust import kernels
from gramclust.tensor import tensor_load, tensor_save

logger = logging.getLogger(__name__)

STYLES = ("gram", "meanvar", "penultimate")


class FeatureMap(NamedTuple):
    layer_id: int
    values: np.ndarray  # [M, C]


@dataclass
class StyleVector:
    blocks: list[tuple[int, np.ndarray]]
    zero_blocks: int = 0

    @property
    def concat(self) -> np.ndarray:
        return np.concatenate([b for _, b in self.blocks])

    @property
    def dim(self) -> int:
        return sum(b.size for _, b in self.blocks)


@dataclass
class StyleLayout:
    """Block structure shared by a matrix of style vectors (one row per sample)."""

    kind: str
    layer_ids: list[int]
    block_sizes: list[int]
    zero_blocks: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def offsets(self) -> list[int]:
        return [int(o) for o in np.concatenate([[0], np.cumsum(self.block_sizes)])[:-1]]

    @property
    def dim(self) -> int:
        return int(sum(self.block_sizes))

    def block_slices(self) -> list[slice]:
        return [slice(o, o + s) for o, s in zip(self.offsets, self.block_sizes)]

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "layer_ids": list(self.layer_ids),
            "block_sizes": list(self.block_sizes),
            "block_offsets": self.offsets,
            "dim": self.dim,
            "zero_blocks": self.zero_blocks,
            **self.extra,
        }


def _check_map(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
        raise ValueError(f"feature map must be [M>=1, C>=1], got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("feature map has non-finite entries")
    return v


def _normalize_rows(blocks: np.ndarray) -> tuple[np.ndarray, int]:
    """L2-normalize each row; all-zero rows are left as zeros and counted."""
    norms = np.sqrt(np.einsum("ij,ij->i", blocks, blocks))
    zero = norms == 0.0
    out = np.zeros_like(blocks)
    out[~zero] = blocks[~zero] / norms[~zero, None]
    return out, int(zero.sum())


def gram(fm) -> np.ndarray:
    """Channel second-moment matrix phi^T phi / M of one feature map."""
    values = fm.values if isinstance(fm, FeatureMap) else fm
    v = _check_map(values)
    return kernels.batch_gram(v[None])[0]


def _check_layers(fms: Sequence[FeatureMap]) -> None:
    if not fms:
        raise ValueError("need at least one feature map")
    ids = [fm.layer_id for fm in fms]
    if len(set(ids)) != len(ids):
        raise ValueError(f"layers must be distinct, got {ids}")


def _warn_zero(kind, count):
    if count:
        logger.warning("%s: %d all-zero block(s) left as zero vectors", kind, count)


def style_vector(fms: Sequence[FeatureMap]) -> StyleVector:
    _check_layers(fms)
    blocks, zeros = [], 0
    for fm in fms:
        g = gram(fm)
        vec, z = _normalize_rows(g.reshape(1, -1))
        blocks.append((fm.layer_id, vec[0]))
        zeros += z
    _warn_zero("gram", zeros)
    return StyleVector(blocks, zeros)


def _meanvar_block(v: np.ndarray) -> np.ndarray:
    # population variance; a single position gives zero variance
    return np.concatenate([v.mean(axis=-2), v.var(axis=-2)], axis=-1)


def meanvar_vector(fms: Sequence[FeatureMap]) -> StyleVector:
    _check_layers(fms)
    blocks, zeros = [], 0
    for fm in fms:
        raw = _meanvar_block(_check_map(fm.values))
        vec, z = _normalize_rows(raw.reshape(1, -1))
        blocks.append((fm.layer_id, vec[0]))
        zeros += z
    _warn_zero("meanvar", zeros)
    return StyleVector(blocks, zeros)


def penultimate_vector(fm: FeatureMap) -> StyleVector:
    raw = _check_map(fm.values).mean(axis=0)
    vec, z = _normalize_rows(raw.reshape(1, -1))
    _warn_zero("penultimate", z)
    return StyleVector([(fm.layer_id, vec[0])], z)


def style_matrix(maps: dict[int, np.ndarray], kind: str = "gram") -> tuple[np.ndarray, StyleLayout]:
    """Batched descriptors for many images.

    ``maps`` sends layer id to an ``[N, M, C]`` array of feature maps. For
    ``kind="penultimate"`` exactly one layer is expected. Returns ``[N, D]``
    float64 rows and their block layout.
    """
    if kind not in STYLES:
        raise ValueError(f"unknown style {kind!r}; expected one of {STYLES}")
    if not maps:
        raise ValueError("need at least one layer")
    if kind == "penultimate" and len(maps) != 1:
        raise ValueError("penultimate style takes exactly one layer")
    layer_ids = list(maps)
    parts, sizes, zeros = [], [], 0
    for lid in layer_ids:
        v = np.asarray(maps[lid], dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"layer {lid}: expected [N, M, C], got {v.shape}")
        n = v.shape[0]
        if kind == "gram":
            raw = kernels.batch_gram(v).reshape(n, -1)
        elif kind == "meanvar":
            raw = _meanvar_block(v)
        else:
            raw = v.mean(axis=1)
        block, z = _normalize_rows(raw)
        parts.append(block)
        sizes.append(block.shape[1])
        zeros += z
    _warn_zero(kind, zeros)
    return np.concatenate(parts, axis=1), StyleLayout(kind, layer_ids, sizes, zeros)


def save_style_matrix(directory, name: str, matrix: np.ndarray, layout: StyleLayout) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensor_save(matrix, directory / f"{name}.grtn")
    meta = layout.to_json()
    meta["rows"] = int(matrix.shape[0])
    (directory / f"{name}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory / f"{name}.grtn"


def load_style_matrix(directory, name: str) -> tuple[np.ndarray, StyleLayout]:
    directory = Path(directory)
    meta = json.loads((directory / f"{name}.json").read_text())
    layout = StyleLayout(meta["kind"], meta["layer_ids"], meta["block_sizes"], meta.get("zero_blocks", 0))
    return tensor_load(directory / f"{name}.grtn").astype(np.float64), layout
