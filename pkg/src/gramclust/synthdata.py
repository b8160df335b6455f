"""Seeded synthetic images with planted class / environment structure.

Each image is the sum of

* a class shape: an elongated Gaussian blob whose orientation depends on the
  class, drawn identically in every channel at a random position;
* an environment texture: a high-frequency grating with random phase whose
  orientation and cross-channel mixing vector depend on the environment;
* i.i.d. Gaussian pixel noise.

Within train/val (and ``test_ind``) a sample's environment is its
class-aligned one (``k mod E``) with probability ``majority_frac`` and one of
the others uniformly otherwise. ``test_shift`` draws environments uniformly.

With ``variant="mixing"`` all environments share one grating orientation and
differ only by the signs of their channel mixing vectors, so per-channel means
and variances are identical across environments by construction. That
variant also rescales each image by a log-normal contrast factor
(``contrast_jitter``), a nuisance that moves the direction of a normalized
mean/variance vector but not of a normalized Gram vector.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from gramclust.tensor import derive_seed, seeded_rng, tensor_load, tensor_save

SPLITS = ("train", "val", "test_ind", "test_shift")
VARIANTS = ("default", "mixing")


class GroupCoverageError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_train: int = 4000
    n_val: int = 1000
    n_test: int = 2000
    image_size: int = 16
    channels: int = 3
    n_classes: int = 2
    n_envs: int = 2
    majority_frac: float = 0.95
    class_signal_strength: float = 0.7
    env_texture_strength: float = 1.0
    noise_std: float = 0.5
    grating_freq: float = 0.35
    variant: str = "default"
    contrast_jitter: float | None = None  # log-normal sigma; None: 0.5 for mixing, 0 otherwise
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2 or self.n_envs < 2:
            raise ValueError("need n_classes >= 2 and n_envs >= 2")
        if not 1.0 / self.n_envs - 1e-12 <= self.majority_frac <= 1.0:
            raise ValueError(f"majority_frac must lie in [1/E, 1], got {self.majority_frac}")
        if self.channels != 3:
            raise ValueError("synthetic images have exactly 3 channels")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.variant == "mixing" and self.n_envs > 4:
            raise ValueError("the mixing variant supports at most 4 environments")
        if self.image_size < 9:
            raise ValueError("image_size must be >= 9")
        if self.contrast_jitter is None:
            self.contrast_jitter = 0.5 if self.variant == "mixing" else 0.0
        if self.contrast_jitter < 0:
            raise ValueError("contrast_jitter must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SynthConfig field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class GroupedDataset:
    images: np.ndarray  # [N, C, H, W] float32
    y: np.ndarray  # [N] class labels, 0-based
    n_classes: int
    e: np.ndarray | None = None  # true environments, 0-based
    n_envs: int | None = None
    pseudo_e: np.ndarray | None = None
    n_pseudo: int | None = None
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.y)

    def groups(self, use_pseudo: bool = False) -> tuple[np.ndarray, int]:
        """Flat group index ``env * K + class`` and the number of group slots."""
        env, n_env = self._envs(use_pseudo)
        return env * self.n_classes + self.y, n_env * self.n_classes

    def _envs(self, use_pseudo):
        if use_pseudo:
            if self.pseudo_e is None:
                raise ValueError(f"{self.split}: pseudo environments requested but absent")
            return self.pseudo_e, self.n_pseudo
        if self.e is None:
            raise ValueError(f"{self.split}: true environments requested but absent")
        return self.e, self.n_envs

    def with_pseudo(self, pseudo_e, n_pseudo: int) -> "GroupedDataset":
        pseudo_e = np.asarray(pseudo_e, dtype=np.int64)
        if pseudo_e.shape != self.y.shape:
            raise ValueError("pseudo labels must align with samples")
        return GroupedDataset(self.images, self.y, self.n_classes, self.e, self.n_envs,
                              pseudo_e, n_pseudo, self.split, dict(self.meta))

    def subset(self, idx) -> "GroupedDataset":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return GroupedDataset(self.images[idx], self.y[idx], self.n_classes, pick(self.e), self.n_envs,
                              pick(self.pseudo_e), self.n_pseudo, self.split, dict(self.meta))


def group_counts(ds: GroupedDataset, use_pseudo: bool = False) -> dict[tuple[int, int], int]:
    """Exact (env, class) -> count table, zero cells included."""
    env, n_env = ds._envs(use_pseudo)
    table = np.zeros((n_env, ds.n_classes), dtype=np.int64)
    np.add.at(table, (env, ds.y), 1)
    return {(e, k): int(table[e, k]) for e in range(n_env) for k in range(ds.n_classes)}


def _mixing_vectors(cfg: SynthConfig) -> np.ndarray:
    if cfg.variant == "mixing":
        signs = np.array([[1, 1, 1], [1, -1, 1], [1, 1, -1], [1, -1, -1]], dtype=np.float64)
        return signs[: cfg.n_envs] / np.sqrt(3.0)
    # distinct unit vectors with all channels active
    rng = seeded_rng(derive_seed(cfg.seed, 0xE17), 0)
    base = np.array([[1.0, 0.8, -0.5], [-0.5, 1.0, 0.8], [0.8, -0.5, 1.0]])
    vecs = [base[e % 3] * (1 if e < 3 else -1) for e in range(min(cfg.n_envs, 6))]
    while len(vecs) < cfg.n_envs:
        vecs.append(rng.normal(size=3))
    m = np.array(vecs)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _orientations(cfg: SynthConfig) -> np.ndarray:
    if cfg.variant == "mixing":
        return np.full(cfg.n_envs, np.pi / 4)
    return np.pi * np.arange(cfg.n_envs) / cfg.n_envs


def _env_probs(cfg: SynthConfig, rho: float) -> np.ndarray:
    """[K, E] matrix of P(env | class)."""
    k, e = cfg.n_classes, cfg.n_envs
    p = np.full((k, e), (1.0 - rho) / (e - 1))
    p[np.arange(k), np.arange(k) % e] = rho
    return p


def _render(cfg: SynthConfig, y: int, env: int, rng: np.random.Generator, mix, orient) -> np.ndarray:
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    # class shape
    theta = np.pi * y / cfg.n_classes
    cy, cx = rng.uniform(4.0, s - 5.0, size=2)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    blob = np.exp(-0.5 * ((u / 2.6) ** 2 + (v / 0.9) ** 2))
    # environment texture
    phase = rng.uniform(0.0, 2.0 * np.pi)
    a = orient[env]
    grating = np.cos(2.0 * np.pi * cfg.grating_freq * (xx * np.cos(a) + yy * np.sin(a)) + phase)
    img = cfg.class_signal_strength * blob[None] + cfg.env_texture_strength * mix[env][:, None, None] * grating[None]
    img += cfg.noise_std * rng.standard_normal((cfg.channels, s, s))
    if cfg.contrast_jitter:
        # per-image contrast: rescales mean and variance differently, leaves normalized Gram alone
        img *= np.exp(cfg.contrast_jitter * rng.standard_normal())
    return img


def generate_split(cfg: SynthConfig, split: str, n: int, rho: float | None = None) -> GroupedDataset:
    split_id = SPLITS.index(split) if split in SPLITS else len(SPLITS)
    rho = cfg.majority_frac if rho is None else rho
    split_seed = derive_seed(cfg.seed, split_id)
    rng = seeded_rng(split_seed, 2**63)
    y = rng.permutation(np.arange(n) % cfg.n_classes)
    probs = _env_probs(cfg, rho)
    mix, orient = _mixing_vectors(cfg), _orientations(cfg)
    images = np.empty((n, cfg.channels, cfg.image_size, cfg.image_size), dtype=np.float32)
    envs = np.empty(n, dtype=np.int64)
    for i in range(n):
        srng = seeded_rng(split_seed, i)
        envs[i] = int(srng.choice(cfg.n_envs, p=probs[y[i]]))
        images[i] = _render(cfg, int(y[i]), int(envs[i]), srng, mix, orient)
    ds = GroupedDataset(images, y.astype(np.int64), cfg.n_classes, envs, cfg.n_envs, split=split,
                        meta={"majority_frac": rho})
    required = probs.T > 0  # [E, K]
    counts = group_counts(ds)
    missing = [g for g, c in counts.items() if c == 0 and required[g]]
    if missing:
        raise GroupCoverageError(f"{split}: {n} samples leave group(s) {missing} empty; increase the counts")
    return ds


def generate(cfg: SynthConfig) -> dict[str, GroupedDataset]:
    """train, val and test_ind at the configured correlation; test_shift uncorrelated."""
    return {
        "train": generate_split(cfg, "train", cfg.n_train),
        "val": generate_split(cfg, "val", cfg.n_val),
        "test_ind": generate_split(cfg, "test_ind", cfg.n_test),
        "test_shift": generate_split(cfg, "test_shift", cfg.n_test, rho=1.0 / cfg.n_envs),
    }


def save_dataset(ds: GroupedDataset, directory, cfg: SynthConfig | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensor_save(ds.images, directory / "images.grtn")
    with open(directory / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["index", "y", "e", "split"] + (["pseudo_e"] if ds.pseudo_e is not None else [])
        w.writerow(header)
        for i in range(len(ds)):
            row = [i, int(ds.y[i]), "" if ds.e is None else int(ds.e[i]), ds.split]
            if ds.pseudo_e is not None:
                row.append(int(ds.pseudo_e[i]))
            w.writerow(row)
    manifest = {
        "split": ds.split,
        "n": len(ds),
        "n_classes": ds.n_classes,
        "n_envs": ds.n_envs,
        "n_pseudo": ds.n_pseudo,
        "meta": ds.meta,
        "config": asdict(cfg) if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(directory) -> GroupedDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    images = tensor_load(directory / "images.grtn")
    with open(directory / "labels.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    y = np.array([int(r["y"]) for r in rows], dtype=np.int64)
    e = None if not rows or rows[0]["e"] == "" else np.array([int(r["e"]) for r in rows], dtype=np.int64)
    pseudo = None
    if rows and "pseudo_e" in rows[0]:
        pseudo = np.array([int(r["pseudo_e"]) for r in rows], dtype=np.int64)
    if len(y) != images.shape[0]:
        raise ValueError(f"{directory}: labels.csv has {len(y)} rows but images hold {images.shape[0]}")
    return GroupedDataset(images, y, manifest["n_classes"], e, manifest["n_envs"], pseudo,
                          manifest.get("n_pseudo"), manifest["split"], manifest.get("meta") or {})
