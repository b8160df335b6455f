"""A three-layer ReLU convnet with hand-written backprop and SGD with momentum.

Architecture (input ``[C, H, W]``)::

    conv3x3(C->8) relu  conv3x3(8->16) relu  conv3x3(16->32) relu
    global-average-pool  linear(32->K)

Convolutions use stride 1 and zero padding 1. Layer ids 1..3 name the
post-ReLU conv outputs. Internally activations are NHWC and convolutions run
as im2col matrix products; conv weights are stored ``[3, 3, C_in, C_out]``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gramclust import kernels
from gramclust.stylefeat import FeatureMap
from gramclust.tensor import seeded_rng, tensor_load, tensor_save

CONV_CHANNELS = (8, 16, 32)
LAYER_IDS = (1, 2, 3)
PARAM_NAMES = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b", "fc.w", "fc.b")
ARCH = "conv3x3(C,8)-relu-conv3x3(8,16)-relu-conv3x3(16,32)-relu-gap-linear(32,K)"


@dataclass
class ConvNet:
    params: dict[str, np.ndarray]
    in_channels: int
    n_classes: int

    @property
    def dtype(self):
        return self.params["fc.w"].dtype

    def copy(self) -> "ConvNet":
        return ConvNet({k: v.copy() for k, v in self.params.items()}, self.in_channels, self.n_classes)

    def arch_hash(self) -> str:
        desc = f"{ARCH}|C={self.in_channels}|K={self.n_classes}"
        return hashlib.sha256(desc.encode()).hexdigest()[:16]


@dataclass
class SgdmConfig:
    lr: float = 0.05
    l2: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.l2 < 0:
            raise ValueError(f"l2 must be >= 0, got {self.l2}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


def init_convnet(in_channels: int, n_classes: int, seed: int, dtype=np.float32) -> ConvNet:
    """He-uniform weights, zero biases."""
    rng = seeded_rng(seed, 0)
    params = {}
    c_in = in_channels
    for li, c_out in enumerate(CONV_CHANNELS, start=1):
        bound = np.sqrt(6.0 / (9 * c_in))
        params[f"conv{li}.w"] = rng.uniform(-bound, bound, size=(3, 3, c_in, c_out)).astype(dtype)
        params[f"conv{li}.b"] = np.zeros(c_out, dtype=dtype)
        c_in = c_out
    bound = np.sqrt(6.0 / c_in)
    params["fc.w"] = rng.uniform(-bound, bound, size=(c_in, n_classes)).astype(dtype)
    params["fc.b"] = np.zeros(n_classes, dtype=dtype)
    return ConvNet(params, in_channels, n_classes)


def _as_batch(net: ConvNet, images) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != net.in_channels:
        raise ValueError(f"expected images [B, {net.in_channels}, H, W], got {x.shape}")
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=net.dtype)


@dataclass
class _Cache:
    cols: list = field(default_factory=list)
    acts: list = field(default_factory=list)
    pooled: np.ndarray | None = None


def _forward(net: ConvNet, x: np.ndarray, cache: _Cache | None = None, upto: int | None = None):
    """Run NHWC input forward. Returns (logits or None, list of activations)."""
    p = net.params
    acts = []
    a = x
    for li in LAYER_IDS:
        w = p[f"conv{li}.w"]
        cols = kernels.im2col3x3(a)
        b, h, wd, kc = cols.shape
        z = cols.reshape(-1, kc) @ w.reshape(kc, -1) + p[f"conv{li}.b"]
        a = np.maximum(z, 0).reshape(b, h, wd, -1)
        acts.append(a)
        if cache is not None:
            cache.cols.append(cols)
            cache.acts.append(a)
        if upto is not None and li >= upto:
            return None, acts
    pooled = a.mean(axis=(1, 2))
    if cache is not None:
        cache.pooled = pooled
    return pooled @ p["fc.w"] + p["fc.b"], acts


def forward(net: ConvNet, images) -> np.ndarray:
    """Logits ``[B, K]`` for images ``[B, C, H, W]`` (or ``[K]`` for one image)."""
    single = np.asarray(images).ndim == 3
    logits, _ = _forward(net, _as_batch(net, images))
    return logits[0] if single else logits


def predict(net: ConvNet, images, batch_size: int = 512) -> np.ndarray:
    images = np.asarray(images)
    out = [forward(net, images[i : i + batch_size]).argmax(axis=1) for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def extract_batch(net: ConvNet, images, layer_ids) -> dict[int, np.ndarray]:
    """Post-ReLU maps reshaped to ``[B, H*W, C_l]`` for each requested layer."""
    layer_ids = list(layer_ids)
    bad = [lid for lid in layer_ids if lid not in LAYER_IDS]
    if bad:
        raise ValueError(f"unknown layer id(s) {bad}; valid ids are {LAYER_IDS}")
    _, acts = _forward(net, _as_batch(net, images), upto=max(layer_ids))
    return {lid: acts[lid - 1].reshape(acts[lid - 1].shape[0], -1, acts[lid - 1].shape[-1]) for lid in layer_ids}


def extract_features(net: ConvNet, image, layer_ids) -> list[FeatureMap]:
    maps = extract_batch(net, np.asarray(image)[None], layer_ids)
    return [FeatureMap(lid, maps[lid][0]) for lid in layer_ids]


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Per-sample cross-entropy and softmax probabilities."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    losses = lse - z[np.arange(len(labels)), labels]
    probs = np.exp(z - lse[:, None])
    return losses, probs


class Batch:
    """Forward pass held open so the caller can pick per-sample loss weights."""

    def __init__(self, net: ConvNet, images, labels):
        if len(labels) == 0:
            raise ValueError("empty batch")
        self.net = net
        self.labels = np.asarray(labels, dtype=np.int64)
        self.cache = _Cache()
        self.logits, _ = _forward(net, _as_batch(net, images), self.cache)
        self.losses, self.probs = softmax_xent(self.logits, self.labels)

    def backward(self, weights) -> tuple[float, dict[str, np.ndarray]]:
        """Gradients of ``sum_i weights[i] * loss_i``."""
        net, c = self.net, self.cache
        p = net.params
        weights = np.asarray(weights, dtype=self.logits.dtype)
        loss = float(np.dot(weights.astype(np.float64), self.losses.astype(np.float64)))
        d = self.probs.copy()
        d[np.arange(len(self.labels)), self.labels] -= 1
        d *= weights[:, None]
        grads = {"fc.w": c.pooled.T @ d, "fc.b": d.sum(axis=0)}
        a = c.acts[-1]
        b, h, w, ch = a.shape
        da = np.broadcast_to((d @ p["fc.w"].T)[:, None, None, :] / (h * w), a.shape)
        for li in reversed(LAYER_IDS):
            a = c.acts[li - 1]
            dz = np.where(a > 0, da, 0).reshape(-1, a.shape[-1])
            cols = c.cols[li - 1]
            kc = cols.shape[-1]
            wmat = p[f"conv{li}.w"]
            grads[f"conv{li}.w"] = (cols.reshape(-1, kc).T @ dz).reshape(wmat.shape)
            grads[f"conv{li}.b"] = dz.sum(axis=0)
            if li > 1:
                dcols = (dz @ wmat.reshape(kc, -1).T).reshape(cols.shape)
                da = kernels.col2im3x3(dcols, kc // 9)
        return loss, grads


def loss_and_grads(net: ConvNet, images, labels, weights=None):
    """Mean (or ``weights``-weighted) cross-entropy and its parameter gradients."""
    batch = Batch(net, images, labels)
    if weights is None:
        weights = np.full(len(batch.labels), 1.0 / len(batch.labels))
    return batch.backward(weights)


def sgdm_step(net: ConvNet, grads, cfg: SgdmConfig, state: dict | None) -> tuple[ConvNet, dict]:
    """v <- m v + (g + l2 theta);  theta <- theta - lr v.

    ``state`` maps parameter names to velocities (``None`` starts at zero).
    Returns a new net and the updated state.
    """
    state = {} if state is None else state
    new = {}
    for name in PARAM_NAMES:
        theta = net.params[name]
        g = grads[name] + cfg.l2 * theta if cfg.l2 else grads[name]
        v = state.get(name)
        v = g.astype(theta.dtype) if v is None else (cfg.momentum * v + g).astype(theta.dtype)
        state[name] = v
        new[name] = (theta - cfg.lr * v).astype(theta.dtype)
    return ConvNet(new, net.in_channels, net.n_classes), state


def save_checkpoint(net: ConvNet, directory, seed: int, epoch: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, value in net.params.items():
        tensor_save(value, directory / f"{name}.grtn")
    manifest = {
        "architecture": ARCH,
        "architecture_hash": net.arch_hash(),
        "in_channels": net.in_channels,
        "n_classes": net.n_classes,
        "params": list(PARAM_NAMES),
        "seed": seed,
        "epoch": epoch,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> ConvNet:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    params = {name: tensor_load(directory / f"{name}.grtn") for name in manifest["params"]}
    net = ConvNet(params, manifest["in_channels"], manifest["n_classes"])
    if net.arch_hash() != manifest["architecture_hash"]:
        raise ValueError(f"{directory}: architecture hash mismatch")
    return net
