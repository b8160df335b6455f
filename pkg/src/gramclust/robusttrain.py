"""ERM, importance-weighted and GroupDRO training loops.

All three share one minibatch loop (:func:`fit`) and differ only in the
per-sample loss weights of each batch, so with identical seeds they follow
identical shuffles and initializations.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from gramclust import SCHEMA_VERSION, nets
from gramclust.nets import ConvNet, SgdmConfig
from gramclust.synthdata import GroupedDataset
from gramclust.tensor import derive_seed, seeded_rng

logger = logging.getLogger(__name__)

METHODS = ("erm", "group_dro", "importance_weighting")


class EmptyGroupError(ValueError):
    pass


@dataclass
class GroupWeights:
    """Exponentiated-gradient weights over groups, kept on the simplex."""

    q: np.ndarray
    eta_q: float

    @classmethod
    def uniform(cls, n_groups: int, eta_q: float) -> "GroupWeights":
        return cls(np.full(n_groups, 1.0 / n_groups), eta_q)

    def update(self, group_losses: np.ndarray) -> None:
        # log space, so huge finite losses cannot overflow to inf/inf
        with np.errstate(divide="ignore"):
            z = np.log(self.q) + self.eta_q * np.asarray(group_losses, dtype=np.float64)
        q = np.exp(z - z.max())
        self.q = q / q.sum()
        assert np.all(self.q >= 0) and abs(self.q.sum() - 1.0) <= 1e-9


@dataclass
class EpochStats:
    epoch: int
    avg_loss: float
    group_losses: dict[int, float]
    group_accs: dict[int, float]
    worst_group_acc: float


@dataclass
class TrainReport:
    method: str
    config: dict
    epochs: list[EpochStats] = field(default_factory=list)
    diverged: bool = False
    checkpoint: str | None = None
    q: list[float] | None = None
    net: ConvNet | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "method": self.method,
            "config": self.config,
            "diverged": self.diverged,
            "checkpoint": self.checkpoint,
            "q": self.q,
            "epochs": [
                {
                    "epoch": s.epoch,
                    "avg_loss": s.avg_loss,
                    "group_losses": {str(k): v for k, v in s.group_losses.items()},
                    "group_accs": {str(k): v for k, v in s.group_accs.items()},
                    "worst_group_acc": s.worst_group_acc,
                }
                for s in self.epochs
            ],
        }
        return d

    def write_csv(self, path) -> None:
        groups = sorted({g for s in self.epochs for g in s.group_accs})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "avg_loss", "worst_group_acc"]
                       + [f"loss_g{g}" for g in groups] + [f"acc_g{g}" for g in groups])
            for s in self.epochs:
                w.writerow([s.epoch, f"{s.avg_loss:.6g}", f"{s.worst_group_acc:.6g}"]
                           + [f"{s.group_losses.get(g, float('nan')):.6g}" for g in groups]
                           + [f"{s.group_accs.get(g, float('nan')):.6g}" for g in groups])


def compact_groups(groups, n_groups: int | None = None) -> tuple[np.ndarray, int]:
    """Validate group ids; without ``n_groups`` relabel observed ids densely."""
    groups = np.asarray(groups, dtype=np.int64)
    if n_groups is None:
        _, dense = np.unique(groups, return_inverse=True)
        return dense.astype(np.int64), int(dense.max()) + 1 if len(dense) else 0
    counts = np.bincount(groups, minlength=n_groups)
    if len(counts) > n_groups:
        raise ValueError(f"group id out of range for {n_groups} groups")
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        raise EmptyGroupError(f"group(s) {empty.tolist()} have no samples")
    return groups, n_groups


def init_net(ds: GroupedDataset, cfg: SgdmConfig) -> ConvNet:
    return nets.init_convnet(ds.images.shape[1], ds.n_classes, derive_seed(cfg.seed, 0x1417))


def batch_order(n: int, cfg: SgdmConfig, epoch: int) -> list[np.ndarray]:
    perm = seeded_rng(derive_seed(cfg.seed, 0x5A), epoch).permutation(n)
    # sorted within a batch: the batch is a set, its reduction order is canonical
    return [np.sort(perm[i : i + cfg.batch_size]) for i in range(0, n, cfg.batch_size)]


WeightFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def fit(ds: GroupedDataset, cfg: SgdmConfig, weight_fn: WeightFn, method: str,
        report_groups=None, net: ConvNet | None = None) -> TrainReport:
    """Minibatch SGD-M; ``weight_fn(idx, losses)`` gives each batch's loss weights."""
    if len(ds) == 0:
        raise ValueError("empty training split")
    net = init_net(ds, cfg) if net is None else net
    report = TrainReport(method, asdict(cfg))
    rg = None if report_groups is None else np.asarray(report_groups, dtype=np.int64)
    state = None
    for epoch in range(cfg.epochs):
        tot_loss, n_seen = 0.0, 0
        if rg is not None:
            g_loss = np.zeros(rg.max() + 1)
            g_hit = np.zeros(rg.max() + 1)
            g_n = np.zeros(rg.max() + 1)
        for idx in batch_order(len(ds), cfg, epoch):
            batch = nets.Batch(net, ds.images[idx], ds.y[idx])
            losses = batch.losses.astype(np.float64)
            if not np.all(np.isfinite(losses)):
                report.diverged = True
                break
            weights = weight_fn(idx, losses)
            _, grads = batch.backward(weights)
            net, state = nets.sgdm_step(net, grads, cfg, state)
            tot_loss += float(losses.sum())
            n_seen += len(idx)
            if rg is not None:
                gi = rg[idx]
                g_loss += np.bincount(gi, weights=losses, minlength=len(g_loss))
                g_hit += np.bincount(gi, weights=(batch.logits.argmax(1) == batch.labels), minlength=len(g_loss))
                g_n += np.bincount(gi, minlength=len(g_loss))
        if not report.diverged and not all(np.all(np.isfinite(p)) for p in net.params.values()):
            report.diverged = True
        if report.diverged:
            logger.warning("%s: training diverged in epoch %d", method, epoch)
            break
        g_losses, g_accs = {}, {}
        if rg is not None:
            for g in np.flatnonzero(g_n):
                g_losses[int(g)] = float(g_loss[g] / g_n[g])
                g_accs[int(g)] = float(g_hit[g] / g_n[g])
        report.epochs.append(EpochStats(epoch, tot_loss / max(n_seen, 1), g_losses, g_accs,
                                        min(g_accs.values()) if g_accs else float("nan")))
    report.net = net
    return report


def train_erm(ds: GroupedDataset, cfg: SgdmConfig, report_groups=None) -> TrainReport:
    """Plain mean cross-entropy; groups (if given) are only reported on."""
    return fit(ds, cfg, lambda idx, losses: np.full(len(idx), 1.0 / len(idx)), "erm", report_groups)


def importance_weights(groups, n_groups: int | None = None) -> np.ndarray:
    """Per-sample weight N / (G |D_g|): every group carries equal total weight."""
    groups, n_groups = compact_groups(groups, n_groups)
    counts = np.bincount(groups, minlength=n_groups)
    return len(groups) / (n_groups * counts[groups])


def train_importance_weighting(ds: GroupedDataset, groups, cfg: SgdmConfig,
                               n_groups: int | None = None) -> TrainReport:
    groups, n_groups = compact_groups(groups, n_groups)
    w = importance_weights(groups, n_groups)
    return fit(ds, cfg, lambda idx, losses: w[idx] / len(idx), "importance_weighting", groups)


def dro_weights(gw: GroupWeights, batch_groups: np.ndarray, losses: np.ndarray, mode: str = "exp") -> np.ndarray:
    """Update ``gw`` from the batch and return per-sample weights.

    Per-group mean losses drive the update; groups absent from the batch see
    loss 0. The returned weights realize sum_g q_g * mean-loss_g.
    """
    n_groups = len(gw.q)
    counts = np.bincount(batch_groups, minlength=n_groups)
    sums = np.bincount(batch_groups, weights=losses, minlength=n_groups)
    present = counts > 0
    g_mean = np.zeros(n_groups)
    g_mean[present] = sums[present] / counts[present]
    if mode == "exp":
        gw.update(g_mean)
        coef = np.zeros(n_groups)
        coef[present] = gw.q[present] / counts[present]
    elif mode == "hardmax":
        worst = int(np.argmax(np.where(present, g_mean, -np.inf)))
        coef = np.zeros(n_groups)
        coef[worst] = 1.0 / counts[worst]
    else:
        raise ValueError(f"unknown GroupDRO mode {mode!r}")
    return coef[batch_groups]


def train_group_dro(ds: GroupedDataset, groups, cfg: SgdmConfig, eta_q: float = 0.01,
                    n_groups: int | None = None, mode: str = "exp") -> TrainReport:
    groups, n_groups = compact_groups(groups, n_groups)
    gw = GroupWeights.uniform(n_groups, eta_q)
    report = fit(ds, cfg, lambda idx, losses: dro_weights(gw, groups[idx], losses, mode), "group_dro", groups)
    report.q = [float(v) for v in gw.q]
    return report


def save_report(report: TrainReport, directory, name: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{name}.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    report.write_csv(directory / f"{name}.csv")
