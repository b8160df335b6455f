"""Matching discovered environments to true ones, group accuracies, sweeps."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gramclust import SCHEMA_VERSION, kernels

logger = logging.getLogger(__name__)


@dataclass
class MatchResult:
    permutation: dict[int, int]  # cluster id -> true env id
    matching_accuracy: float
    contingency: np.ndarray  # [E', E] counts
    matched: int


def contingency(pseudo, truth, n_pseudo: int | None = None, n_true: int | None = None) -> np.ndarray:
    pseudo = np.asarray(pseudo, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    n_pseudo = int(pseudo.max()) + 1 if n_pseudo is None else n_pseudo
    n_true = int(truth.max()) + 1 if n_true is None else n_true
    table = np.zeros((n_pseudo, n_true), dtype=np.int64)
    np.add.at(table, (pseudo, truth), 1)
    return table


def max_weight_assignment(weights: np.ndarray) -> list[tuple[int, int]]:
    """Row/column pairs of a maximum-weight matching of a rectangular matrix.

    The matrix is padded with zero rows/columns to a square and the negated
    weights go through the O(n^3) Hungarian solver; pairs touching padding
    are dropped.
    """
    w = np.asarray(weights, dtype=np.float64)
    r, c = w.shape
    n = max(r, c)
    cost = np.zeros((n, n))
    cost[:r, :c] = -w
    col_of_row = kernels.hungarian(cost)
    return [(i, int(col_of_row[i])) for i in range(r) if col_of_row[i] < c]


def hungarian_match(pseudo, truth, n_pseudo: int | None = None, n_true: int | None = None) -> MatchResult:
    """Optimal one-to-one relabeling of clusters onto environments.

    Clusters left unmatched (more clusters than environments) count all their
    samples as mismatched.
    """
    pseudo = np.asarray(pseudo)
    if len(pseudo) == 0 or len(pseudo) != len(truth):
        raise ValueError("pseudo and true labels must be non-empty and aligned")
    table = contingency(pseudo, truth, n_pseudo, n_true)
    pairs = max_weight_assignment(table)
    matched = int(sum(table[i, j] for i, j in pairs))
    return MatchResult({i: j for i, j in pairs}, matched / len(pseudo), table, matched)


@dataclass
class GroupAccuracy:
    worst: float
    avg: float
    per_group: dict[int, float]
    counts: dict[int, int]

    def to_json(self) -> dict:
        return {
            "worst": self.worst,
            "avg": self.avg,
            "per_group": {str(k): v for k, v in self.per_group.items()},
            "counts": {str(k): v for k, v in self.counts.items()},
        }


def worst_group_accuracy(preds, labels, groups, n_groups: int | None = None) -> GroupAccuracy:
    """Per-group accuracy, its minimum, and the overall sample accuracy.

    With ``n_groups`` every group id below it must be populated; otherwise
    only observed groups are scored.
    """
    preds, labels, groups = (np.asarray(a) for a in (preds, labels, groups))
    if not (len(preds) == len(labels) == len(groups)) or len(preds) == 0:
        raise ValueError("preds, labels and groups must be non-empty and aligned")
    ids = np.unique(groups)
    if n_groups is not None:
        missing = sorted(set(range(n_groups)) - set(ids.tolist()))
        if missing:
            raise ValueError(f"empty group(s) {missing}")
    correct = preds == labels
    per_group, counts = {}, {}
    for g in ids:
        mask = groups == g
        per_group[int(g)] = float(correct[mask].mean())
        counts[int(g)] = int(mask.sum())
    return GroupAccuracy(min(per_group.values()), float(correct.mean()), per_group, counts)


def write_table(rows: list[dict], directory, name: str, dat_columns: tuple[str, str] | None = None) -> None:
    """CSV + JSON (and optionally a two-column gnuplot .dat) for a sweep table."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0]) if rows else []
    with open(directory / f"{name}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    (directory / f"{name}.json").write_text(json.dumps({"schema_version": SCHEMA_VERSION, "rows": rows}, indent=2, sort_keys=True) + "\n")
    if dat_columns:
        x, y = dat_columns
        lines = [f"# {x} {y}"] + [f"{r[x]} {r[y]}" for r in rows if r.get(y) is not None]
        (directory / f"{name}.dat").write_text("\n".join(lines) + "\n")


def _cluster_row(cfg, data, feats, select, k) -> dict:
    from gramclust import pipeline

    try:
        disc = pipeline.discover_from_features(cfg, data, feats, k=k)
        if select:
            grid = pipeline.grid_search(cfg, data, disc)
            best = grid.select(cfg.selection)
            res, lr, l2 = grid.results[best], grid.rows[best]["lr"], grid.rows[best]["l2"]
        else:
            res, lr, l2 = pipeline.run_robust(cfg, data, disc), cfg.robust.sgdm.lr, cfg.robust.sgdm.l2
        return {
            "k": k,
            "lr": lr,
            "l2": l2,
            "val_match_acc": disc.val_match.matching_accuracy if disc.val_match else None,
            "val_worst_group_acc": res.val_true.worst,
            "val_avg_acc": res.val_true.avg,
            "test_worst_group_acc": res.test.worst,
            "test_avg_acc": res.test.avg,
            "error": None,
        }
    except Exception as exc:  # one bad k must not abort the sweep
        logger.error("sweep k=%s failed: %s", k, exc)
        return {"k": k, "lr": None, "l2": None, "val_match_acc": None, "val_worst_group_acc": None, "val_avg_acc": None,
                "test_worst_group_acc": None, "test_avg_acc": None, "error": str(exc)}


def _run_entries(fn, shared, entries, workers: int) -> list[dict]:
    # every entry is seeded on its own, so process order cannot change a row
    if workers <= 1 or len(entries) <= 1:
        return [fn(*shared, e) for e in entries]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*[(*shared, e) for e in entries])))


def sweep_clusters(cfg, ks, data=None, out=None, workers: int = 1, select: bool = False) -> list[dict]:
    """Full discovery + robust training per cluster count, shared seeds.

    One row per k with the true-group worst-group accuracy on validation and
    on the shifted test split. With ``select`` each k runs the config's grid
    and keeps the cell chosen by ``cfg.selection``; otherwise the configured
    lr/l2 are used. A failing k is recorded with its error and the sweep
    continues. ``workers > 1`` runs entries in separate processes.
    """
    from gramclust import pipeline

    ks = list(ks)
    if not ks:
        raise ValueError("need at least one cluster count")
    data = pipeline.load_data(cfg) if data is None else data
    feats = pipeline.discovery_features(cfg, data)
    rows = _run_entries(_cluster_row, (cfg, data, feats, select), ks, workers)
    if out is not None:
        write_table(rows, out, "sweep_k", dat_columns=("k", "val_worst_group_acc"))
    return rows


def _layer_row(cfg, data, id_net, style, layers) -> dict:
    from gramclust import pipeline

    label = "+".join(str(i) for i in layers)
    try:
        feats = pipeline.discovery_features(cfg, data, layer_ids=layers, id_net=id_net, style=style)
        disc = pipeline.discover_from_features(cfg, data, feats)
        return {"layers": label, "val_match_acc": disc.val_match.matching_accuracy,
                "train_match_acc": disc.train_match.matching_accuracy, "error": None}
    except Exception as exc:
        logger.error("sweep layers=%s failed: %s", label, exc)
        return {"layers": label, "val_match_acc": None, "train_match_acc": None, "error": str(exc)}


def sweep_layers(cfg, layer_sets, data=None, out=None, style: str | None = None, workers: int = 1) -> list[dict]:
    """Validation matching accuracy of the clustering for each layer set."""
    from gramclust import pipeline

    layer_sets = [list(s) for s in layer_sets]
    for s in layer_sets:
        if not s or len(set(s)) != len(s):
            raise ValueError(f"layer set {s} must be non-empty without repeats")
    seen = set()
    for s in layer_sets:
        key = tuple(sorted(s))
        if key in seen:
            raise ValueError(f"layer set {s} is repeated")
        seen.add(key)
    data = pipeline.load_data(cfg) if data is None else data
    id_net = pipeline.train_identification(cfg, data)
    rows = _run_entries(_layer_row, (cfg, data, id_net, style), layer_sets, workers)
    if out is not None:
        write_table(rows, out, "sweep_layers", dat_columns=("layers", "val_match_acc"))
    return rows
