"""End-to-end orchestration: data, environment discovery, robust training, selection.

Run directory layout::

    <out>/manifest.json
    <out>/datasets/<split>/          images.grtn, labels.csv, manifest.json
    <out>/features/                  style + projected matrices with JSON sidecars
    <out>/clustering/                clustering.json, centroids.grtn
    <out>/checkpoints/<name>/        parameter tensors + manifest.json
    <out>/reports/                   JSON (schema_version) and CSV reports
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from gramclust import SCHEMA_VERSION
from gramclust import clustering as clus
from gramclust import evalmatch, kernels, nets, robusttrain, stylefeat
from gramclust.nets import ConvNet, SgdmConfig
from gramclust.projection import BlockProjection, default_projection_dim
from gramclust.synthdata import SPLITS, GroupedDataset, SynthConfig, generate, load_dataset, save_dataset
from gramclust.tensor import derive_seed

logger = logging.getLogger(__name__)

# learning rates are the pretrained-scale grid times 1000: the nets here train from scratch
DEFAULT_GRID = {"lr": [0.01, 0.05, 0.1], "l2": [1e-4, 1e-2, 1e-1, 1.0]}
PRETRAINED_SCALE_GRID = {"lr": [1e-5, 5e-5, 1e-4], "l2": [1e-4, 1e-2, 1e-1, 1.0]}

_SEED_ID_MODEL, _SEED_PROJECTION, _SEED_KMEANS, _SEED_ROBUST = 1, 2, 3, 4


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        self.stage = stage
        super().__init__(f"[{stage}] {exc}")


def _sgdm_from(d, default: SgdmConfig) -> SgdmConfig:
    if d is None:
        return default
    if isinstance(d, SgdmConfig):
        return d
    known = {f.name for f in fields(SgdmConfig)}
    bad = set(d) - known
    if bad:
        raise ConfigError(f"unknown SGD-M field(s) {sorted(bad)}")
    return replace(default, **d)


@dataclass
class RobustConfig:
    method: str = "group_dro"
    sgdm: SgdmConfig = field(default_factory=lambda: SgdmConfig(lr=0.05, l2=1e-4, batch_size=64, epochs=8))
    eta_q: float = 0.01
    dro_mode: str = "exp"


@dataclass
class PipelineConfig:
    dataset: SynthConfig | str = field(default_factory=SynthConfig)
    style: str = "gram"
    layer_ids: list[int] = field(default_factory=lambda: [3])
    projection: str | int = "auto"
    k: int = 2
    id_model: SgdmConfig | None = None  # None: the robust stage's SGD-M with epochs=1
    robust: RobustConfig = field(default_factory=RobustConfig)
    selection: str = "pseudo"
    grid: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_GRID.items()})
    kmeans_max_iter: int = 300
    kmeans_tol: float = 1e-6
    kmeans_n_init: int = 10
    eval_split: str = "test_shift"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.style not in stylefeat.STYLES:
            raise ConfigError(f"style must be one of {stylefeat.STYLES}, got {self.style!r}")
        if not self.layer_ids or len(set(self.layer_ids)) != len(self.layer_ids):
            raise ConfigError(f"layer_ids must be non-empty and distinct, got {self.layer_ids}")
        if any(l not in nets.LAYER_IDS for l in self.layer_ids):
            raise ConfigError(f"layer_ids must come from {nets.LAYER_IDS}")
        if self.style == "penultimate" and list(self.layer_ids) != [nets.LAYER_IDS[-1]]:
            raise ConfigError("penultimate style uses the last conv layer only")
        if not (self.projection in ("auto", "off") or (isinstance(self.projection, int) and self.projection >= 1)):
            raise ConfigError(f"projection must be 'auto', 'off' or a positive int, got {self.projection!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.kmeans_n_init < 1 or self.kmeans_max_iter < 0:
            raise ConfigError("kmeans_n_init must be >= 1 and kmeans_max_iter >= 0")
        if self.robust.method not in robusttrain.METHODS:
            raise ConfigError(f"robust.method must be one of {robusttrain.METHODS}")
        if self.robust.dro_mode not in ("exp", "hardmax"):
            raise ConfigError("robust.dro_mode must be 'exp' or 'hardmax'")
        if self.selection not in ("pseudo", "true"):
            raise ConfigError("selection must be 'pseudo' or 'true'")
        if set(self.grid) != {"lr", "l2"} or not self.grid["lr"] or not self.grid["l2"]:
            raise ConfigError("grid needs non-empty 'lr' and 'l2' lists")
        if self.eval_split not in ("test_shift", "test_ind"):
            raise ConfigError("eval_split must be test_shift or test_ind")

    @property
    def id_sgdm(self) -> SgdmConfig:
        base = self.id_model if self.id_model is not None else replace(self.robust.sgdm, epochs=1)
        return replace(base, seed=derive_seed(self.seed, _SEED_ID_MODEL))

    @property
    def robust_sgdm(self) -> SgdmConfig:
        return replace(self.robust.sgdm, seed=derive_seed(self.seed, _SEED_ROBUST))

    @property
    def synth(self) -> SynthConfig | None:
        return None if isinstance(self.dataset, str) else self.dataset

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"] = self.dataset if isinstance(self.dataset, str) else asdict(self.dataset)
        return d

    @classmethod
    def from_dict(cls, d: dict, seed: int | None = None) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown config field(s) {sorted(bad)}")
        master = int(d.get("seed", 0) if seed is None else seed)
        ds = d.get("dataset", {})
        try:
            if isinstance(ds, dict):
                ds = SynthConfig.from_dict({"seed": master, **ds})
            robust_d = dict(d.get("robust", {}))
            rbad = set(robust_d) - {f.name for f in fields(RobustConfig)}
            if rbad:
                raise ConfigError(f"unknown robust field(s) {sorted(rbad)}")
            robust = RobustConfig(**{**robust_d, "sgdm": _sgdm_from(robust_d.get("sgdm"), RobustConfig().sgdm)})
            id_model = d.get("id_model")
            id_model = None if id_model is None else _sgdm_from(id_model, replace(robust.sgdm, epochs=1))
            grid = d.get("grid", DEFAULT_GRID)
            return cls(
                dataset=ds,
                style=d.get("style", "gram"),
                layer_ids=list(d.get("layer_ids", [3])),
                projection=d.get("projection", "auto"),
                k=int(d.get("k", 2)),
                id_model=id_model,
                robust=robust,
                selection=d.get("selection", "pseudo"),
                grid={k: list(v) for k, v in grid.items()},
                kmeans_max_iter=int(d.get("kmeans_max_iter", 300)),
                kmeans_tol=float(d.get("kmeans_tol", 1e-6)),
                kmeans_n_init=int(d.get("kmeans_n_init", 10)),
                eval_split=d.get("eval_split", "test_shift"),
                seed=master,
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path, seed: int | None = None) -> "PipelineConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d, seed=seed)


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- data


def load_data(cfg: PipelineConfig) -> dict[str, GroupedDataset]:
    if isinstance(cfg.dataset, str):
        root = Path(cfg.dataset)
        return {s: load_dataset(root / s) for s in SPLITS if (root / s).exists()}
    return generate(cfg.dataset)


def save_data(data, out, cfg: PipelineConfig) -> None:
    for name, ds in data.items():
        save_dataset(ds, Path(out) / "datasets" / name, cfg.synth)


# ---------------------------------------------------------------- discovery


def train_identification(cfg: PipelineConfig, data) -> ConvNet:
    """Identification model: ERM on the train split (one epoch by default)."""
    return robusttrain.train_erm(data["train"], cfg.id_sgdm).net


def style_features(net: ConvNet, images, layer_ids, style: str, batch_size: int = 250):
    parts, layout = [], None
    zeros = 0
    for i in range(0, len(images), batch_size):
        maps = nets.extract_batch(net, images[i : i + batch_size], layer_ids)
        block, layout = stylefeat.style_matrix(maps, style)
        zeros += layout.zero_blocks
        parts.append(block)
    layout.zero_blocks = zeros
    return np.concatenate(parts), layout


@dataclass
class Features:
    style: str
    layer_ids: list[int]
    train: np.ndarray
    val: np.ndarray
    layout: stylefeat.StyleLayout
    id_net: ConvNet


def discovery_features(cfg: PipelineConfig, data, layer_ids=None, id_net=None, style=None) -> Features:
    layer_ids = list(cfg.layer_ids if layer_ids is None else layer_ids)
    style = cfg.style if style is None else style
    id_net = train_identification(cfg, data) if id_net is None else id_net
    train, layout = style_features(id_net, data["train"].images, layer_ids, style)
    val, _ = style_features(id_net, data["val"].images, layer_ids, style)
    return Features(style, layer_ids, train, val, layout, id_net)


@dataclass
class Discovery:
    k: int
    clustering: clus.Clustering
    projection: BlockProjection | None
    train: GroupedDataset  # pseudo-labeled
    val: GroupedDataset  # pseudo-labeled via nearest centroid
    train_match: evalmatch.MatchResult | None
    val_match: evalmatch.MatchResult | None
    features: Features
    train_proj: np.ndarray = field(repr=False, default=None)
    val_proj: np.ndarray = field(repr=False, default=None)

    def summary(self) -> dict:
        return {
            "k": self.k,
            "style": self.features.style,
            "layer_ids": self.features.layer_ids,
            "style_dim": self.features.layout.dim,
            "zero_blocks": self.features.layout.zero_blocks,
            "projection": None if self.projection is None else self.projection.to_json(),
            "inertia": self.clustering.inertia,
            "kmeans_iterations": self.clustering.iterations_run,
            "cluster_sizes": [int(c) for c in self.clustering.sizes()],
            "train_match_acc": None if self.train_match is None else self.train_match.matching_accuracy,
            "val_match_acc": None if self.val_match is None else self.val_match.matching_accuracy,
            "val_permutation": None if self.val_match is None else {str(a): b for a, b in self.val_match.permutation.items()},
        }


def discover_from_features(cfg: PipelineConfig, data, feats: Features, k: int | None = None) -> Discovery:
    k = cfg.k if k is None else k
    if cfg.projection == "off":
        proj, tr, va = None, feats.train, feats.val
    else:
        dim = default_projection_dim(len(feats.train)) if cfg.projection == "auto" else int(cfg.projection)
        proj = BlockProjection(derive_seed(cfg.seed, _SEED_PROJECTION), dim, feats.layout.layer_ids,
                               feats.layout.block_sizes)
        tr, va = proj.project(feats.train), proj.project(feats.val)
    c = clus.kmeans(tr, k, seed=derive_seed(cfg.seed, _SEED_KMEANS), max_iter=cfg.kmeans_max_iter, tol=cfg.kmeans_tol,
                    n_init=cfg.kmeans_n_init)
    val_pseudo = clus.assign_to_centroids(c, va)
    train_ds = data["train"].with_pseudo(c.assignments, k)
    val_ds = data["val"].with_pseudo(val_pseudo, k)
    tm = vm = None
    if train_ds.e is not None:
        tm = evalmatch.hungarian_match(c.assignments, train_ds.e, k, train_ds.n_envs)
    if val_ds.e is not None:
        vm = evalmatch.hungarian_match(val_pseudo, val_ds.e, k, val_ds.n_envs)
    return Discovery(k, c, proj, train_ds, val_ds, tm, vm, feats, tr, va)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (StageError, ConfigError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_discovery(cfg: PipelineConfig, data=None, out=None) -> Discovery:
    """Identification model, style vectors, projection, k-means, val assignment."""
    data = _stage("data", load_data, cfg) if data is None else data
    feats = _stage("features", discovery_features, cfg, data)
    disc = _stage("clustering", discover_from_features, cfg, data, feats)
    if out is not None:
        out = Path(out)
        _stage("write", write_discovery, disc, out, cfg)
    return disc


def write_discovery(disc: Discovery, out: Path, cfg: PipelineConfig) -> None:
    f = disc.features
    stylefeat.save_style_matrix(out / "features", "train_style", f.train, f.layout)
    stylefeat.save_style_matrix(out / "features", "val_style", f.val, f.layout)
    if disc.projection is not None:
        disc.projection.save(out / "features" / "projection.json")
        layout = stylefeat.StyleLayout("projected", f.layout.layer_ids, [disc.projection.out_dim] * len(f.layout.layer_ids))
        stylefeat.save_style_matrix(out / "features", "train_projected", disc.train_proj, layout)
        stylefeat.save_style_matrix(out / "features", "val_projected", disc.val_proj, layout)
    disc.clustering.save(out / "clustering")
    write_pseudo_labels(out / "clustering" / "train_pseudo.csv", disc.train.pseudo_e)
    write_pseudo_labels(out / "clustering" / "val_pseudo.csv", disc.val.pseudo_e)
    save_dataset(disc.train, out / "datasets" / "train", cfg.synth)
    save_dataset(disc.val, out / "datasets" / "val", cfg.synth)
    nets.save_checkpoint(f.id_net, out / "checkpoints" / "id_model", cfg.id_sgdm.seed, cfg.id_sgdm.epochs)
    write_json(out / "reports" / "discovery.json", {"schema_version": SCHEMA_VERSION, **disc.summary()})


def write_pseudo_labels(path, labels) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("index,pseudo_e\n" + "".join(f"{i},{int(v)}\n" for i, v in enumerate(labels)))


# ---------------------------------------------------------------- robust stage


def flat_groups(ds: GroupedDataset, use_pseudo: bool) -> np.ndarray:
    return ds.groups(use_pseudo)[0]


@dataclass
class RobustResult:
    method: str
    train_groups: str | None
    report: robusttrain.TrainReport
    val_true: evalmatch.GroupAccuracy | None
    val_pseudo: evalmatch.GroupAccuracy | None
    test: evalmatch.GroupAccuracy
    test_ind: evalmatch.GroupAccuracy | None
    net: ConvNet = field(repr=False, default=None)

    def to_json(self) -> dict:
        j = lambda a: None if a is None else a.to_json()  # noqa: E731
        return {
            "method": self.method,
            "train_groups": self.train_groups,
            "diverged": self.report.diverged,
            "val_true": j(self.val_true),
            "val_pseudo": j(self.val_pseudo),
            "test": j(self.test),
            "test_ind": j(self.test_ind),
            "test_metrics_group_source": "true",
        }


def run_robust(cfg: PipelineConfig, data, disc: Discovery | None = None, method: str | None = None,
               train_groups: str = "pseudo", sgdm: SgdmConfig | None = None) -> RobustResult:
    """Train the robust classifier and score it.

    ``train_groups`` picks pseudo or true groups for group-aware methods.
    Test metrics always use true groups.
    """
    method = cfg.robust.method if method is None else method
    sgdm = cfg.robust_sgdm if sgdm is None else sgdm
    train = data["train"] if disc is None else disc.train
    val = data["val"] if disc is None else disc.val
    if method == "erm":
        rep_groups = flat_groups(train, False) if train.e is not None else None
        report = robusttrain.train_erm(train, sgdm, rep_groups)
        used = None
    else:
        if train_groups == "pseudo":
            if disc is None or train.pseudo_e is None:
                raise ValueError(f"{method} on pseudo groups needs discovered pseudo labels")
            groups = flat_groups(train, True)
        elif train_groups == "true":
            groups = flat_groups(train, False)
        else:
            raise ValueError(f"train_groups must be 'pseudo' or 'true', got {train_groups!r}")
        if method == "group_dro":
            report = robusttrain.train_group_dro(train, groups, sgdm, cfg.robust.eta_q, mode=cfg.robust.dro_mode)
        else:
            report = robusttrain.train_importance_weighting(train, groups, sgdm)
        used = train_groups
    return evaluate(report.net, data, val, method, used, report)


def evaluate(net: ConvNet, data, val: GroupedDataset, method: str, used, report) -> RobustResult:
    pv = nets.predict(net, val.images)
    val_true = evalmatch.worst_group_accuracy(pv, val.y, flat_groups(val, False)) if val.e is not None else None
    val_pseudo = (evalmatch.worst_group_accuracy(pv, val.y, flat_groups(val, True))
                  if val.pseudo_e is not None else None)
    test_ds = data["test_shift"]
    test = evalmatch.worst_group_accuracy(nets.predict(net, test_ds.images), test_ds.y, flat_groups(test_ds, False))
    test_ind = None
    if "test_ind" in data:
        ti = data["test_ind"]
        test_ind = evalmatch.worst_group_accuracy(nets.predict(net, ti.images), ti.y, flat_groups(ti, False))
    return RobustResult(method, used, report, val_true, val_pseudo, test, test_ind, net)


# ---------------------------------------------------------------- grid search


@dataclass
class GridResult:
    method: str
    train_groups: str | None
    rows: list[dict]
    results: list[RobustResult] = field(repr=False, default_factory=list)

    def select(self, mode: str) -> int:
        """Index of the best cell by validation worst-group accuracy.

        ``mode`` picks pseudo- or true-group validation metrics. Ties go to the
        higher average accuracy, then smaller l2, then smaller lr. Diverged
        cells (NaN metrics or zero average accuracy) are never selected.
        """
        key_wg, key_avg = f"val_{mode}_wg", f"val_{mode}_avg"

        def usable(r):
            # a NaN metric or zero average accuracy marks a dead cell
            return (not r["diverged"] and r[key_wg] is not None and not math.isnan(r[key_wg])
                    and r[key_avg] > 0.0)

        ok = [i for i, r in enumerate(self.rows) if usable(r)]
        if not ok:
            raise RuntimeError("all-diverged grid: no cell has a usable validation accuracy")
        return min(ok, key=lambda i: (-self.rows[i][key_wg], -self.rows[i][key_avg],
                                      self.rows[i]["l2"], self.rows[i]["lr"]))

    def to_json(self) -> dict:
        d = {"method": self.method, "train_groups": self.train_groups, "rows": self.rows, "selected": {}}
        for mode in ("pseudo", "true"):
            try:
                d["selected"][mode] = self.select(mode)
            except (RuntimeError, KeyError):
                d["selected"][mode] = None
        return d


def grid_search(cfg: PipelineConfig, data, disc: Discovery | None = None, method: str | None = None,
                train_groups: str = "pseudo") -> GridResult:
    method = cfg.robust.method if method is None else method
    rows, results = [], []
    base = cfg.robust_sgdm
    for l2 in cfg.grid["l2"]:
        for lr in cfg.grid["lr"]:
            res = run_robust(cfg, data, disc, method, train_groups, replace(base, lr=float(lr), l2=float(l2)))
            results.append(res)
            g = lambda a, attr: None if a is None else getattr(a, attr)  # noqa: E731
            rows.append({
                "l2": float(l2),
                "lr": float(lr),
                "diverged": res.report.diverged,
                "val_pseudo_wg": g(res.val_pseudo, "worst"),
                "val_pseudo_avg": g(res.val_pseudo, "avg"),
                "val_true_wg": g(res.val_true, "worst"),
                "val_true_avg": g(res.val_true, "avg"),
                "test_wg": res.test.worst,
                "test_avg": res.test.avg,
                "test_ind_avg": g(res.test_ind, "avg"),
            })
            logger.info("grid %s l2=%g lr=%g val_pseudo_wg=%s val_true_wg=%s test_wg=%.3f", method, l2, lr,
                        rows[-1]["val_pseudo_wg"], rows[-1]["val_true_wg"], res.test.worst)
    return GridResult(method, None if method == "erm" else train_groups, rows, results)


# ---------------------------------------------------------------- full pipeline


def run_pipeline(cfg: PipelineConfig, out) -> dict:
    """All stages; returns (and writes) the pipeline report."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    write_json(out / "manifest.json", {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(),
                                       "layout": ["datasets", "features", "clustering", "checkpoints", "reports"]})
    data = _stage("data", load_data, cfg)
    _stage("write", save_data, data, out, cfg)
    needs_groups = cfg.robust.method != "erm" or cfg.selection == "pseudo"
    disc = run_discovery(cfg, data, out) if needs_groups else None
    grid = _stage("grid", grid_search, cfg, data, disc, cfg.robust.method, "pseudo")
    best = _stage("selection", grid.select, cfg.selection)
    chosen = grid.results[best]
    nets.save_checkpoint(chosen.net, out / "checkpoints" / "robust", cfg.robust_sgdm.seed, cfg.robust_sgdm.epochs)
    robusttrain.save_report(chosen.report, out / "reports", "train")
    evalmatch.write_table(grid.rows, out / "reports", "grid")
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "discovery": None if disc is None else disc.summary(),
        "grid": grid.to_json(),
        "selection": cfg.selection,
        "selected": {"index": best, "l2": grid.rows[best]["l2"], "lr": grid.rows[best]["lr"]},
        "result": chosen.to_json(),
        "meta": {"created_unix": time.time(), "elapsed_s": time.time() - t0, "kernel_backend": kernels.BACKEND},
    }
    write_json(out / "reports" / "pipeline.json", report)
    return report
