"""Command-line entry point: ``gramclust <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from gramclust import __version__, evalmatch, kernels, nets, pipeline, robusttrain, synthdata
from gramclust.pipeline import SCHEMA_VERSION, ConfigError, PipelineConfig, write_json

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

logger = logging.getLogger("gramclust")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: config error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _layer_sets(text: str) -> list[list[int]]:
    return [_int_list(part) for part in text.split(";") if part.strip()]


def _global_flags(parser, default):
    # subcommand copies use SUPPRESS so they never clobber flags given before the subcommand
    parser.add_argument("--config", default=default, help="pipeline config JSON")
    parser.add_argument("--seed", type=int, default=default, help="master seed (overrides the config)")
    parser.add_argument("--out", default=default, help="output run directory")
    parser.add_argument("--threads", type=int, default=default, help="cap BLAS threads")
    parser.add_argument("--quiet", action="store_true", default=default if default is not None else False,
                        help="only log warnings and errors")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)

    p = _Parser(prog="gramclust", description="Environment discovery with Gram-matrix style clustering.")
    _global_flags(p, None)
    p.add_argument("--version", action="version", version=f"gramclust {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    sub.add_parser("discover", parents=[common], help="identification model, style vectors, k-means")
    t = sub.add_parser("train", parents=[common], help="train the robust classifier once")
    t.add_argument("--groups", choices=("pseudo", "true"), default="pseudo",
                   help="groups used by group-aware methods")
    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on every split")
    e.add_argument("--checkpoint", required=True, help="checkpoint directory")
    k = sub.add_parser("sweep-k", parents=[common], help="worst-group accuracy versus cluster count")
    k.add_argument("--ks", type=_int_list, default=[2, 4, 8, 16, 32], help="comma-separated cluster counts")
    k.add_argument("--workers", type=int, default=1, help="run sweep entries in this many processes")
    k.add_argument("--select", action="store_true", help="grid search each k and keep the selected cell")
    ls = sub.add_parser("sweep-layers", parents=[common], help="matching accuracy per layer set")
    ls.add_argument("--layer-sets", type=_layer_sets, default=[[1], [2], [3], [1, 2, 3]],
                    help="semicolon-separated sets, e.g. '1;2;3;1,2,3'")
    ls.add_argument("--workers", type=int, default=1, help="run sweep entries in this many processes")
    g = sub.add_parser("grid", parents=[common], help="hyperparameter grid with selection")
    g.add_argument("--groups", choices=("pseudo", "true"), default="pseudo",
                   help="groups used by group-aware methods")
    sub.add_parser("pipeline", parents=[common], help="all stages end to end")
    return p


def load_config(args) -> PipelineConfig:
    if args.config:
        return PipelineConfig.load(args.config, seed=args.seed)
    return PipelineConfig.from_dict({}, seed=args.seed)


def _report(out: Path, name: str, body: dict, started: float) -> None:
    meta = {"created_unix": time.time(), "elapsed_s": time.time() - started, "kernel_backend": kernels.BACKEND}
    write_json(out / "reports" / f"{name}.json", {"schema_version": SCHEMA_VERSION, **body, "meta": meta})


def cmd_synth(cfg, out, args, t0):
    data = pipeline.load_data(cfg)
    pipeline.save_data(data, out, cfg)
    splits = {}
    for name, ds in data.items():
        counts = {f"{e},{y}": c for (e, y), c in synthdata.group_counts(ds).items()}
        splits[name] = {"n": len(ds), "group_counts": counts}
    _report(out, "synth", {"config": cfg.to_dict(), "splits": splits}, t0)


def cmd_discover(cfg, out, args, t0):
    disc = pipeline.run_discovery(cfg, out=out)
    _report(out, "discover", {"config": cfg.to_dict(), "discovery": disc.summary()}, t0)


def _discovery_if_needed(cfg, data, out, groups):
    pseudo_training = cfg.robust.method != "erm" and groups == "pseudo"
    if pseudo_training or cfg.selection == "pseudo":
        return pipeline.run_discovery(cfg, data, out)
    return None


def cmd_train(cfg, out, args, t0):
    data = pipeline.load_data(cfg)
    disc = _discovery_if_needed(cfg, data, out, args.groups)
    res = pipeline.run_robust(cfg, data, disc, train_groups=args.groups)
    nets.save_checkpoint(res.net, out / "checkpoints" / "robust", cfg.robust_sgdm.seed, cfg.robust_sgdm.epochs)
    robusttrain.save_report(res.report, out / "reports", "train_log")
    _report(out, "train", {"config": cfg.to_dict(), "result": res.to_json()}, t0)


def cmd_eval(cfg, out, args, t0):
    net = nets.load_checkpoint(args.checkpoint)
    data = pipeline.load_data(cfg)
    splits = {}
    for name, ds in data.items():
        preds = nets.predict(net, ds.images)
        entry = {"true": None, "pseudo": None}
        if ds.e is not None:
            entry["true"] = evalmatch.worst_group_accuracy(preds, ds.y, ds.groups(False)[0]).to_json()
        if ds.pseudo_e is not None:
            entry["pseudo"] = evalmatch.worst_group_accuracy(preds, ds.y, ds.groups(True)[0]).to_json()
        splits[name] = entry
    _report(out, "eval", {"checkpoint": str(args.checkpoint), "splits": splits}, t0)


def cmd_sweep_k(cfg, out, args, t0):
    rows = evalmatch.sweep_clusters(cfg, args.ks, out=out / "reports", workers=args.workers, select=args.select)
    _report(out, "sweep_k_summary", {"config": cfg.to_dict(), "rows": rows}, t0)


def cmd_sweep_layers(cfg, out, args, t0):
    rows = evalmatch.sweep_layers(cfg, args.layer_sets, out=out / "reports", workers=args.workers)
    _report(out, "sweep_layers_summary", {"config": cfg.to_dict(), "rows": rows}, t0)


def cmd_grid(cfg, out, args, t0):
    data = pipeline.load_data(cfg)
    disc = _discovery_if_needed(cfg, data, out, args.groups)
    grid = pipeline.grid_search(cfg, data, disc, train_groups=args.groups)
    evalmatch.write_table(grid.rows, out / "reports", "grid")
    best = grid.select(cfg.selection)
    res = grid.results[best]
    nets.save_checkpoint(res.net, out / "checkpoints" / "robust", cfg.robust_sgdm.seed, cfg.robust_sgdm.epochs)
    _report(out, "grid_summary", {"config": cfg.to_dict(), "grid": grid.to_json(), "selection": cfg.selection,
                                  "selected": best, "result": res.to_json()}, t0)


def cmd_pipeline(cfg, out, args, t0):
    pipeline.run_pipeline(cfg, out)


COMMANDS = {
    "synth": cmd_synth,
    "discover": cmd_discover,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-k": cmd_sweep_k,
    "sweep-layers": cmd_sweep_layers,
    "grid": cmd_grid,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or f"runs/{args.command}")
    t0 = time.time()
    try:
        if args.threads is not None:
            if args.threads < 1:
                print("config error: --threads must be >= 1", file=sys.stderr)
                return EXIT_CONFIG
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                COMMANDS[args.command](cfg, out, args, t0)
        else:
            COMMANDS[args.command](cfg, out, args, t0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
