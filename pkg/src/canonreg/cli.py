"""Command-line front end: ``canonreg <synth|annotate|train|extract|register|eval>``.

Options may also come from a JSON or TOML file given with ``--config``;
top-level keys apply to every command, a table named after the command
applies to that command only, and explicit flags win over both.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from .data import load_dataset
from .emd import NeighborGraph, annotate_neighbors
from .errors import CanonRegError, ConfigError, TrainingDiverged
from .evaluation import (RRE_THRESHOLDS_DEG, RTE_THRESHOLDS_CM, read_records, summary, threshold_table,
                         write_records)
from .geom import read_ply
from .ncc import canonical_scale, read_pose
from .pipeline import FeatureCache, extract, register_candidates, run_benchmark
from .register import RansacConfig, write_result
from .sparse import FeatureNet
from .synth import make_dataset
from .trainer import TrainConfig, default_schedule, train, write_history

logger = logging.getLogger("canonreg")


def _load_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    try:
        if path.endswith(".toml"):
            try:
                import tomllib
            except ImportError:  # Python 3.10
                import tomli as tomllib
            with open(path, "rb") as fh:
                return tomllib.load(fh)
        with open(path) as fh:
            return json.load(fh)
    except ValueError as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err


def _need(path, what):
    if path is None or not os.path.exists(path):
        raise ConfigError(f"{what} {path} does not exist")
    return path


def _load_net(path):
    return FeatureNet.load(_need(path, "checkpoint"))


def _load_graph(path):
    return NeighborGraph.from_json(_need(path, "neighbors file"))


def _ransac(args, seed=None):
    return RansacConfig(max_iterations=args.ransac_iterations, inlier_threshold=args.inlier_threshold,
                        confidence=args.confidence, seed=args.seed if seed is None else seed,
                        mutual=args.mutual).validate()


# --- commands -----------------------------------------------------------------------

def cmd_synth(args):
    man = make_dataset(args.out, args.models, args.views, args.split, args.seed, n_points=args.points,
                       jitter=args.jitter)
    logger.info("wrote %d models, %d views to %s", man["counts"]["models"], man["counts"]["views"], args.out)


def cmd_annotate(args):
    ds = load_dataset(args.data)
    models = [(m, ds.models[m]) for m in ds.train + ds.test]
    graph = annotate_neighbors(models, args.emd_k, args.emd_samples, args.seed, pool=ds.train)
    graph.validate()
    out = args.out or os.path.join(args.data, "neighbors.json")
    graph.to_json(out)
    logger.info("wrote %s", out)


def _train_config(args):
    return TrainConfig(p_pos=args.p_pos, p_neg=args.p_neg, learning_rate=args.learning_rate,
                       momentum=args.momentum, n_pos=args.n_pos, n_neg=args.n_neg, hinged=args.hinged,
                       seed=args.seed)


def cmd_train(args):
    ds = load_dataset(args.data)
    e1, e2 = args.epochs
    graph = _load_graph(args.neighbors) if e2 else None
    cfg = _train_config(args)
    os.makedirs(args.out, exist_ok=True)
    schedule = default_schedule((e1, e2))
    start = 0
    if args.resume:
        net = _load_net(args.resume)
        start = int(net.header.get("epochs_done", e1))
        schedule = schedule[1:]
    else:
        net = FeatureNet.default(args.k, tuple(args.channels), args.voxel, args.seed, dtype=np.dtype(args.dtype))
    names = {"same_instance": "phase1.ckpt", "cross_instance": "phase2.ckpt"}

    def save(phase, n, epochs_done):
        n.save(os.path.join(args.out, names[phase.name]), seed=args.seed, epochs_done=epochs_done,
               phase=phase.name)

    try:
        _, hist = train(ds, graph, net, schedule, cfg, start_epoch=start, on_phase_end=save)
    except TrainingDiverged as err:
        logger.error("training diverged at epoch %d", err.epoch)
        raise
    write_history(os.path.join(args.out, "loss.csv"), hist, seed=args.seed)


def cmd_extract(args):
    net = _load_net(args.checkpoint)
    cloud = read_ply(_need(args.input, "input cloud"))
    scale = _observation_scale(args, cloud)
    np.save(args.out, extract(net, cloud, scale).astype(np.float32 if args.float32 else np.float64))


def _observation_scale(args, cloud):
    if args.scale is not None:
        return args.scale
    if args.annotation:
        return read_pose(_need(args.annotation, "annotation"))[1]
    return canonical_scale(cloud)


def cmd_register(args):
    net = _load_net(args.checkpoint)
    ds = load_dataset(args.data)
    if args.batch:
        graph = _load_graph(args.neighbors)
        recs = [r[2] for r in run_benchmark(net, ds, graph, _ransac(args))]
        write_records(args.out, recs, seed=args.seed)
        s = summary(recs)
        logger.info("%d cases, mean MatchAcc %.4f", s["n"], s["match_acc"])
        return
    cloud = read_ply(_need(args.observation, "observation"))
    scale = _observation_scale(args, cloud)
    ids = args.candidates or ds.train
    missing = [c for c in ids if c not in ds.models]
    if missing:
        raise ConfigError(f"unknown candidate ids {missing}")
    cache = FeatureCache(net, ds)
    cands = [(c, ds.models[c], cache.model(c), ds.scales[c]) for c in ids]
    best, res, _ = register_candidates(cloud, extract(net, cloud, scale), scale, cands, _ransac(args))
    write_result(args.out, res, candidate=best, seed=args.seed, scale=scale, candidates=list(ids))
    logger.info("chose %s, inlier ratio %.3f", best, res.inlier_ratio)


def cmd_eval(args):
    os.makedirs(args.out, exist_ok=True)
    runs = []
    if args.checkpoints:
        ds = load_dataset(args.data)
        graph = _load_graph(args.neighbors)
        for path in args.checkpoints:
            label = os.path.splitext(os.path.basename(path))[0]
            recs = [r[2] for r in run_benchmark(_load_net(path), ds, graph, _ransac(args))]
            runs.append((label, recs))
    for path in args.results or []:
        runs.append((os.path.splitext(os.path.basename(path))[0], read_records(_need(path, "results file"))))
    if not runs:
        raise ConfigError("eval needs --results or --checkpoints")
    tables = {}
    text = [f"seed {args.seed}"]
    for label, recs in runs:
        write_records(os.path.join(args.out, f"{label}.csv"), recs, seed=args.seed)
        t = threshold_table(recs, tuple(args.rre_thresholds), tuple(args.rte_thresholds))
        tables[label] = {"rre_deg": dict(zip((f"{x:g}" for x in t.rre_thresholds), t.rre_fractions)),
                         "rte_cm": dict(zip((f"{x:g}" for x in t.rte_thresholds), t.rte_fractions)), "n": t.n,
                         **{f"mean_{k}": v for k, v in summary(recs).items() if k != "n"}}
        text.append(t.render(label))
    with open(os.path.join(args.out, "table.txt"), "w") as fh:
        fh.write("\n".join(text) + "\n")
    with open(os.path.join(args.out, "table.json"), "w") as fh:
        json.dump({"seed": args.seed, "tables": tables}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print("\n".join(text[1:]))


# --- parser -------------------------------------------------------------------------

def _ransac_flags(p):
    p.add_argument("--ransac-iterations", type=int, default=4000)
    p.add_argument("--inlier-threshold", type=float, default=0.05)
    p.add_argument("--confidence", type=float, default=0.999)
    p.add_argument("--mutual", action="store_true")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML file of option defaults")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="canonreg", description="Category-level point cloud registration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic chair dataset")
    p.add_argument("--out")
    p.add_argument("--models", type=int, default=32)
    p.add_argument("--views", type=int, default=10)
    p.add_argument("--split", type=float, default=0.75)
    p.add_argument("--points", type=int, default=4096)
    p.add_argument("--jitter", type=float, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("annotate", parents=[common], help="EMD nearest-neighbour graph")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--emd-k", type=int, default=3)
    p.add_argument("--emd-samples", type=int, default=512)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("train", parents=[common], help="two-phase feature training")
    p.add_argument("--data")
    p.add_argument("--neighbors")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, nargs=2, default=[30, 30], metavar=("SAME", "CROSS"))
    p.add_argument("--resume", help="phase-1 checkpoint; runs the cross-instance phase only")
    p.add_argument("--k", type=int, default=32)
    p.add_argument("--channels", type=int, nargs=2, default=[32, 64])
    p.add_argument("--voxel", type=float, default=0.025)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--p-pos", type=float, default=0.1)
    p.add_argument("--p-neg", type=float, default=1.4)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--n-pos", type=int, default=1024)
    p.add_argument("--n-neg", type=int, default=1024)
    p.add_argument("--hinged", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", parents=[common], help="per-point features as .npy")
    p.add_argument("--checkpoint")
    p.add_argument("--input")
    p.add_argument("--out")
    p.add_argument("--scale", type=float)
    p.add_argument("--annotation")
    p.add_argument("--float32", action="store_true")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("register", parents=[common], help="register observations to candidate models")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--observation")
    p.add_argument("--scale", type=float)
    p.add_argument("--annotation")
    p.add_argument("--candidates", nargs="+")
    p.add_argument("--batch", action="store_true", help="every test view against its EMD neighbours")
    p.add_argument("--neighbors")
    _ransac_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", parents=[common], help="threshold tables from results or checkpoints")
    p.add_argument("--out")
    p.add_argument("--results", nargs="+")
    p.add_argument("--checkpoints", nargs="+")
    p.add_argument("--data")
    p.add_argument("--neighbors")
    p.add_argument("--rre-thresholds", type=float, nargs="+", default=list(RRE_THRESHOLDS_DEG))
    p.add_argument("--rte-thresholds", type=float, nargs="+", default=list(RTE_THRESHOLDS_CM))
    _ransac_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser, sub


_REQUIRED = {
    "synth": ["out"],
    "annotate": ["data"],
    "train": ["data", "out"],
    "extract": ["checkpoint", "input", "out"],
    "register": ["checkpoint", "data", "out"],
    "eval": ["out"],
}


def parse_args(argv=None):
    parser, sub = build_parser()
    args = parser.parse_args(argv)
    cfg = _load_config(args.config)
    if cfg:
        known = {a.dest for a in sub.choices[args.command]._actions}
        merged = {k.replace("-", "_"): v for k, v in cfg.items() if not isinstance(v, dict)}
        merged.update({k.replace("-", "_"): v for k, v in cfg.get(args.command, {}).items()})
        unknown = set(merged) - known
        if unknown:
            raise ConfigError(f"unknown options for {args.command}: {sorted(unknown)}")
        # config values become defaults, so flags given on the command line still win
        sub.choices[args.command].set_defaults(**merged)
        args = parser.parse_args(argv)
    missing = [f"--{n}" for n in _REQUIRED[args.command] if getattr(args, n) is None]
    if missing:
        raise ConfigError(f"{args.command} needs {', '.join(missing)}")
    return args


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = parse_args(argv)
        if not args.verbose:
            logging.getLogger("canonreg.trainer").setLevel(logging.WARNING)
        args.func(args)
    except CanonRegError as err:
        print(f"canonreg: error: {err}", file=sys.stderr)
        return err.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
