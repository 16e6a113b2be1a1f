"""Command line entry point: ``scale-ull run|eval|gen-data|select``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import encoder as enc
from .config import ConfigError, parse_config
from .evaluation import EvalSet, evaluate
from .memory import minred_select, psa_select, random_select
from .numerics import make_rng
from .streams import LabeledDataset, gen_gaussian_mixture, load_dataset, save_dataset
from .trainer import run_experiment


def _balanced(ds: LabeledDataset) -> EvalSet:
    """Trim every class to the smallest class count (first rows kept)."""
    labels = ds.labels
    classes = np.unique(labels)
    per = min(int(np.sum(labels == c)) for c in classes)
    idx = np.sort(np.concatenate([np.flatnonzero(labels == c)[:per] for c in classes]))
    remap = {int(c): i for i, c in enumerate(classes)}
    return EvalSet(ds.samples[idx], np.array([remap[int(l)] for l in labels[idx]], dtype=np.int64))


def load_vectors(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == b"SCALEDS1":
        return load_dataset(path).samples
    return np.loadtxt(path, delimiter="," if path.suffix == ".csv" else None, dtype=np.float64, ndmin=2)


def cmd_run(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    rows = run_experiment(cfg, resume_from=args.resume)
    last = rows[-1] if rows else None
    if last is not None:
        print(json.dumps({"step": last.step, "acc": last.acc, "knn_acc": last.knn_acc, "out_dir": cfg.out_dir}))
    return 0


def cmd_eval(args) -> int:
    params = enc.load_checkpoint(args.checkpoint)
    eval_set = _balanced(load_dataset(args.data))
    T = eval_set.num_classes
    acc, knn = evaluate(params, eval_set, T, args.k, make_rng(args.seed), args.clustering, args.sigma)
    print(json.dumps({"acc": acc, "knn_acc": knn, "classes": T, "samples": int(eval_set.samples.shape[0])}))
    return 0


def cmd_gen_data(args) -> int:
    if args.kind != "gaussian":
        raise ConfigError(f"unsupported data kind {args.kind!r}")
    ds = gen_gaussian_mixture(args.T, args.U, args.dim, args.separation, make_rng(args.seed))
    save_dataset(ds, args.out)
    print(json.dumps({"rows": len(ds), "dim": args.dim, "out": args.out}))
    return 0


def cmd_select(args) -> int:
    x = load_vectors(args.inp)
    if args.policy == "psa":
        idx = psa_select(x, args.capacity)
    elif args.policy == "minred":
        idx = minred_select(x, args.capacity)
    else:
        idx = random_select(x.shape[0], args.capacity, make_rng(args.seed))
    Path(args.out).write_text("".join(f"{i}\n" for i in idx), encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scale-ull", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train over a single-pass stream")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--resume", help="training state file to continue from")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate an encoder checkpoint on a labelled dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--clustering", choices=("spectral", "kmeans"), default="spectral")
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-data", help="write a synthetic labelled dataset")
    p.add_argument("--kind", default="gaussian")
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--U", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("select", help="subset selection over a vector file")
    p.add_argument("--policy", choices=("psa", "minred", "random"), required=True)
    p.add_argument("--capacity", type=int, required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_select)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
