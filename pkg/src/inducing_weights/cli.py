"""Command-line entry point: ``inducing-weights <subcommand> ...``.

Every subcommand accepts ``--config`` (a JSON file whose keys fill in any
option not given on the command line) and ``--seed``. Outputs are written
with sorted keys, so identical seeds give byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import accounting, experiments, metrics
from .datasets import gen_toy_regression, gen_two_moons, load_csv
from .layers import Likelihood, Network, VariantConfig
from .linalg import RngStream
from .matrix_normal import InducingPrior
from .sampler import benchmark
from .trainer import TrainConfig, prune_ffgw, prune_z, train


def _dump(obj, path=None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_data(source: dict, seed: int):
    """Training data from a CSV path or a named generator."""
    if "csv" in source:
        X, Y, _ = load_csv(source["csv"], source.get("n_targets", 1))
        if source.get("task", "regression") == "classification":
            return X, Y[0].astype(np.int64)
        return X, Y
    name = source.get("name")
    if name == "toy":
        d = gen_toy_regression(seed, variant=source.get("variant", "main"))
    elif name == "two_moons":
        d = gen_two_moons(source.get("n", 1000), source.get("noise", 0.1), seed)
    else:
        raise SystemExit(f"unknown dataset {name!r}")
    return d.X, d.Y


def build_network(cfg: dict, seed: int) -> Network:
    widths = cfg["widths"]
    n_layers = len(widths) - 1
    layer_cfgs = cfg.get("layers") or [cfg.get("variant", {})] * n_layers
    configs = [VariantConfig(**c) for c in layer_cfgs]
    acts = cfg.get("activations") or ["tanh"] * (n_layers - 1) + ["identity"]
    lik = Likelihood(**cfg.get("likelihood", {}))
    return Network.mlp(widths, configs, acts, lik, RngStream(seed, 7), bias=cfg.get("bias", True))


def cmd_train(a, cfg):
    X, Y = _load_data(cfg.get("data", {"name": "toy"}), a.seed)
    net = build_network(cfg["network"], a.seed)
    tc = TrainConfig(**{**cfg.get("train", {}), "seed": a.seed})
    log_path = a.log or str(Path(a.out).with_suffix(".log.jsonl"))
    log = train(net, X, Y, tc)
    with open(log_path, "w", encoding="utf-8") as fh:
        for rec in log:
            if not a.timing:
                rec = {k: v for k, v in rec.items() if k != "wall_ms"}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    net.save(a.out)


def cmd_eval(a, cfg):
    net = Network.load(a.ckpt)
    classify = net.likelihood.kind == "categorical"
    X, Y, _ = load_csv(a.data, 1 if classify else net.layers[-1].shape.d_out)
    rng = RngStream(a.seed, 13)
    if classify:
        probs = metrics.predict(net, X, a.mc, rng.split(0))
        ood = None
        if a.ood:
            ood = metrics.predict(net, _features_only(a.ood), a.mc, rng.split(1))
        report = metrics.classification_report(probs, Y[0].astype(np.int64), ood, a.bins).to_dict()
    else:
        mean, std = metrics.predict(net, X, a.mc, rng.split(0))
        report = metrics.regression_report(mean, std, Y)
    _dump(report, a.out)


def _features_only(path) -> np.ndarray:
    """Every column of a headed CSV as features (OOD inputs carry no labels)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data.T.copy()


def cmd_sample_check(a, cfg):
    shape = [int(v) for v in a.shape.split(",")]
    if len(shape) != 4:
        raise SystemExit("--shape expects d_out,d_in,M_out,M_in")
    if a.bench:
        rng = RngStream(a.seed, 19)
        prior = InducingPrior.random(*shape, rng.split(0))
        out = [benchmark(prior, m, a.draws, rng.split(i + 1), a.lam) for i, m in enumerate(("extended", "naive"))]
        _dump({"benchmark": out, "speedup": out[1]["ns_per_sample"] / out[0]["ns_per_sample"]}, a.out)
        return
    _dump(experiments.moment_check(shape, a.draws, a.lam, a.seed), a.out)


def cmd_prune(a, cfg):
    net = Network.load(a.ckpt)
    if a.method == "z":
        pruned, masks = prune_z(net, a.fraction)
    else:
        pruned, masks = prune_ffgw(net, 1.0 - a.fraction)
    pruned.save(a.out)
    zeroed = int(sum((m == 0).sum() for m in masks.values()))
    _dump({"method": a.method, "fraction": a.fraction, "zeroed": zeroed,
           "params_before": net.n_params(), "params_after": pruned.n_params()})


def cmd_count_params(a, cfg):
    m_in = a.M_in or a.M
    m_out = a.M_out or a.M
    budget = accounting.param_count(a.manifest, a.method, m_in, m_out, a.K, a.last_M_out, a.z_prune)
    _dump(budget.to_dict(), a.out)


def cmd_toy(a, cfg):
    out_dir = Path(a.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    res = experiments.run_toy_regression(a.variant, a.seed, steps=a.steps, n_samples=a.samples,
                                         target=a.target, mc=a.mc)
    stem = f"toy_{a.variant}_seed{a.seed}"
    (out_dir / f"{stem}.svg").write_text(experiments.toy_svg(res), encoding="utf-8")
    _dump(res.summary(), out_dir / f"{stem}.json")


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inducing-weights", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file of option defaults")
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=fn)
        return sp

    sp = add("train", cmd_train, "train a network from a JSON config")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", help="JSONL log path (default: next to the checkpoint)")
    sp.add_argument("--timing", action="store_true", help="include wall-clock times in the log")

    sp = add("eval", cmd_eval, "evaluate a checkpoint on a CSV dataset")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ood", help="CSV of out-of-distribution inputs (features only)")
    sp.add_argument("--mc", type=int, default=20)
    sp.add_argument("--bins", type=int, default=10)
    sp.add_argument("--out")

    sp = add("sample-check", cmd_sample_check, "check extended-Matheron moments against the exact ones")
    sp.add_argument("--shape", default="6,5,3,2", help="d_out,d_in,M_out,M_in")
    sp.add_argument("--draws", type=int, default=200_000)
    sp.add_argument("--lam", type=float, default=1.0)
    sp.add_argument("--bench", action="store_true", help="time cached Matheron against naive sampling")
    sp.add_argument("--out")

    sp = add("prune", cmd_prune, "prune a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--method", choices=("z", "ffgw"), required=True)
    sp.add_argument("--fraction", type=float, required=True)
    sp.add_argument("--out", required=True)

    sp = add("count-params", cmd_count_params, "count parameters on a layer manifest")
    sp.add_argument("--manifest", default="resnet50_cifar10", help="JSON path or shipped manifest name")
    sp.add_argument("--method", default="ffg_u", choices=accounting.METHODS)
    sp.add_argument("--M", type=int, default=64)
    sp.add_argument("--M-in", dest="M_in", type=int)
    sp.add_argument("--M-out", dest="M_out", type=int)
    sp.add_argument("--last-M-out", dest="last_M_out", type=int)
    sp.add_argument("--K", type=int, default=5)
    sp.add_argument("--z-prune", dest="z_prune", type=float, default=0.0)
    sp.add_argument("--out")

    sp = add("toy-regression", cmd_toy, "run the 1-D toy regression and plot it")
    sp.add_argument("--variant", required=True, choices=("ffg_w", "fcg_w", "ffg_u", "fcg_u", "ensemble_u"))
    sp.add_argument("--steps", type=int, default=20_000)
    sp.add_argument("--samples", type=int, default=32)
    sp.add_argument("--mc", type=int, default=200)
    sp.add_argument("--target", choices=("main", "alt"), default="main")
    sp.add_argument("--out-dir", dest="out_dir", default=".")
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    cfg = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
        # config keys fill options left at their defaults
        explicit = set(a.lstrip("-").split("=")[0].replace("-", "_") for a in (argv or sys.argv[1:]) if a.startswith("--"))
        for k, v in cfg.items():
            k2 = k.replace("-", "_")
            if hasattr(args, k2) and k2 not in explicit:
                setattr(args, k2, v)
    args.func(args, cfg)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
