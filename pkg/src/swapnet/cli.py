"""Command line interface: train, eval, sweep, verify, params.

A run directory collects everything one experiment produces: the canonical
config text, a metrics CSV (one row per epoch, deterministic bytes for a
given config), a sweep CSV when requested, the final checkpoint, and a JSON
manifest carrying the config hash, seed, and wall time. Rerunning the same
config reproduces the metrics CSV byte for byte; only the wall time in the
manifest differs.

Pipeline failures are annotated with the stage that raised them
(load-data, build-network, train, evaluate, checkpoint, metrics, manifest)
so a broken config points at the right place.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ExperimentConfig,
    build_network,
    config_hash,
    parse_config_file,
    serialize_config,
    with_seed,
)
from .data import load_dataset
from .inference import InferenceMode, evaluate, sample_sweep
from .network import load_checkpoint, param_count, save_checkpoint
from .rules import StochasticRule
from .train import train
from .verify import (
    ToyNet,
    analytic_moments,
    exhaustive_expectation,
    max_grad_norm_over_masks,
    monte_carlo_mean,
    pair_unit_draws,
)

__all__ = ["run_experiment", "main"]

METRICS_COLUMNS = ("epoch", "lr", "train_loss", "train_error", "det_error", "stoch_error")
CHECKPOINT_NAME = "model.ckpt"


class StageError(RuntimeError):
    """A pipeline failure labeled with the stage that produced it."""


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(f"stage {name}: {exc}") from exc


def _write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([
                row["epoch"], repr(row["lr"]), repr(row["train_loss"]),
                repr(row["train_error"]),
                repr(row["det_error"]) if "det_error" in row else "",
                repr(row["stoch_error"]) if "stoch_error" in row else "",
            ])


def _write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("K", "mean_error", "std_error", "repetitions"))
        for row in rows:
            writer.writerow([row["K"], repr(row["mean_error"]), repr(row["std_error"]),
                             row["repetitions"]])


def run_experiment(cfg: ExperimentConfig, out_dir=None, progress=None) -> dict:
    """Full pipeline: data, training, evaluation, artifacts on disk."""
    started = time.time()
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(serialize_config(cfg), encoding="utf-8")

    with _stage("load-data"):
        train_data, eval_data = load_dataset(cfg.dataset)
    with _stage("build-network"):
        net = build_network(cfg)
    with _stage("train"):
        rows = train(net, train_data, cfg.train, progress=progress)
    with _stage("evaluate"):
        det_error = evaluate(net, eval_data, InferenceMode())["error"]
        stoch_error = evaluate(net, eval_data, cfg.inference)["error"]
        rows[-1]["det_error"] = det_error
        rows[-1]["stoch_error"] = stoch_error
    with _stage("checkpoint"):
        save_checkpoint(out / CHECKPOINT_NAME, net)
    with _stage("metrics"):
        _write_metrics_csv(out / "metrics.csv", rows)
    with _stage("manifest"):
        manifest = {
            "name": cfg.name,
            "version": __version__,
            "config_sha256": config_hash(cfg),
            "seed": cfg.seed,
            "epochs": cfg.train.epochs,
            "wall_time_seconds": round(time.time() - started, 3),
            "train_loss": rows[-1]["train_loss"],
            "train_error": rows[-1]["train_error"],
            "det_error": det_error,
            "stoch_error": stoch_error,
            "eval_examples": len(eval_data),
        }
        with open(out / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
    return {"net": net, "rows": rows, "det_error": det_error,
            "stoch_error": stoch_error, "out": str(out), "manifest": manifest}


def _load_config(args) -> ExperimentConfig:
    with _stage("load-config"):
        cfg = parse_config_file(args.config)
        if getattr(args, "seed", None) is not None:
            cfg = with_seed(cfg, args.seed)
        if getattr(args, "out", None) is not None:
            cfg = replace(cfg, out_dir=args.out)
    return cfg


def _load_run_network(cfg: ExperimentConfig):
    path = Path(cfg.out_dir) / CHECKPOINT_NAME
    if not path.exists():
        raise StageError(f"no checkpoint at {path}; run the train subcommand first")
    net = load_checkpoint(path, group_rules=cfg.rules,
                          masks_per_example=cfg.masks_per_example)
    if net.cfg != cfg.network:
        raise StageError(f"checkpoint network {net.cfg} does not match config {cfg.network}")
    return net


def _eval_subset(cfg: ExperimentConfig, subset):
    _, eval_data = load_dataset(cfg.dataset)
    if subset is not None:
        eval_data = eval_data.take(0, min(int(subset), len(eval_data)))
    return eval_data


def cmd_train(args) -> int:
    cfg = _load_config(args)

    def progress(row):
        print(f"epoch {row['epoch']:3d}  lr {row['lr']:.4g}  "
              f"loss {row['train_loss']:.4f}  error {row['train_error']:.4f}")

    res = run_experiment(cfg, progress=progress if not args.quiet else None)
    print(f"done: det_error={res['det_error']!r} stoch_error={res['stoch_error']!r} "
          f"out={res['out']}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    net = _load_run_network(cfg)
    eval_data = _eval_subset(cfg, args.subset)
    mode = cfg.inference
    if args.samples is not None:
        mode = replace(mode, kind="stochastic", samples=int(args.samples))
    det = evaluate(net, eval_data, InferenceMode())["error"]
    sto = evaluate(net, eval_data, mode)["error"]
    print(f"examples={len(eval_data)}")
    print(f"det_error={det!r}")
    print(f"stoch_error={sto!r} samples={mode.samples} reduction={mode.reduction}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    net = _load_run_network(cfg)
    eval_data = _eval_subset(cfg, args.subset)
    k_max = int(args.samples) if args.samples is not None else cfg.sweep_k_max
    rows = sample_sweep(net, eval_data, k_max, cfg.sweep_repetitions,
                        seed=cfg.inference.seed, reduction=cfg.inference.reduction)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_sweep_csv(out / "sweep.csv", rows)
    for row in rows:
        print(f"K={row['K']:3d}  mean_error={row['mean_error']:.5f}  "
              f"std_error={row['std_error']:.6f}  repetitions={row['repetitions']}")
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def cmd_params(args) -> int:
    cfg = _load_config(args)
    net = build_network(cfg)
    per_group = {}
    for name, arr in net.params.items():
        group = name.split(".")[0]
        per_group[group] = per_group.get(group, 0) + arr.size
    for group, count in per_group.items():
        print(f"{group}: {count}")
    print(f"total_parameters={param_count(net)}")
    return 0


def _verify_battery() -> list:
    checks = []

    mean, var = analytic_moments(1.0, -2.0, 0.3, 0.8)
    checks.append(("analytic moments hand values",
                   np.isclose(mean, -1.3) and np.isclose(var, 0.85)))

    draws = pair_unit_draws(1.0, -2.0, 0.3, 0.8, 50_000, (0,))
    se = np.sqrt(var / draws.size)
    checks.append(("sampler mean within 4 standard errors of analytic",
                   abs(draws.mean() - mean) <= 4 * se))

    degenerate = pair_unit_draws(2.0, -1.0, 1.0, 0.0, 1000, (1,))
    checks.append(("degenerate retain probabilities have zero spread",
                   degenerate.min() == degenerate.max()))

    rule = StochasticRule("swapout_pair", (0.5, 0.5))
    toy = ToyNet.random(2, 2, 2, [rule, rule], seed=3)
    x = np.array([0.8, -1.1])
    exact = exhaustive_expectation(toy, x)
    mc, mc_se = monte_carlo_mean(toy, x, draws=20_000, seed=5)
    checks.append(("toy enumeration matches Monte Carlo within 4 standard errors",
                   bool(np.all(np.abs(mc - exact) <= 4 * mc_se + 1e-12))))

    labels = np.array([1])
    bound = max_grad_norm_over_masks(toy, x, labels)
    sampled_ok = all(
        toy.loss_grad_norm(x, labels, toy.sample_mask_plan((7, i))) <= bound + 1e-12
        for i in range(100))
    checks.append(("sampled gradient norms below enumerated maximum", sampled_ok))
    return checks


def cmd_verify(args) -> int:
    failures = 0
    for name, ok in _verify_battery():
        print(f"{'ok' if ok else 'FAIL'}: {name}")
        failures += 0 if ok else 1
    return 1 if failures else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="swapnet",
        description="Stochastic residual network laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, needs_config=True):
        p = sub.add_parser(name, help=help_text)
        if needs_config:
            p.add_argument("--config", required=True, help="experiment INI file")
            p.add_argument("--seed", type=int, default=None, help="override experiment seed")
            p.add_argument("--out", default=None, help="override output directory")
        p.set_defaults(fn=fn)
        return p

    p_train = add("train", cmd_train, "train a network and write run artifacts")
    p_train.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    p_eval = add("eval", cmd_eval, "evaluate a trained checkpoint")
    p_eval.add_argument("--samples", type=int, default=None, help="stochastic sample count")
    p_eval.add_argument("--subset", type=int, default=None, help="evaluate on first N examples")
    p_sweep = add("sweep", cmd_sweep, "error versus sample count sweep")
    p_sweep.add_argument("--samples", type=int, default=None, help="largest K to sweep")
    p_sweep.add_argument("--subset", type=int, default=None, help="evaluate on first N examples")
    add("params", cmd_params, "report parameter counts for the configured network")
    add("verify", cmd_verify, "run the built-in verification battery", needs_config=False)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
