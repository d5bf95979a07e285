"""End-to-end acceptance battery.

Ten checks, each printing one summary line with its measured values and
budget so a full run reads as a checklist even when pytest captures stdout.
The heavy piece is the trend study (checks 7-9): ten depth-8 training runs
of configs/trend.ini plus a sample-count sweep, all sharing one session
fixture. Everything else runs in seconds.

Run the battery alone with `pytest tests/test_acceptance.py -v`; skip it
during development with `pytest --ignore=tests/test_acceptance.py`.
"""

import re
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from swapnet.autodiff import ComputationTape, backward, finite_diff_coordinate
from swapnet.cli import main as cli_main, run_experiment
from swapnet.config import parse_config, parse_config_file, with_seed
from swapnet.data import load_dataset, synth_dataset
from swapnet.inference import sample_sweep
from swapnet.network import (
    Network,
    NetworkConfig,
    forward_on_tape,
    network_forward,
    sample_mask_plan,
    uniform_group_rules,
)
from swapnet.rules import StochasticRule
from swapnet.tensor import Tensor, seeded_generator
from swapnet.verify import (
    EnumerationDomain,
    EnumerationSite,
    ToyNet,
    all_mask_configs,
    analytic_moments,
    max_grad_norm_over_masks,
    monte_carlo_mean,
    exhaustive_expectation,
    pair_unit_draws,
)

TREND_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "trend.ini"
PAIR_HALF = StochasticRule("swapout_pair", (0.5, 0.5))


def _line(num: int, name: str, ok: bool, detail: str) -> None:
    """One pass/fail line per check, bypassing pytest's capture."""
    verdict = "PASS" if ok else "FAIL"
    print(f"acceptance {num:02d} {name}: {verdict} | {detail}",
          file=sys.__stdout__, flush=True)


# -- 1: reduction lattice ------------------------------------------------------


def test_01_reduction_lattice_bit_exact():
    """swapout_pair degenerates bit-exactly into its special cases.

    With shared weights and shared mask streams: thetas (1,1) is the plain
    residual block, theta_x=0 is dropout, and block-granular theta_x=1 is
    layer dropout. The outputs must be equal to the last bit, not just close.
    """
    t0 = time.perf_counter()
    data = synth_dataset(16, 10, 32, 3, noise=1.0, seed=77)
    x = Tensor(data.images)
    key = (41, "reduction")

    def forward(kind, granularity, sx, sf):
        net = Network(NetworkConfig(variant="v2", blocks_per_group=(1, 1, 1)),
                      uniform_group_rules(kind, granularity, sx, sf), init_seed=5)
        plan = sample_mask_plan(net, 16, 32, key)
        return network_forward(net, x, plan, "stoch-eval").array

    plain = forward("none", "unit", "constant:1.0", "constant:1.0")
    pair_11 = forward("swapout_pair", "unit", "constant:1.0", "constant:1.0")
    d_residual = float(np.max(np.abs(pair_11 - plain)))

    drop = forward("dropout", "unit", "constant:1.0", "constant:0.3")
    pair_0t = forward("swapout_pair", "unit", "constant:0.0", "constant:0.3")
    d_dropout = float(np.max(np.abs(pair_0t - drop)))

    layer = forward("layer_dropout", "block", "constant:1.0", "constant:0.3")
    pair_1t = forward("swapout_pair", "block", "constant:1.0", "constant:0.3")
    d_layer = float(np.max(np.abs(pair_1t - layer)))

    wall = time.perf_counter() - t0
    ok = (np.array_equal(pair_11, plain) and np.array_equal(pair_0t, drop)
          and np.array_equal(pair_1t, layer) and wall < 60.0)
    _line(1, "reduction-lattice", ok,
          f"max|diff| residual={d_residual:.1e} dropout={d_dropout:.1e} "
          f"layer={d_layer:.1e} wall={wall:.1f}s (<60s)")
    assert np.array_equal(pair_11, plain)
    assert np.array_equal(pair_0t, drop)
    assert np.array_equal(pair_1t, layer)
    assert wall < 60.0


# -- 2: gradients vs central finite differences --------------------------------


def test_02_gradients_match_finite_differences():
    """Reverse-mode gradients of a 3-block swapout net vs the FD oracle.

    Masks are frozen, batch-norm runs in train mode without touching the
    running statistics, so the loss is a pure function of the parameters.
    500 coordinates sampled across every parameter tensor.
    """
    t0 = time.perf_counter()
    net = Network(NetworkConfig(variant="v2", blocks_per_group=(1, 1, 1), num_classes=4),
                  uniform_group_rules("swapout_pair", "unit", "constant:0.5", "constant:0.5"),
                  init_seed=8)
    x = Tensor(seeded_generator(8, "fd-input").standard_normal((2, 3, 12, 12)))
    labels = np.array([0, 1])
    plan = sample_mask_plan(net, 2, 12, (8, "fd"))

    tape = ComputationTape()
    logits = forward_on_tape(net, tape, x, plan, "train", update_running=False)
    loss = tape.softmax_cross_entropy(logits, labels)
    grads = backward(tape, loss)

    def loss_for(name):
        def f(p: Tensor) -> float:
            net.params[name][...] = p.array
            out = network_forward(net, x, plan, "train", update_running=False).array
            z = out - out.max(axis=1, keepdims=True)
            lse = np.log(np.exp(z).sum(axis=1))
            return float(np.mean(lse - z[np.arange(len(labels)), labels]))
        return f

    names = list(net.params)
    sizes = np.array([net.params[n].size for n in names])
    bounds = np.cumsum(sizes)
    flat_ids = np.sort(seeded_generator(8, "fd-pick").choice(
        int(sizes.sum()), size=500, replace=False))
    worst = 0.0
    for fid in flat_ids:
        t = int(np.searchsorted(bounds, fid, side="right"))
        name = names[t]
        idx = int(fid - (bounds[t - 1] if t else 0))
        original = net.params[name].copy()
        fd = finite_diff_coordinate(loss_for(name), Tensor(original), idx, h=1e-5)
        net.params[name][...] = original
        ad = grads[name].array.reshape(-1)[idx]
        worst = max(worst, abs(ad - fd) / max(abs(ad), abs(fd), 1e-6))

    wall = time.perf_counter() - t0
    ok = worst < 1e-4 and wall < 300.0
    _line(2, "finite-difference-gradients", ok,
          f"max_rel_err={worst:.2e} (<1e-4) over {len(flat_ids)} coords "
          f"wall={wall:.1f}s (<300s)")
    assert worst < 1e-4
    assert wall < 300.0


# -- 3: Monte Carlo vs exhaustive expectation ----------------------------------


def test_03_monte_carlo_matches_exhaustive_expectation():
    """10^5 sampler draws vs full enumeration, plus the ReLU witness.

    The toy network enumerates 2^8 mask configurations exactly; the Monte
    Carlo mean through the production sampler must land within 4 standard
    errors elementwise. The witness: relu does not commute with expectation,
    E[relu(M1 - M2)] = 1/4 while relu(E[M1 - M2]) = 0, both computed exactly.
    """
    t0 = time.perf_counter()
    toy = ToyNet.random(2, 2, 2, [PAIR_HALF, PAIR_HALF], seed=3)
    entries = toy.enumeration_domain().total_entries
    x = np.array([0.8, -1.1])
    exact = exhaustive_expectation(toy, x)
    mc, se = monte_carlo_mean(toy, x, draws=100_000, seed=5)
    gap = np.abs(mc - exact)
    worst_z = float(np.max(gap / np.maximum(se, 1e-300)))
    mc_ok = bool(np.all(gap <= 4.0 * se + 1e-12))

    # relu witness on one unit pair: values {0, 1, -1, 0} each with mass 1/4
    domain = EnumerationDomain((EnumerationSite((1,), 0.5), EnumerationSite((1,), 0.5)))
    bits, probs = all_mask_configs(domain)
    vals = bits[:, 0] * 1.0 + bits[:, 1] * (-1.0)
    mean_of_relu = float(probs @ np.maximum(vals, 0.0))
    relu_of_mean = float(max(probs @ vals, 0.0))
    draws = pair_unit_draws(1.0, -1.0, 0.5, 0.5, 100_000, (19,))
    sampled_relu = np.maximum(draws, 0.0)
    witness_se = float(sampled_relu.std(ddof=1) / np.sqrt(draws.size))
    witness_gap = abs(float(sampled_relu.mean()) - 0.25)

    wall = time.perf_counter() - t0
    ok = (entries <= 16 and mc_ok and mean_of_relu == 0.25 and relu_of_mean == 0.0
          and witness_gap <= 4.0 * witness_se and wall < 300.0)
    _line(3, "exact-expectation-oracle", ok,
          f"entries={entries} (<=16) worst|mc-exact|/se={worst_z:.2f} (<=4) "
          f"E[relu]={mean_of_relu} relu(E)={relu_of_mean} "
          f"sampler_gap={witness_gap:.2e} (<= {4 * witness_se:.2e}) "
          f"wall={wall:.1f}s (<300s)")
    assert entries <= 16
    assert mc_ok
    assert mean_of_relu == 0.25
    assert relu_of_mean == 0.0
    assert witness_gap <= 4.0 * witness_se
    assert wall < 300.0


# -- 4: variance identity over a theta grid ------------------------------------


def test_04_variance_matches_analytic_grid():
    """Sample variance of M1*x + M2*y against theta1(1-theta1)x^2 + theta2(1-theta2)y^2.

    10^5 draws per grid point, split into 50 replicates of 2,000: the
    estimate is the mean replicate variance and its standard error the
    spread over replicates, which keeps the 4-SE band honest even where the
    single-pass variance estimator is chi-square skewed (one theta at a
    boundary, the other at 1/2). Degenerate thetas must give exactly zero
    variance; interior thetas with nonzero inputs strictly positive.
    """
    t0 = time.perf_counter()
    reps, per_rep = 50, 2000
    thetas = (0.0, 0.25, 0.5, 0.75, 1.0)
    points = ((1.0, -2.0), (0.7, 0.3))
    worst_z = 0.0
    checked = 0
    for x, y in points:
        for t1 in thetas:
            for t2 in thetas:
                draws = pair_unit_draws(x, y, t1, t2, reps * per_rep, (23, checked))
                rep_vars = draws.reshape(reps, per_rep).var(axis=1, ddof=1)
                s2 = float(rep_vars.mean())
                se = float(rep_vars.std(ddof=1) / np.sqrt(reps))
                _, var = analytic_moments(x, y, t1, t2)
                var = float(var)
                degenerate = t1 in (0.0, 1.0) and t2 in (0.0, 1.0)
                if degenerate:
                    assert var == 0.0
                    # every mask draw is the same value, so the empirical
                    # distribution has zero spread (the float sample variance
                    # can sit an ulp above zero when the mean rounds)
                    assert float(draws.min()) == float(draws.max())
                else:
                    assert var > 0.0
                    assert s2 > 0.0
                    assert abs(s2 - var) <= 4.0 * se
                    worst_z = max(worst_z, abs(s2 - var) / se)
                checked += 1
    wall = time.perf_counter() - t0
    _line(4, "variance-identity", True,
          f"{checked} grid points worst|s2-var|/se={worst_z:.2f} (<=4) "
          f"degenerate thetas exactly 0 wall={wall:.1f}s")
    assert worst_z <= 4.0


# -- 5: parameter accounting ----------------------------------------------------


def test_05_parameter_accounting(tmp_path, capsys):
    """The params subcommand lands within 5% of 0.27M / 1.09M for depth 20."""
    t0 = time.perf_counter()

    def count_for(width: float) -> int:
        path = tmp_path / f"w{width}.ini"
        path.write_text(
            "[dataset]\nsource = synthetic\nnum_classes = 10\n"
            f"[network]\ndepth = 20\nwidth_multiplier = {width}\n",
            encoding="utf-8")
        assert cli_main(["params", "--config", str(path)]) == 0
        out = capsys.readouterr().out
        return int(re.search(r"total_parameters=(\d+)", out).group(1))

    n1 = count_for(1.0)
    n2 = count_for(2.0)
    dev1 = abs(n1 - 270_000) / 270_000
    dev2 = abs(n2 - 1_090_000) / 1_090_000
    wall = time.perf_counter() - t0
    ok = dev1 < 0.05 and dev2 < 0.05
    _line(5, "parameter-accounting", ok,
          f"depth20 w1={n1} ({dev1:.1%} from 0.27M) w2={n2} ({dev2:.1%} from 1.09M) "
          f"wall={wall:.1f}s")
    assert dev1 < 0.05
    assert dev2 < 0.05


# -- 6: gradient-norm bound ------------------------------------------------------


def test_06_sampled_gradient_norms_below_enumerated_max():
    """1,000 sampled swapout gradients vs the exhaustive max over all masks.

    Every sampled mask configuration is one of the 2^8 enumerated ones, so
    each sampled norm must sit at or below the enumerated maximum.
    """
    t0 = time.perf_counter()
    toy = ToyNet.random(2, 2, 2, [PAIR_HALF, PAIR_HALF], seed=7)
    x = np.array([0.8, -1.1])
    labels = np.array([1])
    bound = max_grad_norm_over_masks(toy, x, labels)
    norms = np.array([toy.loss_grad_norm(x, labels, toy.sample_mask_plan((13, i)))
                      for i in range(1000)])
    over = int((norms > bound + 1e-12).sum())
    wall = time.perf_counter() - t0
    ok = over == 0 and wall < 600.0
    _line(6, "gradient-norm-bound", ok,
          f"bound={bound:.4f} max_sampled={norms.max():.4f} "
          f"violations={over}/1000 wall={wall:.1f}s (<600s)")
    assert over == 0
    assert wall < 600.0


# -- 7-9: the trend study ---------------------------------------------------------


@pytest.fixture(scope="session")
def trend_study(tmp_path_factory):
    """Ten seeds of configs/trend.ini plus the sample sweep on seed 0.

    The sweep shares the study budget, so its cost is part of the recorded
    wall time. Training artifacts land in a session temp directory.
    """
    cfg = parse_config_file(TREND_CONFIG)
    out_root = tmp_path_factory.mktemp("trend")
    t0 = time.perf_counter()
    runs = []
    net0 = None
    for seed in range(10):
        run_cfg = replace(with_seed(cfg, seed), out_dir=str(out_root / f"seed{seed}"))
        res = run_experiment(run_cfg)
        runs.append((seed, res["det_error"], res["stoch_error"]))
        if seed == 0:
            net0 = res["net"]
    _, eval_data = load_dataset(cfg.dataset)
    sweep = sample_sweep(net0, eval_data, cfg.sweep_k_max, cfg.sweep_repetitions,
                         seed=cfg.inference.seed, reduction=cfg.inference.reduction)
    wall = time.perf_counter() - t0
    return {"cfg": cfg, "runs": runs, "net0": net0, "sweep": sweep,
            "eval_images": eval_data.images, "wall": wall}


def test_07_stochastic_beats_deterministic_across_seeds(trend_study):
    """Stochastic (K=30) error <= deterministic error in at least 7 of 10 seeds."""
    runs = trend_study["runs"]
    wall = trend_study["wall"]
    wins = sum(1 for _, det, sto in runs if sto <= det)
    table = " ".join(f"s{seed}:{det:.3f}/{sto:.3f}{'+' if sto <= det else '-'}"
                     for seed, det, sto in runs)
    ok = wins >= 7 and wall < 2700.0
    _line(7, "desk-scale-trend", ok,
          f"wins={wins}/10 (need >=7) det/stoch per seed: {table} "
          f"wall={wall:.0f}s (<2700s, sweep included)")
    assert wins >= 7
    assert wall < 2700.0


def test_08_sample_sweep_shape(trend_study):
    """Standard error shrinks with K (negative log-log slope) and the mean
    error plateaus: K=30 within one standard error of K=25."""
    sweep = trend_study["sweep"]
    ks = np.array([row["K"] for row in sweep], dtype=np.float64)
    means = np.array([row["mean_error"] for row in sweep])
    ses = np.array([row["std_error"] for row in sweep])
    positive = ses > 0
    slope = float(np.polyfit(np.log(ks[positive]), np.log(ses[positive]), 1)[0])
    gap = abs(means[29] - means[24])
    se25 = float(ses[24])
    ok = slope < 0.0 and se25 > 0.0 and gap <= se25
    _line(8, "sample-sweep-shape", ok,
          f"log-log slope={slope:.3f} (<0) |mean(K=30)-mean(K=25)|={gap:.4f} "
          f"<= se(K=25)={se25:.4f} zero-se points={int((~positive).sum())}")
    assert slope < 0.0
    assert se25 > 0.0
    assert gap <= se25


def test_09_batchnorm_variance_mismatch(trend_study):
    """Deterministic-inference batch variance sits below the running variance
    for more than 80% of batch-norm channels on the trained net."""
    from swapnet.network import observe_bn_variances

    net = trend_study["net0"]
    observed = observe_bn_variances(net, Tensor(trend_study["eval_images"]))
    wins = 0
    total = 0
    for name, batch_var in observed.items():
        running = net.bn_states[name].running_var
        wins += int((batch_var < running).sum())
        total += batch_var.size
    frac = wins / total
    ok = frac > 0.80
    _line(9, "batchnorm-mismatch", ok,
          f"batch_var < running_var for {wins}/{total} channels = {frac:.1%} (>80%)")
    assert frac > 0.80


# -- 10: determinism ---------------------------------------------------------------


def test_10_rerun_reproduces_metrics_bytes(tmp_path):
    """The same config run twice produces byte-identical metrics files."""
    t0 = time.perf_counter()
    text = (
        "[experiment]\nname = det-check\nseed = 3\n"
        "[dataset]\nsource = synthetic\ntrain_count = 300\neval_count = 128\n"
        "num_classes = 10\nimage_hw = 32\nnoise = 1.0\n"
        "[network]\nblocks_per_group = 1,1,1\n"
        "[rules]\nkind = swapout_pair\nschedule_x = constant:0.5\n"
        "schedule_fx = constant:0.5\n"
        "[train]\nbatch_size = 128\nepochs = 2\naugment = false\n"
        "[inference]\nkind = stochastic\nsamples = 5\n"
    )
    cfg = parse_config(text)
    # out_dir is passed as an override so both runs carry the identical
    # config (and therefore the identical manifest hash)
    first = run_experiment(cfg, out_dir=str(tmp_path / "a"))
    second = run_experiment(cfg, out_dir=str(tmp_path / "b"))
    bytes_a = (tmp_path / "a" / "metrics.csv").read_bytes()
    bytes_b = (tmp_path / "b" / "metrics.csv").read_bytes()
    same_hash = first["manifest"]["config_sha256"] == second["manifest"]["config_sha256"]
    wall = time.perf_counter() - t0
    ok = bytes_a == bytes_b and same_hash
    _line(10, "rerun-determinism", ok,
          f"metrics bytes equal={bytes_a == bytes_b} ({len(bytes_a)} bytes) "
          f"config hashes equal={same_hash} wall={wall:.1f}s")
    assert same_hash
    assert bytes_a == bytes_b
