"""Evaluation: deterministic expectation-mode and stochastic sample averaging.

Deterministic inference replaces every mask by its expectation (the rule's
retain probabilities) and normalizes with running statistics. Stochastic
inference keeps eval-mode normalization but redraws masks K times and
averages the outputs, either as mean of softmax probabilities (default) or
mean of logits followed by one softmax.

Averaging accumulates deviations from the first sample (p_0 + sum of
(p_k - p_0) / K) so that when every draw is identical, e.g. at retain
probabilities 0 or 1, the average is bit-for-bit the single forward pass,
and stochastic inference reproduces deterministic inference exactly.

Sample sweeps reuse draw prefixes: each repetition draws k_max snapshots
once and reports the running average at every K, so the K axis reflects
averaging alone, not fresh sampling noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .network import Network, network_forward, sample_mask_plan
from .tensor import Tensor, softmax

__all__ = [
    "InferenceMode",
    "DeltaMean",
    "predict",
    "evaluate",
    "sweep_errors",
    "sample_sweep",
]

REDUCTIONS = ("mean-of-softmax", "mean-of-logits")


@dataclass(frozen=True)
class InferenceMode:
    """How predictions are produced.

    kind "deterministic" ignores samples and seed; kind "stochastic" runs
    `samples` mask draws seeded from `seed` and averages per `reduction`.
    """

    kind: str = "deterministic"
    samples: int = 1
    seed: int = 0
    reduction: str = "mean-of-softmax"

    def __post_init__(self):
        if self.kind not in ("deterministic", "stochastic"):
            raise ValueError(f"unknown inference kind {self.kind!r}")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")


class DeltaMean:
    """Streaming mean that is exact when all inputs are identical.

    Keeps the first array and accumulates differences from it; the mean is
    first + acc / count, so zero deviations give back the first array with
    no rounding at all.
    """

    def __init__(self):
        self.first = None
        self.acc = None
        self.count = 0

    def add(self, arr: np.ndarray) -> None:
        if self.first is None:
            self.first = arr
            self.acc = np.zeros_like(arr)
        else:
            self.acc += arr - self.first
        self.count += 1

    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no samples accumulated")
        return self.first + self.acc / self.count


def _stochastic_probs(net: Network, x: Tensor, samples: int, seed, reduction: str,
                      key_prefix: tuple) -> Tensor:
    hw = x.shape[2]
    avg = DeltaMean()
    for k in range(samples):
        plan = sample_mask_plan(net, x.shape[0], hw, (seed,) + key_prefix + (k,))
        out = network_forward(net, x, plan, "stoch-eval")
        avg.add(softmax(out).array if reduction == "mean-of-softmax" else out.array)
    mean = avg.mean()
    return Tensor(mean) if reduction == "mean-of-softmax" else softmax(Tensor(mean))


def predict(net: Network, x: Tensor, mode: InferenceMode) -> Tensor:
    """Class probabilities (B, num_classes) for a batch under `mode`."""
    if mode.kind == "deterministic":
        return softmax(network_forward(net, x, None, "det-eval"))
    return _stochastic_probs(net, x, mode.samples, mode.seed, mode.reduction, ("inf", 0))


def evaluate(net: Network, data: Dataset, mode: InferenceMode, batch_size: int = 256) -> dict:
    """Top-1 error over a dataset; batches are part of the draw keys."""
    n = len(data)
    wrong = 0
    for bi, start in enumerate(range(0, n, batch_size)):
        x = Tensor(data.images[start : start + batch_size])
        labels = data.labels[start : start + batch_size]
        if mode.kind == "deterministic":
            probs = softmax(network_forward(net, x, None, "det-eval"))
        else:
            probs = _stochastic_probs(net, x, mode.samples, mode.seed, mode.reduction,
                                      ("inf", bi))
        wrong += int((probs.array.argmax(axis=1) != labels).sum())
    return {"error": wrong / n, "examples": n}


def sweep_errors(net: Network, data: Dataset, k_max: int, repetitions: int, seed: int = 0,
                 reduction: str = "mean-of-softmax", batch_size: int = 256) -> np.ndarray:
    """Error rate at every averaging depth: entry [r, K-1] uses the first K
    draws of repetition r's snapshot stream."""
    if k_max < 1 or repetitions < 1:
        raise ValueError("k_max and repetitions must be >= 1")
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")
    n = len(data)
    hw = data.images.shape[2]
    wrong = np.zeros((repetitions, k_max), dtype=np.int64)
    for rep in range(repetitions):
        for bi, start in enumerate(range(0, n, batch_size)):
            x = Tensor(data.images[start : start + batch_size])
            labels = data.labels[start : start + batch_size]
            avg = DeltaMean()
            for k in range(k_max):
                plan = sample_mask_plan(net, x.shape[0], hw, (seed, "sweep", rep, bi, k))
                out = network_forward(net, x, plan, "stoch-eval")
                avg.add(softmax(out).array if reduction == "mean-of-softmax" else out.array)
                mean = avg.mean()
                pred = mean.argmax(axis=1)  # softmax is monotone: logits argmax is identical
                wrong[rep, k] += int((pred != labels).sum())
    return wrong / n


def sample_sweep(net: Network, data: Dataset, k_max: int, repetitions: int, seed: int = 0,
                 reduction: str = "mean-of-softmax", batch_size: int = 256) -> list[dict]:
    """Aggregated sweep rows: mean and standard error over repetitions per K."""
    errors = sweep_errors(net, data, k_max, repetitions, seed, reduction, batch_size)
    rows = []
    for k in range(k_max):
        col = errors[:, k]
        std = float(col.std(ddof=1)) if repetitions > 1 else 0.0
        rows.append({"K": k + 1, "mean_error": float(col.mean()),
                     "std_error": std / repetitions ** 0.5, "repetitions": repetitions})
    return rows
