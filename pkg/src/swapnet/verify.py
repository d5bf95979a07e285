"""Oracles for the stochastic machinery: enumeration, moments, bounds.

Per-unit masks are Bernoulli, so any network whose mask draw has few enough
entries can be checked exactly: enumerate every binary configuration, weight
it by its probability, and sum. That exhaustive expectation is the ground
truth that Monte Carlo sampling through the real mask sampler must agree
with, and the configuration set also yields a hard upper bound on gradient
norms that every sampled realization must respect.

Configurations are indexed lexicographically: configuration c assigns entry
e (sites in declaration order, row-major within a site) the bit
(c >> e) & 1. Derived masks (the complement side of skip_forward) never get
entries of their own.

The ToyNet here is a small dense residual network (fx = relu(x W) per
block) whose combine step runs through the same code paths as the
convolutional blocks, which keeps these checks honest about the machinery
they validate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ComputationTape, backward, grad_norm
from .network import Network, _combine_on_tape, mask_shapes, network_forward
from .rules import SLOT_FX, SLOT_X, MaskSet, StochasticRule, sample_masks
from .tensor import Tensor, softmax

__all__ = [
    "EnumerationSite",
    "EnumerationDomain",
    "all_mask_configs",
    "analytic_moments",
    "pair_unit_draws",
    "exhaustive_expectation",
    "monte_carlo_mean",
    "max_grad_norm_over_masks",
    "ToyNet",
    "network_enumeration_domain",
    "network_masks_from_bits",
    "network_exhaustive_expectation",
]

MAX_ENUM_ENTRIES = 24


@dataclass(frozen=True)
class EnumerationSite:
    """One independently drawn mask: its draw shape and retain probability."""

    shape: tuple
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if any(d < 1 for d in self.shape):
            raise ValueError(f"bad site shape {self.shape}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta {self.theta} outside [0, 1]")

    @property
    def entries(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass(frozen=True)
class EnumerationDomain:
    """All independent mask entries of a model, capped so 2^entries is feasible."""

    sites: tuple

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        if not self.sites:
            raise ValueError("domain needs at least one site")
        if self.total_entries > MAX_ENUM_ENTRIES:
            raise ValueError(f"{self.total_entries} mask entries exceed the "
                             f"enumeration cap of {MAX_ENUM_ENTRIES}")

    @property
    def total_entries(self) -> int:
        return sum(s.entries for s in self.sites)

    @property
    def num_configs(self) -> int:
        return 1 << self.total_entries

    def split_bits(self, bits: np.ndarray) -> list:
        """Slices a (..., total_entries) bit array into per-site mask arrays."""
        out = []
        offset = 0
        for site in self.sites:
            part = bits[..., offset : offset + site.entries]
            out.append(part.reshape(bits.shape[:-1] + site.shape))
            offset += site.entries
        return out


def all_mask_configs(domain: EnumerationDomain):
    """Every configuration's bits (M, T) float64 and probability (M,)."""
    t = domain.total_entries
    m = domain.num_configs
    bits = ((np.arange(m, dtype=np.int64)[:, None] >> np.arange(t)) & 1).astype(np.float64)
    thetas = np.concatenate([np.full(s.entries, s.theta) for s in domain.sites])
    probs = np.prod(bits * thetas + (1.0 - bits) * (1.0 - thetas), axis=1)
    return bits, probs


def analytic_moments(x, y, theta1: float, theta2: float):
    """Mean and variance of m1*x + m2*y with independent Bernoulli masks.

    Retain probabilities 0 and 1 give exactly zero variance contributions
    because theta * (1 - theta) is exactly 0.0 in floating point.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mean = theta1 * x + theta2 * y
    var = theta1 * (1.0 - theta1) * x * x + theta2 * (1.0 - theta2) * y * y
    return mean, var


def pair_unit_draws(x, y, theta1: float, theta2: float, draws: int, key) -> np.ndarray:
    """`draws` realizations of m1*x + m2*y through the real mask sampler."""
    rule = StochasticRule("swapout_pair", (theta1, theta2))
    masks = sample_masks(rule, (draws,), key)
    return masks.masks[0].array * x + masks.masks[1].array * y


def exhaustive_expectation(net, x) -> np.ndarray:
    """Exact E[f(x)] over all mask configurations of `net`.

    `net` must expose enumeration_domain() and forward_many(x, bits).
    """
    domain = net.enumeration_domain()
    bits, probs = all_mask_configs(domain)
    outs = net.forward_many(x, bits)
    return np.tensordot(probs, outs, axes=1)


def monte_carlo_mean(net, x, draws: int, seed: int = 0):
    """Sampler-backed estimate of E[f(x)]: (mean, standard error) elementwise."""
    if draws < 2:
        raise ValueError("need at least 2 draws for a standard error")
    outs = net.sample_outputs(x, draws, seed)
    return outs.mean(axis=0), outs.std(axis=0, ddof=1) / np.sqrt(draws)


def max_grad_norm_over_masks(net, x, labels) -> float:
    """Exact max over all mask configurations of the loss gradient norm."""
    domain = net.enumeration_domain()
    bits, _ = all_mask_configs(domain)
    best = 0.0
    for c in range(bits.shape[0]):
        plan = net.masks_from_bits(bits[c])
        best = max(best, net.loss_grad_norm(x, labels, plan))
    return best


def _drawn_sites(rule: StochasticRule, unit_entries: int):
    """(theta, slot, entries) for each independently drawn mask of a rule."""
    entries = 1 if rule.granularity == "block" else unit_entries
    if rule.kind in ("dropout", "layer_dropout"):
        return [(rule.thetas[0], SLOT_FX, entries)]
    if rule.kind == "skip_forward":
        return [(rule.thetas[0], SLOT_X, entries)]
    if rule.kind == "swapout_pair":
        return [(rule.thetas[0], SLOT_X, entries), (rule.thetas[1], SLOT_FX, entries)]
    raise ValueError(f"rule kind {rule.kind!r} has no enumeration support")


class ToyNet:
    """Dense residual blocks (fx = relu(h W)) with per-block stochastic rules.

    Small enough to enumerate: with unit granularity each block contributes
    width entries per drawn mask. The gradient path reuses the production
    combine step so bounds proved here speak for the real machinery.
    """

    def __init__(self, weights, head, rules):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.head = np.asarray(head, dtype=np.float64)
        self.rules = list(rules)
        d = self.weights[0].shape[0]
        if any(w.shape != (d, d) for w in self.weights) or self.head.shape[0] != d:
            raise ValueError("weights must be (d, d) and head (d, classes)")
        if len(self.rules) != len(self.weights):
            raise ValueError("one rule per block")
        for rule in self.rules:
            if rule.granularity not in ("unit", "block"):
                raise ValueError("ToyNet supports unit or block granularity")
            _drawn_sites(rule, d)
        self.width = d

    @staticmethod
    def random(blocks: int, width: int, classes: int, rules, seed: int = 0,
               scale: float = 0.6) -> "ToyNet":
        rng = np.random.default_rng(seed)
        weights = [rng.standard_normal((width, width)) * scale for _ in range(blocks)]
        head = rng.standard_normal((width, classes)) * scale
        return ToyNet(weights, head, rules)

    def enumeration_domain(self) -> EnumerationDomain:
        sites = []
        for rule in self.rules:
            for theta, _, entries in _drawn_sites(rule, self.width):
                sites.append(EnumerationSite((entries,), theta))
        return EnumerationDomain(tuple(sites))

    def _block_masks(self, site_arrays):
        """Full (..., width) x-side and fx-side masks for each block."""
        per_block = []
        i = 0
        for rule in self.rules:
            drawn = _drawn_sites(rule, self.width)
            slot_masks = {}
            for (theta, slot, entries) in drawn:
                arr = site_arrays[i]
                i += 1
                if entries == 1:
                    arr = np.repeat(arr, self.width, axis=-1)
                slot_masks[slot] = arr
            if rule.kind == "skip_forward":
                slot_masks[SLOT_FX] = 1.0 - slot_masks[SLOT_X]
            per_block.append(slot_masks)
        return per_block

    def forward_many(self, x, bits: np.ndarray) -> np.ndarray:
        """Vectorized forward over configurations or sampled mask rows."""
        domain = self.enumeration_domain()
        per_block = self._block_masks(domain.split_bits(bits))
        h = np.broadcast_to(np.asarray(x, dtype=np.float64), bits.shape[:-1] + (self.width,))
        for w, rule, slot_masks in zip(self.weights, self.rules, per_block):
            fx = np.maximum(h @ w, 0.0)
            if rule.kind == "dropout":
                h = slot_masks[SLOT_FX] * fx
            elif rule.kind == "layer_dropout":
                h = h + slot_masks[SLOT_FX] * fx
            else:
                h = slot_masks[SLOT_X] * h + slot_masks[SLOT_FX] * fx
        return h

    def sample_outputs(self, x, draws: int, seed: int = 0) -> np.ndarray:
        """(draws, width) forward outputs with masks from the real sampler.

        Each draw row is one independent realization; the drawn masks of a
        MaskSet come first and in site order, so they map directly onto the
        enumeration bit layout.
        """
        cols = []
        for b, rule in enumerate(self.rules):
            mask_set = sample_masks(rule, (draws, self.width), (seed, "mc", b))
            for i, (_, _, entries) in enumerate(_drawn_sites(rule, self.width)):
                arr = mask_set.masks[i].array
                cols.append(arr[:, :1] if entries == 1 else arr)
        bits = np.concatenate(cols, axis=1)
        return self.forward_many(x, bits)

    def masks_from_bits(self, bits: np.ndarray) -> list:
        """MaskSets (production mask containers) for one configuration."""
        per_block = self._block_masks(self.enumeration_domain().split_bits(bits))
        plan = []
        for rule, slot_masks in zip(self.rules, per_block):
            if rule.kind in ("dropout", "layer_dropout"):
                masks = (Tensor(slot_masks[SLOT_FX][None, :]),)
                thetas = (rule.thetas[0],)
            elif rule.kind == "skip_forward":
                masks = (Tensor(slot_masks[SLOT_X][None, :]), Tensor(slot_masks[SLOT_FX][None, :]))
                thetas = (rule.thetas[0], 1.0 - rule.thetas[0])
            else:
                masks = (Tensor(slot_masks[SLOT_X][None, :]), Tensor(slot_masks[SLOT_FX][None, :]))
                thetas = rule.thetas
            plan.append(MaskSet(masks, thetas, ("enum",)))
        return plan

    def sample_mask_plan(self, key) -> list:
        """One production-sampler draw shaped for a single example."""
        return [sample_masks(rule, (1, self.width), tuple(key) + (b,))
                for b, rule in enumerate(self.rules)]

    def loss_on_tape(self, tape: ComputationTape, x, labels, plan):
        h = tape.constant(Tensor(np.asarray(x, dtype=np.float64).reshape(1, self.width)))
        for b, (w, rule) in enumerate(zip(self.weights, self.rules)):
            wn = tape.parameter(Tensor(w), f"block{b}.weight")
            fx = tape.relu(tape.matmul(h, wn))
            h = _combine_on_tape(tape, rule, h, fx, plan[b], deterministic=False)
        head = tape.parameter(Tensor(self.head), "head.weight")
        logits = tape.matmul(h, head)
        return tape.softmax_cross_entropy(logits, np.asarray(labels))

    def loss_grad_norm(self, x, labels, plan) -> float:
        tape = ComputationTape()
        loss = self.loss_on_tape(tape, x, labels, plan)
        return grad_norm(backward(tape, loss))


# -- enumeration over real convolutional networks (tiny configs only) --------


def network_enumeration_domain(net: Network, image_hw: int) -> EnumerationDomain:
    sites = []
    for blk, shape in zip(net.blocks, mask_shapes(net, 1, image_hw)):
        if blk.rule.kind == "none":
            continue
        _, c, h, w = shape
        if blk.rule.granularity == "unit":
            draw = (1, c, h, w)
        elif blk.rule.granularity == "channel":
            draw = (1, c, 1, 1)
        else:
            draw = (1, 1, 1, 1)
        for theta, _, _ in _drawn_sites(blk.rule, 1):
            sites.append(EnumerationSite(draw, theta))
    return EnumerationDomain(tuple(sites))


def network_masks_from_bits(net: Network, image_hw: int, bits: np.ndarray) -> list:
    domain = network_enumeration_domain(net, image_hw)
    site_arrays = iter(domain.split_bits(bits))
    plan = []
    for blk, shape in zip(net.blocks, mask_shapes(net, 1, image_hw)):
        rule = blk.rule
        if rule.kind == "none":
            plan.append(None)
            continue
        drawn = _drawn_sites(rule, 1)
        full = {}
        for theta, slot, _ in drawn:
            arr = np.ascontiguousarray(np.broadcast_to(next(site_arrays), shape))
            full[slot] = arr
        if rule.kind == "skip_forward":
            full[SLOT_FX] = 1.0 - full[SLOT_X]
            masks = (Tensor(full[SLOT_X]), Tensor(full[SLOT_FX]))
            thetas = (rule.thetas[0], 1.0 - rule.thetas[0])
        elif rule.kind in ("dropout", "layer_dropout"):
            masks = (Tensor(full[SLOT_FX]),)
            thetas = (rule.thetas[0],)
        else:
            masks = (Tensor(full[SLOT_X]), Tensor(full[SLOT_FX]))
            thetas = rule.thetas
        plan.append(MaskSet(masks, thetas, ("enum",)))
    return plan


def network_exhaustive_expectation(net: Network, x: Tensor, image_hw: int,
                                   output: str = "softmax") -> np.ndarray:
    """Exact expected prediction of a tiny network under stochastic evaluation.

    Cost is 2^entries full forward passes; intended for configs with a
    handful of mask entries.
    """
    domain = network_enumeration_domain(net, image_hw)
    bits, probs = all_mask_configs(domain)
    acc = None
    for c in range(bits.shape[0]):
        if probs[c] == 0.0:
            continue
        plan = network_masks_from_bits(net, image_hw, bits[c])
        out = network_forward(net, x, plan, "stoch-eval")
        arr = softmax(out).array if output == "softmax" else out.array
        acc = probs[c] * arr if acc is None else acc + probs[c] * arr
    return acc
