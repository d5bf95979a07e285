"""Bernoulli mask sampling and the block combination rules.

A block computes a transform fx = F(x) of its input x and then combines the
two with sampled {0,1} masks. The rule kinds:

    none          y = x + fx                    (plain residual)
    dropout       y = M * fx
    layer_dropout y = x + M * fx                (one shared Bernoulli per block)
    skip_forward  y = M * x + (1 - M) * fx
    swapout_pair  y = M1 * x + M2 * fx
    swapout_general  y = sum_i  M_i * F_i       (N branches)

Mask streams are keyed by (caller key..., slot) where slot 0 is the x-side
mask and slot 1 the fx-side mask (general rules use slot i for branch i).
Keeping the slot assignment fixed across kinds makes the reductions exact:
swapout_pair with theta1=0 draws the identical fx mask a dropout rule would,
so the two outputs agree bit for bit, and likewise for layer dropout.

Masks multiply activations as exact 0.0/1.0 values; there is no inverted
(train-time) rescaling. Inference compensates by replacing masks with their
expectations (`deterministic_transform`) or by averaging sampled forwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, seeded_generator

__all__ = [
    "RULE_KINDS",
    "GRANULARITIES",
    "StochasticRule",
    "MaskSet",
    "Schedule",
    "DeterministicRule",
    "parse_schedule",
    "format_schedule",
    "resolve_schedule",
    "sample_masks",
    "apply_rule",
    "apply_rule_general",
    "deterministic_transform",
]

RULE_KINDS = ("none", "dropout", "layer_dropout", "skip_forward", "swapout_pair", "swapout_general")
GRANULARITIES = ("unit", "channel", "block")

# slot ids for the two streams of a pairwise rule
SLOT_X = 0
SLOT_FX = 1


@dataclass(frozen=True)
class StochasticRule:
    """A combination rule plus its retain probabilities.

    thetas: () for none; (theta_fx,) for dropout and layer_dropout;
    (theta_x,) for skip_forward; (theta_x, theta_fx) for swapout_pair;
    N >= 2 values for swapout_general. granularity chooses how much of the
    activation shares one Bernoulli draw: every entry independently ("unit"),
    one draw per channel ("channel"), or one draw per block ("block").
    layer_dropout is defined by its single shared variable, so it is always
    block granularity.
    """

    kind: str
    thetas: tuple[float, ...] = ()
    granularity: str = "unit"

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown rule kind {self.kind!r}")
        object.__setattr__(self, "thetas", tuple(float(t) for t in self.thetas))
        for t in self.thetas:
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"theta {t} outside [0, 1]")
        expected = {"none": 0, "dropout": 1, "layer_dropout": 1, "skip_forward": 1, "swapout_pair": 2}
        if self.kind == "swapout_general":
            if len(self.thetas) < 2:
                raise ValueError("swapout_general needs at least 2 thetas")
        elif len(self.thetas) != expected[self.kind]:
            raise ValueError(f"{self.kind} takes {expected[self.kind]} theta(s), got {len(self.thetas)}")
        if self.kind == "layer_dropout":
            if self.granularity == "unit":
                # the defining feature of layer dropout is the shared variable
                object.__setattr__(self, "granularity", "block")
            elif self.granularity != "block":
                raise ValueError("layer_dropout granularity is necessarily 'block'")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")


@dataclass(frozen=True)
class MaskSet:
    """Sampled masks with the thetas they were drawn at and their stream key."""

    masks: tuple[Tensor, ...]
    thetas: tuple[float, ...]
    key: tuple = ()

    def __post_init__(self):
        for m in self.masks:
            vals = m.array
            if not np.all((vals == 0.0) | (vals == 1.0)):
                raise ValueError("mask entries must be exactly 0 or 1")


@dataclass(frozen=True)
class Schedule:
    """Per-block theta assignment: constant, or linear from a to b."""

    kind: str  # "constant" | "linear"
    a: float
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        for v in (self.a, self.b) if self.kind == "linear" else (self.a,):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"schedule endpoint {v} outside [0, 1]")

    @staticmethod
    def constant(theta: float) -> "Schedule":
        return Schedule("constant", float(theta))

    @staticmethod
    def linear(a: float, b: float) -> "Schedule":
        return Schedule("linear", float(a), float(b))


def parse_schedule(text: str) -> Schedule:
    """Parses the config syntax `constant:0.5` / `linear:1.0:0.5`."""
    parts = text.strip().split(":")
    if parts[0] == "constant" and len(parts) == 2:
        return Schedule.constant(float(parts[1]))
    if parts[0] == "linear" and len(parts) == 3:
        return Schedule.linear(float(parts[1]), float(parts[2]))
    raise ValueError(f"bad schedule string {text!r}")


def format_schedule(s: Schedule) -> str:
    if s.kind == "constant":
        return f"constant:{s.a!r}"
    return f"linear:{s.a!r}:{s.b!r}"


def resolve_schedule(s: Schedule, block_index: int, num_blocks: int) -> float:
    """Theta for one block; linear interpolates first block -> last block.

    A single-block network sits at the first endpoint.
    """
    if num_blocks < 1 or not 0 <= block_index < num_blocks:
        raise ValueError(f"block index {block_index} out of range for {num_blocks} blocks")
    if s.kind == "constant":
        return s.a
    if num_blocks == 1:
        return s.a
    return s.a + (s.b - s.a) * (block_index / (num_blocks - 1))


def _slots_for(rule: StochasticRule) -> tuple[int, ...]:
    if rule.kind == "none":
        return ()
    if rule.kind in ("dropout", "layer_dropout"):
        return (SLOT_FX,)
    if rule.kind == "skip_forward":
        return (SLOT_X,)
    if rule.kind == "swapout_pair":
        return (SLOT_X, SLOT_FX)
    return tuple(range(len(rule.thetas)))


def _draw_mask(theta: float, shape: tuple[int, ...], granularity: str,
               per_example: bool, rng: np.random.Generator) -> Tensor:
    """One {0,1} mask materialized at the full activation shape.

    Activation shapes are (B, C, ...); granularity sets how many independent
    draws back the mask: all entries ("unit"), one per (example, channel)
    pair ("channel"), or one per example ("block"). per_example=False shares
    the draw across the leading batch axis. (u < theta) maps theta=0 to all
    zeros and theta=1 to all ones exactly.
    """
    lead = shape[0] if per_example else 1
    if granularity == "unit":
        draw_shape = (lead,) + shape[1:]
    elif granularity == "channel":
        if len(shape) < 2:
            raise ValueError(f"channel granularity needs a channel axis, got shape {shape}")
        draw_shape = (lead, shape[1]) + (1,) * (len(shape) - 2)
    else:  # block
        draw_shape = (lead,) + (1,) * (len(shape) - 1)
    # float32 uniforms halve the RNG cost; theta=0 still yields all zeros and
    # theta=1 all ones exactly since draws live in [0, 1)
    bits = (rng.random(draw_shape, dtype=np.float32) < theta).astype(np.float64)
    if bits.shape != shape:
        bits = np.ascontiguousarray(np.broadcast_to(bits, shape))
    return Tensor._wrap(bits)


def sample_masks(rule: StochasticRule, shape: Sequence[int], key: Sequence,
                 per_example: bool = True) -> MaskSet:
    """Draws the rule's masks for one block forward.

    `key` is a tuple of ints/strings identifying this (run, epoch, batch,
    block, draw...) site; each mask stream extends it with its slot id, so
    rules that share a slot and theta draw identical masks. skip_forward
    draws the x-side mask and derives the fx side as its complement, which
    enforces mask_x + mask_fx = 1 everywhere.
    """
    shape = tuple(shape)
    key = tuple(key)
    if rule.kind == "none":
        return MaskSet((), (), key)
    slots = _slots_for(rule)
    masks: list[Tensor] = []
    thetas: list[float] = []
    for theta, slot in zip(rule.thetas, slots):
        rng = seeded_generator(*key, slot)
        masks.append(_draw_mask(theta, shape, rule.granularity, per_example, rng))
        thetas.append(theta)
    if rule.kind == "skip_forward":
        complement = Tensor._wrap(1.0 - masks[0].array)
        masks.append(complement)
        thetas.append(1.0 - rule.thetas[0])
    return MaskSet(tuple(masks), tuple(thetas), key)


def _require_masks(rule: StochasticRule, masks: MaskSet, n: int) -> None:
    if len(masks.masks) != n:
        raise ValueError(f"{rule.kind} needs {n} mask(s), got {len(masks.masks)}")


def apply_rule(rule: StochasticRule, x: Tensor, fx: Tensor, masks: MaskSet | None) -> Tensor:
    """Combines a block input x with its transform fx under sampled masks."""
    if x.shape != fx.shape:
        raise ValueError(f"x shape {x.shape} != fx shape {fx.shape}")
    if rule.kind == "none":
        return T.add(x, fx)
    if masks is None:
        raise ValueError(f"rule {rule.kind} needs masks")
    if rule.kind == "dropout":
        _require_masks(rule, masks, 1)
        return T.elementwise_mul(masks.masks[0], fx)
    if rule.kind == "layer_dropout":
        _require_masks(rule, masks, 1)
        return T.add(x, T.elementwise_mul(masks.masks[0], fx))
    if rule.kind in ("skip_forward", "swapout_pair"):
        _require_masks(rule, masks, 2)
        return T.add(T.elementwise_mul(masks.masks[0], x),
                     T.elementwise_mul(masks.masks[1], fx))
    raise ValueError(f"apply_rule does not handle {rule.kind}; use apply_rule_general")


def apply_rule_general(fis: Sequence[Tensor], masks: MaskSet) -> Tensor:
    """Y = sum_i M_i * F_i over N branches, summed left to right."""
    if len(fis) == 0:
        raise ValueError("need at least one branch")
    if len(masks.masks) != len(fis):
        raise ValueError(f"{len(fis)} branches but {len(masks.masks)} masks")
    out = T.elementwise_mul(masks.masks[0], fis[0])
    for m, fi in zip(masks.masks[1:], fis[1:]):
        out = T.add(out, T.elementwise_mul(m, fi))
    return out


@dataclass(frozen=True)
class DeterministicRule:
    """A rule with every mask replaced by its expectation theta.

    Used at inference time; batch-norm layers must simultaneously switch to
    running statistics (handled by the network's eval mode).
    """

    kind: str
    coeffs: tuple[float, ...]

    def apply(self, x: Tensor, fx: Tensor) -> Tensor:
        if self.kind == "none":
            return T.add(x, fx)
        if self.kind == "dropout":
            return T.scalar_mul(self.coeffs[0], fx)
        if self.kind == "layer_dropout":
            return T.add(x, T.scalar_mul(self.coeffs[0], fx))
        # skip_forward and swapout_pair share the two-coefficient form
        return T.add(T.scalar_mul(self.coeffs[0], x), T.scalar_mul(self.coeffs[1], fx))

    def apply_general(self, fis: Sequence[Tensor]) -> Tensor:
        out = T.scalar_mul(self.coeffs[0], fis[0])
        for c, fi in zip(self.coeffs[1:], fis[1:]):
            out = T.add(out, T.scalar_mul(c, fi))
        return out


def deterministic_transform(rule: StochasticRule) -> DeterministicRule:
    """Expected-value form of a rule: masks become their theta scalars."""
    if rule.kind == "none":
        return DeterministicRule("none", ())
    if rule.kind in ("dropout", "layer_dropout"):
        return DeterministicRule(rule.kind, (rule.thetas[0],))
    if rule.kind == "skip_forward":
        t = rule.thetas[0]
        return DeterministicRule(rule.kind, (t, 1.0 - t))
    # swapout_pair and swapout_general keep their thetas as coefficients
    return DeterministicRule(rule.kind, rule.thetas)
