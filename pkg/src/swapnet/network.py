"""Residual networks assembled from stochastic blocks.

Architecture (CIFAR-style): a 3x3 stem conv, three groups of two-conv
residual blocks at widths (16, 32, 64) * k, then a 1x1 conv to num_classes
followed by global average pooling. Spatial resolution halves at the entry
to groups 2 and 3 via average pooling (never strided convolution), with a
learned 1x1 projection on the shortcut.

Block variants:
    v1 (post-activation):  conv-BN-ReLU-conv-BN on the transform path,
                           combine with the shortcut, then ReLU.
    v2 (pre-activation):   BN-ReLU-conv-BN-ReLU-conv, combine, no final ReLU
                           (a last BN-ReLU pair runs before the head).

Each block applies its StochasticRule exactly once, at the combination of
the shortcut x with the transform F(x). Mask tensors enter the tape as
constants; deterministic evaluation replaces them with their expectations
and switches batch norm to running statistics.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .autodiff import ComputationTape, Node
from .rules import (
    MaskSet,
    Schedule,
    StochasticRule,
    deterministic_transform,
    parse_schedule,
    resolve_schedule,
    sample_masks,
)
from .tensor import Tensor, seeded_generator

__all__ = [
    "BASE_WIDTHS",
    "NetworkConfig",
    "GroupRules",
    "BlockConfig",
    "BatchNormState",
    "Network",
    "batchnorm_forward",
    "block_forward",
    "downsample_transition",
    "network_forward",
    "forward_on_tape",
    "sample_mask_plan",
    "mask_shapes",
    "param_count",
    "save_checkpoint",
    "load_checkpoint",
]

BASE_WIDTHS = (16, 32, 64)
MODES = ("train", "det-eval", "stoch-eval")

CHECKPOINT_MAGIC = b"SWPN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Shape of the network: depth per group, widths, variant, head size.

    Widths are BASE_WIDTHS scaled uniformly by width_multiplier and must come
    out integral. The standard depth accounting is 6*blocks_per_group + 2
    conv layers, so depth 20 means 3 blocks in each group. Empty groups are
    allowed only as a trailing suffix (toy configs).
    """

    variant: str = "v2"
    blocks_per_group: tuple[int, int, int] = (3, 3, 3)
    width_multiplier: float = 1.0
    num_classes: int = 10
    in_channels: int = 3

    def __post_init__(self):
        if self.variant not in ("v1", "v2"):
            raise ValueError(f"variant must be v1 or v2, got {self.variant!r}")
        bpg = tuple(int(n) for n in self.blocks_per_group)
        object.__setattr__(self, "blocks_per_group", bpg)
        if len(bpg) != 3 or any(n < 0 for n in bpg):
            raise ValueError(f"blocks_per_group must be 3 counts >= 0, got {bpg}")
        if sum(bpg) < 1:
            raise ValueError("network needs at least one block")
        seen_zero = False
        for n in bpg:
            if n == 0:
                seen_zero = True
            elif seen_zero:
                raise ValueError("empty groups must form a trailing suffix")
        for base in BASE_WIDTHS:
            w = base * self.width_multiplier
            if abs(w - round(w)) > 1e-9 or round(w) < 1:
                raise ValueError(f"width_multiplier {self.width_multiplier} gives non-integral width {w}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")

    @property
    def widths(self) -> tuple[int, int, int]:
        return tuple(int(round(b * self.width_multiplier)) for b in BASE_WIDTHS)

    @property
    def total_blocks(self) -> int:
        return sum(self.blocks_per_group)

    @property
    def num_groups(self) -> int:
        return sum(1 for n in self.blocks_per_group if n > 0)

    @staticmethod
    def standard(depth: int, width_multiplier: float = 1.0, variant: str = "v2",
                 num_classes: int = 10) -> "NetworkConfig":
        """Depth-n config with n = 6*blocks_per_group + 2 (e.g. 20 -> 3,3,3)."""
        if depth < 8 or (depth - 2) % 6:
            raise ValueError(f"standard depth must be 6k+2 with k >= 1, got {depth}")
        n = (depth - 2) // 6
        return NetworkConfig(variant=variant, blocks_per_group=(n, n, n),
                             width_multiplier=width_multiplier, num_classes=num_classes)

    def to_text(self) -> str:
        bpg = ",".join(str(n) for n in self.blocks_per_group)
        return (f"variant={self.variant}\nblocks_per_group={bpg}\n"
                f"width_multiplier={self.width_multiplier!r}\n"
                f"num_classes={self.num_classes}\nin_channels={self.in_channels}\n")

    @staticmethod
    def from_text(text: str) -> "NetworkConfig":
        kv = {}
        for line in text.strip().splitlines():
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
        return NetworkConfig(
            variant=kv["variant"],
            blocks_per_group=tuple(int(x) for x in kv["blocks_per_group"].split(",")),
            width_multiplier=float(kv["width_multiplier"]),
            num_classes=int(kv["num_classes"]),
            in_channels=int(kv["in_channels"]),
        )


@dataclass(frozen=True)
class GroupRules:
    """Stochastic rule assignment for one block group.

    schedule_x drives the shortcut-side retain probability (used by
    skip_forward and the first theta of swapout_pair); schedule_fx drives the
    transform side (dropout, layer_dropout, second theta of swapout_pair).
    Schedules resolve over the global block index, first block to last.
    """

    kind: str = "none"
    granularity: str = "unit"
    schedule_x: Schedule = field(default_factory=lambda: Schedule.constant(1.0))
    schedule_fx: Schedule = field(default_factory=lambda: Schedule.constant(1.0))

    def resolve(self, block_index: int, num_blocks: int) -> StochasticRule:
        tx = resolve_schedule(self.schedule_x, block_index, num_blocks)
        tf = resolve_schedule(self.schedule_fx, block_index, num_blocks)
        if self.kind == "none":
            return StochasticRule("none")
        if self.kind in ("dropout", "layer_dropout"):
            return StochasticRule(self.kind, (tf,),
                                  granularity="block" if self.kind == "layer_dropout" else self.granularity)
        if self.kind == "skip_forward":
            return StochasticRule(self.kind, (tx,), granularity=self.granularity)
        if self.kind == "swapout_pair":
            return StochasticRule(self.kind, (tx, tf), granularity=self.granularity)
        raise ValueError(f"rule kind {self.kind!r} is not supported in conv blocks")


def uniform_group_rules(kind: str, granularity: str = "unit",
                        schedule_x: Schedule | str = Schedule.constant(1.0),
                        schedule_fx: Schedule | str = Schedule.constant(1.0)) -> tuple[GroupRules, GroupRules, GroupRules]:
    """The common case: the same rule and schedules for all three groups."""
    sx = parse_schedule(schedule_x) if isinstance(schedule_x, str) else schedule_x
    sf = parse_schedule(schedule_fx) if isinstance(schedule_fx, str) else schedule_fx
    gr = GroupRules(kind=kind, granularity=granularity, schedule_x=sx, schedule_fx=sf)
    return (gr, gr, gr)


@dataclass(frozen=True)
class BlockConfig:
    """One resolved block: channel change, rule, and downsampling flag."""

    variant: str
    in_channels: int
    out_channels: int
    rule: StochasticRule
    downsample: bool
    name: str

    def __post_init__(self):
        if self.downsample != (self.in_channels != self.out_channels):
            raise ValueError("downsample transitions exactly when the width changes")


@dataclass
class BatchNormState:
    """Learned affine plus running statistics for one normalization layer.

    scale/shift are the learned parameters (aliased into Network.params so
    the optimizer updates them in place). Running statistics follow
    running <- momentum * running + (1 - momentum) * batch with biased
    (population) batch variance. eval mode never updates them.
    """

    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    mode: str = "train"

    @staticmethod
    def create(channels: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormState":
        return BatchNormState(np.ones(channels), np.zeros(channels),
                              np.zeros(channels), np.ones(channels), momentum, eps)

    def update_running(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        self.running_mean = self.momentum * self.running_mean + (1.0 - self.momentum) * batch_mean
        self.running_var = self.momentum * self.running_var + (1.0 - self.momentum) * batch_var
        if self.running_var.min() < 0.0:
            raise ValueError("running variance went negative")


def batchnorm_forward(state: BatchNormState, x: Tensor) -> Tensor:
    """Standalone BN forward honoring state.mode; train mode updates running stats."""
    tape = ComputationTape(record=False)
    node, bmean, bvar = tape.batchnorm(
        tape.constant(x), tape.constant(Tensor(state.scale)), tape.constant(Tensor(state.shift)),
        state.running_mean, state.running_var, state.eps, train=(state.mode == "train"))
    if state.mode == "train":
        state.update_running(bmean, bvar)
    return node.value


class Network:
    """Parameters, batch-norm states, and resolved per-block rules.

    params maps name -> mutable float64 array (the optimizer updates these
    in place; BN scale/shift arrays are shared with their BatchNormState).
    Construction order of params is fixed, so gradient maps, checkpoints,
    and init draws are reproducible from (config, rules, init seed).
    """

    def __init__(self, cfg: NetworkConfig,
                 group_rules: tuple[GroupRules, GroupRules, GroupRules] | None = None,
                 masks_per_example: bool = True, init_seed: int = 0,
                 bn_momentum: float = 0.9, bn_eps: float = 1e-5) -> None:
        self.cfg = cfg
        self.group_rules = group_rules if group_rules is not None else uniform_group_rules("none")
        self.masks_per_example = masks_per_example
        self.init_seed = init_seed
        self.params: dict[str, np.ndarray] = {}
        self.bn_states: dict[str, BatchNormState] = {}
        self._rng = seeded_generator(init_seed, "init")
        self._bn_hyper = (bn_momentum, bn_eps)
        self.blocks: list[BlockConfig] = []

        widths = cfg.widths
        self._add_conv("stem.kernel", widths[0], cfg.in_channels, 3)
        if cfg.variant == "v1":
            self._add_bn("stem.bn", widths[0])
        total = cfg.total_blocks
        bi = 0
        ch = widths[0]
        for g in range(3):
            n = cfg.blocks_per_group[g]
            for j in range(n):
                out_ch = widths[g]
                name = f"g{g + 1}.b{j}"
                rule = self.group_rules[g].resolve(bi, total)
                down = j == 0 and out_ch != ch
                self.blocks.append(BlockConfig(cfg.variant, ch, out_ch, rule, down, name))
                self._add_conv(f"{name}.conv1.kernel", out_ch, ch, 3)
                self._add_conv(f"{name}.conv2.kernel", out_ch, out_ch, 3)
                self._add_bn(f"{name}.bn1", ch if cfg.variant == "v2" else out_ch)
                self._add_bn(f"{name}.bn2", out_ch)
                if down:
                    self._add_conv(f"{name}.proj.kernel", out_ch, ch, 1)
                ch = out_ch
                bi += 1
        if cfg.variant == "v2":
            self._add_bn("final.bn", ch)
        self._add_conv("head.kernel", cfg.num_classes, ch, 1)
        self.params["head.bias"] = np.zeros(cfg.num_classes)
        del self._rng

    def _add_conv(self, name: str, out_ch: int, in_ch: int, k: int) -> None:
        fan_in = in_ch * k * k
        std = np.sqrt(2.0 / fan_in)
        self.params[name] = self._rng.standard_normal((out_ch, in_ch, k, k)) * std

    def _add_bn(self, name: str, channels: int) -> None:
        momentum, eps = self._bn_hyper
        state = BatchNormState.create(channels, momentum, eps)
        self.bn_states[name] = state
        self.params[f"{name}.scale"] = state.scale
        self.params[f"{name}.shift"] = state.shift

    def decay_param_names(self) -> frozenset:
        """Conv and projection kernels: the only parameters weight decay touches."""
        return frozenset(n for n in self.params if n.endswith(".kernel"))

    def set_bn_mode(self, mode: str) -> None:
        for state in self.bn_states.values():
            state.mode = mode


def param_count(net_or_cfg) -> int:
    net = net_or_cfg if isinstance(net_or_cfg, Network) else Network(net_or_cfg)
    return sum(arr.size for arr in net.params.values())


def mask_shapes(net: Network, batch_size: int, image_hw: int) -> list[tuple[int, ...] | None]:
    """Activation shape at each block's combination point (None for rule none)."""
    shapes: list[tuple[int, ...] | None] = []
    hw = image_hw
    ch = net.cfg.widths[0]
    for blk in net.blocks:
        if blk.downsample:
            if hw % 2:
                raise ValueError(f"spatial size {hw} not divisible for downsampling")
            hw //= 2
        ch = blk.out_channels
        shapes.append(None if blk.rule.kind == "none" else (batch_size, ch, hw, hw))
    return shapes


def sample_mask_plan(net: Network, batch_size: int, image_hw: int, key) -> list[MaskSet | None]:
    """One MaskSet per block; the stream key is (caller key..., block index)."""
    key = tuple(key)
    plan: list[MaskSet | None] = []
    for bi, shape in enumerate(mask_shapes(net, batch_size, image_hw)):
        if shape is None:
            plan.append(None)
        else:
            plan.append(sample_masks(net.blocks[bi].rule, shape, key + (bi,),
                                     per_example=net.masks_per_example))
    return plan


def _combine_on_tape(tape: ComputationTape, rule: StochasticRule, x: Node, fx: Node,
                     masks: MaskSet | None, deterministic: bool) -> Node:
    if rule.kind == "none":
        return tape.add(x, fx)
    if deterministic:
        det = deterministic_transform(rule)
        if rule.kind == "dropout":
            return tape.scalar_mul(det.coeffs[0], fx)
        if rule.kind == "layer_dropout":
            return tape.add(x, tape.scalar_mul(det.coeffs[0], fx))
        return tape.add(tape.scalar_mul(det.coeffs[0], x), tape.scalar_mul(det.coeffs[1], fx))
    if masks is None:
        raise ValueError(f"rule {rule.kind} needs sampled masks in this mode")
    if rule.kind == "dropout":
        return tape.mul(tape.constant(masks.masks[0]), fx)
    if rule.kind == "layer_dropout":
        return tape.add(x, tape.mul(tape.constant(masks.masks[0]), fx))
    if rule.kind in ("skip_forward", "swapout_pair"):
        return tape.add(tape.mul(tape.constant(masks.masks[0]), x),
                        tape.mul(tape.constant(masks.masks[1]), fx))
    raise ValueError(f"unsupported block rule {rule.kind}")


def _probe_relu(tape: ComputationTape, node: Node, probes: dict | None) -> Node:
    if probes is not None:
        m = float(np.min(np.abs(node.value.array)))
        probes["relu_min"] = min(probes.get("relu_min", np.inf), m)
    return tape.relu(node)


def _bn_on_tape(tape: ComputationTape, net: Network, name: str, x: Node, mode: str,
                getp, update_running: bool, probes: dict | None) -> Node:
    state = net.bn_states[name]
    if probes is not None:
        probes.setdefault("bn_batch_var", {}).setdefault(name, []).append(
            x.value.array.var(axis=(0, 2, 3)))
    train = mode == "train"
    node, bmean, bvar = tape.batchnorm(x, getp(f"{name}.scale"), getp(f"{name}.shift"),
                                       state.running_mean, state.running_var,
                                       state.eps, train=train)
    if train and update_running:
        state.update_running(bmean, bvar)
    return node


def _block_on_tape(tape: ComputationTape, net: Network, bi: int, h: Node,
                   masks: MaskSet | None, mode: str, getp,
                   update_running: bool, probes: dict | None) -> Node:
    blk = net.blocks[bi]
    name = blk.name
    deterministic = mode == "det-eval"
    if blk.variant == "v1":
        if blk.downsample:
            pooled = tape.avg_pool2d(h, 2, 2)
            skip = tape.conv2d(pooled, getp(f"{name}.proj.kernel"), 1, 0)
            main_in = pooled
        else:
            skip = h
            main_in = h
        t = tape.conv2d(main_in, getp(f"{name}.conv1.kernel"), 1, 1)
        t = _bn_on_tape(tape, net, f"{name}.bn1", t, mode, getp, update_running, probes)
        t = _probe_relu(tape, t, probes)
        t = tape.conv2d(t, getp(f"{name}.conv2.kernel"), 1, 1)
        fx = _bn_on_tape(tape, net, f"{name}.bn2", t, mode, getp, update_running, probes)
        comb = _combine_on_tape(tape, blk.rule, skip, fx, masks, deterministic)
        return _probe_relu(tape, comb, probes)
    # v2 pre-activation
    pre = _bn_on_tape(tape, net, f"{name}.bn1", h, mode, getp, update_running, probes)
    pre = _probe_relu(tape, pre, probes)
    if blk.downsample:
        main_in = tape.avg_pool2d(pre, 2, 2)
        skip = tape.conv2d(tape.avg_pool2d(h, 2, 2), getp(f"{name}.proj.kernel"), 1, 0)
    else:
        main_in = pre
        skip = h
    t = tape.conv2d(main_in, getp(f"{name}.conv1.kernel"), 1, 1)
    t = _bn_on_tape(tape, net, f"{name}.bn2", t, mode, getp, update_running, probes)
    t = _probe_relu(tape, t, probes)
    fx = tape.conv2d(t, getp(f"{name}.conv2.kernel"), 1, 1)
    return _combine_on_tape(tape, blk.rule, skip, fx, masks, deterministic)


def forward_on_tape(net: Network, tape: ComputationTape, x: Tensor,
                    mask_plan: list | None, mode: str,
                    update_running: bool = True, probes: dict | None = None) -> Node:
    """Builds the full forward graph; returns the logits node (B, num_classes)."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if x.ndim != 4 or x.shape[1] != net.cfg.in_channels:
        raise ValueError(f"input must be (B,{net.cfg.in_channels},H,W), got {x.shape}")
    needs_masks = mode in ("train", "stoch-eval") and any(b.rule.kind != "none" for b in net.blocks)
    if needs_masks:
        if mask_plan is None or len(mask_plan) != len(net.blocks):
            raise ValueError(f"mode {mode} needs a mask plan with {len(net.blocks)} entries")
    params = {name: tape.parameter(Tensor(arr), name) for name, arr in net.params.items()}
    getp = params.__getitem__

    h = tape.conv2d(tape.constant(x), getp("stem.kernel"), 1, 1)
    if net.cfg.variant == "v1":
        h = _bn_on_tape(tape, net, "stem.bn", h, mode, getp, update_running, probes)
        h = _probe_relu(tape, h, probes)
    for bi in range(len(net.blocks)):
        masks = mask_plan[bi] if mask_plan is not None else None
        h = _block_on_tape(tape, net, bi, h, masks, mode, getp, update_running, probes)
    if net.cfg.variant == "v2":
        h = _bn_on_tape(tape, net, "final.bn", h, mode, getp, update_running, probes)
        h = _probe_relu(tape, h, probes)
    h = tape.conv2d(h, getp("head.kernel"), 1, 0)
    h = tape.channel_bias_add(h, getp("head.bias"))
    return tape.global_avg_pool(h)


def network_forward(net: Network, x: Tensor, mask_plan: list | None = None,
                    mode: str = "det-eval", update_running: bool = True,
                    probes: dict | None = None) -> Tensor:
    """Gradient-free forward pass; see forward_on_tape for mode semantics."""
    tape = ComputationTape(record=False)
    return forward_on_tape(net, tape, x, mask_plan, mode, update_running, probes).value


def block_forward(net: Network, block_index: int, x: Tensor,
                  masks: MaskSet | None = None, mode: str = "train",
                  update_running: bool = True) -> Tensor:
    """Runs a single block standalone (contract entry point for tests)."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    tape = ComputationTape(record=False)
    cache: dict[str, Node] = {}

    def getp(name: str) -> Node:
        if name not in cache:
            cache[name] = tape.constant(Tensor(net.params[name]))
        return cache[name]

    node = _block_on_tape(tape, net, block_index, tape.constant(x), masks, mode,
                          getp, update_running, None)
    return node.value


def downsample_transition(x: Tensor, projection: Tensor) -> Tensor:
    """Shortcut path at a group boundary: 2x2 average pool, then 1x1 projection."""
    if projection.ndim != 4 or projection.shape[2:] != (1, 1):
        raise ValueError(f"projection must be (out,in,1,1), got {projection.shape}")
    return T.conv2d(T.avg_pool2d(x, 2, 2), projection, 1, 0)


def observe_bn_variances(net: Network, images: Tensor, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Per-channel batch variance each BN input shows under det-eval.

    Feeds the data through the deterministic network (running-stat BN) and
    averages the per-batch input variances, for comparison against the
    running variances accumulated during stochastic training.
    """
    probes: dict = {}
    n = images.shape[0]
    for start in range(0, n, batch_size):
        batch = Tensor(images.array[start : start + batch_size])
        network_forward(net, batch, None, "det-eval", probes=probes)
    return {name: np.mean(np.stack(vs), axis=0) for name, vs in probes["bn_batch_var"].items()}


# -- checkpoint format -------------------------------------------------------
#
# magic "SWPN", u32 version, u32 config length + config text (NetworkConfig
# key=value lines), u32 tensor count, then per tensor: u32 name length, name
# bytes (utf-8), u32 rank, u32 dims..., raw little-endian f64 data. Entries
# are parameters in construction order followed by BN running statistics.


def _checkpoint_entries(net: Network):
    for name, arr in net.params.items():
        yield name, arr
    for name, state in net.bn_states.items():
        yield f"{name}.running_mean", state.running_mean
        yield f"{name}.running_var", state.running_var


def save_checkpoint(path, net: Network) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_bytes = net.cfg.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    entries = list(_checkpoint_entries(net))
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path, group_rules=None, masks_per_example: bool = True) -> Network:
    """Rebuilds a Network from a checkpoint; rule assignment comes from the caller."""
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise ValueError("truncated checkpoint")
        part = view[off : off + n]
        off += n
        return part

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    cfg = NetworkConfig.from_text(bytes(take(cfg_len)).decode("utf-8"))
    net = Network(cfg, group_rules=group_rules, masks_per_example=masks_per_example)
    expected = dict(_checkpoint_entries(net))
    (count,) = struct.unpack("<I", take(4))
    if count != len(expected):
        raise ValueError(f"checkpoint has {count} tensors, config implies {len(expected)}")
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        data = np.frombuffer(take(8 * int(np.prod(dims, dtype=np.int64))), dtype="<f8")
        if name not in expected:
            raise ValueError(f"unexpected tensor {name!r} in checkpoint")
        target = expected[name]
        if tuple(dims) != target.shape:
            raise ValueError(f"tensor {name!r} has shape {dims}, expected {target.shape}")
        target[...] = data.reshape(dims)
    if off != len(view):
        raise ValueError("trailing bytes after checkpoint payload")
    return net
