"""SGD training loop with momentum, selective weight decay, and augmentation.

The update is the classic momentum form
    v <- momentum * v + grad + weight_decay * param
    p <- p - lr * v
with weight decay applied to convolution kernels only (batch-norm scale and
shift and the classifier bias are excluded). The learning rate is piecewise
constant over epochs.

Augmentation pads 4 zero pixels on every side, crops at one random
offset per batch, and flips each example left-right with probability 1/2.
No activation rescaling happens anywhere: stochastic rules see the raw
training distribution, and evaluation handles the train/test gap instead.

Every random choice (shuffling, crops, flips, masks) comes from a named
stream keyed by the training seed, epoch, and batch index, so a run is a
pure function of (initial network, dataset, config).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ComputationTape, backward
from .data import Dataset
from .network import Network, forward_on_tape, sample_mask_plan
from .tensor import Tensor, seeded_generator

__all__ = [
    "TrainConfig",
    "lr_at",
    "optimizer_state_for",
    "sgd_step",
    "pad_crop_flip",
    "augment",
    "train_epoch",
    "train",
]

PAD = 4


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; lr_schedule is ((epoch, rate), ...)."""

    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    lr_schedule: tuple = ((0, 0.1), (15, 0.01), (18, 0.001))
    seed: int = 0
    augment: bool = True
    shuffle: bool = True

    def __post_init__(self):
        object.__setattr__(self, "lr_schedule",
                           tuple((int(e), float(r)) for e, r in self.lr_schedule))
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be >= 0")
        sched = self.lr_schedule
        if not sched or sched[0][0] != 0:
            raise ValueError("lr_schedule must start at epoch 0")
        for prev, cur in zip(sched, sched[1:]):
            if cur[0] <= prev[0]:
                raise ValueError("lr_schedule breakpoints must strictly increase")
        if any(r <= 0 for _, r in sched):
            raise ValueError("learning rates must be positive")


def lr_at(schedule, epoch: int) -> float:
    """Rate of the last breakpoint at or before `epoch` (piecewise constant)."""
    if epoch < schedule[0][0]:
        raise ValueError(f"epoch {epoch} precedes the first breakpoint")
    rate = schedule[0][1]
    for start, r in schedule:
        if start <= epoch:
            rate = r
    return rate


def optimizer_state_for(params: dict) -> dict:
    """Zero-initialized momentum buffers matching the parameter dict."""
    return {name: np.zeros_like(arr) for name, arr in params.items()}


def sgd_step(params: dict, grads: dict, state: dict, lr: float,
             momentum: float, weight_decay: float, decay_names=frozenset()) -> None:
    """One in-place momentum update over every parameter."""
    for name, p in params.items():
        g = grads[name]
        g = g.array if isinstance(g, Tensor) else np.asarray(g)
        v = state[name]
        np.multiply(v, momentum, out=v)
        v += g
        if weight_decay and name in decay_names:
            v += weight_decay * p
        p -= lr * v


def pad_crop_flip(images: np.ndarray, oy: int, ox: int, flips: np.ndarray) -> np.ndarray:
    """Zero-pad by 4, crop the original size at (oy, ox), flip flagged examples."""
    n, c, h, w = images.shape
    if not (0 <= oy <= 2 * PAD and 0 <= ox <= 2 * PAD):
        raise ValueError(f"crop offset ({oy}, {ox}) outside [0, {2 * PAD}]")
    padded = np.zeros((n, c, h + 2 * PAD, w + 2 * PAD))
    padded[:, :, PAD : PAD + h, PAD : PAD + w] = images
    out = padded[:, :, oy : oy + h, ox : ox + w].copy()
    flips = np.asarray(flips, dtype=bool)
    out[flips] = out[flips, :, :, ::-1]
    return out


def augment(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One crop offset for the whole batch, independent flips per example.

    The crop geometry is fixed at 32x32; smaller renders must train with
    augmentation disabled rather than silently cropping a different size.
    """
    if images.shape[2:] != (32, 32):
        raise ValueError(
            f"crop augmentation expects 32x32 images, got {images.shape[2]}x{images.shape[3]}")
    oy, ox = (int(v) for v in rng.integers(0, 2 * PAD + 1, size=2))
    flips = rng.random(images.shape[0]) < 0.5
    return pad_crop_flip(images, oy, ox, flips)


def _train_step(net: Network, images, labels, plan, cfg: TrainConfig, lr: float,
                opt_state: dict, decay_names) -> tuple[float, int]:
    """One batch: forward, backward, update. Returns (loss sum, wrong count).

    The tape and its activation buffers must not outlive the step; keeping
    them local means they are freed before the next batch's forward runs.
    """
    tape = ComputationTape()
    logits = forward_on_tape(net, tape, Tensor(images), plan, "train")
    loss = tape.softmax_cross_entropy(logits, labels)
    grads = {name: g.array for name, g in backward(tape, loss).items()}
    sgd_step(net.params, grads, opt_state, lr, cfg.momentum, cfg.weight_decay, decay_names)
    pred = logits.value.array.argmax(axis=1)
    return float(loss.value.array) * len(labels), int((pred != labels).sum())


def train_epoch(net: Network, data: Dataset, cfg: TrainConfig, epoch: int,
                opt_state: dict) -> dict:
    """One pass over the data; returns the epoch metrics row."""
    lr = lr_at(cfg.lr_schedule, epoch)
    n = len(data)
    if cfg.shuffle:
        order = seeded_generator(cfg.seed, "shuffle", epoch).permutation(n)
    else:
        order = np.arange(n)
    decay_names = net.decay_param_names()
    hw = data.images.shape[2]
    total_loss = 0.0
    total_wrong = 0
    for b, start in enumerate(range(0, n, cfg.batch_size)):
        idx = order[start : start + cfg.batch_size]
        images = data.images[idx]
        labels = data.labels[idx]
        if cfg.augment:
            images = augment(images, seeded_generator(cfg.seed, "aug", epoch, b))
        plan = sample_mask_plan(net, len(idx), hw, (cfg.seed, "masks", epoch, b))
        loss_sum, wrong = _train_step(net, images, labels, plan, cfg, lr,
                                      opt_state, decay_names)
        total_loss += loss_sum
        total_wrong += wrong
    return {"epoch": epoch, "lr": lr,
            "train_loss": total_loss / n, "train_error": total_wrong / n}


def train(net: Network, data: Dataset, cfg: TrainConfig, progress=None) -> list[dict]:
    """Full run: one metrics row per epoch, network updated in place."""
    opt_state = optimizer_state_for(net.params)
    rows = []
    for epoch in range(cfg.epochs):
        row = train_epoch(net, data, cfg, epoch, opt_state)
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows
