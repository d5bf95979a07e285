"""Dense float64 tensors and the small op set the networks are built from.

Everything is double precision: the gradient checker needs ~1e-4 relative
agreement with finite differences, which single precision cannot deliver.
Tensors are immutable after construction; ops return fresh tensors and use
fixed reduction orders, so repeated evaluation is bit-reproducible.
Broadcasting is deliberately restricted to scalar operands.
"""

from __future__ import annotations

import zlib
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "ones",
    "full",
    "add",
    "elementwise_mul",
    "scalar_mul",
    "scalar_add",
    "relu",
    "matmul",
    "channel_bias_add",
    "pad2d",
    "conv2d",
    "avg_pool2d",
    "global_avg_pool",
    "softmax",
    "softmax_cross_entropy",
    "seeded_generator",
    "random_uniform",
    "random_normal",
]


class Tensor:
    """Immutable dense array of 64-bit floats in row-major order.

    `shape` is a tuple of dimension sizes (all >= 1; rank 0 is a scalar) and
    `data` is the flat buffer, so product(shape) == len(data) always holds.
    The constructor copies its input; internal code uses `_wrap` to adopt a
    freshly allocated array without copying.
    """

    __slots__ = ("array",)

    def __init__(self, values) -> None:
        arr = np.array(values, dtype=np.float64, order="C")
        _check_shape(arr.shape)
        arr.setflags(write=False)
        object.__setattr__(self, "array", arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Adopts `arr` without copying; the caller must own it exclusively.
        t = object.__new__(cls)
        if arr.dtype != np.float64 or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
        _check_shape(arr.shape)
        arr.setflags(write=False)
        object.__setattr__(t, "array", arr)
        return t

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the buffer (read-only)."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def tolist(self):
        return self.array.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.array!r})"


def _check_shape(shape: tuple[int, ...]) -> None:
    if any(d < 1 for d in shape):
        raise ValueError(f"tensor dimensions must be >= 1, got {shape}")


def tensor(values) -> Tensor:
    return Tensor(values)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape)))


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.ones(tuple(shape)))


def full(shape: Sequence[int], value: float) -> Tensor:
    return Tensor._wrap(np.full(tuple(shape), float(value)))


def _is_scalar_shaped(t: Tensor) -> bool:
    return t.size == 1


def _binary_op(a: Tensor, b: Tensor, op, name: str) -> Tensor:
    """Applies `op` elementwise; only scalar operands broadcast."""
    if a.shape == b.shape:
        return Tensor._wrap(op(a.array, b.array))
    if _is_scalar_shaped(a):
        return Tensor._wrap(op(a.array.reshape(-1)[0], b.array))
    if _is_scalar_shaped(b):
        return Tensor._wrap(op(a.array, b.array.reshape(-1)[0]))
    raise ValueError(f"{name}: shapes {a.shape} and {b.shape} are neither equal nor scalar-broadcastable")


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary_op(a, b, np.add, "add")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; a scalar operand (size-1 tensor) broadcasts."""
    return _binary_op(a, b, np.multiply, "elementwise_mul")


def scalar_mul(s: float, a: Tensor) -> Tensor:
    return Tensor._wrap(np.float64(s) * a.array)


def scalar_add(s: float, a: Tensor) -> Tensor:
    return Tensor._wrap(np.float64(s) + a.array)


def relu(a: Tensor) -> Tensor:
    return Tensor._wrap(np.maximum(a.array, 0.0))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return Tensor._wrap(a.array @ b.array)


def channel_bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Adds a per-channel bias b (C,) to activations x (B,C,H,W)."""
    if x.ndim != 4 or b.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ValueError(f"channel_bias_add: incompatible shapes {x.shape} and {b.shape}")
    return Tensor._wrap(x.array + b.array[None, :, None, None])


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pads the two trailing (spatial) dimensions of a (B,C,H,W) tensor."""
    if x.ndim != 4:
        raise ValueError(f"pad2d expects (B,C,H,W), got {x.shape}")
    if pad < 0:
        raise ValueError("pad must be >= 0")
    if pad == 0:
        return x
    return Tensor._wrap(np.pad(x.array, ((0, 0), (0, 0), (pad, pad), (pad, pad))))


# -- convolution ------------------------------------------------------------
#
# Stride-1 square-kernel convs (the only kind the residual blocks use) run a
# row-panel scheme: the batch is processed in chunks small enough to stay
# cache resident, vertical taps are gathered as full padded rows (long
# contiguous copies instead of 256-byte strips), and the horizontal taps are
# folded into a single GEMM by stacking the kernel once per horizontal
# offset. A shifted add then collapses the offsets. The GEMMs read from
# cache rather than a column buffer several times the input size, which is
# worth about 2x here since the convs are memory bound on one core. Panels
# are built straight from the unpadded input (margins stay zero), so no
# padded copy is ever materialized. Everything else (strided, rectangular,
# padded 1x1) falls back to plain im2col with a (C,kh,kw,B,L) column layout
# and one GEMM per conv. Backward (in autodiff) needs no saved buffer except
# im2col's columns; the row-panel path rebuilds panels from the input, which
# the tape already holds.


def _rowpanel_step(C: int, kh: int, oh: int, wp: int, batch: int) -> int:
    """Batch chunk size keeping one row panel around 2.5 MB so it stays in cache."""
    per_example = C * kh * oh * wp * 8
    return max(1, min(batch, 2_500_000 // max(1, per_example)))


def _rowpanel_applies(stride: int, kh: int, kw: int, pad: int) -> bool:
    return stride == 1 and kh == kw and kh > 1 and pad <= kh - 1


def _fill_rowpanel(pm: np.ndarray, src: np.ndarray, pad: int) -> None:
    """Writes vertical tap rows of a zero-initialized row panel from `src`.

    pm is (C, kh, m, oh, wp); rows that fall in the padding margin and the
    left/right pad columns are never written, so they keep the zeros the
    panel was allocated with (the fill geometry is the same for every batch
    chunk reusing the panel).
    """
    _, kh, _, oh, _ = pm.shape
    H, W = src.shape[2], src.shape[3]
    for i in range(kh):
        lo = i - pad
        s0 = max(0, lo)
        s1 = min(H, lo + oh)
        d0 = s0 - lo
        pm[:, i, :, d0 : d0 + (s1 - s0), pad : pad + W] = \
            src[:, :, s0:s1].transpose(1, 0, 2, 3)


def _conv2d_forward(xa: np.ndarray, ka: np.ndarray, stride: int, pad: int):
    B, C, H, W = xa.shape
    K, Ck, kh, kw = ka.shape
    if Ck != C:
        raise ValueError(f"conv2d channel mismatch: input has {C}, kernel expects {Ck}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d needs stride >= 1 and pad >= 0")
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d output size {oh}x{ow} < 1 for input {H}x{W}, kernel {kh}x{kw}")
    xp_shape = (B, C, H + 2 * pad, W + 2 * pad)
    if kh == kw == 1 and stride == 1 and pad == 0:
        # 1x1 fast path: pure channel mixing, no column buffer needed.
        out = ka.reshape(K, C) @ xa.transpose(1, 0, 2, 3).reshape(C, B * oh * ow)
        out = np.ascontiguousarray(out.reshape(K, B, oh, ow).transpose(1, 0, 2, 3))
        return out, None, xp_shape
    if _rowpanel_applies(stride, kh, kw, pad):
        wp = W + 2 * pad
        # kernel stacked per horizontal offset: row j holds the taps that
        # multiply input columns shifted right by j
        ks = np.ascontiguousarray(ka.transpose(3, 0, 1, 2)).reshape(kw * K, C * kh)
        out = np.empty((B, K, oh, ow))
        step = _rowpanel_step(C, kh, oh, wp, B)
        panel = np.zeros((C, kh, step, oh, wp))
        for s in range(0, B, step):
            m = min(step, B - s)
            pm = panel[:, :, :m]
            _fill_rowpanel(pm, xa[s : s + m], pad)
            z = (ks @ pm.reshape(C * kh, m * oh * wp)).reshape(kw, K, m, oh, wp)
            acc = z[0, :, :, :, :ow].copy()
            for j in range(1, kw):
                acc += z[j, :, :, :, j : j + ow]
            out[s : s + m] = acc.transpose(1, 0, 2, 3)
        return out, None, xp_shape
    xp = np.pad(xa, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xa
    xp_t = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
    cols = np.empty((C, kh, kw, B, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp_t[:, :, i : i + oh * stride : stride,
                                 j : j + ow * stride : stride]
    out = ka.reshape(K, C * kh * kw) @ cols.reshape(C * kh * kw, B * oh * ow)
    out = np.ascontiguousarray(out.reshape(K, B, oh, ow).transpose(1, 0, 2, 3))
    return out, cols, xp.shape


def conv2d(input: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of (B,C,H,W) input with a (K,C,kh,kw) kernel.

    Output spatial size is floor((H + 2*pad - kh)/stride) + 1 per side.
    """
    if input.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {input.shape}, {kernel.shape}")
    out, _, _ = _conv2d_forward(input.array, kernel.array, stride, pad)
    return Tensor._wrap(out)


def avg_pool2d(input: Tensor, k: int, stride: int) -> Tensor:
    """Mean over k x k windows placed every `stride` pixels."""
    if input.ndim != 4:
        raise ValueError(f"avg_pool2d expects (B,C,H,W), got {input.shape}")
    B, C, H, W = input.shape
    if k < 1 or stride < 1 or k > H or k > W:
        raise ValueError(f"avg_pool2d window {k} exceeds input {H}x{W}")
    if (H - k) % stride or (W - k) % stride:
        raise ValueError(f"avg_pool2d: input {H}x{W} not divisible by window {k} stride {stride}")
    oh = (H - k) // stride + 1
    ow = (W - k) // stride + 1
    xa = input.array
    if k == stride == 2:
        t = xa[:, :, 0::2, :] + xa[:, :, 1::2, :]
        acc = t[:, :, :, 0::2] + t[:, :, :, 1::2]
        acc *= 0.25
        return Tensor._wrap(acc)
    acc = np.zeros((B, C, oh, ow))
    for i in range(k):
        for j in range(k):
            acc += xa[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
    return Tensor._wrap(acc / (k * k))


def global_avg_pool(input: Tensor) -> Tensor:
    """Mean over all spatial positions; (B,C,H,W) -> (B,C)."""
    if input.ndim != 4:
        raise ValueError(f"global_avg_pool expects (B,C,H,W), got {input.shape}")
    return Tensor._wrap(input.array.mean(axis=(2, 3)))


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax of a (B, num_classes) tensor."""
    if logits.ndim != 2:
        raise ValueError(f"softmax expects (B, num_classes), got {logits.shape}")
    z = logits.array
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return Tensor._wrap(e / e.sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[Tensor, Tensor]:
    """Mean cross-entropy of integer labels under row-wise softmax.

    Returns (scalar loss, (B, num_classes) probabilities). Computed via
    log-sum-exp so the loss stays finite for confident logits.
    """
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects (B, num_classes), got {logits.shape}")
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError("label outside [0, num_classes)")
    z = logits.array
    zmax = z.max(axis=1)
    lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(B), labels]))
    probs = np.exp(z - lse[:, None])
    return Tensor._wrap(np.asarray(loss)), Tensor._wrap(probs)


# -- seeded randomness -------------------------------------------------------
#
# Streams are keyed by tuples of ints/strings so every draw in the system is
# replayable from (seed, purpose, indices...). Strings are hashed with crc32,
# which is stable across processes (the builtin hash() is salted).


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream key ints must be >= 0, got {part}")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"stream key parts must be int or str, got {type(part)!r}")


def seeded_generator(*key) -> np.random.Generator:
    """Deterministic RNG for a tuple key of non-negative ints and strings."""
    if not key:
        raise ValueError("stream key must be non-empty")
    ss = np.random.SeedSequence([_key_part(p) for p in key])
    return np.random.Generator(np.random.PCG64(ss))


def random_uniform(shape: Sequence[int], rng: np.random.Generator) -> Tensor:
    return Tensor._wrap(rng.random(tuple(shape)))


def random_normal(shape: Sequence[int], rng: np.random.Generator, std: float = 1.0) -> Tensor:
    return Tensor._wrap(rng.standard_normal(tuple(shape)) * std)
