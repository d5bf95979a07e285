"""Reverse-mode differentiation over the tensor core.

A ComputationTape records nodes in construction order (which is already
topological), each holding the forward value and a pullback closure over
whatever the op saved. `backward` walks the list once in reverse and
accumulates per-parameter gradients into a GradientMap. Bernoulli masks
enter the tape as constants, so the gradient is that of the sampled
architecture; backward never re-samples.

Conventions fixed here because tests depend on them:
  - relu'(0) = 0 (subgradient choice; the finite-difference oracle stays
    at least 1e-3 away from the kink).
  - batchnorm in train mode differentiates through the batch statistics.
  - repeated backward on one tape is bit-identical (fresh accumulators,
    fixed iteration order).
"""

from __future__ import annotations

import math
import weakref
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, _conv2d_forward, _fill_rowpanel, _rowpanel_applies, _rowpanel_step

__all__ = [
    "ComputationTape",
    "Node",
    "GradientMap",
    "backward",
    "finite_diff_grad",
    "grad_norm",
]


class Node:
    """One tape entry: a value plus how to push gradients to its parents.

    The tape backreference is weak: nodes are owned by the tape's list, and a
    strong pointer back would cycle the whole recording (hundreds of MB of
    activation buffers per training step) through the garbage collector
    instead of freeing it by refcount the moment the step is done.
    """

    __slots__ = ("_tape_ref", "index", "value", "parents", "vjp", "param_name",
                 "requires_grad")

    def __init__(self, tape, index, value, parents, vjp, param_name, requires_grad):
        self._tape_ref = weakref.ref(tape)
        self.index = index
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.param_name = param_name
        self.requires_grad = requires_grad

    @property
    def tape(self):
        return self._tape_ref()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class GradientMap(dict):
    """Mapping parameter name -> gradient Tensor of the same shape."""


class ComputationTape:
    """Ordered op recording; every node's inputs precede it.

    With record=False the tape skips pullback closures and saved buffers,
    which makes pure-inference forwards cheaper; backward then refuses to run.
    """

    def __init__(self, record: bool = True) -> None:
        self.nodes: list[Node] = []
        self.record = record
        self._params: dict[str, Node] = {}

    # -- leaves --------------------------------------------------------------

    def constant(self, value: Tensor) -> Node:
        return self._append(value, (), None, None, False)

    def parameter(self, value: Tensor, name: str) -> Node:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        node = self._append(value, (), None, name, True)
        self._params[name] = node
        return node

    def _append(self, value: Tensor, parents, vjp, param_name, requires_grad) -> Node:
        node = Node(self, len(self.nodes), value, tuple(parents), vjp, param_name, requires_grad)
        self.nodes.append(node)
        return node

    def _op(self, value_arr: np.ndarray, parents: Sequence[Node], make_vjp) -> Node:
        rg = any(p.requires_grad for p in parents)
        vjp = make_vjp() if (self.record and rg) else None
        return self._append(Tensor._wrap(value_arr), parents, vjp, None, rg)

    # -- ops -----------------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        out = _broadcast_pair(a.value, b.value, np.add)

        def make():
            def vjp(g):
                return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
            return vjp

        return self._op(out, (a, b), make)

    def mul(self, a: Node, b: Node) -> Node:
        out = _broadcast_pair(a.value, b.value, np.multiply)

        def make():
            aa, ba = a.value.array, b.value.array
            need_a, need_b = a.requires_grad, b.requires_grad

            def vjp(g):
                return (_unbroadcast(g * ba, a.shape) if need_a else None,
                        _unbroadcast(g * aa, b.shape) if need_b else None)
            return vjp

        return self._op(out, (a, b), make)

    def scalar_mul(self, s: float, a: Node) -> Node:
        s = float(s)

        def make():
            def vjp(g):
                return (s * g,)
            return vjp

        return self._op(s * a.value.array, (a,), make)

    def relu(self, a: Node) -> Node:
        def make():
            mask = a.value.array > 0.0

            def vjp(g):
                return (g * mask,)
            return vjp

        return self._op(np.maximum(a.value.array, 0.0), (a,), make)

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shapes {a.shape} @ {b.shape}")

        def make():
            aa, ba = a.value.array, b.value.array

            def vjp(g):
                return g @ ba.T, aa.T @ g
            return vjp

        return self._op(a.value.array @ b.value.array, (a, b), make)

    def sum_all(self, a: Node) -> Node:
        def make():
            shape = a.shape

            def vjp(g):
                return (np.full(shape, float(g)),)
            return vjp

        return self._op(np.asarray(a.value.array.sum()), (a,), make)

    def conv2d(self, x: Node, k: Node, stride: int = 1, pad: int = 0) -> Node:
        out, saved, xp_shape = _conv2d_forward(x.value.array, k.value.array, stride, pad)

        def make():
            ka = k.value.array
            xa = x.value.array
            saved_buf = saved
            need_dx = x.requires_grad  # skip the input-gradient conv for data leaves

            def vjp(g):
                return _conv2d_backward(g, xa, ka, saved_buf, xp_shape, stride, pad,
                                        need_dx)
            return vjp

        return self._op(out, (x, k), make)

    def channel_bias_add(self, x: Node, b: Node) -> Node:
        if x.value.ndim != 4 or b.value.ndim != 1 or b.shape[0] != x.shape[1]:
            raise ValueError(f"channel_bias_add shapes {x.shape}, {b.shape}")
        out = x.value.array + b.value.array[None, :, None, None]

        def make():
            def vjp(g):
                return g, g.sum(axis=(0, 2, 3))
            return vjp

        return self._op(out, (x, b), make)

    def avg_pool2d(self, x: Node, k: int, stride: int) -> Node:
        B, C, H, W = x.shape
        if k < 1 or stride < 1 or k > H or k > W or (H - k) % stride or (W - k) % stride:
            raise ValueError(f"avg_pool2d window {k} stride {stride} on {H}x{W}")
        oh = (H - k) // stride + 1
        ow = (W - k) // stride + 1
        xa = x.value.array
        if k == stride == 2:
            # non-overlapping 2x2 windows: pairwise row then column adds use
            # half the passes of the generic accumulate loop, and the
            # gradient is a plain strided fill since every input cell
            # belongs to exactly one window
            t = xa[:, :, 0::2, :] + xa[:, :, 1::2, :]
            acc = t[:, :, :, 0::2] + t[:, :, :, 1::2]
            acc *= 0.25

            def make():
                def vjp(g):
                    gs = g * 0.25
                    gx = np.empty((B, C, H, W))
                    for i in range(2):
                        for j in range(2):
                            gx[:, :, i::2, j::2] = gs
                    return (gx,)
                return vjp

            return self._op(acc, (x,), make)
        acc = np.zeros((B, C, oh, ow))
        for i in range(k):
            for j in range(k):
                acc += xa[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
        acc /= k * k

        def make():
            def vjp(g):
                gx = np.zeros((B, C, H, W))
                gs = g / (k * k)
                for i in range(k):
                    for j in range(k):
                        gx[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += gs
                return (gx,)
            return vjp

        return self._op(acc, (x,), make)

    def global_avg_pool(self, x: Node) -> Node:
        B, C, H, W = x.shape

        def make():
            def vjp(g):
                return (np.broadcast_to(g[:, :, None, None] / (H * W), (B, C, H, W)).copy(),)
            return vjp

        return self._op(x.value.array.mean(axis=(2, 3)), (x,), make)

    def softmax_cross_entropy(self, logits: Node, labels: np.ndarray) -> Node:
        labels = np.asarray(labels)
        B, K = logits.shape
        if labels.shape != (B,) or labels.min() < 0 or labels.max() >= K:
            raise ValueError("bad labels for softmax_cross_entropy")
        z = logits.value.array
        zmax = z.max(axis=1)
        lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
        probs = np.exp(z - lse[:, None])
        loss = np.asarray(np.mean(lse - z[np.arange(B), labels]))

        def make():
            onehot_rows = np.arange(B)

            def vjp(g):
                gl = probs.copy()
                gl[onehot_rows, labels] -= 1.0
                gl *= float(g) / B
                return (gl,)
            return vjp

        return self._op(loss, (logits,), make)

    def batchnorm(self, x: Node, scale: Node, shift: Node, running_mean: np.ndarray,
                  running_var: np.ndarray, eps: float, train: bool):
        """Per-channel normalization of (B,C,H,W) activations.

        train=True normalizes by batch statistics (biased variance) and
        differentiates through them; returns (node, batch_mean, batch_var)
        so the caller can fold the stats into its running averages.
        train=False normalizes by the given running statistics and returns
        (node, None, None).
        """
        if x.value.ndim != 4:
            raise ValueError(f"batchnorm expects (B,C,H,W), got {x.shape}")
        B, C, H, W = x.shape
        xa = x.value.array
        ga = scale.value.array
        ba = shift.value.array
        m = B * H * W
        if train:
            if m < 2:
                raise ValueError("batchnorm train mode needs at least 2 values per channel")
            mean = xa.mean(axis=(0, 2, 3))
            # one fused pass for the second moment; the clamp guards the
            # E[x^2] - mean^2 form against cancellation going slightly negative
            var = np.einsum("bchw,bchw->c", xa, xa) / m - mean * mean
            np.maximum(var, 0.0, out=var)
        else:
            mean = running_mean
            var = running_var
        ivar = 1.0 / np.sqrt(var + eps)
        # normalization folds to a per-channel affine map of the raw input
        aff = ga * ivar
        out = xa * aff[None, :, None, None]
        out += (ba - mean * aff)[None, :, None, None]

        def make():
            def vjp(g):
                dshift = g.sum(axis=(0, 2, 3))
                # sum(g * xhat) expanded through xhat = (x - mean) * ivar,
                # so no normalized copy of the activations is kept around
                dscale = (np.einsum("bchw,bchw->c", g, xa) - mean * dshift) * ivar
                if train:
                    # dx = (g - (dshift + xhat*dscale)/m) * (scale*ivar)
                    # regrouped as g*c2 + x*c1 + c0 with per-channel factors
                    c2 = aff
                    c1 = -ivar * dscale * c2 / m
                    c0 = -(dshift / m) * c2 - mean * c1
                    dx = g * c2[None, :, None, None]
                    dx += xa * c1[None, :, None, None]
                    dx += c0[None, :, None, None]
                else:
                    dx = g * aff[None, :, None, None]
                return dx, dscale, dshift
            return vjp

        node = self._op(out, (x, scale, shift), make)
        if train:
            return node, mean, var
        return node, None, None


def _broadcast_pair(a: Tensor, b: Tensor, op) -> np.ndarray:
    if a.shape == b.shape:
        return op(a.array, b.array)
    if a.size == 1:
        return op(a.array.reshape(-1)[0], b.array)
    if b.size == 1:
        return op(a.array, b.array.reshape(-1)[0])
    raise ValueError(f"shapes {a.shape} and {b.shape} are neither equal nor scalar-broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # the operand was scalar-shaped: collapse the gradient onto it
    return np.asarray(g.sum()).reshape(shape)


def _conv2d_backward(g, xa, ka, saved, xp_shape, stride, pad, need_dx=True):
    B, C, H, W = xa.shape
    K, _, kh, kw = ka.shape
    _, _, oh, ow = g.shape
    if kh == kw == 1 and stride == 1 and pad == 0:
        # channel mixing: both gradients are GEMMs
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(K, B * oh * ow)
        xpt = xa.transpose(1, 0, 2, 3).reshape(C, B * H * W)
        gk = (g2 @ xpt.T).reshape(K, C, 1, 1)
        if not need_dx:
            return None, gk
        gx_t = (ka.reshape(K, C).T @ g2).reshape(C, B, H, W)
        return np.ascontiguousarray(gx_t.transpose(1, 0, 2, 3)), gk
    if _rowpanel_applies(stride, kh, kw, pad):
        wp = W + 2 * pad
        step = _rowpanel_step(C, kh, oh, wp, B)
        panel = np.zeros((C, kh, step, oh, wp))
        # output gradient stacked per horizontal offset, shifted to align
        # with the input columns that offset touched; margins stay zero
        gsh = np.zeros((kw, K, step, oh, wp))
        acc = np.zeros((kw * K, C * kh))
        for s in range(0, B, step):
            m = min(step, B - s)
            pm = panel[:, :, :m]
            gm = gsh[:, :, :m]
            _fill_rowpanel(pm, xa[s : s + m], pad)
            gt = g[s : s + m].transpose(1, 0, 2, 3)
            for j in range(kw):
                gm[j, :, :, :, j : j + ow] = gt
            acc += gm.reshape(kw * K, m * oh * wp) @ pm.reshape(C * kh, m * oh * wp).T
        gk = np.ascontiguousarray(acc.reshape(kw, K, C, kh).transpose(1, 2, 3, 0))
        if not need_dx:
            return None, gk
        # input gradient of a stride-1 conv is itself a conv: correlate the
        # output gradient with the spatially flipped, channel-swapped kernel,
        # padded so the result lands back on the input extent
        kflip = np.ascontiguousarray(ka[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx, _, _ = _conv2d_forward(g, kflip, 1, kh - 1 - pad)
        return gx, gk
    g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(K, B * oh * ow)
    cols2 = saved.reshape(C * kh * kw, B * oh * ow)
    gk = (g2 @ cols2.T).reshape(K, C, kh, kw)
    if not need_dx:
        return None, gk
    # general stride: scatter per-tap column gradients back to input positions
    gcols = (ka.reshape(K, C * kh * kw).T @ g2).reshape(C, kh, kw, B, oh, ow)
    gxp_t = np.zeros((C, B) + xp_shape[2:])
    for i in range(kh):
        for j in range(kw):
            gxp_t[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += gcols[:, i, j]
    gxp = gxp_t.transpose(1, 0, 2, 3)
    if pad:
        gxp = gxp[:, :, pad : pad + H, pad : pad + W]
    return np.ascontiguousarray(gxp), gk


def backward(tape: ComputationTape, loss_node: Node) -> GradientMap:
    """Gradients of a scalar loss with respect to every tape parameter.

    Parameters the loss does not reach get zero gradients of the right shape.
    """
    if loss_node.tape is not tape or loss_node.index >= len(tape.nodes) \
            or tape.nodes[loss_node.index] is not loss_node:
        raise ValueError("loss node is not on this tape")
    if loss_node.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss_node.value.shape}")
    if not tape.record:
        raise ValueError("tape was built with record=False")

    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss_node.index] = np.ones((), dtype=np.float64).reshape(loss_node.value.shape)
    reached: dict[str, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads[node.index]
        grads[node.index] = None
        if g is None or not node.requires_grad:
            continue
        if node.param_name is not None:
            reached[node.param_name] = g
            continue
        if node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            if grads[parent.index] is None:
                grads[parent.index] = pg
            else:
                grads[parent.index] = grads[parent.index] + pg
    out = GradientMap()
    for name, pnode in tape._params.items():
        g = reached.get(name)
        out[name] = Tensor(g) if g is not None else Tensor(np.zeros(pnode.shape))
    return out


def finite_diff_grad(f: Callable[[Tensor], float], p: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a deterministic scalar function.

    The per-coordinate step is h*(1+|p_i|), which keeps the relative
    perturbation sane across parameter magnitudes. `f` must be a pure
    function of `p` (masks and data frozen).
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    flat = p.array.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        step = h * (1.0 + abs(flat[i]))
        plus = flat.copy()
        plus[i] += step
        minus = flat.copy()
        minus[i] -= step
        fp = float(f(Tensor(plus.reshape(p.shape))))
        fm = float(f(Tensor(minus.reshape(p.shape))))
        grad[i] = (fp - fm) / (2.0 * step)
    return Tensor(grad.reshape(p.shape))


def finite_diff_coordinate(f: Callable[[Tensor], float], p: Tensor, i: int, h: float = 1e-5) -> float:
    """Single-coordinate central difference; used to spot-check big nets."""
    flat = p.array.reshape(-1)
    step = h * (1.0 + abs(flat[i]))
    plus = flat.copy()
    plus[i] += step
    minus = flat.copy()
    minus[i] -= step
    return (float(f(Tensor(plus.reshape(p.shape)))) - float(f(Tensor(minus.reshape(p.shape))))) / (2.0 * step)


def grad_norm(g: GradientMap) -> float:
    """Euclidean norm over all concatenated parameter gradients."""
    total = 0.0
    for name in g:
        arr = g[name].array
        total += float(np.dot(arr.reshape(-1), arr.reshape(-1)))
    return math.sqrt(total)
