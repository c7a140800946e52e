"""Reverse-mode adjoints for the fixed set of operations the pipeline uses.

This is not a general autodiff system: every op the detector, the losses and
the dense baseline need is listed here with a hand-written exact backward,
and nothing else exists.  Forward functions build a tape of ``Tensor`` nodes;
``backward`` replays it in reverse topological order.

All math is plain numpy in the dtype of the inputs; float64 is used by the
gradient checks, float32 by the training loop.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from . import segment_ops
from .errors import ContractViolationError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)
_LN_EPS = 1e-5

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape building: ops return bare value nodes.

    Inference paths use this so intermediate buffers are dropped as soon as
    each op finishes instead of living in backward closures.
    """
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _node(data, parents, bw) -> "Tensor":
    if not _grad_enabled:
        return Tensor(data)
    return Tensor(data, parents, bw)


class Tensor:
    __slots__ = ("data", "grad", "parents", "bw")

    def __init__(self, data, parents=(), bw=None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = parents
        self.bw = bw

    @property
    def shape(self):
        return self.data.shape

    def add_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g


def const(x, dtype=None) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype))


def param(x) -> Tensor:
    return Tensor(np.asarray(x))


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into every tape node."""
    if loss.data.shape != ():
        raise ContractViolationError("backward expects a scalar loss tensor")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    loss.grad = np.asarray(1.0, dtype=loss.data.dtype)
    for node in reversed(order):
        if node.bw is not None and node.grad is not None:
            node.bw(node.grad)


# ---------------------------------------------------------------------------
# structural ops


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = x.data @ w.data + b.data

    def bw(g):
        x.add_grad(g @ w.data.T)
        w.add_grad(x.data.T @ g)
        b.add_grad(g.sum(axis=0))

    return _node(y, (x, w, b), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    y = gamma.data * xhat + beta.data

    def bw(g):
        gh = g * gamma.data
        m1 = gh.mean(axis=1, keepdims=True)
        m2 = (gh * xhat).mean(axis=1, keepdims=True)
        x.add_grad((gh - m1 - xhat * m2) * inv)
        gamma.add_grad((g * xhat).sum(axis=0))
        beta.add_grad(g.sum(axis=0))

    return _node(y, (x, gamma, beta), bw)


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = x.data * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        x.add_grad(g * (cdf + x.data * pdf))

    return _node(y, (x,), bw)


def concat(tensors, axis: int = 1) -> Tensor:
    y = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t.add_grad(piece)

    return _node(y, tuple(tensors), bw)


def segment_pool(x: Tensor, group_ids, num_groups: int, reduce: str) -> Tensor:
    y = segment_ops.dynamic_pool(x.data, group_ids, num_groups, reduce)

    def bw(g):
        x.add_grad(segment_ops.pool_backward(x.data, group_ids, num_groups, reduce, g))

    return _node(y, (x,), bw)


def segment_broadcast(x: Tensor, group_ids, num_rows: int | None = None) -> Tensor:
    ids = np.asarray(group_ids)
    y = segment_ops.dynamic_broadcast(x.data, ids)

    def bw(g):
        x.add_grad(segment_ops.broadcast_backward(g, ids, x.data.shape[0]))

    return _node(y, (x,), bw)


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx)
    y = x.data[idx]

    def bw(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        x.add_grad(dx)

    return _node(y, (x,), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ContractViolationError(f"add shape mismatch {a.data.shape} vs {b.data.shape}")

    def bw(g):
        a.add_grad(g)
        b.add_grad(g)

    return _node(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ContractViolationError(f"sub shape mismatch {a.data.shape} vs {b.data.shape}")

    def bw(g):
        a.add_grad(g)
        b.add_grad(-g)

    return _node(a.data - b.data, (a, b), bw)


def mul_const(x: Tensor, c) -> Tensor:
    arr = np.asarray(c, dtype=x.data.dtype)

    def bw(g):
        x.add_grad(g * arr)

    return _node(x.data * arr, (x,), bw)


def abs_(x: Tensor) -> Tensor:
    # sign(0) = 0: subgradient at the kink, only hit when pred == target
    def bw(g):
        x.add_grad(g * np.sign(x.data))

    return _node(np.abs(x.data), (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        x.add_grad(np.full_like(x.data, g))

    return _node(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        x.add_grad(g.reshape(x.data.shape))

    return _node(x.data.reshape(shape), (x,), bw)


# ---------------------------------------------------------------------------
# loss kernels


def softmax_focal(logits: Tensor, targets, gamma: float, alpha: float) -> Tensor:
    """Per-row focal term -alpha * (1 - p_t)^gamma * log(p_t) for class targets."""
    t = np.asarray(targets)
    if t.ndim != 1 or t.shape[0] != logits.data.shape[0]:
        raise ContractViolationError("targets must be one class id per logit row")
    if t.size and (t.min() < 0 or t.max() >= logits.data.shape[1]):
        raise ContractViolationError("target class id out of range")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True) if z.size else np.zeros((0, 1), dtype=z.dtype)
    e = np.exp(z - zmax)
    p = e / e.sum(axis=1, keepdims=True)
    rows = np.arange(t.shape[0])
    pt = np.clip(p[rows, t], 1e-12, 1.0)
    one_minus = 1.0 - pt
    y = -alpha * one_minus**gamma * np.log(pt)

    def bw(g):
        # dL/dp_t then chain through softmax: dz_j = c * p_t * (delta_tj - p_j)
        if gamma == 0.0:
            dpt = -alpha / pt
        else:
            dpt = alpha * (gamma * one_minus ** (gamma - 1.0) * np.log(pt) - one_minus**gamma / pt)
        coeff = (g * dpt * pt)[:, None]
        dz = -coeff * p
        dz[rows, t] += coeff[:, 0]
        logits.add_grad(dz)

    return _node(y, (logits,), bw)


def binary_ce_logits(logits: Tensor, soft_targets) -> Tensor:
    """Elementwise cross entropy of sigmoid(logits) against soft labels.

    Stable form: softplus(z) - q * z.
    """
    q = np.asarray(soft_targets, dtype=logits.data.dtype)
    if q.shape != logits.data.shape:
        raise ContractViolationError("soft targets must match logits shape")
    z = logits.data
    y = np.logaddexp(0.0, z) - q * z

    def bw(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        logits.add_grad(g * (sig - q))

    return _node(y, (logits,), bw)


def gaussian_focal(logits: Tensor, targets) -> Tensor:
    """Penalty-reduced focal loss on sigmoid heatmaps (elementwise).

    Cells with target exactly 1 are positives: (1-p)^2 log p.  Everything
    else is a negative damped by (1-y)^4: p^2 log(1-p).  Returns the negated
    per-cell terms; the caller normalizes by positive count.
    """
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.data.shape:
        raise ContractViolationError("heatmap targets must match logits shape")
    z = logits.data
    p = 1.0 / (1.0 + np.exp(-z))
    p = np.clip(p, 1e-7, 1.0 - 1e-7)
    pos = y >= 1.0
    pos_term = (1.0 - p) ** 2 * np.log(p)
    neg_term = (1.0 - y) ** 4 * p**2 * np.log(1.0 - p)
    out = -np.where(pos, pos_term, neg_term)

    def bw(g):
        dpos = -2.0 * (1.0 - p) * np.log(p) + (1.0 - p) ** 2 / p
        dneg = (1.0 - y) ** 4 * (2.0 * p * np.log(1.0 - p) - p * p / (1.0 - p))
        dz = np.where(pos, -dpos, -dneg) * p * (1.0 - p)
        logits.add_grad(g * dz)

    return _node(out, (logits,), bw)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))

    def bw(g):
        x.add_grad(g * s * (1.0 - s))

    return _node(s, (x,), bw)


# ---------------------------------------------------------------------------
# dense-grid ops (used only by the dense baseline)


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 same-padding convolution on an (H, W, Cin) grid via im2col."""
    h, wdt, cin = x.data.shape
    if w.data.shape[:3] != (3, 3, cin):
        raise ContractViolationError(f"kernel {w.data.shape} incompatible with input {x.data.shape}")
    cout = w.data.shape[3]
    pad = np.zeros((h + 2, wdt + 2, cin), dtype=x.data.dtype)
    pad[1:-1, 1:-1] = x.data
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(0, 1))
    # (H, W, Cin, 3, 3) -> (H*W, 3*3*Cin) matching w.reshape(9*Cin, Cout)
    cols = win.transpose(0, 1, 3, 4, 2).reshape(h * wdt, 9 * cin)
    w2 = w.data.reshape(9 * cin, cout)
    y = (cols @ w2 + b.data).reshape(h, wdt, cout)

    def bw(g):
        g2 = g.reshape(h * wdt, cout)
        dcols = (g2 @ w2.T).reshape(h, wdt, 3, 3, cin)
        dpad = np.zeros_like(pad)
        for ky in range(3):
            for kx in range(3):
                dpad[ky:ky + h, kx:kx + wdt] += dcols[:, :, ky, kx, :]
        x.add_grad(dpad[1:-1, 1:-1])
        w.add_grad((cols.T @ g2).reshape(w.data.shape))
        b.add_grad(g2.sum(axis=0))

    return _node(y, (x, w, b), bw)


def grid_linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1x1 convolution: per-cell linear layer on an (H, W, Cin) grid."""
    h, wdt, cin = x.data.shape
    y = x.data.reshape(-1, cin) @ w.data + b.data

    def bw(g):
        g2 = g.reshape(-1, w.data.shape[1])
        x.add_grad((g2 @ w.data.T).reshape(x.data.shape))
        w.add_grad(x.data.reshape(-1, cin).T @ g2)
        b.add_grad(g2.sum(axis=0))

    return _node(y.reshape(h, wdt, -1), (x, w, b), bw)
