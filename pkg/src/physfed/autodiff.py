"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Only the operators the reconstruction network needs are provided. Every
operator records one node on the tape shared by its inputs; nodes are stored
in creation order, which is already a topological order, so ``backward`` is a
single reverse sweep.

>>> tape = Tape()
>>> x = tape.leaf(np.array([1.0, 2.0, 3.0]))
>>> loss = mean(mul(x, x))
>>> tape.backward(loss)[x.node_id]
array([0.66666667, 1.33333333, 2.        ])
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


class AutodiffError(RuntimeError):
    pass


class NonFiniteError(AutodiffError):
    pass


class NonScalarLoss(AutodiffError):
    pass


class NonFiniteGradient(AutodiffError):
    pass


class Tensor:
    __slots__ = ("data", "_tape", "node_id", "name", "parents", "backward_fn")

    def __init__(self, data, tape, node_id, name=None, parents=(), backward_fn=None):
        self.data = data
        # weak so that tape <-> tensor cycles do not pin large activations
        self._tape = weakref.ref(tape)
        self.node_id = node_id
        self.name = name
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def tape(self) -> "Tape":
        tape = self._tape()
        if tape is None:
            raise AutodiffError("the tape this tensor was recorded on no longer exists")
        return tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor#{self.node_id}{label}(shape={self.shape})"


class Tape:
    """Ordered record of operations; one tape per forward/backward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _push(self, data, name=None, parents=(), backward_fn=None) -> Tensor:
        data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            op = getattr(backward_fn, "op", "leaf")
            raise NonFiniteError(f"non-finite values produced by {op}")
        t = Tensor(data, self, len(self.nodes), name, parents, backward_fn)
        self.nodes.append(t)
        return t

    def leaf(self, data, name=None) -> Tensor:
        return self._push(np.array(data, dtype=np.float64), name)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of scalar ``loss`` for every node, keyed by node id."""
        if loss.tape is not self:
            raise AutodiffError("loss was recorded on another tape")
        if loss.data.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.get(node.node_id)
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NonFiniteGradient(
                        f"non-finite gradient flowing out of {node.backward_fn.op}")
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg
        for node in self.nodes:
            if node.is_leaf and node.node_id not in grads:
                grads[node.node_id] = np.zeros_like(node.data)
        return grads


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)


def _record(op: str, data, parents, fn) -> Tensor:
    fn.op = op
    return parents[0].tape._push(data, parents=tuple(parents), backward_fn=fn)


def _same_tape(*ts: Tensor) -> None:
    tape = ts[0].tape
    for t in ts[1:]:
        if t.tape is not tape:
            raise AutodiffError("operands live on different tapes")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and shape ops
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_tape(a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_tape(a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_tape(a, b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _record("add_scalar", a.data + c, (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def reshape(a: Tensor, shape) -> Tensor:
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a: Tensor, index) -> Tensor:
    """Basic indexing ``a[index]``; the adjoint scatters back with zeros."""
    def fn(g):
        out = np.zeros_like(a.data)
        out[index] += g
        return (out,)
    return _record("take", a.data[index], (a,), fn)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _record("mean", np.array(a.data.mean()), (a,),
                   lambda g: (np.full(a.shape, g / n),))


def sum_all(a: Tensor) -> Tensor:
    return _record("sum", np.array(a.data.sum()), (a,),
                   lambda g: (np.full(a.shape, g * 1.0),))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b`` for operands with at least two dimensions."""
    _same_tape(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise AutodiffError("matmul needs operands with ndim >= 2")

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", a.data @ b.data, (a, b), fn)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``w`` of shape (in, out)."""
    return add(matmul(x, w), b)


def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", y, (a,), fn)


def avgpool1d(a: Tensor, factor: int = 4) -> Tensor:
    """Non-overlapping average pooling along the last axis."""
    d = a.shape[-1]
    if d % factor:
        raise AutodiffError(f"last axis {d} not divisible by pool factor {factor}")
    out = a.data.reshape(a.shape[:-1] + (d // factor, factor)).mean(axis=-1)
    return _record("avgpool1d", out, (a,),
                   lambda g: (np.repeat(g, factor, axis=-1) / factor,))


def channel_affine(x: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """``alpha[c] * x[..., c, h, w] + beta[c]`` for 1-D alpha and beta."""
    _same_tape(x, alpha, beta)
    c = x.shape[-3]
    if alpha.shape != (c,) or beta.shape != (c,):
        raise AutodiffError(f"alpha/beta must have shape ({c},)")
    a3 = alpha.data[:, None, None]
    out = a3 * x.data + beta.data[:, None, None]
    red = tuple(i for i in range(x.data.ndim) if i != x.data.ndim - 3)

    def fn(g):
        return g * a3, (g * x.data).sum(axis=red), g.sum(axis=red)

    return _record("channel_affine", out, (x, alpha, beta), fn)


# --------------------------------------------------------------------------
# 3x3 convolution, stride 1, zero padding 1
# --------------------------------------------------------------------------

def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, 3, 3, h, w))
    for di in range(3):
        for dj in range(3):
            cols[:, :, di, dj] = xp[:, :, di:di + h, dj:dj + w]
    return cols.reshape(n, c * 9, h * w)


def _conv2d_input_grad(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Adjoint of the convolution with respect to its (unpadded) input."""
    n, o, h, wd = g.shape
    c = w.shape[1]
    dcols = (w.reshape(o, c * 9).T @ g.reshape(n, o, h * wd)).reshape(n, c, 3, 3, h, wd)
    dxp = np.zeros((n, c, h + 2, wd + 2))
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di:di + h, dj:dj + wd] += dcols[:, :, di, dj]
    return dxp[:, :, 1:-1, 1:-1]


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution (cross-correlation) on C x H x W or N x C x H x W input."""
    _same_tape(x, w, b)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise AutodiffError(f"conv2d input must be 3-D or 4-D, got {x.shape}")
    n, c, h, wd = xd.shape
    o = w.shape[0]
    if w.shape != (o, c, 3, 3) or b.shape != (o,):
        raise AutodiffError(f"kernel {w.shape} / bias {b.shape} incompatible with {c} channels")
    cols = _im2col(np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1))), h, wd)
    wm = w.data.reshape(o, c * 9)
    out = (wm @ cols).reshape(n, o, h, wd) + b.data[:, None, None]

    def fn(g):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(n, o, h * wd)
        gw = (g2.transpose(1, 0, 2).reshape(o, -1)
              @ cols.transpose(1, 0, 2).reshape(c * 9, -1).T).reshape(w.shape)
        gx = _conv2d_input_grad(g4, w.data)
        return (gx[0] if squeeze else gx), gw, g4.sum(axis=(0, 2, 3))

    return _record("conv2d", out[0] if squeeze else out, (x, w, b), fn)


# --------------------------------------------------------------------------
# finite-difference verification
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    tol: float = 1e-5
    coords_checked: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(a, n) -> np.ndarray:
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_diff_check(graph: Callable[[Tape, dict], Tensor], inputs: Mapping[str, np.ndarray],
                      h: float = 1e-5, tol: float = 1e-5, max_coords: int | None = None,
                      seed: int = 0) -> GradCheckReport:
    """Compare ``backward`` against central differences for every input.

    ``graph(tape, leaves)`` builds a scalar from leaf tensors keyed like
    ``inputs``. With ``max_coords`` set, larger inputs are checked on a
    seeded random subset of coordinates. Failures are reported, not raised.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}

    def evaluate(values):
        tape = Tape()
        leaves = {k: tape.leaf(v, name=k) for k, v in values.items()}
        return tape, leaves, graph(tape, leaves)

    tape, leaves, out = evaluate(base)
    grads = tape.backward(out)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, value in base.items():
        analytic = grads[leaves[name].node_id]
        size = value.size
        idx = np.arange(size)
        if max_coords is not None and size > max_coords:
            idx = np.sort(rng.choice(size, max_coords, replace=False))
        worst = 0.0
        for flat in idx:
            pos = np.unravel_index(flat, value.shape)
            plus = dict(base)
            minus = dict(base)
            plus[name] = value.copy()
            minus[name] = value.copy()
            plus[name][pos] += h
            minus[name][pos] -= h
            fp = float(evaluate(plus)[2].data)
            fm = float(evaluate(minus)[2].data)
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, float(relative_error(analytic[pos], numeric)))
        report.max_rel_error[name] = worst
        report.coords_checked[name] = len(idx)
    return report
