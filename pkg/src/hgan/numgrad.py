"""Dense float64 tensor kernels with reverse-mode differentiation.

Values are plain numpy arrays; :class:`DiffValue` wraps one and records the
operation that produced it so :meth:`DiffValue.backward` can walk the graph in
reverse topological order. :func:`check_gradient` is the finite-difference
oracle used to validate every backward rule in this package.
"""

from __future__ import annotations

import builtins
import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording provenance (forward-only)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class DiffValue:
    """A node of the computation graph: forward value plus accumulated adjoint."""

    __slots__ = ("value", "_adjoint", "_parents", "_backward", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self._adjoint: Optional[np.ndarray] = None
        self._parents: tuple[DiffValue, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def adjoint(self) -> np.ndarray:
        if self._adjoint is None:
            return np.zeros_like(self.value)
        return self._adjoint

    def zero_grad(self) -> None:
        self._adjoint = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"DiffValue{label}(shape={self.shape})"

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's adjoint."""
        if seed is None:
            if self.value.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            seed = np.ones_like(self.value)
        order = _topological_order(self)
        self._adjoint = np.asarray(seed, dtype=DTYPE) + (0.0 if self._adjoint is None else self._adjoint)
        for node in reversed(order):
            if node._backward is None or node._adjoint is None:
                continue
            grads = node._backward(node._adjoint)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = _unbroadcast(np.asarray(g, dtype=DTYPE), parent.shape)
                if parent._adjoint is None:
                    parent._adjoint = g.copy()
                else:
                    parent._adjoint = parent._adjoint + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _topological_order(root: DiffValue) -> list[DiffValue]:
    order: list[DiffValue] = []
    seen: set[int] = set()
    stack: list[tuple[DiffValue, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def as_value(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x)


def parameter(value, name: Optional[str] = None) -> DiffValue:
    """A leaf that collects gradients."""
    return DiffValue(np.array(value, dtype=DTYPE), requires_grad=True, name=name)


def make_op(value: np.ndarray, parents: Sequence[DiffValue], backward) -> DiffValue:
    """Wrap a forward result and register its backward rule.

    ``backward`` receives the output adjoint and returns one gradient (or
    None) per parent, each broadcastable to that parent's shape.
    """
    out = DiffValue(value)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# elementwise arithmetic ------------------------------------------------------

def add(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    return make_op(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    return make_op(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    av, bv = a.value, b.value
    return make_op(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    av, bv = a.value, b.value
    out = av / bv
    return make_op(out, (a, b), lambda g: (g / bv, -g * out / bv))


def square(x) -> DiffValue:
    x = as_value(x)
    xv = x.value
    return make_op(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def sqrt(x) -> DiffValue:
    x = as_value(x)
    out = np.sqrt(x.value)
    return make_op(out, (x,), lambda g: (0.5 * g / out,))


def exp(x) -> DiffValue:
    x = as_value(x)
    out = np.exp(x.value)
    return make_op(out, (x,), lambda g: (g * out,))


def tanh(x) -> DiffValue:
    x = as_value(x)
    out = np.tanh(x.value)
    return make_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> DiffValue:
    x = as_value(x)
    xv = x.value
    # split by sign so exp never overflows
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> DiffValue:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    x = as_value(x)
    active = x.value > 0
    return make_op(np.where(active, x.value, 0.0), (x,), lambda g: (g * active,))


# shape manipulation -----------------------------------------------------------

def matmul(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    av, bv = a.value, b.value
    return make_op(
        av @ bv,
        (a, b),
        lambda g: (g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g),
    )


def transpose(x, axes: Sequence[int]) -> DiffValue:
    x = as_value(x)
    inverse = np.argsort(axes)
    return make_op(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x, a: int, b: int) -> DiffValue:
    x = as_value(x)
    return make_op(np.swapaxes(x.value, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def reshape(x, shape: Sequence[int]) -> DiffValue:
    x = as_value(x)
    src = x.shape
    return make_op(x.value.reshape(shape), (x,), lambda g: (g.reshape(src),))


def getitem(x, idx) -> DiffValue:
    x = as_value(x)

    def backward(g):
        full = np.zeros_like(x.value)
        np.add.at(full, idx, g)
        return (full,)

    return make_op(x.value[idx], (x,), backward)


def concat(parts: Sequence, axis: int = 0) -> DiffValue:
    parts = [as_value(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return make_op(
        np.concatenate([p.value for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(parts: Sequence, axis: int = 0) -> DiffValue:
    parts = [as_value(p) for p in parts]
    n = len(parts)
    return make_op(
        np.stack([p.value for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


# reductions ---------------------------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> DiffValue:  # noqa: A001
    x = as_value(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_op(x.value.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> DiffValue:
    x = as_value(x)
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) / float(count)


def max(x, axis: int = -1, where: Optional[np.ndarray] = None) -> DiffValue:  # noqa: A001
    """Maximum along ``axis`` restricted to ``where``; gradient goes to the (first) argmax."""
    x = as_value(x)
    xv = x.value
    masked = xv if where is None else np.where(where, xv, -np.inf)
    arg = np.expand_dims(np.argmax(masked, axis=axis), axis)
    out = np.take_along_axis(xv, arg, axis=axis)
    if not np.all(np.isfinite(np.take_along_axis(masked, arg, axis=axis))):
        raise ValueError("max over an empty selection")

    def backward(g):
        full = np.zeros_like(xv)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return make_op(np.squeeze(out, axis=axis), (x,), backward)


# composite kernels ------------------------------------------------------------------

def affine(x, W, b) -> DiffValue:
    """Row-wise ``W @ x[i] + b`` for ``x`` of shape (..., N, Din) and ``W`` of shape (Dout, Din)."""
    x, W, b = as_value(x), as_value(W), as_value(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine: input {x.shape} incompatible with weight {W.shape}")
    if b.shape != (W.shape[0],):
        raise DimensionError(f"affine: bias {b.shape} incompatible with weight {W.shape}")
    xv, Wv = x.value, W.value

    def backward(g):
        gx = g @ Wv
        gW = g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
        return gx, gW, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return make_op(xv @ Wv.T + b.value, (x, W, b), backward)


def softmax(x, axis: int = -1, mask: Optional[np.ndarray] = None) -> DiffValue:
    """Max-shifted softmax; entries where ``mask`` is False get exactly zero weight."""
    x = as_value(x)
    z = x.value if mask is None else np.where(mask, x.value, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (x,), backward)


def softmax_rows(e) -> DiffValue:
    """Softmax across each row of an N×N score matrix."""
    return softmax(e, axis=-1)


def l2_normalize(x, axis: int = -1) -> DiffValue:
    x = as_value(x)
    norms = np.sqrt((x.value * x.value).sum(axis=axis))
    if np.any(norms == 0.0):
        raise ValueError("degenerate vector: cannot normalize a zero-norm input")
    return x / sqrt(sum(square(x), axis=axis, keepdims=True))


# batch normalization -------------------------------------------------------------------

@dataclass
class BatchNormState:
    gamma: DiffValue
    beta: DiffValue
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, dim: int, momentum: float = 0.1, eps: float = 1e-5, name: str = "bn") -> "BatchNormState":
        return cls(
            gamma=parameter(np.ones(dim), f"{name}.gamma"),
            beta=parameter(np.zeros(dim), f"{name}.beta"),
            running_mean=np.zeros(dim),
            running_var=np.ones(dim),
            momentum=momentum,
            eps=eps,
        )


def batch_norm(x, state: BatchNormState, mode: str = "train", mask: Optional[np.ndarray] = None) -> DiffValue:
    """Per-channel normalization over every valid node in ``x``.

    ``x`` has shape (..., N, D); all leading axes are pooled, so a batch of
    graphs shares one set of statistics. Train mode uses the biased batch
    statistics and moves the running averages toward them; eval mode uses the
    running averages. ``mask`` (shape (..., N)) marks valid nodes, and padded
    rows come out as zeros.
    """
    x = as_value(x)
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    axes = tuple(range(x.ndim - 1))
    m = np.ones(x.shape[:-1] + (1,)) if mask is None else np.asarray(mask, dtype=DTYPE)[..., None]
    if mode == "train":
        count = m.sum()
        mu = sum(x * m, axis=axes, keepdims=True) / count
        centered = (x - mu) * m
        var = sum(square(centered), axis=axes, keepdims=True) / count
        xhat = centered / sqrt(var + state.eps)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu.value.reshape(-1)
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var.value.reshape(-1)
    else:
        xhat = (x - state.running_mean) / np.sqrt(state.running_var + state.eps)
    out = xhat * state.gamma + state.beta
    return out if mask is None else out * m


# recurrent cell --------------------------------------------------------------------------

@dataclass
class GRUParams:
    """Weights of one gated recurrent unit (input size ``Dp``, hidden size ``Dh``)."""

    w_z: DiffValue
    w_r: DiffValue
    w_h: DiffValue
    u_z: DiffValue
    u_r: DiffValue
    u_h: DiffValue
    b_z: DiffValue
    b_r: DiffValue
    b_h: DiffValue

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator, name: str = "gru") -> "GRUParams":
        bound = 1.0 / np.sqrt(hidden_dim)
        values = {}
        for gate in "zrh":
            values[f"w_{gate}"] = rng.uniform(-bound, bound, (hidden_dim, input_dim))
            values[f"u_{gate}"] = rng.uniform(-bound, bound, (hidden_dim, hidden_dim))
            values[f"b_{gate}"] = np.zeros(hidden_dim)
        return cls(**{k: parameter(v, f"{name}.{k}") for k, v in values.items()})

    def named(self) -> dict[str, DiffValue]:
        return {k: getattr(self, k) for k in ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h")}


def gru_cell(x_t, h_prev, p: GRUParams) -> DiffValue:
    """One GRU step: ``h_t = (1 - z) * h_prev + z * candidate``."""
    x_t, h_prev = as_value(x_t), as_value(h_prev)
    if x_t.shape[-1] != p.w_z.shape[1] or h_prev.shape[-1] != p.u_z.shape[0]:
        raise DimensionError(
            f"gru_cell: input {x_t.shape} / hidden {h_prev.shape} vs weights {p.w_z.shape}, {p.u_z.shape}"
        )

    def lin(w, u, b, h):
        return matmul(w, reshape(x_t, (-1, 1))) + matmul(u, reshape(h, (-1, 1))) + reshape(b, (-1, 1))

    z = reshape(sigmoid(lin(p.w_z, p.u_z, p.b_z, h_prev)), (-1,))
    r = reshape(sigmoid(lin(p.w_r, p.u_r, p.b_r, h_prev)), (-1,))
    cand = reshape(tanh(lin(p.w_h, p.u_h, p.b_h, r * h_prev)), (-1,))
    return (1.0 - z) * h_prev + z * cand


# finite-difference oracle ---------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)
    failure: Optional[str] = None

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tol:.1e}"
        return msg if self.failure is None else f"{msg} ({self.failure})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradient(
    f: Callable[..., DiffValue],
    params,
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    ``params`` may be a single array, a mapping ``name -> array`` (``f`` then
    receives one fresh leaf per entry, positionally), or a mapping
    ``name -> DiffValue`` of leaves ``f`` already closes over (``f`` is then
    called with no arguments and the leaves are perturbed in place).

    Entries whose magnitude is below ``floor`` are compared in absolute terms:
    at h=1e-5 the central difference itself carries roundoff of roughly
    1e-16 * |f| / h, which swamps the relative error of near-zero gradients.
    """
    if isinstance(params, dict) and params and all(isinstance(v, DiffValue) for v in params.values()):
        leaves = dict(params)
        call = f
    else:
        named = {"x": params} if not isinstance(params, dict) else params
        leaves = {k: DiffValue(np.array(v, dtype=DTYPE), requires_grad=True, name=k) for k, v in named.items()}

        def call():
            return f(*leaves.values())

    for leaf in leaves.values():
        leaf.zero_grad()
    out = call()
    if out.value.size != 1 or not np.all(np.isfinite(out.value)):
        return GradCheckReport(float("inf"), False, tol, failure="f is not a finite scalar at the base point")
    out.backward()
    analytic = {k: leaf.adjoint.copy() for k, leaf in leaves.items()}

    per_param: dict[str, float] = {}
    with no_grad():
        for name, leaf in leaves.items():
            base = leaf.value
            numeric = np.zeros_like(base)
            flat = numeric.reshape(-1)
            try:
                for i in range(base.size):
                    plus, minus = base.copy(), base.copy()
                    plus.reshape(-1)[i] += h
                    minus.reshape(-1)[i] -= h
                    leaf.value = plus
                    fp = float(call().value)
                    leaf.value = minus
                    fm = float(call().value)
                    if not (np.isfinite(fp) and np.isfinite(fm)):
                        return GradCheckReport(
                            float("inf"), False, tol, per_param, failure=f"non-finite f near {name}[{i}]"
                        )
                    flat[i] = (fp - fm) / (2 * h)
            finally:
                leaf.value = base
            err = relative_error(analytic[name], numeric, floor)
            per_param[name] = float(err.max()) if err.size else 0.0
    worst = builtins.max(per_param.values(), default=0.0)
    return GradCheckReport(worst, worst <= tol, tol, per_param)
