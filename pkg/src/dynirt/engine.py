"""Reverse-mode automatic differentiation over numpy arrays.

A small fixed vocabulary of differentiable operations is enough for this
package: affine maps, GELU, sigmoid, log/exp, the posterior recursions,
Gaussian KL terms and the Bernoulli log-likelihood. Every op dispatches on
its arguments, so the same math code runs in two modes:

* plain numpy in, plain numpy out (no tape, used at inference time), or
* :class:`Var` in, :class:`Var` out, recording a tape for ``backward``.

Gradients are exact reverse-mode; ``evaluate_with_gradients`` is the main
entry point and is checked against central finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import expit, ndtr

__all__ = [
    "Var",
    "NonFiniteError",
    "ParamStore",
    "OptimizerState",
    "evaluate_with_gradients",
    "adam_step",
    "value_of",
    "exp",
    "log",
    "log1p",
    "sqrt",
    "sigmoid",
    "log_sigmoid",
    "gelu",
    "where",
    "clip",
    "nsum",
    "stack",
    "reshape",
    "gather",
    "column",
]

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NonFiniteError(ValueError):
    """A value or gradient came out NaN or infinite."""

    def __init__(self, message: str, param_name: str | None = None):
        super().__init__(message)
        self.param_name = param_name


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` to undo numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A node in the tape: an ndarray value plus vjp edges to its parents."""

    __slots__ = ("value", "grad", "_edges")

    # make `ndarray <op> Var` defer to the reflected methods below instead of
    # numpy broadcasting Var objects elementwise
    __array_ufunc__ = None

    def __init__(self, value, edges: tuple = ()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._edges = edges  # tuple of (parent Var, vjp: grad -> parent grad)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(value={self.value!r})"

    # Comparisons act on values and are not differentiated; they feed `where`.
    def __gt__(self, other):
        return self.value > value_of(other)

    def __ge__(self, other):
        return self.value >= value_of(other)

    def __lt__(self, other):
        return self.value < value_of(other)

    def __le__(self, other):
        return self.value <= value_of(other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def value_of(x):
    """Unwrap a Var (or return a plain value unchanged)."""
    return x.value if isinstance(x, Var) else x


def _is_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def backward(root: Var) -> None:
    """Accumulate gradients of a scalar ``root`` into every tape node."""
    if root.value.size != 1:
        raise ValueError("backward expects a scalar objective")
    # Iterative topological order; the tape can be thousands of nodes deep.
    topo: list[Var] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._edges:
            if id(parent) not in seen:
                stack.append((parent, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node._edges:
            pg = vjp(g)
            if parent.grad is None:
                parent.grad = np.zeros(parent.value.shape, dtype=np.float64)
            parent.grad += pg
    # Release edge closures so intermediate arrays can be collected.
    for node in topo:
        if node is not root:
            node._edges = ()


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a, b):
    if not _is_var(a, b):
        return np.add(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.add(av, bv)
    edges = []
    if isinstance(a, Var):
        edges.append((a, lambda g, s=np.shape(av): _unbroadcast(g, s)))
    if isinstance(b, Var):
        edges.append((b, lambda g, s=np.shape(bv): _unbroadcast(g, s)))
    return Var(out, tuple(edges))


def sub(a, b):
    if not _is_var(a, b):
        return np.subtract(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.subtract(av, bv)
    edges = []
    if isinstance(a, Var):
        edges.append((a, lambda g, s=np.shape(av): _unbroadcast(g, s)))
    if isinstance(b, Var):
        edges.append((b, lambda g, s=np.shape(bv): _unbroadcast(-g, s)))
    return Var(out, tuple(edges))


def mul(a, b):
    if not _is_var(a, b):
        return np.multiply(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.multiply(av, bv)
    edges = []
    if isinstance(a, Var):
        edges.append((a, lambda g, s=np.shape(av): _unbroadcast(g * bv, s)))
    if isinstance(b, Var):
        edges.append((b, lambda g, s=np.shape(bv): _unbroadcast(g * av, s)))
    return Var(out, tuple(edges))


def div(a, b):
    if not _is_var(a, b):
        return np.divide(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.divide(av, bv)
    edges = []
    if isinstance(a, Var):
        edges.append((a, lambda g, s=np.shape(av): _unbroadcast(g / bv, s)))
    if isinstance(b, Var):
        edges.append(
            (b, lambda g, s=np.shape(bv): _unbroadcast(-g * av / (bv * bv), s))
        )
    return Var(out, tuple(edges))


def power(a, p):
    """Elementwise power with a constant exponent."""
    if not isinstance(a, Var):
        return np.power(a, p)
    av = a.value
    out = np.power(av, p)
    return Var(out, ((a, lambda g: g * p * np.power(av, p - 1)),))


def matmul(a, b):
    if not _is_var(a, b):
        return np.matmul(a, b)
    av, bv = value_of(a), value_of(b)
    out = np.matmul(av, bv)
    edges = []
    if isinstance(a, Var):
        edges.append((a, lambda g: np.matmul(g, bv.T)))
    if isinstance(b, Var):
        edges.append((b, lambda g: np.matmul(av.T, g)))
    return Var(out, tuple(edges))


def exp(x):
    if not isinstance(x, Var):
        return np.exp(x)
    out = np.exp(x.value)
    return Var(out, ((x, lambda g: g * out),))


def log(x):
    if not isinstance(x, Var):
        return np.log(x)
    xv = x.value
    return Var(np.log(xv), ((x, lambda g: g / xv),))


def log1p(x):
    if not isinstance(x, Var):
        return np.log1p(x)
    xv = x.value
    return Var(np.log1p(xv), ((x, lambda g: g / (1.0 + xv)),))


def sqrt(x):
    if not isinstance(x, Var):
        return np.sqrt(x)
    out = np.sqrt(x.value)
    return Var(out, ((x, lambda g: g * 0.5 / out),))


def sigmoid(x):
    if not isinstance(x, Var):
        return expit(x)
    out = expit(x.value)
    return Var(out, ((x, lambda g: g * out * (1.0 - out)),))


def _log_sigmoid_value(x: np.ndarray) -> np.ndarray:
    # log sigma(x) = min(x, 0) - log1p(exp(-|x|)); stable on both tails
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def log_sigmoid(x):
    if not isinstance(x, Var):
        return _log_sigmoid_value(np.asarray(x, dtype=np.float64))
    xv = x.value
    out = _log_sigmoid_value(xv)
    return Var(out, ((x, lambda g: g * expit(-xv)),))


def gelu(x):
    """Exact GELU, x * Phi(x) with the Gaussian CDF (not the tanh form)."""
    if not isinstance(x, Var):
        return x * ndtr(x)
    xv = x.value
    cdf = ndtr(xv)
    out = xv * cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xv * xv)
        return g * (cdf + xv * pdf)

    return Var(out, ((x, vjp),))


def where(cond, a, b):
    """Select elementwise; ``cond`` is a plain boolean array."""
    cond = np.asarray(value_of(cond))
    if not _is_var(a, b):
        return np.where(cond, a, b)
    av, bv = value_of(a), value_of(b)
    out = np.where(cond, av, bv)
    edges = []
    if isinstance(a, Var):
        edges.append(
            (a, lambda g, s=np.shape(av): _unbroadcast(np.where(cond, g, 0.0), s))
        )
    if isinstance(b, Var):
        edges.append(
            (b, lambda g, s=np.shape(bv): _unbroadcast(np.where(cond, 0.0, g), s))
        )
    return Var(out, tuple(edges))


def clip(x, lo, hi):
    """Hard clamp; gradient is zero outside [lo, hi]."""
    if not isinstance(x, Var):
        return np.clip(x, lo, hi)
    xv = x.value
    inside = (xv >= lo) & (xv <= hi)
    return Var(np.clip(xv, lo, hi), ((x, lambda g: np.where(inside, g, 0.0)),))


def nsum(x, axis=None):
    """Sum over ``axis`` (all axes by default)."""
    if not isinstance(x, Var):
        return np.sum(x, axis=axis)
    xv = x.value
    out = np.sum(xv, axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, xv.shape).copy()
        gx = np.expand_dims(g, axis)
        return np.broadcast_to(gx, xv.shape).copy()

    return Var(out, ((x, vjp),))


def stack(items, axis=0):
    """Stack a sequence of same-shaped values along a new axis."""
    if not _is_var(*items):
        return np.stack(items, axis=axis)
    vals = [value_of(it) for it in items]
    out = np.stack(vals, axis=axis)
    edges = []
    for i, it in enumerate(items):
        if isinstance(it, Var):
            edges.append((it, lambda g, i=i: np.take(g, i, axis=axis)))
    return Var(out, tuple(edges))


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    old = x.value.shape
    return Var(np.reshape(x.value, shape), ((x, lambda g: g.reshape(old)),))


def gather(x, idx):
    """Take rows ``x[idx]`` along axis 0; backward scatter-adds."""
    idx = np.asarray(idx)
    if not isinstance(x, Var):
        return x[idx]
    xv = x.value

    def vjp(g):
        out = np.zeros(xv.shape, dtype=np.float64)
        np.add.at(out, idx, g)
        return out

    return Var(xv[idx], ((x, vjp),))


def column(x, j):
    """Extract column ``x[:, j]`` of a 2-D value."""
    if not isinstance(x, Var):
        return x[:, j]
    xv = x.value

    def vjp(g):
        out = np.zeros(xv.shape, dtype=np.float64)
        out[:, j] = g
        return out

    return Var(xv[:, j], ((x, vjp),))


# ---------------------------------------------------------------------------
# parameter store and optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Named dense float64 parameter arrays with one gradient slot each."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        if arrays:
            for name, arr in arrays.items():
                self.add(name, arr)

    def add(self, name: str, array) -> None:
        if name in self._arrays:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.array(array, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"parameter {name!r} is not finite", name)
        self._arrays[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, array) -> None:
        arr = np.asarray(array, dtype=np.float64)
        if arr.shape != self._arrays[name].shape:
            raise ValueError(f"shape mismatch for parameter {name!r}")
        self._arrays[name] = arr

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self._arrays)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._arrays.items()})


@dataclass
class OptimizerState:
    """Adam accumulators; shapes mirror the parameter store."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParamStore, learning_rate: float = 1e-3,
                  beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> "OptimizerState":
        state = cls(learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps)
        for name, arr in store.items():
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state


def evaluate_with_gradients(
    objective: Callable[[dict[str, Var]], Var],
    store: ParamStore,
) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate a scalar objective and its gradients w.r.t. every parameter.

    ``objective`` receives a dict mapping each parameter name to a leaf
    :class:`Var` and must return a scalar Var built from engine ops. Any
    noise the objective needs should be closed over as plain arrays so the
    evaluation is deterministic. Raises :class:`NonFiniteError` naming the
    offending parameter if the value or any gradient is not finite.
    """
    leaves = {name: Var(arr) for name, arr in store.items()}
    out = objective(leaves)
    if not isinstance(out, Var):
        raise TypeError("objective must return a Var (got a plain value)")
    value = float(out.value)
    if not np.isfinite(value):
        raise NonFiniteError("objective value is not finite")
    backward(out)
    grads: dict[str, np.ndarray] = {}
    for name, leaf in leaves.items():
        g = leaf.grad
        if g is None:
            g = np.zeros_like(leaf.value)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {name!r} is not finite", name)
        grads[name] = g
    return value, grads


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray],
              opt: OptimizerState) -> None:
    """One bias-corrected Adam update, in place.

    The candidate update is checked before committing: if any new parameter
    would be non-finite the store is left untouched and
    :class:`NonFiniteError` is raised.
    """
    opt.step += 1
    t = opt.step
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name in store.names():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != store[name].shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        m = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        v = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        update = opt.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        p = store[name] - update
        if not np.all(np.isfinite(p)):
            opt.step -= 1
            raise NonFiniteError(f"update for {name!r} is not finite", name)
        new_params[name] = p
        new_m[name] = m
        new_v[name] = v
    for name in store.names():
        store[name] = new_params[name]
        opt.m[name] = new_m[name]
        opt.v[name] = new_v[name]
