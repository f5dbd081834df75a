"""Dense float64 tensors with taped reverse-mode differentiation.

Every primitive records its operands and a closure that pushes the output
gradient back to them.  ``backward`` walks the recorded graph in reverse
topological order.  Broadcasting follows numpy; gradients flowing into a
broadcast operand are summed back to its shape.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from ._kernels import ln_backward, ln_forward

__all__ = [
    "Tensor",
    "Graph",
    "tensor",
    "matmul",
    "affine",
    "layer_norm",
    "gelu",
    "concat",
    "backward",
    "detect_anomaly",
    "no_grad",
    "NonFiniteError",
    "GraphUsageError",
]

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_state = {"grad_enabled": True, "detect_anomaly": False}


class NonFiniteError(FloatingPointError):
    """Raised in anomaly mode when a primitive produces NaN or Inf."""


class GraphUsageError(RuntimeError):
    """Raised for misuse of the differentiation graph."""


@contextlib.contextmanager
def detect_anomaly(enabled: bool = True):
    """Check every primitive output for non-finite values while active."""
    prev = _state["detect_anomaly"]
    _state["detect_anomaly"] = enabled
    try:
        yield
    finally:
        _state["detect_anomaly"] = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation-only forward passes)."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A float64 array node in the differentiation graph.

    Parameters
    ----------
    data : array_like
        Values; converted to a float64 ndarray.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad``.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return self.transpose()

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph construction ----------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
              back: Callable[[np.ndarray], None]) -> Tensor:
        if _state["detect_anomaly"] and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values produced by '{op}'")
        out = Tensor(data)
        if _state["grad_enabled"] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = back
            out._op = op
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            # gradients are never mutated in place, so sharing the buffer is safe
            self.grad = g if g.dtype == np.float64 else g.astype(np.float64)
        else:
            self.grad = self.grad + g

    # -- elementwise arithmetic ------------------------------------------
    def __add__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def back(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), "add", back)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def back(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(-g, b.shape))

        return Tensor._make(a.data - b.data, (a, b), "sub", back)

    def __rsub__(self, other) -> Tensor:
        return Tensor(other) - self

    def __mul__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), "mul", back)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._make(a.data / b.data, (a, b), "div", back)

    def __rtruediv__(self, other) -> Tensor:
        return Tensor(other) / self

    def __neg__(self) -> Tensor:
        a = self
        return Tensor._make(-a.data, (a,), "neg", lambda g: a._accumulate(-g))

    def __pow__(self, exponent: float) -> Tensor:
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        a, p = self, float(exponent)

        def back(g):
            a._accumulate(g * p * a.data ** (p - 1.0))

        return Tensor._make(a.data ** p, (a,), "pow", back)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, idx) -> Tensor:
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

        return Tensor._make(a.data[idx], (a,), "index", back)

    # -- unary functions --------------------------------------------------
    def exp(self) -> Tensor:
        a = self
        out = np.exp(a.data)
        return Tensor._make(out, (a,), "exp", lambda g: a._accumulate(g * out))

    def log(self) -> Tensor:
        a = self
        return Tensor._make(np.log(a.data), (a,), "log", lambda g: a._accumulate(g / a.data))

    def sqrt(self) -> Tensor:
        a = self
        out = np.sqrt(a.data)
        return Tensor._make(out, (a,), "sqrt", lambda g: a._accumulate(g * 0.5 / out))

    def tanh(self) -> Tensor:
        a = self
        out = np.tanh(a.data)
        return Tensor._make(out, (a,), "tanh", lambda g: a._accumulate(g * (1.0 - out * out)))

    def gelu(self) -> Tensor:
        return gelu(self)

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

        return Tensor._make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), "sum", back)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape manipulation -----------------------------------------------
    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), "reshape",
                            lambda g: a._accumulate(g.reshape(a.shape)))

    def transpose(self, *axes) -> Tensor:
        """Swap the last two axes, or permute by ``axes`` when given."""
        a = self
        if not axes:
            perm = list(range(a.ndim))
            if a.ndim >= 2:
                perm[-1], perm[-2] = perm[-2], perm[-1]
        else:
            perm = list(axes[0]) if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else list(axes)
        inv = np.argsort(perm)
        return Tensor._make(np.transpose(a.data, perm), (a,), "transpose",
                            lambda g: a._accumulate(np.transpose(g, inv)))

    def broadcast_to(self, shape: Sequence[int]) -> Tensor:
        a = self
        return Tensor._make(np.broadcast_to(a.data, tuple(shape)).copy(), (a,), "broadcast",
                            lambda g: a._accumulate(_unbroadcast(g, a.shape)))

    # -- differentiation --------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics on leading axes."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        return affine(a, b)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from exc

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return Tensor._make(out, (a, b), "matmul", back)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for a 2-d weight, flattening the leading axes of ``x`` into one GEMM."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {x.shape} @ {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"bias shape {b.shape} does not match output width {w.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            x._accumulate((g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            w._accumulate(x2.T @ g2)
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))

    return Tensor._make(out.reshape(lead + (w.shape[1],)), parents, "matmul", back)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance.

    ``gamma``/``beta`` may be omitted for the non-affine variant.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    for label, t in (("gamma", gamma), ("beta", beta)):
        if t is not None and t.shape != (d,):
            raise ValueError(f"{label} shape {t.shape} does not match feature size {d}")
    xhat, rstd = ln_forward(x.data.reshape(-1, d), eps)
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = tuple(t for t in (x, gamma, beta) if t is not None)

    def back(g):
        g2 = g.reshape(-1, d)
        if beta is not None and beta.requires_grad:
            beta._accumulate(g2.sum(axis=0))
        if gamma is not None and gamma.requires_grad:
            gamma._accumulate((g2 * xhat).sum(axis=0))
        if x.requires_grad:
            gh = g2 * gamma.data if gamma is not None else g2
            x._accumulate(ln_backward(gh, xhat, rstd).reshape(x.shape))

    return Tensor._make(out.reshape(x.shape), parents, "layer_norm", back)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with Phi the standard normal CDF."""
    xd = x.data
    cdf = erf(xd * (1.0 / _SQRT_2))
    cdf += 1.0
    cdf *= 0.5
    out = xd * cdf
    if not (_state["grad_enabled"] and x.requires_grad):
        return Tensor._make(out, (x,), "gelu", None)
    slope = np.exp(-0.5 * xd * xd)
    slope *= xd
    slope *= _INV_SQRT_2PI
    slope += cdf

    def back(g):
        x._accumulate(g * slope)

    return Tensor._make(out, (x,), "gelu", back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return Tensor._make(out, tensors, "concat", back)


class Graph:
    """Topologically ordered record of the operations leading to ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = self._toposort(output)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def ops(self) -> list[str]:
        return [n._op for n in self.nodes if not n.is_leaf]

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, grad: np.ndarray | None = None) -> None:
        out = self.output
        if grad is None:
            if out.size != 1:
                raise GraphUsageError(f"backward needs a scalar output, got shape {out.shape}")
            grad = np.ones_like(out.data)
        # interior nodes hold gradients only transiently; leaves accumulate
        for node in self.nodes:
            if not node.is_leaf:
                node.grad = None
        out.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(self.nodes):
            if node.is_leaf or node._backward is None or node.grad is None:
                continue
            g = node.grad
            node.grad = None
            node._backward(g)


def backward(output: Tensor, grad: np.ndarray | None = None) -> Graph:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    if not output.requires_grad:
        raise GraphUsageError("backward called on a tensor that is not part of a recorded graph")
    graph = Graph(output)
    if output.is_leaf:
        g = np.ones_like(output.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad is None and output.size != 1:
            raise GraphUsageError(f"backward needs a scalar output, got shape {output.shape}")
        output._accumulate(g)
        return graph
    graph.backward(grad)
    return graph


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
