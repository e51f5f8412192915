"""Reverse-mode automatic differentiation over dense numpy arrays.

Conventions:
  * tensors are float32 (training) or float64 (gradient checking);
  * broadcasting follows numpy's trailing-dimension rule;
  * a tape node holds its parents plus a closure that scatters the incoming
    gradient; graphs are only recorded while gradients are enabled;
  * gradient buffers are never mutated in place, so sharing an array between
    two accumulation targets is safe.

A single graph must be used from one thread at a time; tensors themselves are
plain values and can move freely between threads.
"""

from __future__ import annotations

import math

import numpy as np

_GRAD_ENABLED = True
_DEBUG_CHECKS = False

_GELU_C = math.sqrt(2.0 / math.pi)


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_debug_checks(flag: bool) -> None:
    """Enable finiteness / domain assertions after every forward op."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)


def debug_checks() -> bool:
    return _DEBUG_CHECKS


class Tensor:
    """Dense n-d float array participating in a reverse-mode tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # -- graph manipulation ----------------------------------------------------

    def detach(self) -> "Tensor":
        """Severs the tape: same values, no parents, no gradient flow."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate grad buffers of every reachable requires_grad tensor.

        Must be called on a single-element tensor.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn()

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, dim=None, keepdims=False):
        return reduce("sum", self, dim, keepdims)

    def mean(self, dim=None, keepdims=False):
        return reduce("mean", self, dim, keepdims)

    def min(self, dim=None, keepdims=False):
        return reduce("min", self, dim, keepdims)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


def _make(out_data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    """Wrap a forward result, attaching the tape node when recording."""
    _check_finite(out_data, op)
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # never in place: grad arrays may be shared between accumulation targets
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over broadcast dimensions back to the input shape."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_prep(a, b):
    if not isinstance(a, Tensor):
        raise TypeError("first operand must be a Tensor")
    b = _as_tensor(b, a.dtype)
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


# -- elementwise ops -----------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a, b = _binary_prep(a, b)
    out_data = a.data + b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    out = _make(out_data, (a, b), backward, "add")
    return out


def sub(a: Tensor, b) -> Tensor:
    a, b = _binary_prep(a, b)
    out_data = a.data - b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    out = _make(out_data, (a, b), backward, "sub")
    return out


def mul(a: Tensor, b) -> Tensor:
    a, b = _binary_prep(a, b)
    out_data = a.data * b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    out = _make(out_data, (a, b), backward, "mul")
    return out


def div(a: Tensor, b) -> Tensor:
    a, b = _binary_prep(a, b)
    if _DEBUG_CHECKS and np.any(b.data == 0):
        raise ZeroDivisionError("div: zero denominator")
    out_data = a.data / b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    out = _make(out_data, (a, b), backward, "div")
    return out


def abs_(a: Tensor) -> Tensor:
    out_data = np.abs(a.data)

    def backward():
        if a.requires_grad:
            _accum(a, out.grad * np.sign(a.data))

    out = _make(out_data, (a,), backward, "abs")
    return out


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward():
        if a.requires_grad:
            _accum(a, out.grad * out_data)

    out = _make(out_data, (a,), backward, "exp")
    return out


def log(a: Tensor) -> Tensor:
    if _DEBUG_CHECKS and np.any(a.data <= 0):
        raise FloatingPointError("log: non-positive input")
    out_data = np.log(a.data)

    def backward():
        if a.requires_grad:
            _accum(a, out.grad / a.data)

    out = _make(out_data, (a,), backward, "log")
    return out


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward():
        if a.requires_grad:
            _accum(a, out.grad * (0.5 / out_data))

    out = _make(out_data, (a,), backward, "sqrt")
    return out


def sin(a: Tensor) -> Tensor:
    out_data = np.sin(a.data)

    def backward():
        if a.requires_grad:
            _accum(a, out.grad * np.cos(a.data))

    out = _make(out_data, (a,), backward, "sin")
    return out


def cos(a: Tensor) -> Tensor:
    out_data = np.cos(a.data)

    def backward():
        if a.requires_grad:
            _accum(a, out.grad * -np.sin(a.data))

    out = _make(out_data, (a,), backward, "cos")
    return out


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    out_data = np.clip(a.data, lo, hi)

    def backward():
        if a.requires_grad:
            mask = np.ones_like(a.data)
            if lo is not None:
                mask *= a.data >= lo
            if hi is not None:
                mask *= a.data <= hi
            _accum(a, out.grad * mask)

    out = _make(out_data, (a,), backward, "clamp")
    return out


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward():
        if a.requires_grad:
            _accum(a, out.grad * out_data * (1.0 - out_data))

    out = _make(out_data, (a,), backward, "sigmoid")
    return out


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (smooth, hence finite-difference checkable)."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out_data = 0.5 * x * (1.0 + t)

    def backward():
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 0.134145 * x2)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            _accum(a, out.grad * da)

    out = _make(out_data, (a,), backward, "gelu")
    return out


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward():
        if a.requires_grad:
            _accum(a, out.grad * (a.data > 0))

    out = _make(out_data, (a,), backward, "relu")
    return out


def min2(a: Tensor, b) -> Tensor:
    """Elementwise minimum; gradient routes to the winner, ties to `a`."""
    a, b = _binary_prep(a, b)
    out_data = np.minimum(a.data, b.data)

    def backward():
        g = out.grad
        a_wins = a.data <= b.data
        if a.requires_grad:
            _accum(a, _unbroadcast(g * a_wins, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ~a_wins, b.shape))

    out = _make(out_data, (a, b), backward, "min2")
    return out


def max2(a: Tensor, b) -> Tensor:
    """Elementwise maximum; gradient routes to the winner, ties to `a`."""
    a, b = _binary_prep(a, b)
    out_data = np.maximum(a.data, b.data)

    def backward():
        g = out.grad
        a_wins = a.data >= b.data
        if a.requires_grad:
            _accum(a, _unbroadcast(g * a_wins, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ~a_wins, b.shape))

    out = _make(out_data, (a, b), backward, "max2")
    return out


_UNARY = {"abs": abs_, "exp": exp, "log": log, "sigmoid": sigmoid, "gelu": gelu,
          "relu": relu, "sqrt": sqrt, "sin": sin, "cos": cos}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "min2": min2, "max2": max2}


def elementwise(op_kind: str, a: Tensor, b=None, **kwargs) -> Tensor:
    """Dispatch an elementwise op by name (clamp takes lo=/hi= kwargs)."""
    if op_kind == "clamp":
        return clamp(a, **kwargs)
    if op_kind in _UNARY:
        if b is not None:
            raise TypeError(f"{op_kind} is unary")
        return _UNARY[op_kind](a)
    if op_kind in _BINARY:
        if b is None:
            raise TypeError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# -- reductions ------------------------------------------------------------------


def reduce(op: str, a: Tensor, dim=None, keepdims: bool = False) -> Tensor:
    """mean | sum | min over `dim` (int, tuple, or None for all elements).

    min routes its gradient to the argmin, ties broken toward the lowest index.
    """
    if a.data.size == 0:
        raise ValueError("reduction over an empty tensor")
    if dim is not None:
        for d in np.atleast_1d(dim):
            if d >= a.data.ndim:
                raise ValueError(f"dim {d} out of range for rank {a.data.ndim}")
    if op == "sum" or op == "mean":
        out_data = a.data.sum(axis=dim, keepdims=keepdims)
        scale = a.data.size / out_data.size if op == "mean" else 1.0
        if op == "mean":
            out_data = out_data / scale

        def backward():
            if a.requires_grad:
                g = out.grad
                if not keepdims and dim is not None:
                    g = np.expand_dims(g, dim)
                g = np.broadcast_to(g, a.shape)
                _accum(a, g / scale if op == "mean" else g.copy())

        out = _make(out_data, (a,), backward, op)
        return out

    if op == "min":
        if dim is None:
            flat_idx = int(np.argmin(a.data))
            out_data = a.data.reshape(-1)[flat_idx].reshape(() if not keepdims else (1,) * a.data.ndim)

            def backward():
                if a.requires_grad:
                    g = np.zeros_like(a.data).reshape(-1)
                    g[flat_idx] = out.grad.reshape(-1)[0]
                    _accum(a, g.reshape(a.shape))

            out = _make(out_data, (a,), backward, "min")
            return out
        if not isinstance(dim, int):
            raise TypeError("min reduction supports a single int dim")
        idx = np.argmin(a.data, axis=dim)
        out_data = np.min(a.data, axis=dim, keepdims=keepdims)

        def backward():
            if a.requires_grad:
                g = out.grad
                if not keepdims:
                    g = np.expand_dims(g, dim)
                scat = np.zeros_like(a.data)
                np.put_along_axis(scat, np.expand_dims(idx, dim), g, axis=dim)
                _accum(a, scat)

        out = _make(out_data, (a,), backward, "min")
        return out

    raise ValueError(f"unknown reduction {op!r}")


# -- structural ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward():
        if a.requires_grad:
            _accum(a, out.grad.reshape(a.shape))

    out = _make(out_data, (a,), backward, "reshape")
    return out


def narrow(a: Tensor, dim: int, start: int, length: int) -> Tensor:
    """Slice `length` elements along `dim` starting at `start`."""
    index = [slice(None)] * a.data.ndim
    index[dim] = slice(start, start + length)
    index = tuple(index)
    out_data = a.data[index]

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[index] = out.grad
            _accum(a, g)

    out = _make(out_data, (a,), backward, "narrow")
    return out


def concat(tensors, dim: int) -> Tensor:
    tensors = list(tensors)
    dtype = tensors[0].dtype
    if any(t.dtype != dtype for t in tensors):
        raise TypeError("concat requires uniform dtype")
    out_data = np.concatenate([t.data for t in tensors], axis=dim)
    sizes = [t.data.shape[dim] for t in tensors]

    def backward():
        g = out.grad
        offset = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[dim] = slice(offset, offset + s)
                _accum(t, g[tuple(index)])
            offset += s

    out = _make(out_data, tuple(tensors), backward, "concat")
    return out


def detach(a: Tensor) -> Tensor:
    return a.detach()
