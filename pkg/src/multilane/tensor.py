"""Dense-tensor kernel with reverse-mode automatic differentiation.

Design constraints this kernel commits to:

- numpy arrays back every tensor; one global tape records differentiable ops
  in execution order and is replayed in reverse by ``backward``.
- gradient accumulation is sequential in reverse-execution order, so repeated
  runs of the same program are bit-identical.
- no implicit broadcasting: binary ops require equal shapes, the only
  broadcast forms are the dedicated ``bias_add`` and the affine inside
  ``layer_norm``.
- two precisions: float32 (training default) and float64 (gradient
  verification); selected through ``set_default_dtype``/``using_dtype``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import GradError, ShapeError

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"unsupported scalar precision {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def using_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """Row-major dense array with an optional gradient buffer.

    Tensors are immutable once produced by an op except for ``grad``
    accumulation. ``detach`` marks a tensor as a gradient sink: nothing that
    happens downstream of it can reach tensors upstream of it.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """Gradient-stopped view of the same buffer."""
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # operator sugar; the free functions carry the autodiff logic
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class Tape:
    """Ordered record of executed differentiable ops.

    Each node couples an output tensor with a closure that, given the
    output's gradient, accumulates gradients into the op's inputs. Walking
    the record in reverse therefore implements reverse-mode AD; the record
    is cleared after every backward pass.
    """

    def __init__(self):
        self._nodes = []

    def record(self, out: Tensor, backward_fn) -> None:
        self._nodes.append((out, backward_fn))

    def __len__(self):
        return len(self._nodes)

    def clear(self) -> None:
        self._nodes.clear()

    def replay_backward(self) -> None:
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)


_TAPE = Tape()
_GRAD_ENABLED = True


def tape() -> Tape:
    return _TAPE


@contextmanager
def no_grad():
    """Disable tape recording; forwards inside run gradient-free."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _track(*tensors: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} vs tensor {t.data.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Reverse-replay the tape from a scalar loss; clears the tape."""
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if len(_TAPE) == 0:
        raise GradError("backward on an empty tape")
    loss.grad = np.ones_like(loss.data)
    _TAPE.replay_backward()
    _TAPE.clear()


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------

def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad)


def full(shape, value, requires_grad=False) -> Tensor:
    return Tensor(np.full(shape, value, dtype=_DEFAULT_DTYPE), requires_grad)


def trunc_normal(shape, rng: np.random.Generator, std: float = 0.02,
                 requires_grad: bool = False) -> Tensor:
    """Truncated normal at +-2 std via inverse-CDF; deterministic per rng state."""
    from scipy.special import ndtri

    lo, hi = 0.0227501319481792155, 0.9772498680518208  # Phi(-2), Phi(2)
    u = rng.uniform(lo, hi, size=shape)
    return Tensor((ndtri(u) * std).astype(_DEFAULT_DTYPE), requires_grad)


# ---------------------------------------------------------------------------
# differentiable ops
# ---------------------------------------------------------------------------

def _binary_check(a: Tensor, b: Tensor, name: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{name}: shape {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "add")
    out = Tensor(a.data + b.data, _track(a, b))
    if out.requires_grad:
        def bw(g):
            _accum(a, g)
            _accum(b, g)
        _TAPE.record(out, bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "sub")
    out = Tensor(a.data - b.data, _track(a, b))
    if out.requires_grad:
        def bw(g):
            _accum(a, g)
            _accum(b, -g)
        _TAPE.record(out, bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "mul")
    out = Tensor(a.data * b.data, _track(a, b))
    if out.requires_grad:
        def bw(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)
        _TAPE.record(out, bw)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "div")
    out = Tensor(a.data / b.data, _track(a, b))
    if out.requires_grad:
        def bw(g):
            _accum(a, g / b.data)
            _accum(b, -g * a.data / (b.data * b.data))
        _TAPE.record(out, bw)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * a.data.dtype.type(c), _track(a))
    if out.requires_grad:
        def bw(g):
            _accum(a, g * a.data.dtype.type(c))
        _TAPE.record(out, bw)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner extents disagree, {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, _track(a, b))
    if out.requires_grad:
        def bw(g):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)
        _TAPE.record(out, bw)
    return out


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise broadcast add of a [D] vector onto a [n x D] matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"bias_add: {x.data.shape} + {b.data.shape}")
    out = Tensor(x.data + b.data[None, :], _track(x, b))
    if out.requires_grad:
        def bw(g):
            _accum(x, g)
            _accum(b, g.sum(axis=0))
        _TAPE.record(out, bw)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs rank 2, got {a.data.shape}")
    out = Tensor(np.ascontiguousarray(a.data.T), _track(a))
    if out.requires_grad:
        def bw(g):
            _accum(a, np.ascontiguousarray(g.T))
        _TAPE.record(out, bw)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    nd = tensors[0].data.ndim
    if not 0 <= axis < nd:
        raise ShapeError(f"concat: axis {axis} out of range for rank {nd}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _track(*tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def bw(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * nd
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])
        _TAPE.record(out, bw)
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    nd = a.data.ndim
    if not 0 <= axis < nd:
        raise ShapeError(f"slice: axis {axis} out of range for rank {nd}")
    extent = a.data.shape[axis]
    if not (0 <= start <= stop <= extent):
        raise ShapeError(f"slice: range [{start}:{stop}) outside extent {extent}")
    idx = [slice(None)] * nd
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(np.ascontiguousarray(a.data[idx]), _track(a))
    if out.requires_grad:
        def bw(g):
            buf = np.zeros_like(a.data)
            buf[idx] = g
            _accum(a, buf)
        _TAPE.record(out, bw)
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y, _track(a))
    if out.requires_grad:
        def bw(g):
            _accum(a, g * y * (1.0 - y))
        _TAPE.record(out, bw)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (the transformer-standard form)."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + t), _track(a))
    if out.requires_grad:
        def bw(g):
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))
        _TAPE.record(out, bw)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), _track(a))
    if out.requires_grad:
        def bw(g):
            _accum(a, g / a.data)
        _TAPE.record(out, bw)
    return out


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor(y, _track(a))
    if out.requires_grad:
        def bw(g):
            _accum(a, g * 0.5 / y)
        _TAPE.record(out, bw)
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the interior."""
    out = Tensor(np.clip(a.data, lo, hi), _track(a))
    if out.requires_grad:
        mask = (a.data > lo) & (a.data < hi)

        def bw(g):
            _accum(a, g * mask)
        _TAPE.record(out, bw)
    return out


def mean(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.mean(), dtype=a.data.dtype), _track(a))
    if out.requires_grad:
        n = a.data.size

        def bw(g):
            _accum(a, np.full_like(a.data, g / n))
        _TAPE.record(out, bw)
    return out


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype), _track(a))
    if out.requires_grad:
        def bw(g):
            _accum(a, np.full_like(a.data, g))
        _TAPE.record(out, bw)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    nd = a.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"softmax: axis {axis} out of range for rank {nd}")
    x = a.data
    if not np.all(np.isfinite(x)):
        raise ShapeError("softmax over non-finite input")
    shifted = x - x.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    y = ex / ex.sum(axis=axis, keepdims=True)
    out = Tensor(y, _track(a))
    if out.requires_grad:
        def bw(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(a, (g - dot) * y)
        _TAPE.record(out, bw)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then affine.

    x is [n x D] (or [D]); gamma/beta are [D]. Variance is the population
    variance (divide by D), matching standard transformer layer norm.
    """
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm: affine {gamma.data.shape}/{beta.data.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, _track(x, gamma, beta))
    if out.requires_grad:
        def bw(g):
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
            if beta.requires_grad:
                _accum(beta, g.reshape(-1, d).sum(axis=0))
            if x.requires_grad:
                dxhat = g * gamma.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                _accum(x, (dxhat - m1 - xhat * m2) * inv)
        _TAPE.record(out, bw)
    return out
