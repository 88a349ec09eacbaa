"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tape records every Tensor in creation order, which is already a valid
topological order, so backward() is a single reverse sweep that visits each
node exactly once per call. Gradients accumulate across repeated backward
calls; there is deliberately no implicit zeroing.

Training runs in float32; gradient checks build a float64 tape. The only
stateful object is the tape itself: parameters live outside as plain numpy
arrays and are wrapped into leaf tensors per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Flipped on by tests / the trainer's debug mode: every op output is scanned
# for NaN/Inf and raises immediately instead of poisoning the tape.
CHECK_FINITE = False


class ShapeError(ValueError):
    """Operands do not conform for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf while CHECK_FINITE was enabled."""


class Tape:
    """Ordered record of tensors; owns the dtype every op computes in."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError(f"unsupported tape dtype {dtype}")
        self.nodes: list[Tensor] = []

    def tensor(self, data, requires_grad: bool = False) -> "Tensor":
        arr = np.ascontiguousarray(np.asarray(data, dtype=self.dtype))
        return Tensor(self, arr, requires_grad=requires_grad)

    def constant(self, data) -> "Tensor":
        return self.tensor(data, requires_grad=False)


class Tensor:
    __slots__ = ("tape", "data", "grad", "node_id", "requires_grad",
                 "_track", "_backward", "_pend")

    def __init__(self, tape: Tape, data: np.ndarray, requires_grad=False,
                 track=None):
        self.tape = tape
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._track = self.requires_grad if track is None else track
        self._backward = None
        self._pend = None
        self.node_id = len(tape.nodes)
        tape.nodes.append(self)
        if CHECK_FINITE and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite tensor at node {self.node_id}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(self.tape, other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _coerce(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("tensors belong to different tapes")
        return x
    return tape.constant(x)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _coerce(a.tape, b)
    if isinstance(b, Tensor):
        return _coerce(b.tape, a), b
    raise TypeError("at least one operand must be a Tensor")


def _out(tape, data, track):
    t = Tensor(tape, data, track=track)
    return t

def _add_pend(t: Tensor, g: np.ndarray):
    t._pend = g if t._pend is None else t._pend + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _finite(data, op):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output of {op}")
    return data


# -- elementwise binary ----------------------------------------------------

def _binary(a, b, op_name, fwd, bwd_a, bwd_b):
    a, b = _pair(a, b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{op_name}: shapes {a.shape} and {b.shape}: {e}")
    track = a._track or b._track
    out = _out(a.tape, _finite(data, op_name), track)
    if track:
        def bw(g):
            if a._track:
                _add_pend(a, _unbroadcast(bwd_a(g, a.data, b.data, data), a.shape))
            if b._track:
                _add_pend(b, _unbroadcast(bwd_b(g, a.data, b.data, data), b.shape))
        out._backward = bw
    return out


def add(a, b):
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b):
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b):
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b):
    return _binary(a, b, "div", lambda x, y: x / y,
                   lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * x / (y * y))


def maximum(a, b):
    # ties send the gradient to the first operand
    return _binary(a, b, "maximum", np.maximum,
                   lambda g, x, y, o: g * (x >= y),
                   lambda g, x, y, o: g * (x < y))


def minimum(a, b):
    return _binary(a, b, "minimum", np.minimum,
                   lambda g, x, y, o: g * (x <= y),
                   lambda g, x, y, o: g * (x > y))


# -- elementwise unary -----------------------------------------------------

def _unary(a, op_name, fwd, bwd):
    data = fwd(a.data)
    out = _out(a.tape, _finite(data, op_name), a._track)
    if a._track:
        def bw(g):
            _add_pend(a, bwd(g, a.data, data))
        out._backward = bw
    return out


def scale(a: Tensor, s: float):
    s = float(s)
    return _unary(a, "scale", lambda x: x * s, lambda g, x, o: g * s)


def log(a: Tensor):
    return _unary(a, "log", np.log, lambda g, x, o: g / x)


def exp(a: Tensor):
    return _unary(a, "exp", np.exp, lambda g, x, o: g * o)


def sqrt(a: Tensor):
    def bw(g, x, o):
        return np.where(x > 0, g * 0.5 / np.where(x > 0, o, 1.0), 0.0)
    return _unary(a, "sqrt", np.sqrt, bw)


def abs_(a: Tensor):
    return _unary(a, "abs", np.abs, lambda g, x, o: g * np.sign(x))


def pow_const(a: Tensor, p: float):
    p = float(p)
    return _unary(a, "pow_const", lambda x: x ** p,
                  lambda g, x, o: g * p * x ** (p - 1.0))


def relu(a: Tensor):
    return _unary(a, "relu", lambda x: np.maximum(x, 0),
                  lambda g, x, o: g * (x > 0))


def tanh(a: Tensor):
    return _unary(a, "tanh", np.tanh, lambda g, x, o: g * (1.0 - o * o))


def sigmoid(a: Tensor):
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    return _unary(a, "sigmoid", fwd, lambda g, x, o: g * o * (1.0 - o))


def softplus(a: Tensor):
    # log(1 + e^x), computed as max(x,0) + log1p(e^-|x|)
    def fwd(x):
        return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    def bwd(g, x, o):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return g * s
    return _unary(a, "softplus", fwd, bwd)


def clamp(a: Tensor, lo=None, hi=None):
    def fwd(x):
        return np.clip(x, lo, hi)
    def bwd(g, x, o):
        m = np.ones_like(x, dtype=bool)
        if lo is not None:
            m &= x >= lo
        if hi is not None:
            m &= x <= hi
        return g * m
    return _unary(a, "clamp", fwd, bwd)


# -- shape ops ---------------------------------------------------------------

def reshape(a: Tensor, shape):
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} -> {shape}: {e}")
    out = _out(a.tape, data, a._track)
    if a._track:
        orig = a.shape
        out._backward = lambda g: _add_pend(a, g.reshape(orig))
    return out


def transpose(a: Tensor, axes=None):
    data = a.data.transpose(axes)
    out = _out(a.tape, data, a._track)
    if a._track:
        inv = None if axes is None else tuple(np.argsort(axes))
        out._backward = lambda g: _add_pend(a, g.transpose(inv))
    return out


def broadcast_to(a: Tensor, shape):
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}: {e}")
    out = _out(a.tape, data, a._track)
    if a._track:
        out._backward = lambda g: _add_pend(a, _unbroadcast(g, a.shape))
    return out


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    tape = tensors[0].tape
    tensors = [_coerce(tape, t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat axis={axis}: "
                         f"{[t.shape for t in tensors]}: {e}")
    track = any(t._track for t in tensors)
    out = _out(tape, data, track)
    if track:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def bw(g):
            parts = np.split(g, splits, axis=axis)
            for t, p in zip(tensors, parts):
                if t._track:
                    _add_pend(t, p)
        out._backward = bw
    return out


def slice_(a: Tensor, key):
    data = a.data[key]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data, dtype=a.tape.dtype)
    out = _out(a.tape, data, a._track)
    if a._track:
        def bw(g):
            buf = np.zeros_like(a.data)
            buf[key] += g
            _add_pend(a, buf)
        out._backward = bw
    return out


def take_rows(a: Tensor, indices):
    """Row gather (embedding lookup). Backward scatter-adds, so repeated
    indices accumulate."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows: indices must be 1-d, got {idx.shape}")
    if a.ndim != 2:
        raise ShapeError(f"take_rows: source must be 2-d, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {a.shape[0]} rows")
    data = a.data[idx]
    out = _out(a.tape, data, a._track)
    if a._track:
        def bw(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _add_pend(a, buf)
        out._backward = bw
    return out


# -- contractions and reductions ---------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul: need matching 2-d or 3-d operands, "
                         f"got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    track = a._track or b._track
    out = _out(a.tape, _finite(data, "matmul"), track)
    if track:
        def bw(g):
            if a._track:
                _add_pend(a, g @ b.data.swapaxes(-1, -2))
            if b._track:
                _add_pend(b, a.data.swapaxes(-1, -2) @ g)
        out._backward = bw
    return out


def sum_(a: Tensor, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data, dtype=a.tape.dtype)
    out = _out(a.tape, data, a._track)
    if a._track:
        def bw(g):
            gg = g if (axis is None or keepdims) else np.expand_dims(g, axis)
            _add_pend(a, np.broadcast_to(gg, a.shape).copy())
        out._backward = bw
    return out


def mean_(a: Tensor, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- normalizations ---------------------------------------------------------

def softmax(a: Tensor, axis=-1):
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    data = e / e.sum(axis=axis, keepdims=True)
    out = _out(a.tape, _finite(data, "softmax"), a._track)
    if a._track:
        def bw(g):
            dot = (g * data).sum(axis=axis, keepdims=True)
            _add_pend(a, data * (g - dot))
        out._backward = bw
    return out


def log_softmax(a: Tensor, axis=-1):
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    out = _out(a.tape, _finite(data, "log_softmax"), a._track)
    if a._track:
        def bw(g):
            _add_pend(a, g - np.exp(data) * g.sum(axis=axis, keepdims=True))
        out._backward = bw
    return out


def layer_norm(a: Tensor, eps: float = 1e-5):
    """Normalize the last axis to zero mean, unit variance. Affine transform
    (gain/bias) is left to the caller as separate mul/add ops."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = xc * inv
    out = _out(a.tape, _finite(data, "layer_norm"), a._track)
    if a._track:
        n = x.shape[-1]
        def bw(g):
            gy = g
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * data).mean(axis=-1, keepdims=True)
            _add_pend(a, inv * (gy - m1 - data * m2))
        out._backward = bw
    return out


# -- backward sweep ----------------------------------------------------------

def backward(root: Tensor):
    """Reverse sweep from a scalar root. Visits each recorded node at most
    once; persistent .grad accumulates across repeated calls."""
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got {root.shape}")
    root._pend = np.ones_like(root.data)
    nodes = root.tape.nodes
    for i in range(root.node_id, -1, -1):
        node = nodes[i]
        g = node._pend
        if g is None:
            continue
        node._pend = None
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is not None:
            node._backward(g)


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst_param: str = ""
    n_coords: int = 0
    per_param: dict = field(default_factory=dict)
    message: str = ""

    def __str__(self):
        status = "ok" if self.passed else "FAILED"
        return (f"grad check {status}: max rel err {self.max_rel_err:.3e} "
                f"({self.worst_param}, {self.n_coords} coords) {self.message}")


def finite_difference_check(f, params: dict, step: float = 1e-5,
                            tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of f against central differences.

    f takes a dict of Tensors (same keys as params) and returns a scalar
    Tensor; it must be a pure function of those tensors. All arithmetic runs
    in float64. Relative error uses a scale floor of 1:
    |a - n| / max(|a|, |n|, 1). A non-finite function value is reported as a
    failure rather than raised.
    """
    p64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def run(arrs):
        tape = Tape(np.float64)
        leaves = {k: tape.tensor(v, requires_grad=True)
                  for k, v in arrs.items()}
        out = f(leaves)
        return out, leaves

    out, leaves = run(p64)
    if out.data.size != 1:
        return GradCheckReport(False, np.inf, message="f did not return scalar")
    if not np.isfinite(out.data).all():
        return GradCheckReport(False, np.inf, message="non-finite f at base point")
    backward(out)
    analytic = {k: (np.zeros_like(p64[k]) if leaves[k].grad is None
                    else leaves[k].grad.reshape(p64[k].shape))
                for k in p64}

    max_err, worst, n_coords = 0.0, "", 0
    per_param = {}
    for k, arr in p64.items():
        flat = arr.reshape(-1)
        err_k = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = run(p64)[0].item()
            flat[i] = orig - step
            fm = run(p64)[0].item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckReport(False, np.inf, worst_param=k,
                                       message=f"non-finite f near {k}[{i}]")
            num = (fp - fm) / (2.0 * step)
            ana = analytic[k].reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), 1.0)
            err_k = max(err_k, err)
            n_coords += 1
        per_param[k] = err_k
        if err_k > max_err:
            max_err, worst = err_k, k
    return GradCheckReport(max_err <= tol, max_err, worst_param=worst,
                           n_coords=n_coords, per_param=per_param)
