"""Minimal reverse-mode autodiff over dense numpy arrays (rank <= 3).

All model math flows through the ops defined here, so gradients, determinism
and the matmul accounting hook live in one place. float32 is the working
precision for training; gradient checks rebuild the same graphs in float64.
"""
from __future__ import annotations

import warnings
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes/dtypes are incompatible; the message carries both."""


# ---------------------------------------------------------------------------
# matmul accounting
#
# `count_macs()` is the instrumentation used by the analytic compute model to
# cross-check itself against real executions. Only forward matmuls count.

_MAC_BOXES: list[list[int]] = []


@contextmanager
def count_macs():
    """Context manager yielding a one-element list accumulating matmul MACs."""
    box = [0]
    _MAC_BOXES.append(box)
    try:
        yield box
    finally:
        _MAC_BOXES.remove(box)


def _record_macs(n: int) -> None:
    for box in _MAC_BOXES:
        box[0] += n


# ---------------------------------------------------------------------------
# graph node


class Tensor:
    """Array node of a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        arr = np.asarray(data)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} unsupported (shape {arr.shape}, max rank 3)")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad or any(p.requires_grad for p in parents))
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward = backward_fn if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar; the full op set lives in module functions below
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, scale(_wrap(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def constant(x, dtype=np.float32) -> Tensor:
    """A graph leaf that never receives gradients."""
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _accum_slice(t: Tensor, slicer, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad[slicer] += g


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; accumulates into `.grad` slots."""
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / linear ops


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bk(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward_fn=bk)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bk(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward_fn=bk)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bk(g):
        _accum(a, g * s)

    return Tensor(a.data * s, parents=(a,), backward_fn=bk)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "matmul")
    A, B = a.data, b.data
    if A.ndim == 2 and B.ndim == 2:
        if A.shape[1] != B.shape[0]:
            raise ShapeError(f"matmul: shapes {A.shape} and {B.shape} do not chain")
        macs = A.shape[0] * A.shape[1] * B.shape[1]
    elif A.ndim == 3 and B.ndim == 3:
        if A.shape[0] != B.shape[0] or A.shape[2] != B.shape[1]:
            raise ShapeError(f"matmul: shapes {A.shape} and {B.shape} do not chain")
        macs = A.shape[0] * A.shape[1] * A.shape[2] * B.shape[2]
    else:
        raise ShapeError(f"matmul: unsupported ranks for shapes {A.shape} and {B.shape}")
    _record_macs(macs)

    def bk(g):
        _accum(a, g @ B.swapaxes(-1, -2))
        _accum(b, A.swapaxes(-1, -2) @ g)

    return Tensor(A @ B, parents=(a, b), backward_fn=bk)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bk(g):
        _accum(a, g.reshape(old))

    return Tensor(a.data.reshape(shape), parents=(a,), backward_fn=bk)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bk(g):
        _accum(a, g.transpose(inv))

    return Tensor(a.data.transpose(axes), parents=(a,), backward_fn=bk)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got shape {a.shape}")
    return permute(a, (1, 0))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t, "concat")
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
        ) from None
    sizes = [t.data.shape[axis] for t in tensors]

    def bk(g):
        off = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(off, off + s)
            _accum(t, g[tuple(sl)])
            off += s

    return Tensor(out_data, parents=tuple(tensors), backward_fn=bk)


def split(a: Tensor, sizes, axis: int = 0) -> list[Tensor]:
    sizes = list(sizes)
    if sum(sizes) != a.data.shape[axis]:
        raise ShapeError(f"split: sizes {sizes} do not sum to axis {axis} of shape {a.shape}")
    outs = []
    off = 0
    for s in sizes:
        sl = [slice(None)] * a.data.ndim
        sl[axis] = slice(off, off + s)
        sl = tuple(sl)
        off += s

        def bk(g, sl=sl):
            _accum_slice(a, sl, g)

        outs.append(Tensor(a.data[sl], parents=(a,), backward_fn=bk))
    return outs


def gather_rows(a: Tensor, indices) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected rank 2, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index shape {idx.shape} is not a vector")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ShapeError(f"gather_rows: indices outside [0, {a.data.shape[0]})")

    def bk(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    return Tensor(a.data[idx], parents=(a,), backward_fn=bk)


# ---------------------------------------------------------------------------
# nonlinearities / normalization


def softmax_rows(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def bk(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accum(a, s * (g - dot))

    return Tensor(s, parents=(a,), backward_fn=bk)


def log_softmax_rows(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bk(g):
        _accum(a, g - np.exp(y) * g.sum(axis=-1, keepdims=True))

    return Tensor(y, parents=(a,), backward_fn=bk)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layernorm: gain {gain.shape} / bias {bias.shape} do not match last dim of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = xh * gain.data + bias.data

    def bk(g):
        lead = tuple(range(g.ndim - 1))
        _accum(bias, g.sum(axis=lead))
        _accum(gain, (g * xh).sum(axis=lead))
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xh * (gx * xh).mean(axis=-1, keepdims=True))
        _accum(x, dx)

    return Tensor(out, parents=(x, gain, bias), backward_fn=bk)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_K = 0.044715


def gelu(a: Tensor) -> Tensor:
    x = a.data
    u = _GELU_C * (x + _GELU_K * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bk(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return Tensor(out, parents=(a,), backward_fn=bk)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bk(g):
        _accum(a, g * s * (1.0 - s))

    return Tensor(s, parents=(a,), backward_fn=bk)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)

    def bk(g):
        _accum(a, g * e)

    return Tensor(e, parents=(a,), backward_fn=bk)


def log(a: Tensor) -> Tensor:
    def bk(g):
        _accum(a, g / a.data)

    return Tensor(np.log(a.data), parents=(a,), backward_fn=bk)


def sum_all(a: Tensor) -> Tensor:
    def bk(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return Tensor(a.data.sum(), parents=(a,), backward_fn=bk)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def stopgrad(a: Tensor) -> Tensor:
    """Detached copy: same values, no path back into the graph."""
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named map of learnable tensors with stable (insertion) iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad(self, name: str) -> np.ndarray:
        """Gradient of a parameter; zeros when the loss never reached it."""
        t = self._params[name]
        return t.grad if t.grad is not None else np.zeros_like(t.data)

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            if name not in self._params:
                raise KeyError(f"unknown parameter {name!r}")
            t = self._params[name]
            if t.data.shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {t.data.shape}")
            t.data = np.asarray(arr, dtype=t.data.dtype).copy()

    def astype(self, dtype) -> "ParamStore":
        other = ParamStore()
        for name, t in self._params.items():
            other.create(name, t.data.astype(dtype))
        return other


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_err: float
    passed: bool
    worst: tuple[str, int] | None
    checked: int

    def __str__(self):
        state = "pass" if self.passed else "FAIL"
        return f"gradcheck {state}: max rel err {self.max_rel_err:.3e} over {self.checked} entries (worst {self.worst})"


def gradcheck(closure, store: ParamStore, eps: float = 1e-4, tol: float = 1e-5,
              max_entries_per_param: int | None = None, rng=None) -> GradCheckResult:
    """Compare analytic gradients with central differences.

    `closure` must deterministically rebuild the loss graph from the current
    parameter values. Relative error is |a - fd| / max(1, |a|, |fd|). With
    `max_entries_per_param`, a deterministic sample of coordinates is checked
    per tensor (every tensor is always touched).
    """
    out = closure()
    if out.data.shape != ():
        raise ShapeError(f"gradcheck closure must return a scalar, got {out.data.shape}")
    if not np.isfinite(out.data):
        raise FloatingPointError(f"gradcheck closure produced non-finite value {out.data!r}")
    store.zero_grad()
    backward(out)
    analytic = {name: store.grad(name).reshape(-1).copy() for name in store.names()}

    if rng is None:
        rng = np.random.default_rng(0)
    worst = None
    max_err = 0.0
    checked = 0
    for name, t in store.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            idxs = np.sort(rng.choice(n, size=max_entries_per_param, replace=False))
        else:
            idxs = np.arange(n)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(closure().data)
            flat[i] = orig - eps
            fm = float(closure().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite closure value while perturbing {name}[{i}]")
            fd = (fp - fm) / (2.0 * eps)
            a = float(analytic[name][i])
            err = abs(a - fd) / max(1.0, abs(a), abs(fd))
            checked += 1
            if err > max_err:
                max_err = err
                worst = (name, int(i))
    return GradCheckResult(max_rel_err=max_err, passed=max_err <= tol, worst=worst, checked=checked)


def normal_init(rng, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)
