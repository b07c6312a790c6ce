"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

Small on purpose: just enough ops to express the encoders, the losses and
the probes in this package. Tensors wrap numpy arrays (float32 by default,
float64 for gradient checks) and are treated as immutable once created.
Gradients are computed by recording forward ops on a Tape and replaying it
in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class Tensor:
    """A dense multi-dimensional float array, immutable after creation.

    `requires_grad` marks leaves whose gradients should be accumulated;
    op outputs inherit it (transitively) while a Tape is active.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        was_array = isinstance(data, np.ndarray)
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif not (was_array and arr.dtype in (np.float32, np.float64)):
            arr = arr.astype(DEFAULT_DTYPE)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "requires_grad", bool(requires_grad))

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable after creation")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


class Tape:
    """Ordered record of executed ops, replayed in reverse by `backward`.

    Records are appended in execution order, so the reversed list is a valid
    reverse topological order of the computation graph. Use as a context
    manager; ops executed while a tape is active are recorded when any
    input requires a gradient.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _push_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _pop_tape(self)
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self._records.append((out, inputs, backward_fn))

    def __len__(self) -> int:
        return len(self._records)


_TAPE_STACK: list[Tape] = []


def _push_tape(tape: Tape) -> None:
    _TAPE_STACK.append(tape)


def _pop_tape(tape: Tape) -> None:
    if not _TAPE_STACK or _TAPE_STACK[-1] is not tape:
        raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
    _TAPE_STACK.pop()


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make_output(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make_output(out, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make_output(out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make_output(out, (a, b), backward_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def backward_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make_output(out, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    return _make_output(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward_fn(g):
        return (g * out,)

    return _make_output(out, (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward_fn(g):
        return (g / a.data,)

    return _make_output(out, (a,), backward_fn)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward_fn(g):
        return (g / (2.0 * out),)

    return _make_output(out, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def backward_fn(g):
        return (g * (a.data > 0.0),)

    return _make_output(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2D x 2D, or batched with numpy matmul semantics
    (leading dims broadcast; a 2D operand acts as a shared matrix)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make_output(out, (a, b), backward_fn)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs >=2D, got {a.shape}")
    out = np.swapaxes(a.data, -1, -2)

    def backward_fn(g):
        return (np.swapaxes(g, -1, -2),)

    return _make_output(out, (a,), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _make_output(out, (a,), backward_fn)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.shape).copy(),)

    return _make_output(np.asarray(out), (a,), backward_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk / count, a.shape).copy(),)

    return _make_output(np.asarray(out), (a,), backward_fn)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make_output(out, tuple(parts), backward_fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis` starting at `start`."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]

    def backward_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make_output(out.copy(), (a,), backward_fn)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows of a 2D tensor by index."""
    if a.ndim != 2:
        raise ShapeError(f"take_rows needs 2D, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]

    def backward_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make_output(out.copy(), (a,), backward_fn)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout. Only call during training; p=0 is the identity."""
    if p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)

    def backward_fn(g):
        return (g * keep,)

    return _make_output(a.data * keep, (a,), backward_fn)


# ---------------------------------------------------------------------------
# composites


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Normalized exponential along `axis`, stabilized by max subtraction.

    The subtracted max is treated as a constant, which leaves the value and
    the gradient exact because the result is shift invariant.
    """
    if x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True), dtype=x.dtype)
    e = exp(sub(x, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along `axis`, stabilized by max subtraction."""
    shift = np.max(x.data, axis=axis, keepdims=True)
    e = exp(sub(x, Tensor(shift, dtype=x.dtype)))
    return add(log(tsum(e, axis=axis)), Tensor(np.squeeze(shift, axis=axis), dtype=x.dtype))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    if x.shape[-1] < 2:
        raise ShapeError(f"layer_norm needs >=2 features, got shape {x.shape}")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(Tensor(np.asarray(1.0, dtype=x.dtype)), sqrt(add(var, Tensor(np.asarray(eps, dtype=x.dtype)))))
    return add(mul(mul(centered, inv), gain), bias)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along `axis` to unit Euclidean norm.

    A (near-)zero vector is an error rather than a clamp, so a collapsed
    representation fails loudly instead of being silently hidden.
    """
    sq = tsum(mul(x, x), axis=axis, keepdims=True)
    if np.any(sq.data < 1e-24):
        raise ValueError("l2_normalize of a vector with norm < 1e-12")
    return div(x, sqrt(sq))


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Run the tape backwards from a scalar loss.

    Returns gradients keyed by tensor identity for every tensor on the
    gradient path, including the loss itself (gradient 1). A tensor feeding
    several ops accumulates one contribution per use.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(tape._records):
        g = grads.get(out)
        if g is None:
            continue
        input_grads = backward_fn(g)
        for t, gi in zip(inputs, input_grads):
            if not t.requires_grad or gi is None:
                continue
            acc = grads.get(t)
            grads[t] = gi if acc is None else acc + gi
    return grads


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(f, x: Tensor, step: float = 1e-3, tol: float = 1e-4) -> GradCheckReport:
    """Compare the analytic gradient of scalar f(x) with central differences.

    Runs in float64 regardless of the input dtype. The relative error of
    component i is |a_i - n_i| / max(1, |a_i|, |n_i|), so tiny gradients are
    compared absolutely and large ones relatively.
    """
    base = x.data.astype(np.float64)
    leaf = Tensor(base, requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        out = f(leaf)
    if out.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    analytic = backward(out, tape).get(leaf)
    if analytic is None:
        analytic = np.zeros_like(base)
    analytic = analytic.reshape(base.shape)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        hi = f(Tensor(bumped.reshape(base.shape), dtype=np.float64)).item()
        bumped[i] = flat[i] - step
        lo = f(Tensor(bumped.reshape(base.shape), dtype=np.float64)).item()
        num_flat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    return GradCheckReport(max_rel_err=max_rel, passed=max_rel < tol, analytic=analytic, numeric=numeric)
