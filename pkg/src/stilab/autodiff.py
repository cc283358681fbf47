"""Reverse-mode differentiation on a flat tape of array primitives.

Every primitive application appends one record to the tape in execution
order, so reverse iteration visits records in reverse topological order and
no explicit graph sort is needed. Values and gradients are dense float64
numpy arrays; reductions use a fixed, input-independent order, which makes
identical tapes produce bitwise-identical gradients.

The primitive set is intentionally small: it is the closure of the encoder,
interaction and loss computations under differentiation, nothing more.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Array = np.ndarray


class AutodiffError(Exception):
    """Base class for engine misuse."""


class ShapeMismatchError(AutodiffError, ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class NonScalarOutputError(AutodiffError):
    """backward() was asked to differentiate a non-scalar value."""


def _as_f64(value) -> Array:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    kept = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if kept:
        grad = grad.sum(axis=kept, keepdims=True)
    return grad.reshape(shape)


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeMismatchError(f"axis {axis} out of range for {ndim}-d value")
    return axis % ndim


class TapeTensor:
    """A value recorded on a tape. Treat ``data`` as read-only."""

    __slots__ = ("tape", "tid", "data", "requires_grad")

    def __init__(self, tape: "Tape", tid: int, data: Array, requires_grad: bool):
        self.tape = tape
        self.tid = tid
        self.data = data
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"TapeTensor(id={self.tid}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _coerce(self.tape, other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(self.tape, other))

    def __rsub__(self, other):
        return sub(_coerce(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, _coerce(self.tape, other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(self.tape, other))

    def __rtruediv__(self, other):
        return div(_coerce(self.tape, other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _coerce(self.tape, other))


@dataclass
class TapeRecord:
    """One primitive application: op kind, operand ids, output id, and the
    vector-Jacobian closure holding whatever forward values it saved."""

    op: str
    input_ids: tuple[int, ...]
    input_requires: tuple[bool, ...]
    output_id: int
    backward_fn: Callable[[Array], tuple[Array | None, ...]]


class Tape:
    """Append-only record of primitive applications, one per forward op."""

    def __init__(self):
        self._records: list[TapeRecord] = []
        self._next_id = 0
        self._param_leaves: dict[str, TapeTensor] = {}

    @property
    def records(self) -> Sequence[TapeRecord]:
        return tuple(self._records)

    @property
    def param_leaves(self) -> Mapping[str, "TapeTensor"]:
        return dict(self._param_leaves)

    def _new_tensor(self, data, requires_grad: bool) -> TapeTensor:
        t = TapeTensor(self, self._next_id, _as_f64(data), requires_grad)
        self._next_id += 1
        return t

    def constant(self, data) -> TapeTensor:
        return self._new_tensor(data, requires_grad=False)

    def leaf(self, data, name: str | None = None) -> TapeTensor:
        """A differentiable input. Named leaves are indexed for gradient maps."""
        t = self._new_tensor(data, requires_grad=True)
        if name is not None:
            if name in self._param_leaves:
                raise AutodiffError(f"parameter leaf {name!r} registered twice on one tape")
            self._param_leaves[name] = t
        return t

    def backward(self, output: TapeTensor) -> dict[int, Array]:
        """Accumulate gradients of a scalar output for every reachable tensor.

        Returns a map from tensor id to gradient array. Records are replayed
        strictly in reverse append order; gradient accumulation for a tensor
        therefore happens in one fixed order, keeping results bitwise
        reproducible across identical tapes.
        """
        if output.tape is not self:
            raise AutodiffError("output tensor belongs to a different tape")
        if output.data.shape != ():
            raise NonScalarOutputError(
                f"backward requires a scalar output, got shape {output.data.shape}"
            )
        grads: dict[int, Array] = {output.tid: np.ones((), dtype=np.float64)}
        for rec in reversed(self._records):
            g = grads.pop(rec.output_id, None)
            if g is None:
                continue
            input_grads = rec.backward_fn(g)
            for tid, needed, gi in zip(rec.input_ids, rec.input_requires, input_grads):
                if not needed or gi is None:
                    continue
                prev = grads.get(tid)
                grads[tid] = gi if prev is None else prev + gi
        return grads


def _coerce(tape: Tape, value) -> TapeTensor:
    if isinstance(value, TapeTensor):
        if value.tape is not tape:
            raise AutodiffError("cannot mix tensors from different tapes")
        return value
    return tape.constant(value)


def _record(op: str, inputs: Sequence[TapeTensor], out_data, backward_fn) -> TapeTensor:
    tape = inputs[0].tape
    for t in inputs[1:]:
        if t.tape is not tape:
            raise AutodiffError("cannot mix tensors from different tapes")
    requires = any(t.requires_grad for t in inputs)
    out = tape._new_tensor(out_data, requires)
    if requires:
        tape._records.append(
            TapeRecord(
                op=op,
                input_ids=tuple(t.tid for t in inputs),
                input_requires=tuple(t.requires_grad for t in inputs),
                output_id=out.tid,
                backward_fn=backward_fn,
            )
        )
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, summed back in backward)
# ---------------------------------------------------------------------------

def add(a: TapeTensor, b) -> TapeTensor:
    b = _coerce(a.tape, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", (a, b), out, bw)


def sub(a: TapeTensor, b) -> TapeTensor:
    b = _coerce(a.tape, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record("sub", (a, b), out, bw)


def mul(a: TapeTensor, b) -> TapeTensor:
    b = _coerce(a.tape, b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), out, bw)


def div(a: TapeTensor, b) -> TapeTensor:
    b = _coerce(a.tape, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _record("div", (a, b), out, bw)


def neg(x: TapeTensor) -> TapeTensor:
    return _record("neg", (x,), -x.data, lambda g: (-g,))


def exp(x: TapeTensor) -> TapeTensor:
    out = np.exp(x.data)
    return _record("exp", (x,), out, lambda g: (g * out,))


def log(x: TapeTensor) -> TapeTensor:
    out = np.log(x.data)
    return _record("log", (x,), out, lambda g: (g / x.data,))


def relu(x: TapeTensor) -> TapeTensor:
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)
    return _record("relu", (x,), out, lambda g: (g * mask,))


def clip(x: TapeTensor, lo: float | None, hi: float | None) -> TapeTensor:
    """Clamp with pass-through gradient on the closed interval [lo, hi]."""
    out = np.clip(x.data, lo, hi)
    mask = np.ones_like(x.data, dtype=bool)
    if lo is not None:
        mask &= x.data >= lo
    if hi is not None:
        mask &= x.data <= hi
    return _record("clip", (x,), out, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: TapeTensor, b: TapeTensor) -> TapeTensor:
    """np.matmul restricted to a 1-d or 2-d right operand.

    Supports the pipeline shapes: (..., m, k) @ (k, n), (..., k) @ (k, n),
    (..., k) @ (k,) and (k,) @ (k,).
    """
    A, B = a.data, b.data
    if B.ndim not in (1, 2):
        raise ShapeMismatchError(f"matmul right operand must be 1-d or 2-d, got {B.ndim}-d")
    if A.ndim == 0:
        raise ShapeMismatchError("matmul left operand must have at least 1 dimension")
    if A.shape[-1] != B.shape[0]:
        raise ShapeMismatchError(f"matmul inner dimensions differ: {A.shape} @ {B.shape}")
    out = np.matmul(A, B)
    k = B.shape[0]

    def bw(g):
        ga = gb = None
        if B.ndim == 2:
            if a.requires_grad:
                ga = np.matmul(g, B.T)
            if b.requires_grad:
                n = B.shape[1]
                if A.ndim == 1:
                    gb = np.outer(A, g)
                else:
                    gb = A.reshape(-1, k).T @ g.reshape(-1, n)
        else:  # B.ndim == 1
            if a.requires_grad:
                ga = g[..., None] * B if A.ndim > 1 else g * B
            if b.requires_grad:
                if A.ndim == 1:
                    gb = g * A
                else:
                    gb = (A.reshape(-1, k) * g.reshape(-1, 1)).sum(axis=0)
        return ga, gb

    return _record("matmul", (a, b), out, bw)


def transpose(x: TapeTensor, axes: tuple[int, ...] | None = None) -> TapeTensor:
    out = np.transpose(x.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _record("transpose", (x,), out, lambda g: (np.transpose(g, inverse),))


def dot(a: TapeTensor, b: TapeTensor) -> TapeTensor:
    """Inner product of two 1-d vectors."""
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatchError(f"dot expects equal-length vectors, got {a.shape} and {b.shape}")
    out = np.dot(a.data, b.data)

    def bw(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _record("dot", (a, b), out, bw)


def l2_normalize(x: TapeTensor, axis: int = -1) -> TapeTensor:
    ax = _normalize_axis(axis, x.ndim)
    norm = np.sqrt(np.sum(x.data * x.data, axis=ax, keepdims=True))
    if np.any(norm == 0.0):
        raise ValueError("l2_normalize: zero-norm slice")
    out = x.data / norm

    def bw(g):
        return ((g - out * np.sum(g * out, axis=ax, keepdims=True)) / norm,)

    return _record("l2_normalize", (x,), out, bw)


# ---------------------------------------------------------------------------
# reductions and reweightings
# ---------------------------------------------------------------------------

def max_reduce(x: TapeTensor, axis: int) -> TapeTensor:
    """Max along one axis. Ties route the entire gradient to the smallest
    index attaining the max, matching the forward tie-break."""
    ax = _normalize_axis(axis, x.ndim)
    out = np.max(x.data, axis=ax)
    argmax = np.argmax(x.data, axis=ax)

    def bw(g):
        z = np.zeros_like(x.data)
        np.put_along_axis(z, np.expand_dims(argmax, ax), np.expand_dims(g, ax), axis=ax)
        return (z,)

    return _record("row_max_reduce", (x,), out, bw)


def mean_reduce(x: TapeTensor, axis: int | None = None) -> TapeTensor:
    if axis is None:
        out = np.mean(x.data)
        size = x.data.size

        def bw_all(g):
            return (np.full(x.data.shape, g / size),)

        return _record("mean_reduce", (x,), out, bw_all)
    ax = _normalize_axis(axis, x.ndim)
    out = np.mean(x.data, axis=ax)
    count = x.data.shape[ax]

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.data.shape) / count,)

    return _record("mean_reduce", (x,), out, bw)


def sum_reduce(x: TapeTensor, axis: int | None = None) -> TapeTensor:
    if axis is None:
        out = np.sum(x.data)

        def bw_all(g):
            return (np.full(x.data.shape, g),)

        return _record("sum_reduce", (x,), out, bw_all)
    ax = _normalize_axis(axis, x.ndim)
    out = np.sum(x.data, axis=ax)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.data.shape).copy(),)

    return _record("sum_reduce", (x,), out, bw)


def softmax(x: TapeTensor, axis: int = -1) -> TapeTensor:
    ax = _normalize_axis(axis, x.ndim)
    shifted = x.data - np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=ax, keepdims=True)),)

    return _record("softmax", (x,), out, bw)


def log_softmax(x: TapeTensor, axis: int = -1) -> TapeTensor:
    ax = _normalize_axis(axis, x.ndim)
    shifted = x.data - np.max(x.data, axis=ax, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=ax, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * np.sum(g, axis=ax, keepdims=True),)

    return _record("log_softmax", (x,), out, bw)


def weighted_sum(values: TapeTensor, weights: TapeTensor) -> TapeTensor:
    """Contract values (..., T, D) against weights (..., T) into (..., D).

    Accumulates strictly left-to-right over T, so the result is bitwise
    identical to a naive per-step summation loop.
    """
    if values.ndim != weights.ndim + 1 or values.shape[:-1] != weights.shape:
        raise ShapeMismatchError(
            f"weighted_sum expects values (..., T, D) with weights (..., T); "
            f"got {values.shape} and {weights.shape}"
        )
    steps = values.shape[-2]
    out = values.data[..., 0, :] * weights.data[..., 0, None]
    for t in range(1, steps):
        out = out + values.data[..., t, :] * weights.data[..., t, None]

    def bw(g):
        gv = weights.data[..., :, None] * g[..., None, :] if values.requires_grad else None
        gw = np.einsum("...td,...d->...t", values.data, g) if weights.requires_grad else None
        return gv, gw

    return _record("weighted_sum", (values, weights), out, bw)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def expand_dims(x: TapeTensor, axis: int) -> TapeTensor:
    out = np.expand_dims(x.data, axis)
    return _record("expand_dims", (x,), out, lambda g: (g.reshape(x.data.shape),))


def stack(tensors: Sequence[TapeTensor], axis: int = 0) -> TapeTensor:
    if not tensors:
        raise ShapeMismatchError("stack needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeMismatchError("stack operands must share a shape")
    out = np.stack([t.data for t in tensors], axis=axis)
    needed = tuple(t.requires_grad for t in tensors)

    def bw(g):
        return tuple(
            np.take(g, i, axis=axis) if needed[i] else None for i in range(len(tensors))
        )

    return _record("stack", tuple(tensors), out, bw)


def index_select(x: TapeTensor, indices, axis: int) -> TapeTensor:
    """Gather slices along an axis; backward scatter-adds into the source."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeMismatchError("index_select expects a 1-d index list")
    ax = _normalize_axis(axis, x.ndim)
    out = np.take(x.data, idx, axis=ax)

    def bw(g):
        z = np.zeros_like(x.data)
        key = (slice(None),) * ax + (idx,)
        np.add.at(z, key, g)
        return (z,)

    return _record("index_select", (x,), out, bw)


# ---------------------------------------------------------------------------
# parameters and verification
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named trainable tensors with registration-time shapes.

    Stored arrays are read-only snapshots; updates swap in a fresh array via
    ``set_value`` so tensors already captured on a tape keep their values.
    """

    def __init__(self):
        self._values: dict[str, Array] = {}

    def register(self, name: str, value) -> None:
        if name in self._values:
            raise KeyError(f"parameter {name!r} already registered")
        arr = _as_f64(value).copy()
        arr.flags.writeable = False
        self._values[name] = arr

    def names(self) -> tuple[str, ...]:
        return tuple(self._values)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def value(self, name: str) -> Array:
        return self._values[name]

    def set_value(self, name: str, value) -> None:
        arr = _as_f64(value)
        current = self._values[name]
        if arr.shape != current.shape:
            raise ShapeMismatchError(
                f"parameter {name!r} has shape {current.shape}, refusing update of shape {arr.shape}"
            )
        arr = arr.copy()
        arr.flags.writeable = False
        self._values[name] = arr

    def leaves(self, tape: Tape) -> dict[str, TapeTensor]:
        """Create one named differentiable leaf per parameter on a tape."""
        return {name: tape.leaf(value, name=name) for name, value in self._values.items()}

    def copy(self) -> "ParameterStore":
        dup = ParameterStore()
        for name, value in self._values.items():
            dup.register(name, value)
        return dup

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name, value in self._values.items():
            digest.update(name.encode("utf-8"))
            digest.update(str(value.shape).encode("ascii"))
            digest.update(value.tobytes())
        return digest.hexdigest()


GradientMap = dict  # name -> gradient array, same shape as the parameter


def parameter_gradients(loss: TapeTensor, store: ParameterStore) -> GradientMap:
    """Gradients of a scalar loss for every parameter in the store.

    Parameters the forward pass never touched get explicit zero tensors.
    """
    raw = loss.tape.backward(loss)
    leaves = loss.tape.param_leaves
    grads: GradientMap = {}
    for name in store.names():
        leaf = leaves.get(name)
        g = raw.get(leaf.tid) if leaf is not None else None
        grads[name] = np.asarray(g) if g is not None else np.zeros_like(store.value(name))
    return grads


def finite_difference_check(
    loss_fn: Callable[[ParameterStore], TapeTensor],
    params: ParameterStore,
    eps: float = 1e-5,
    *,
    coords_per_param: int = 4,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must build a fresh tape from the store (using
    ``params.leaves(tape)``) and return the scalar loss tensor. A random
    sample of coordinates per parameter is perturbed by ±eps and the worst
    relative error ``|analytic - numeric| / max(1, |numeric|)`` is returned.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    loss = loss_fn(params)
    if not np.isfinite(loss.data):
        raise AutodiffError(f"loss is not finite: {loss.data!r}")
    analytic = parameter_gradients(loss, params)

    def evaluate() -> float:
        value = float(loss_fn(params).data)
        if not np.isfinite(value):
            raise AutodiffError("loss became non-finite during finite differencing")
        return value

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in params.names():
        base = params.value(name)
        n = base.size
        if n == 0:
            continue
        count = min(coords_per_param, n)
        coords = np.sort(rng.choice(n, size=count, replace=False))
        for c in coords:
            plus = base.copy()
            plus.flat[c] += eps
            params.set_value(name, plus)
            up = evaluate()
            minus = base.copy()
            minus.flat[c] -= eps
            params.set_value(name, minus)
            down = evaluate()
            params.set_value(name, base)
            numeric = (up - down) / (2.0 * eps)
            err = abs(float(analytic[name].flat[c]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
