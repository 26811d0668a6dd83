"""Minimal dense-tensor engine with reverse-mode differentiation.

Everything the model and the training loop compute is expressed through the
fixed primitive catalogue in this module. Tensors hold float64 numpy arrays;
gradients are recorded on an explicit Tape and replayed in reverse. No
broadcasting is performed except scalar-times-tensor (`scale`); every other
shape coercion must go through `reshape` / `concat` / `slice_axis`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    """Input shapes do not conform to a primitive's shape rule."""


class NumericError(ArithmeticError):
    """A primitive produced a non-finite value."""


class ContractError(ValueError):
    """A caller violated an operation precondition."""


_tensor_ids = itertools.count()


class Tensor:
    """Dense float64 array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "tid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tid = next(_tensor_ids)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class TapeEntry:
    out_id: int
    in_ids: Tuple[int, ...]
    # maps the output adjoint to one adjoint per input (None for non-diff inputs)
    vjp: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """Ordered record of applied primitives; appended in execution order, so
    it is topologically sorted by construction."""

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self.leaves: Dict[int, Tensor] = {}
        self._produced: set = set()

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack.pop()
        assert popped is self


_tape_stack: List[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def _finish(name: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"primitive '{name}' produced non-finite values")
    tape = _active_tape()
    grad = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=grad and tape is not None)
    if result.requires_grad:
        for t in inputs:
            if (t.requires_grad and t.tid not in tape.leaves
                    and t.tid not in tape._produced):
                tape.leaves[t.tid] = t
        tape.entries.append(TapeEntry(result.tid, tuple(t.tid for t in inputs), vjp))
        tape._produced.add(result.tid)
    return result


def _check_finite_inputs(name, tensors):
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"primitive '{name}' received non-finite input")


# ---------------------------------------------------------------------------
# primitive catalogue


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D, or batched with identical leading dims."""
    _check_finite_inputs("matmul", (a, b))
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise ShapeError(f"matmul rank mismatch: {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def vjp(g):
        return (np.matmul(g, np.swapaxes(bd, -1, -2)),
                np.matmul(np.swapaxes(ad, -1, -2), g))

    return _finish("matmul", out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_finite_inputs("add", (a, b))
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite_inputs("mul", (a, b))
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _finish("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient. Not in the original catalogue; needed for the
    dice and GIoU loss terms (ratios of differentiable areas)."""
    _check_finite_inputs("div", (a, b))
    if a.shape != b.shape:
        raise ShapeError(f"div shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def vjp(g):
        return (g / bd, -g * ad / (bd * bd))

    return _finish("div", out, (a, b), vjp)


def scale(t: Tensor, s) -> Tensor:
    """Scalar-times-tensor, the single permitted broadcast. `s` is a python
    float or a one-element Tensor (the latter participates in gradients)."""
    if isinstance(s, Tensor):
        _check_finite_inputs("scale", (t, s))
        if s.data.size != 1:
            raise ShapeError(f"scale factor must be scalar, got shape {s.shape}")
        td, sv = t.data, float(s.data.reshape(()))

        def vjp(g):
            return (g * sv, np.array(np.sum(g * td)).reshape(s.shape))

        return _finish("scale", td * sv, (t, s), vjp)
    _check_finite_inputs("scale", (t,))
    sv = float(s)
    if not np.isfinite(sv):
        raise NumericError("primitive 'scale' received non-finite factor")
    return _finish("scale", t.data * sv, (t,), lambda g: (g * sv,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    _check_finite_inputs("concat", tensors)
    shapes = [t.shape for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat shape mismatch: {shapes}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish("concat", out, tuple(tensors), vjp)


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    _check_finite_inputs("slice", (t,))
    n = t.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis size {n}")
    idx = [slice(None)] * t.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = t.shape

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _finish("slice", t.data[idx], (t,), vjp)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    _check_finite_inputs("reshape", (t,))
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != t.size:
        raise ShapeError(f"reshape {t.shape} -> {shape} changes element count")
    old = t.shape
    return _finish("reshape", t.data.reshape(shape), (t,),
                   lambda g: (g.reshape(old),))


def transpose(t: Tensor, axes: Sequence[int]) -> Tensor:
    _check_finite_inputs("transpose", (t,))
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(t.data.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for rank {t.data.ndim}")
    inv = tuple(np.argsort(axes))
    return _finish("transpose", np.transpose(t.data, axes), (t,),
                   lambda g: (np.transpose(g, inv),))


def relu(t: Tensor) -> Tensor:
    _check_finite_inputs("relu", (t,))
    mask = t.data > 0
    return _finish("relu", np.where(mask, t.data, 0.0), (t,),
                   lambda g: (g * mask,))


def sigmoid(t: Tensor) -> Tensor:
    _check_finite_inputs("sigmoid", (t,))
    x = t.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _finish("sigmoid", out, (t,), lambda g: (g * out * (1.0 - out),))


def softmax_lastaxis(t: Tensor) -> Tensor:
    _check_finite_inputs("softmax", (t,))
    x = t.data
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _finish("softmax_lastaxis", out, (t,), vjp)


LAYERNORM_EPS = 1e-5


def layernorm_lastaxis(t: Tensor) -> Tensor:
    """(x - mean) / sqrt(var + 1e-5) over the last axis; no affine params."""
    _check_finite_inputs("layernorm", (t,))
    x = t.data
    n = x.shape[-1]
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    out = centered * inv

    def vjp(g):
        g_centered = g - np.mean(g, axis=-1, keepdims=True)
        proj = np.mean(g * out, axis=-1, keepdims=True)
        return ((g_centered - out * proj) * inv,)

    return _finish("layernorm_lastaxis", out, (t,), vjp)


def _reduce(name, t, axis, reducer, vjp_builder):
    _check_finite_inputs(name, (t,))
    ndim = t.data.ndim
    if not (-ndim <= axis < ndim):
        raise ShapeError(f"{name} axis {axis} out of range for rank {ndim}")
    axis = axis % ndim
    out = reducer(t.data, axis)
    return _finish(name, out, (t,), vjp_builder(t.shape, axis))


def sum_overaxis(t: Tensor, axis: int) -> Tensor:
    def builder(shape, ax):
        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)
        return vjp
    return _reduce("sum_overaxis", t, axis, lambda x, ax: np.sum(x, axis=ax), builder)


def mean_overaxis(t: Tensor, axis: int) -> Tensor:
    def builder(shape, ax):
        n = shape[ax]

        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g, ax), shape).copy() / n,)
        return vjp
    return _reduce("mean_overaxis", t, axis, lambda x, ax: np.mean(x, axis=ax), builder)


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Elementwise binary cross-entropy in the stable log-sum-exp form:
    max(x, 0) - x*z + log(1 + exp(-|x|)). Targets are not differentiated."""
    _check_finite_inputs("bce_with_logits", (logits, targets))
    if logits.shape != targets.shape:
        raise ShapeError(f"bce shape mismatch: {logits.shape} vs {targets.shape}")
    x, z = logits.data, targets.data
    out = np.maximum(x, 0.0) - x * z + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (g * (sig - z), None)

    return _finish("bce_with_logits", out, (logits, targets), vjp)


def l1(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise absolute difference; subgradient 0 at ties."""
    _check_finite_inputs("l1", (a, b))
    if a.shape != b.shape:
        raise ShapeError(f"l1 shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    sign = np.sign(diff)
    return _finish("l1", np.abs(diff), (a, b), lambda g: (g * sign, -g * sign))


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "div": div,
    "scale": scale,
    "concat": concat,
    "slice": slice_axis,
    "reshape": reshape,
    "transpose": transpose,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax_lastaxis": softmax_lastaxis,
    "layernorm_lastaxis": layernorm_lastaxis,
    "mean_overaxis": mean_overaxis,
    "sum_overaxis": sum_overaxis,
    "bce_with_logits": bce_with_logits,
    "l1": l1,
}


def apply_primitive(op_id: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by primitive name; the uniform entry point used by tests."""
    if op_id not in _PRIMITIVES:
        raise ContractError(f"unknown primitive '{op_id}'")
    return _PRIMITIVES[op_id](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# convenience compositions (not primitives; they expand onto the tape)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    # max(a, b) = a + relu(b - a)
    return add(a, relu(sub(b, a)))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    return sub(a, relu(sub(a, b)))


def sum_all(t: Tensor) -> Tensor:
    flat = reshape(t, (t.size,))
    return sum_overaxis(flat, 0)


def mean_all(t: Tensor) -> Tensor:
    flat = reshape(t, (t.size,))
    return mean_overaxis(flat, 0)


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(loss: Tensor, tape: Tape,
             params: Optional[Sequence[Tensor]] = None) -> Dict[int, Tensor]:
    """Reverse sweep over the tape. Returns gradient tensors keyed by tensor
    id for every requires_grad leaf (zeros for leaves off the loss path)."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    adjoints: Dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = adjoints.pop(entry.out_id, None)
        if g is None:
            continue
        in_grads = entry.vjp(g)
        for tid, ig in zip(entry.in_ids, in_grads):
            if ig is None:
                continue
            if tid in adjoints:
                adjoints[tid] = adjoints[tid] + ig
            else:
                adjoints[tid] = ig
    leaves = list(params) if params is not None else list(tape.leaves.values())
    out: Dict[int, Tensor] = {}
    for leaf in leaves:
        g = adjoints.get(leaf.tid)
        if g is None:
            g = np.zeros_like(leaf.data)
        out[leaf.tid] = Tensor(g)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-6
    pass_: bool = True

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def check_gradients(f: Callable[[Sequence[Tensor]], Tensor],
                    point: Sequence[Tensor],
                    step: float = 1e-5,
                    tol: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar-valued tensor program
    against central finite differences at `point`."""
    if not (0.0 < step <= 1e-2):
        raise ContractError(f"step {step} outside (0, 1e-2]")
    with Tape() as tape:
        loss = f(point)
    grads = backward(loss, tape, params=point)

    report = GradCheckReport(tolerance=tol)
    for k, p in enumerate(point):
        if not p.requires_grad:
            continue
        analytic = grads[p.tid].data
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(point).item()
            flat[i] = orig - step
            lo = f(point).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * step)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
        report.max_rel_error[f"param{k}"] = rel
        if rel > tol:
            report.pass_ = False
    return report
