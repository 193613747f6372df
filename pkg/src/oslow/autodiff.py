"""Small reverse-mode differentiation engine over dense float64 arrays.

A :class:`Tape` records a closed set of primitive operations. Recording is
eager: every primitive is evaluated as soon as it is recorded, so a freshly
built tape is already "forwarded". The recorded program can be replayed on new
input bindings with :meth:`Tape.forward` and differentiated with
:meth:`Tape.backward`.

The same primitive names are exposed by :data:`numpy_ops`, which evaluates
them directly on arrays. Code written against that shared vocabulary (see
:mod:`oslow.flow`) runs either with or without gradient tracking.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .exceptions import NumericalError, ShapeError, TapeStateError

Tensor = np.ndarray

LOG_FLOOR = 1e-300


def _as_tensor(value) -> Tensor:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: Tensor, shape: tuple) -> Tensor:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from exc
    # matrix/vector broadcasting only: the result must match one operand
    if out != a.shape and out != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} need two-sided broadcasting")


def _softplus(x: Tensor) -> Tensor:
    return np.logaddexp(0.0, x)


def _sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _checked_log(x: Tensor) -> Tensor:
    if np.any(x <= LOG_FLOOR):
        raise NumericalError(f"log of value <= {LOG_FLOOR:g} (min input {np.min(x):g})")
    return np.log(x)


def _normalize(x: Tensor, axis: int) -> Tensor:
    sums = x.sum(axis=axis, keepdims=True)
    if np.any(np.abs(sums) <= LOG_FLOOR):
        raise NumericalError("normalization by a (near) zero sum")
    return x / sums


def _normalize_grad(g: Tensor, x: Tensor, axis: int) -> Tensor:
    sums = x.sum(axis=axis, keepdims=True)
    inner = (g * x).sum(axis=axis, keepdims=True)
    return g / sums - inner / sums**2


def _sum(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        return np.asarray(x.sum())
    return x.sum(axis=axis, keepdims=True)


def _sum_grad(g: Tensor, x: Tensor, axis) -> Tensor:
    return np.broadcast_to(g, x.shape).copy()


def _matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return a @ b


def _add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return a + b


def _multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "multiply")
    return a * b


def _mask_multiply(a: Tensor, mask: Tensor) -> Tensor:
    if a.shape != mask.shape:
        raise ShapeError(f"mask_multiply: shapes {a.shape} and {mask.shape} differ")
    return a * mask


# name -> (arity, forward(*values, **attrs), backward(g, out, *values, **attrs) -> grads)
# Differentiable inputs come first; mask_multiply's mask is a constant.
_PRIMITIVES: dict[str, tuple[int, Callable, Callable]] = {
    "matmul": (2, _matmul, lambda g, o, a, b: (g @ b.T, a.T @ g)),
    "add": (
        2,
        _add,
        lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    ),
    "multiply": (
        2,
        _multiply,
        lambda g, o, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    ),
    "mask_multiply": (2, _mask_multiply, lambda g, o, a, m: (g * m, None)),
    "tanh": (1, np.tanh, lambda g, o, a: (g * (1.0 - o * o),)),
    "sigmoid": (1, _sigmoid, lambda g, o, a: (g * o * (1.0 - o),)),
    "exp": (1, np.exp, lambda g, o, a: (g * o,)),
    "log": (1, _checked_log, lambda g, o, a: (g / a,)),
    "softplus": (1, _softplus, lambda g, o, a: (g * _sigmoid(a),)),
    "abs": (1, np.abs, lambda g, o, a: (g * np.sign(a),)),
    "transpose": (1, lambda a: a.T.copy(), lambda g, o, a: (g.T,)),
    "sum": (1, _sum, lambda g, o, a, axis=None: (_sum_grad(g, a, axis),)),
    "row_normalize": (1, lambda a: _normalize(a, 1), lambda g, o, a: (_normalize_grad(g, a, 1),)),
    "col_normalize": (1, lambda a: _normalize(a, 0), lambda g, o, a: (_normalize_grad(g, a, 0),)),
}

PRIMITIVES = tuple(_PRIMITIVES)


class _NumpyOps:
    """The tape vocabulary evaluated eagerly on plain arrays."""

    def __getattr__(self, name):
        try:
            _, fwd, _ = _PRIMITIVES[name]
        except KeyError:
            raise AttributeError(name) from None

        def call(*args, **attrs):
            return fwd(*(_as_tensor(a) for a in args), **attrs)

        return call

    @staticmethod
    def const(value) -> Tensor:
        return _as_tensor(value)

    @staticmethod
    def value(x) -> Tensor:
        return _as_tensor(x)


numpy_ops = _NumpyOps()


class Node:
    """Handle to a value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> Tensor:
        return self.tape._values[self.index]

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.add(self, self.tape.multiply(other, -1.0))

    def __rsub__(self, other):
        return self.tape.add(other, self.tape.multiply(self, -1.0))

    def __mul__(self, other):
        return self.tape.multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.multiply(self, -1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __repr__(self):
        return f"Node({self.index}, shape={self.shape})"


@dataclass
class _Record:
    op: str
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)


class Tape:
    """Recorded program over the closed primitive set.

    Leaves are either named inputs (differentiable, rebindable) or constants.
    Every recorded node's inputs precede it, so replay runs in recording order
    and the backward pass runs in exact reverse order.
    """

    def __init__(self):
        self._records: list[_Record | None] = []
        self._values: list[Tensor] = []
        self._inputs: dict[str, int] = {}
        self._outputs: dict[str, int] = {}
        self._forwarded = False

    # ------------------------------------------------------------------ leaves
    def input(self, name: str, value) -> Node:
        if name in self._inputs:
            raise ValueError(f"input {name!r} already bound on this tape")
        idx = self._push(None, _as_tensor(value).copy())
        self._inputs[name] = idx
        return Node(self, idx)

    def const(self, value) -> Node:
        return Node(self, self._push(None, _as_tensor(value)))

    def output(self, name: str, node: Node) -> Node:
        self._outputs[name] = node.index
        return node

    @property
    def input_names(self) -> tuple[str, ...]:
        return tuple(self._inputs)

    @property
    def output_names(self) -> tuple[str, ...]:
        return tuple(self._outputs)

    def value(self, node: Node) -> Tensor:
        return self._values[node.index]

    def __len__(self) -> int:
        return len(self._records)

    # ---------------------------------------------------------------- recording
    def _push(self, record: _Record | None, value: Tensor) -> int:
        self._records.append(record)
        self._values.append(value)
        self._forwarded = True
        return len(self._values) - 1

    def _node(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError("node belongs to a different tape")
            return x
        return self.const(x)

    def _record(self, op: str, *args, **attrs) -> Node:
        arity, fwd, _ = _PRIMITIVES[op]
        nodes = [self._node(a) for a in args]
        if len(nodes) != arity:
            raise TypeError(f"{op} takes {arity} inputs, got {len(nodes)}")
        out = fwd(*(self._values[n.index] for n in nodes), **attrs)
        _check_finite(op, out)
        rec = _Record(op, tuple(n.index for n in nodes), attrs)
        return Node(self, self._push(rec, out))

    def matmul(self, a, b) -> Node:
        return self._record("matmul", a, b)

    def add(self, a, b) -> Node:
        return self._record("add", a, b)

    def multiply(self, a, b) -> Node:
        return self._record("multiply", a, b)

    def mask_multiply(self, a, mask) -> Node:
        if isinstance(mask, Node):
            raise TypeError("mask_multiply takes a constant mask; use multiply for nodes")
        return self._record("mask_multiply", a, mask)

    def tanh(self, a) -> Node:
        return self._record("tanh", a)

    def sigmoid(self, a) -> Node:
        return self._record("sigmoid", a)

    def exp(self, a) -> Node:
        return self._record("exp", a)

    def log(self, a) -> Node:
        return self._record("log", a)

    def softplus(self, a) -> Node:
        return self._record("softplus", a)

    def abs(self, a) -> Node:
        return self._record("abs", a)

    def transpose(self, a) -> Node:
        return self._record("transpose", a)

    def sum(self, a, axis=None) -> Node:
        return self._record("sum", a, axis=axis)

    def row_normalize(self, a) -> Node:
        return self._record("row_normalize", a)

    def col_normalize(self, a) -> Node:
        return self._record("col_normalize", a)

    @staticmethod
    def value_of(x) -> Tensor:
        return x.value if isinstance(x, Node) else _as_tensor(x)

    # ------------------------------------------------------------- execution
    def forward(self, inputs: Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
        """Replay the program with (some) inputs rebound; return the outputs."""
        inputs = dict(inputs or {})
        unknown = set(inputs) - set(self._inputs)
        if unknown:
            raise KeyError(f"unknown inputs: {sorted(unknown)}")
        for name, value in inputs.items():
            idx = self._inputs[name]
            value = _as_tensor(value)
            if value.shape != self._values[idx].shape:
                raise ShapeError(
                    f"input {name!r}: expected shape {self._values[idx].shape}, got {value.shape}"
                )
            self._values[idx] = value.copy()
        for i, rec in enumerate(self._records):
            if rec is None:
                continue
            _, fwd, _ = _PRIMITIVES[rec.op]
            out = fwd(*(self._values[j] for j in rec.inputs), **rec.attrs)
            _check_finite(rec.op, out)
            self._values[i] = out
        self._forwarded = True
        return {name: self._values[idx] for name, idx in self._outputs.items()}

    def backward(self, output_grad=None, output: Node | str | None = None) -> dict[str, Tensor]:
        """Reverse pass from ``output``; returns gradients for every named input."""
        if not self._forwarded:
            raise TapeStateError("backward() called before forward()")
        if output is None:
            if len(self._outputs) != 1:
                raise ValueError("tape has several outputs; name the one to differentiate")
            out_idx = next(iter(self._outputs.values()))
        elif isinstance(output, str):
            out_idx = self._outputs[output]
        else:
            out_idx = output.index
        out_val = self._values[out_idx]
        if output_grad is None:
            if out_val.size != 1:
                raise ShapeError("output_grad required for a non-scalar output")
            output_grad = np.ones_like(out_val)
        output_grad = _as_tensor(output_grad)
        if output_grad.shape != out_val.shape:
            raise ShapeError(f"output_grad shape {output_grad.shape} != {out_val.shape}")

        grads: dict[int, Tensor] = {out_idx: output_grad}
        for i in range(out_idx, -1, -1):
            g = grads.pop(i, None) if self._records[i] is not None else grads.get(i)
            rec = self._records[i]
            if rec is None or g is None:
                continue
            _, _, bwd = _PRIMITIVES[rec.op]
            in_vals = [self._values[j] for j in rec.inputs]
            for j, gj in zip(rec.inputs, bwd(g, self._values[i], *in_vals, **rec.attrs)):
                if gj is None:
                    continue
                grads[j] = grads[j] + gj if j in grads else gj
        return {
            name: grads.get(idx, np.zeros_like(self._values[idx]))
            for name, idx in self._inputs.items()
        }


def _check_finite(op: str, out: Tensor) -> None:
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite value produced by {op}")


def forward(tape: Tape, inputs: Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
    return tape.forward(inputs)


def backward(tape: Tape, output_grad=None, output=None) -> dict[str, Tensor]:
    return tape.backward(output_grad, output)


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst: tuple[str, tuple] | None = None


def grad_check(
    tape: Tape,
    inputs: Mapping[str, Tensor] | None = None,
    tolerance: float = 1e-4,
    *,
    output: Node | str | None = None,
    h: float = 1e-5,
    wrt: tuple[str, ...] | None = None,
    gradients: Mapping[str, Tensor] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``gradients`` replaces the analytic gradients (used to check that a
    corrupted gradient is caught). The relative error of one entry is
    ``|a - n| / max(|a|, |n|, floor)``. The floor sits ten times above the
    level where difference roundoff (about ``eps * |f| / h``) alone would
    reach ``tolerance``, so exactly-zero gradients do not fail spuriously.
    """
    base = {name: tape._values[idx].copy() for name, idx in tape._inputs.items()}
    base.update({k: _as_tensor(v).copy() for k, v in (inputs or {}).items()})
    outputs = tape.forward(base)
    if output is None:
        if len(outputs) != 1:
            raise ValueError("name the output to check")
        output = next(iter(outputs))
    out_idx = tape._outputs[output] if isinstance(output, str) else output.index
    if tape._values[out_idx].size != 1:
        raise ShapeError("grad_check needs a scalar output")
    analytic = dict(gradients) if gradients is not None else tape.backward(output=_index_node(tape, out_idx))

    def f(bindings):
        tape.forward(bindings)
        return float(tape._values[out_idx].reshape(()))

    f0 = abs(f(base))
    floor = max(1e-7, 10 * np.finfo(np.float64).eps * max(f0, 1.0) / (h * tolerance))
    worst_err, worst_at = 0.0, None
    for name in wrt or tuple(base):
        x = base[name]
        for pos in np.ndindex(*x.shape):
            plus, minus = x.copy(), x.copy()
            plus[pos] += h
            minus[pos] -= h
            numeric = (f({**base, name: plus}) - f({**base, name: minus})) / (2 * h)
            a = float(analytic[name][pos])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > worst_err:
                worst_err, worst_at = err, (name, pos)
    tape.forward(base)
    return GradCheckReport(worst_err, worst_err < tolerance, worst_at)


def _index_node(tape: Tape, idx: int) -> Node:
    return Node(tape, idx)


@dataclass
class AdamWState:
    """Decoupled-weight-decay Adam state for a set of named parameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


def adamw_step(
    state: AdamWState,
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
) -> dict[str, Tensor]:
    """One AdamW descent step; returns new parameter arrays.

    To ascend an objective pass its negated gradient.
    """
    for name, p in params.items():
        if name not in grads:
            raise KeyError(f"missing gradient for {name!r}")
        if grads[name].shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {grads[name].shape} != {p.shape}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    updated = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        new = p * (1.0 - state.lr * state.weight_decay)
        new = new - (state.lr / bc1) * m / (np.sqrt(v) / np.sqrt(bc2) + state.eps)
        updated[name] = new
    return updated
