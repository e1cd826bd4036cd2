"""Minimal reverse-mode differentiation over dense float64 arrays.

A Tape records every primitive operation in creation order (which is a
topological order); `Tape.backward` seeds the scalar output with 1 and walks
the record once in reverse, accumulating gradients into every leaf. All
values are numpy float64 arrays; scalars are 0-d arrays.

Broadcasting is deliberately narrow: `add` accepts a (1, C) row bias or a
0-d scalar, every other mixed-shape combination has its own named op
(`scale_rows`, `div_rows`, ...). This keeps each node's backward rule
one line and the whole tape auditable.

`finite_diff_check` is the independent gradient oracle used throughout the
test suite: central differences against the tape's analytic gradients.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import AutodiffError, ShapeError

_DENOM_EPS = 1e-15


class Tensor:
    """One node on a tape: a value plus the rule for pushing gradients back."""

    __slots__ = ("tape", "value", "parents", "_push", "needs_grad", "grad", "name")

    def __init__(self, tape, value, parents=(), push=None, needs_grad=False, name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self._push = push
        self.needs_grad = needs_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or "tensor"
        return f"<{label} shape={self.value.shape} leaf={self._push is None and self.needs_grad}>"

    # Operator sugar; every route lands on a module-level op below.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Single-owner op record; build a graph, call backward(scalar) once."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _wrap(self, value) -> np.ndarray:
        arr = np.asarray(value, dtype=np.float64)
        return arr

    def leaf(self, value, name: str | None = None) -> Tensor:
        """A trainable input; backward() reports its gradient."""
        node = Tensor(self, self._wrap(value), needs_grad=True, name=name)
        self.nodes.append(node)
        return node

    def const(self, value, name: str | None = None) -> Tensor:
        """A fixed input; gradients are not propagated into it."""
        node = Tensor(self, self._wrap(value), needs_grad=False, name=name)
        self.nodes.append(node)
        return node

    def _register(self, value, parents, push) -> Tensor:
        node = Tensor(
            self,
            value,
            parents=tuple(parents),
            push=push,
            needs_grad=any(p.needs_grad for p in parents),
        )
        self.nodes.append(node)
        return node

    def backward(self, output: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(output)/d(leaf) for every leaf on this tape.

        Visits nodes exactly once in reverse creation order. Returns a dict
        keyed by leaf tensor (zero arrays for leaves the output does not
        depend on); the same gradients are left on each node's `.grad`.
        """
        if output.tape is not self:
            raise AutodiffError("output tensor does not belong to this tape")
        if output.value.ndim != 0:
            raise AutodiffError(f"backward needs a scalar output, got shape {output.value.shape}")
        for node in self.nodes:
            node.grad = None
        output.grad = np.ones(())
        for node in reversed(self.nodes):
            if node.grad is None or node._push is None or not node.needs_grad:
                continue
            node._push(node.grad)
        out = {}
        for node in self.nodes:
            if node._push is None and node.needs_grad:
                out[node] = node.grad if node.grad is not None else np.zeros_like(node.value)
        return out


def _accumulate(node: Tensor, grad: np.ndarray) -> None:
    # Gradients are only ever rebound, never mutated in place, so aliasing
    # the incoming array is safe.
    if not node.needs_grad:
        return
    node.grad = grad if node.grad is None else node.grad + grad


def _same_tape(*tensors: Tensor):
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise AutodiffError("tensors live on different tapes")
    return tape


def _coerce(ref: Tensor, other) -> Tensor:
    if isinstance(other, Tensor):
        return other
    return ref.tape.const(np.asarray(other, dtype=np.float64))


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _coerce(a, b)
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        def push(g):
            _accumulate(a, g)
            _accumulate(b, g)
    elif bv.ndim == 0:
        def push(g):
            _accumulate(a, g)
            _accumulate(b, np.sum(g).reshape(()))
    elif av.ndim == 2 and bv.shape == (1, av.shape[1]):  # row bias
        def push(g):
            _accumulate(a, g)
            _accumulate(b, np.sum(g, axis=0, keepdims=True))
    else:
        raise ShapeError(f"add: unsupported shapes {av.shape} + {bv.shape}")
    return tape._register(av + bv, (a, b), push)


def neg(a: Tensor) -> Tensor:
    def push(g):
        _accumulate(a, -g)
    return a.tape._register(-a.value, (a,), push)


def sub(a: Tensor, b) -> Tensor:
    return add(a, neg(_coerce(a, b)))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; same shapes or a 0-d/python scalar on either side."""
    b = _coerce(a, b)
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape and av.ndim != 0 and bv.ndim != 0:
        raise ShapeError(f"mul: unsupported shapes {av.shape} * {bv.shape}")

    def push(g):
        ga = g * bv
        gb = g * av
        if av.ndim == 0 and bv.ndim != 0:
            ga = np.sum(ga).reshape(())
        if bv.ndim == 0 and av.ndim != 0:
            gb = np.sum(gb).reshape(())
        _accumulate(a, ga)
        _accumulate(b, gb)

    return tape._register(av * bv, (a, b), push)


def div(a: Tensor, b) -> Tensor:
    """Elementwise quotient; same shapes or 0-d divisor. Caller keeps b away from 0."""
    b = _coerce(a, b)
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape and bv.ndim != 0:
        raise ShapeError(f"div: unsupported shapes {av.shape} / {bv.shape}")
    out = av / bv

    def push(g):
        _accumulate(a, g / bv)
        gb = -g * out / bv
        if bv.ndim == 0 and av.ndim != 0:
            gb = np.sum(gb).reshape(())
        _accumulate(b, gb)

    return tape._register(out, (a, b), push)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    av, bv = a.value, b.value

    def push(g):
        _accumulate(a, g @ bv.T)
        _accumulate(b, av.T @ g)

    return tape._register(av @ bv, (a, b), push)


# ---------------------------------------------------------------------------
# Pointwise nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.value > 0.0

    def push(g):
        _accumulate(a, g * mask)

    return a.tape._register(a.value * mask, (a,), push)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)

    def push(g):
        _accumulate(a, g * (1.0 - out * out))

    return a.tape._register(out, (a,), push)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)

    def push(g):
        _accumulate(a, g * out)

    return a.tape._register(out, (a,), push)


def log(a: Tensor) -> Tensor:
    """Natural log; caller clamps the argument positive."""
    val = a.value

    def push(g):
        _accumulate(a, g / val)

    return a.tape._register(np.log(val), (a,), push)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)

    def push(g):
        _accumulate(a, g / np.maximum(2.0 * out, _DENOM_EPS))

    return a.tape._register(out, (a,), push)


def square(a: Tensor) -> Tensor:
    val = a.value

    def push(g):
        _accumulate(a, g * (2.0 * val))

    return a.tape._register(val * val, (a,), push)


def artanh(a: Tensor) -> Tensor:
    """Inverse hyperbolic tangent; caller clamps |argument| < 1."""
    val = a.value

    def push(g):
        _accumulate(a, g / (1.0 - val * val))

    return a.tape._register(np.arctanh(val), (a,), push)


def asin(a: Tensor) -> Tensor:
    val = a.value

    def push(g):
        _accumulate(a, g / np.sqrt(np.maximum(1.0 - val * val, _DENOM_EPS)))

    return a.tape._register(np.arcsin(val), (a,), push)


def acos(a: Tensor) -> Tensor:
    val = a.value

    def push(g):
        _accumulate(a, -g / np.sqrt(np.maximum(1.0 - val * val, _DENOM_EPS)))

    return a.tape._register(np.arccos(val), (a,), push)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; gradient passes only where the value was left unchanged."""
    out = np.clip(a.value, lo, hi)
    mask = out == a.value

    def push(g):
        _accumulate(a, g * mask)

    return a.tape._register(out, (a,), push)


# ---------------------------------------------------------------------------
# Reductions and row-wise structure
# ---------------------------------------------------------------------------

def total(a: Tensor) -> Tensor:
    shape = a.value.shape

    def push(g):
        _accumulate(a, np.full(shape, float(g)))

    return a.tape._register(np.sum(a.value).reshape(()), (a,), push)


def mean(a: Tensor) -> Tensor:
    shape = a.value.shape
    n = a.value.size

    def push(g):
        _accumulate(a, np.full(shape, float(g) / n))

    return a.tape._register(np.mean(a.value).reshape(()), (a,), push)


def rows_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner product of two (N, d) tensors -> (N, 1)."""
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape or av.ndim != 2:
        raise ShapeError(f"rows_dot: need matching 2-D shapes, got {av.shape}, {bv.shape}")
    out = np.sum(av * bv, axis=1, keepdims=True)

    def push(g):
        _accumulate(a, g * bv)
        _accumulate(b, g * av)

    return tape._register(out, (a, b), push)


def row_norm(a: Tensor, floor: float = _DENOM_EPS) -> Tensor:
    """Per-row Euclidean norm -> (N, 1), floored; gradient is flat below the floor."""
    raw = np.linalg.norm(a.value, axis=1, keepdims=True)
    out = np.maximum(raw, floor)
    active = raw > floor
    val = a.value

    def push(g):
        _accumulate(a, np.where(active, g * val / out, 0.0))

    return a.tape._register(out, (a,), push)


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply each row of a (N, d) tensor by the matching (N, 1) scalar."""
    tape = _same_tape(a, s)
    av, sv = a.value, s.value
    if av.ndim != 2 or sv.shape != (av.shape[0], 1):
        raise ShapeError(f"scale_rows: got {av.shape} scaled by {sv.shape}")

    def push(g):
        _accumulate(a, g * sv)
        _accumulate(s, np.sum(g * av, axis=1, keepdims=True))

    return tape._register(av * sv, (a, s), push)


def div_rows(a: Tensor, s: Tensor) -> Tensor:
    """Divide each row of a (N, d) tensor by the matching (N, 1) scalar."""
    tape = _same_tape(a, s)
    av, sv = a.value, s.value
    if av.ndim != 2 or sv.shape != (av.shape[0], 1):
        raise ShapeError(f"div_rows: got {av.shape} divided by {sv.shape}")
    out = av / sv

    def push(g):
        _accumulate(a, g / sv)
        _accumulate(s, np.sum(-g * out / sv, axis=1, keepdims=True))

    return tape._register(out, (a, s), push)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a (C, d) tensor by integer index -> (len(index), d)."""
    idx = np.asarray(index, dtype=np.intp)
    shape = a.value.shape

    def push(g):
        ga = np.zeros(shape)
        np.add.at(ga, idx, g)
        _accumulate(a, ga)

    return a.tape._register(a.value[idx], (a,), push)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.value.shape

    def push(g):
        ga = np.zeros(shape)
        ga[start:stop] = g
        _accumulate(a, ga)

    return a.tape._register(a.value[start:stop].copy(), (a,), push)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    na = a.value.shape[1]

    def push(g):
        _accumulate(a, g[:, :na])
        _accumulate(b, g[:, na:])

    return tape._register(np.concatenate([a.value, b.value], axis=1), (a, b), push)


# ---------------------------------------------------------------------------
# Softmax family (row-wise over class columns)
# ---------------------------------------------------------------------------

def log_softmax(a: Tensor) -> Tensor:
    val = a.value
    shifted = val - np.max(val, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def push(g):
        _accumulate(a, g - soft * np.sum(g, axis=1, keepdims=True))

    return a.tape._register(out, (a,), push)


def softmax(a: Tensor) -> Tensor:
    val = a.value
    shifted = val - np.max(val, axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=1, keepdims=True)

    def push(g):
        _accumulate(a, out * (g - np.sum(g * out, axis=1, keepdims=True)))

    return a.tape._register(out, (a,), push)


# ---------------------------------------------------------------------------
# 1-D dilated convolution over the time axis
# ---------------------------------------------------------------------------

def _shift(x: np.ndarray, offset: int) -> np.ndarray:
    """Rows moved by `offset` with zero fill: out[i] = x[i + offset]."""
    if offset == 0:
        return x
    out = np.zeros_like(x)
    if offset > 0:
        out[:-offset or None] = x[offset:]
    else:
        out[-offset:] = x[:offset]
    return out


def conv1d(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """'Same'-padded dilated convolution: x (L, Cin), w (k, Cin, Cout) -> (L, Cout).

    Tap j reads frames offset by (j - k//2) * dilation; out-of-range frames
    contribute zero.
    """
    tape = _same_tape(x, w)
    xv, wv = x.value, w.value
    if xv.ndim != 2 or wv.ndim != 3 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"conv1d: got input {xv.shape}, kernel {wv.shape}")
    k = wv.shape[0]
    offsets = [(j - k // 2) * dilation for j in range(k)]
    out = np.zeros((xv.shape[0], wv.shape[2]))
    for j, off in enumerate(offsets):
        out += _shift(xv, off) @ wv[j]

    def push(g):
        gx = np.zeros_like(xv)
        gw = np.zeros_like(wv)
        for j, off in enumerate(offsets):
            gx += _shift(g @ wv[j].T, -off)
            gw[j] = _shift(xv, off).T @ g
        _accumulate(x, gx)
        _accumulate(w, gw)

    return tape._register(out, (x, w), push)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(
    f: Callable[[Tape, list[Tensor]], Tensor],
    point: Sequence[np.ndarray],
    step: float = 1e-5,
) -> float:
    """Max over all coordinates of |analytic - central difference| / max(1, |analytic|).

    `f` builds a scalar on the tape it is given from the leaves it is given;
    it is re-evaluated 2 * total_coordinates times at perturbed points.
    """
    if step <= 0.0:
        raise AutodiffError(f"finite-difference step must be > 0, got {step}")
    point = [np.asarray(p, dtype=np.float64) for p in point]

    tape = Tape()
    leaves = [tape.leaf(p) for p in point]
    out = f(tape, leaves)
    base = float(out.value)
    if not math.isfinite(base):
        raise AutodiffError("function evaluated non-finite at the base point")
    grads = tape.backward(out)
    analytic = [grads[leaf] for leaf in leaves]

    def value_at(arrays) -> float:
        t = Tape()
        v = float(f(t, [t.leaf(a) for a in arrays]).value)
        if not math.isfinite(v):
            raise AutodiffError("function evaluated non-finite at a perturbed point")
        return v

    worst = 0.0
    for pi, p in enumerate(point):
        flat = p.reshape(-1)
        for ci in range(flat.size):
            bumped = [q.copy() for q in point]
            bumped[pi].reshape(-1)[ci] = flat[ci] + step
            hi = value_at(bumped)
            bumped[pi].reshape(-1)[ci] = flat[ci] - step
            lo = value_at(bumped)
            fd = (hi - lo) / (2.0 * step)
            a = float(analytic[pi].reshape(-1)[ci])
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
