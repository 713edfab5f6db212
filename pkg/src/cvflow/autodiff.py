"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records operation nodes in creation order (which is topological by
construction); backward() replays them once in reverse. Arrays are rank <= 2
(batch x features); the only broadcasting is row-bias addition. Gradients
accumulate additively across fan-out, so callers zero them between steps.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"rank {arr.ndim} array not supported (max rank 2): shape {arr.shape}")
    return arr


class Value:
    """A node in the computation graph: data plus an accumulated gradient."""

    __slots__ = ("data", "grad", "tape", "node_id", "name", "_parents", "_backward")

    def __init__(self, data, tape: "Tape", name: str | None = None):
        self.data = _as_f64(data)
        self.grad = np.zeros_like(self.data)
        self.tape = tape
        self.node_id: int | None = None
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        tag = self.name or "value"
        return f"Value({tag}, shape={self.data.shape})"

    # -- arithmetic sugar ----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Value):
            return add(self, other)
        return _add_const(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Value):
            return sub(self, other)
        return _add_const(self, -float(other))

    def __rsub__(self, other):
        return _add_const(negate(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Value):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- elementwise/reduction methods ----------------------------------------

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def square(self):
        return square(self)

    def softplus(self):
        return softplus(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)

    def relu(self):
        return clamp(self, 0.0, None)

    def sum(self, axis=None):
        return vsum(self, axis)

    def mean(self):
        return mean(self)


class Tape:
    """Ordered record of operation nodes; single-threaded per instance."""

    def __init__(self):
        self.nodes: list[Value] = []
        self.recording = True

    def value(self, data, name: str | None = None) -> Value:
        """Create a leaf (not an operation record; never visited by backward)."""
        return Value(data, self, name=name)

    def constant(self, data) -> Value:
        return Value(data, self)

    def _record(self, out: Value, parents: tuple, backward_fn) -> Value:
        if self.recording:
            out._parents = parents
            out._backward = backward_fn
            out.node_id = len(self.nodes)
            self.nodes.append(out)
        return out

    def clear(self) -> None:
        """Drop all operation records. Leaves (parameters) are unaffected."""
        for node in self.nodes:
            node._parents = ()
            node._backward = None
            node.node_id = None
        self.nodes.clear()

    class _Pause:
        def __init__(self, tape):
            self.tape = tape

        def __enter__(self):
            self.prev = self.tape.recording
            self.tape.recording = False

        def __exit__(self, *exc):
            self.tape.recording = self.prev

    def no_grad(self):
        """Context manager: compute values without recording nodes."""
        return Tape._Pause(self)

    def backward(self, root: Value) -> None:
        """Accumulate d(root)/d(value) into .grad for every value reachable from root.

        The pass runs on zeroed per-pass buffers and adds its result onto the
        grads held before the call, so repeated backward calls sum cleanly.
        """
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        reachable: dict[int, Value] = {}
        stack = [root]
        while stack:
            v = stack.pop()
            if id(v) in reachable:
                continue
            reachable[id(v)] = v
            stack.extend(v._parents)
        saved = [(v, v.grad) for v in reachable.values()]
        for v, _ in saved:
            v.grad = np.zeros_like(v.data)
        root.grad += 1.0
        if root.node_id is not None:
            for node in reversed(self.nodes[: root.node_id + 1]):
                if id(node) in reachable and node._backward is not None:
                    node._backward()
        for v, old in saved:
            v.grad = v.grad + old


def _same_tape(*vals: Value) -> Tape:
    tape = vals[0].tape
    for v in vals[1:]:
        if v.tape is not tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _check_same_shape(op: str, x: Value, y: Value) -> None:
    if x.data.shape != y.data.shape:
        raise ShapeError(f"shape mismatch for {op}: {x.data.shape} vs {y.data.shape}")


# -- binary ops ---------------------------------------------------------------


def add(x: Value, y: Value) -> Value:
    tape = _same_tape(x, y)
    _check_same_shape("add", x, y)
    out = Value(x.data + y.data, tape)

    def backward():
        x.grad += out.grad
        y.grad += out.grad

    return tape._record(out, (x, y), backward)


def sub(x: Value, y: Value) -> Value:
    tape = _same_tape(x, y)
    _check_same_shape("sub", x, y)
    out = Value(x.data - y.data, tape)

    def backward():
        x.grad += out.grad
        y.grad -= out.grad

    return tape._record(out, (x, y), backward)


def mul(x: Value, y: Value) -> Value:
    tape = _same_tape(x, y)
    _check_same_shape("mul", x, y)
    out = Value(x.data * y.data, tape)

    def backward():
        x.grad += y.data * out.grad
        y.grad += x.data * out.grad

    return tape._record(out, (x, y), backward)


def matmul(x: Value, y: Value) -> Value:
    tape = _same_tape(x, y)
    if x.data.ndim != 2 or y.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands: {x.data.shape} vs {y.data.shape}")
    if x.data.shape[1] != y.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {x.data.shape} vs {y.data.shape}")
    out = Value(x.data @ y.data, tape)

    def backward():
        x.grad += out.grad @ y.data.T
        y.grad += x.data.T @ out.grad

    return tape._record(out, (x, y), backward)


def broadcast_add_row(x: Value, row: Value) -> Value:
    """x[n, m] + row broadcast over rows; row has shape (m,) or (1, m)."""
    tape = _same_tape(x, row)
    if x.data.ndim != 2:
        raise ShapeError(f"broadcast-add-row needs a rank-2 left operand, got {x.data.shape}")
    flat = row.data.reshape(-1)
    if flat.shape[0] != x.data.shape[1]:
        raise ShapeError(f"row length mismatch: {x.data.shape} vs {row.data.shape}")
    out = Value(x.data + flat[None, :], tape)

    def backward():
        x.grad += out.grad
        row.grad += out.grad.sum(axis=0).reshape(row.data.shape)

    return tape._record(out, (x, row), backward)


def _add_const(x: Value, c: float) -> Value:
    if x.data.ndim == 2:
        row = Value(np.full(x.data.shape[1], c), x.tape)
        return broadcast_add_row(x, row)
    return add(x, Value(np.full_like(x.data, c), x.tape))


# -- unary ops ----------------------------------------------------------------


def negate(x: Value) -> Value:
    out = Value(-x.data, x.tape)

    def backward():
        x.grad -= out.grad

    return x.tape._record(out, (x,), backward)


def scalar_mul(x: Value, c: float) -> Value:
    # inf * 0 -> nan is tolerated here; loss-level finiteness checks own it
    with np.errstate(invalid="ignore"):
        out = Value(x.data * c, x.tape)

    def backward():
        x.grad += c * out.grad

    return x.tape._record(out, (x,), backward)


def tanh(x: Value) -> Value:
    t = np.tanh(x.data)
    out = Value(t, x.tape)

    def backward():
        x.grad += (1.0 - t * t) * out.grad

    return x.tape._record(out, (x,), backward)


def exp(x: Value) -> Value:
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    if not np.all(np.isfinite(e)):
        raise DomainError(f"exp overflow: max input {np.max(x.data):.6g}")
    out = Value(e, x.tape)

    def backward():
        x.grad += e * out.grad

    return x.tape._record(out, (x,), backward)


def log(x: Value) -> Value:
    if np.any(x.data <= 0.0):
        raise DomainError(f"log of non-positive value: min input {np.min(x.data):.6g}")
    out = Value(np.log(x.data), x.tape)

    def backward():
        x.grad += out.grad / x.data

    return x.tape._record(out, (x,), backward)


def square(x: Value) -> Value:
    out = Value(x.data * x.data, x.tape)

    def backward():
        x.grad += 2.0 * x.data * out.grad

    return x.tape._record(out, (x,), backward)


def softplus(x: Value) -> Value:
    out = Value(np.logaddexp(0.0, x.data), x.tape)
    sig = 1.0 / (1.0 + np.exp(-x.data))

    def backward():
        x.grad += sig * out.grad

    return x.tape._record(out, (x,), backward)


def clamp(x: Value, lo=None, hi=None) -> Value:
    # Gradient is 1 inside [lo, hi] and 0 outside (no straight-through).
    out = Value(np.clip(x.data, lo, hi), x.tape)
    inside = np.ones_like(x.data)
    if lo is not None:
        inside *= x.data >= lo
    if hi is not None:
        inside *= x.data <= hi

    def backward():
        x.grad += inside * out.grad

    return x.tape._record(out, (x,), backward)


def relu(x: Value) -> Value:
    return clamp(x, 0.0, None)


def vsum(x: Value, axis=None) -> Value:
    """Sum over all elements (axis=None, scalar result) or the last axis (keepdims)."""
    if axis is None:
        out = Value(np.asarray(x.data.sum()), x.tape)

        def backward():
            x.grad += out.grad

    elif axis in (-1, x.data.ndim - 1) and x.data.ndim == 2:
        out = Value(x.data.sum(axis=1, keepdims=True), x.tape)

        def backward():
            x.grad += out.grad

    else:
        raise ShapeError(f"sum supports axis=None or the last axis of a rank-2 array, got axis={axis} on {x.data.shape}")
    return x.tape._record(out, (x,), backward)


def mean(x: Value) -> Value:
    n = x.data.size
    out = Value(np.asarray(x.data.mean()), x.tape)

    def backward():
        x.grad += out.grad / n

    return x.tape._record(out, (x,), backward)


def concat(values: list[Value]) -> Value:
    """Concatenate rank-2 values along the last axis."""
    tape = _same_tape(*values)
    rows = values[0].data.shape[0]
    for v in values:
        if v.data.ndim != 2 or v.data.shape[0] != rows:
            raise ShapeError(f"concat row mismatch: {[v.data.shape for v in values]}")
    out = Value(np.concatenate([v.data for v in values], axis=1), tape)
    sizes = [v.data.shape[1] for v in values]

    def backward():
        offset = 0
        for v, size in zip(values, sizes):
            v.grad += out.grad[:, offset : offset + size]
            offset += size

    return tape._record(out, tuple(values), backward)


def split(x: Value, sizes: tuple[int, ...]) -> list[Value]:
    """Split a rank-2 value along the last axis into blocks of the given widths."""
    if x.data.ndim != 2:
        raise ShapeError(f"split needs a rank-2 array, got {x.data.shape}")
    if sum(sizes) != x.data.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not sum to axis length {x.data.shape[1]}")
    outs = []
    offset = 0
    for size in sizes:
        lo = offset
        out = Value(x.data[:, lo : lo + size], x.tape)

        def backward(lo=lo, size=size, out=out):
            x.grad[:, lo : lo + size] += out.grad

        outs.append(x.tape._record(out, (x,), backward))
        offset += size
    return outs


def minimum(x: Value, y: Value) -> Value:
    """Elementwise min composed from primitive ops (clamp subgradient at ties)."""
    return add(y, clamp(sub(x, y), None, 0.0))


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adam over a fixed parameter list; step() applies the update then zeroes grads."""

    def __init__(self, params: list[Value], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if not np.all(np.isfinite(p.grad)):
                tag = p.name or f"param[{i}]"
                raise FloatingPointError(f"non-finite gradient in {tag}; aborting optimizer step")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * p.grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (p.grad * p.grad)
            m_hat = self.m[i] / b1t
            v_hat = self.v[i] / b2t
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.zero_grad()


# -- small network building blocks ---------------------------------------------


class Linear:
    """Dense layer y = x @ W + b with PyTorch-style uniform init."""

    def __init__(self, tape: Tape, in_dim: int, out_dim: int, rng: np.random.Generator, zero_init: bool = False, name: str = "linear"):
        if zero_init:
            w = np.zeros((in_dim, out_dim))
            b = np.zeros(out_dim)
        else:
            bound = 1.0 / np.sqrt(max(in_dim, 1))
            w = rng.uniform(-bound, bound, size=(in_dim, out_dim))
            b = rng.uniform(-bound, bound, size=out_dim)
        self.w = tape.value(w, name=f"{name}.w")
        self.b = tape.value(b, name=f"{name}.b")

    def __call__(self, x: Value) -> Value:
        return broadcast_add_row(matmul(x, self.w), self.b)

    def params(self) -> list[Value]:
        return [self.w, self.b]


class MLP:
    """Fully connected net with tanh hidden activations and a linear head."""

    def __init__(self, tape: Tape, sizes: list[int], rng: np.random.Generator, zero_init_last: bool = False, name: str = "mlp"):
        self.tape = tape
        self.layers = []
        for i in range(len(sizes) - 1):
            last = i == len(sizes) - 2
            self.layers.append(
                Linear(tape, sizes[i], sizes[i + 1], rng, zero_init=zero_init_last and last, name=f"{name}.{i}")
            )

    def __call__(self, x: Value) -> Value:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = tanh(x)
        return x

    def params(self) -> list[Value]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.params()]

    def load_arrays(self, arrays: list[np.ndarray]) -> None:
        params = self.params()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, arr in zip(params, arrays):
            if p.data.shape != tuple(np.shape(arr)):
                raise ShapeError(f"array shape {np.shape(arr)} does not match parameter {p.data.shape}")
            p.data[...] = arr
