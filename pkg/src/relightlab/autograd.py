"""Reverse-mode automatic differentiation on a flat tape.

A :class:`Tensor` wraps a numpy array (float32 for training, float64 for
gradient checking).  Operations executed while a :class:`Tape` is active
append one node each; insertion order is the topological order, so the
backward pass is a single reverse sweep with additive gradient
accumulation across fan-out.

Only the operations the relighting networks need are provided; there is
no GPU path, no graph rewriting, and broadcasting is limited to scalars
and per-channel/channel-singleton patterns.
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Parameter",
    "set_debug",
    "debug_enabled",
    "tensor",
    "constant",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "activation",
    "relu",
    "sigmoid",
    "softmax_logits",
    "log",
    "sqrt",
    "linear",
    "concat_channels",
    "reduce_mean",
    "reduce_sum",
    "reshape",
    "backward",
]

_DEBUG = os.environ.get("RELIGHTLAB_DEBUG", "") not in ("", "0")


def set_debug(enabled: bool) -> None:
    """Toggle finite-value and tape-structure assertions (slow, for tests)."""
    global _DEBUG
    _DEBUG = bool(enabled)


def debug_enabled() -> bool:
    return _DEBUG


_state = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class record_masks:
    """Collects the piecewise-linear branch pattern (relu signs, pool
    argmaxes) of whatever runs inside the context.  Finite-difference
    checks use it to detect kink crossings between probe evaluations."""

    def __enter__(self):
        self.chunks: list[np.ndarray] = []
        self._prev = getattr(_state, "mask_trace", None)
        _state.mask_trace = self.chunks
        return self

    def __exit__(self, *exc):
        _state.mask_trace = self._prev

    def fingerprint(self) -> np.ndarray:
        if not self.chunks:
            return np.zeros(0, dtype=np.uint8)
        return np.concatenate([c.ravel() for c in self.chunks])


def _trace_mask(arr: np.ndarray) -> None:
    trace = getattr(_state, "mask_trace", None)
    if trace is not None:
        trace.append(np.packbits(arr) if arr.dtype == bool else arr.astype(np.uint8))


class Tensor:
    """N-dimensional value with an optional gradient slot.

    Image tensors use (batch, channel, height, width) layout; conversion
    to/from height-width-channel happens only at image I/O boundaries.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[int] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar over the elementwise kernel
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


class Parameter:
    """Named trainable tensor; names form dotted paths unique per model."""

    __slots__ = ("name", "tensor", "trainable")

    def __init__(self, name: str, data, trainable: bool = True, dtype=None):
        self.name = name
        self.tensor = Tensor(np.asarray(data), requires_grad=True, dtype=dtype)
        self.trainable = bool(trainable)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = np.asarray(value, dtype=self.tensor.data.dtype)

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={tuple(self.tensor.shape)})"


class _Node:
    __slots__ = ("kind", "parents", "out", "backward_fn")

    def __init__(self, kind, parents, out, backward_fn):
        self.kind = kind
        self.parents = parents          # parent node indices (leaves included)
        self.out = out                  # output tensor (None for leaf nodes)
        self.backward_fn = backward_fn  # closure(grad_out) -> None


class Tape:
    """Append-only record of operations; topological order == insertion order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.visits = 0  # backward visit counter, for instrumentation
        self._leaf_ids: dict[int, int] = {}
        self._leaf_refs: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _leaf_node(self, t: Tensor) -> int:
        idx = self._leaf_ids.get(id(t))
        if idx is None:
            idx = len(self.nodes)
            self.nodes.append(_Node("leaf", (), None, None))
            self._leaf_ids[id(t)] = idx
            self._leaf_refs.append(t)
        return idx

    def node_id(self, t: Tensor) -> int:
        if t.tape is self and t.node is not None:
            return t.node
        return self._leaf_node(t)

    def record(self, kind: str, out: Tensor, parents: Sequence[Tensor],
               backward_fn: Callable[[np.ndarray], None]) -> None:
        parent_ids = tuple(self.node_id(p) for p in parents)
        idx = len(self.nodes)
        if _DEBUG:
            assert all(p < idx for p in parent_ids), "tape parents must precede node"
        self.nodes.append(_Node(kind, parent_ids, out, backward_fn))
        out.node = idx
        out.tape = self
        out.requires_grad = True

    def backward(self, loss: Tensor) -> None:
        """Reverse accumulation from a scalar loss produced on this tape."""
        if loss.tape is not self or loss.node is None:
            raise ValueError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            self.visits += 1
            if node.backward_fn is None:
                continue
            g = node.out.grad
            if g is None:
                continue
            node.backward_fn(g)


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(data, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _tracked(*tensors: Tensor) -> bool:
    if active_tape() is None:
        return False
    for t in tensors:
        if t.requires_grad or t.node is not None:
            return True
    return False


def _check_finite(kind: str, out: np.ndarray) -> None:
    if _DEBUG and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite values produced by {kind}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast, back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add/sub/mul/div; b may be a scalar, a per-channel vector,
    or a channel-singleton map broadcast against a."""
    if kind not in ("add", "sub", "mul", "div"):
        raise ValueError(f"unknown elementwise kind {kind!r}")
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"elementwise {kind}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None
    ad, bd = a.data, b.data
    if kind == "add":
        out_data = ad + bd
    elif kind == "sub":
        out_data = ad - bd
    elif kind == "mul":
        out_data = ad * bd
    else:
        out_data = ad / bd
    _check_finite(kind, out_data)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and _tracked(a, b):
        a_shape, b_shape = a.shape, b.shape

        def bwd(g, kind=kind, a=a, b=b):
            if kind == "add":
                ga, gb = g, g
            elif kind == "sub":
                ga, gb = g, -g
            elif kind == "mul":
                ga, gb = g * b.data, g * a.data
            else:
                ga = g / b.data
                gb = -g * a.data / (b.data * b.data)
            a.accumulate_grad(_unbroadcast(ga, a_shape))
            b.accumulate_grad(_unbroadcast(gb, b_shape))

        tape.record(kind, out, (a, b), bwd)
    else:
        assert out_data.shape == out_shape
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("div", a, b)


# ---------------------------------------------------------------------------
# activations

def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax_logits":
        return softmax_logits(x)
    if kind == "log":
        return log(x)
    if kind == "sqrt":
        return sqrt(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)
    out = Tensor(out_data)
    _trace_mask(x.data > 0)
    tape = active_tape()
    if tape is not None and _tracked(x):
        mask = x.data > 0

        def bwd(g):
            x.accumulate_grad(g * mask)

        tape.record("relu", out, (x,), bwd)
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and _tracked(x):

        def bwd(g):
            x.accumulate_grad(g * out_data * (1.0 - out_data))

        tape.record("sigmoid", out, (x,), bwd)
    return out


def softmax_logits(x: Tensor) -> Tensor:
    """Softmax over the last axis (the class axis of logit rows)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and _tracked(x):

        def bwd(g):
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            x.accumulate_grad((g - dot) * out_data)

        tape.record("softmax", out, (x,), bwd)
    return out


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log requires strictly positive inputs")
    out = Tensor(np.log(x.data))
    tape = active_tape()
    if tape is not None and _tracked(x):

        def bwd(g):
            x.accumulate_grad(g / x.data)

        tape.record("log", out, (x,), bwd)
    return out


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("sqrt gradient requires strictly positive inputs")
    out_data = np.sqrt(x.data)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and _tracked(x):

        def bwd(g):
            x.accumulate_grad(g * 0.5 / out_data)

        tape.record("sqrt", out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra / structure

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map: (B, N) x (M, N)^T + (M,) -> (B, M)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError(f"linear expects 2-d input/weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear dimension mismatch: input has {x.shape[1]} features, "
            f"weight expects {weight.shape[1]}"
        )
    out_data = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
        out_data = out_data + bias.data
    _check_finite("linear", out_data)
    out = Tensor(out_data)
    tape = active_tape()
    parents = (x, weight) if bias is None else (x, weight, bias)
    if tape is not None and _tracked(*parents):

        def bwd(g):
            x.accumulate_grad(g @ weight.data)
            weight.accumulate_grad(g.T @ x.data)
            if bias is not None:
                bias.accumulate_grad(g.sum(axis=0))

        tape.record("linear", out, parents, bwd)
    return out


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate (B, C, H, W) tensors along the channel axis."""
    xs = list(xs)
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    first = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0],) + tuple(t.shape[2:]) != (first[0],) + tuple(first[2:]):
            raise ValueError(
                f"concat_channels spatial/batch mismatch: {first} vs {t.shape}"
            )
    out_data = np.concatenate([t.data for t in xs], axis=1)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and _tracked(*xs):
        sizes = [t.shape[1] for t in xs]

        def bwd(g):
            start = 0
            for t, c in zip(xs, sizes):
                t.accumulate_grad(g[:, start:start + c])
                start += c

        tape.record("concat", out, tuple(xs), bwd)
    return out


def reduce_mean(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))
    tape = active_tape()
    if tape is not None and _tracked(x):
        inv_n = 1.0 / x.data.size

        def bwd(g):
            x.accumulate_grad(np.full_like(x.data, g.reshape(()) * inv_n))

        tape.record("mean", out, (x,), bwd)
    return out


def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    tape = active_tape()
    if tape is not None and _tracked(x):

        def bwd(g):
            x.accumulate_grad(np.full_like(x.data, g.reshape(())))

        tape.record("sum", out, (x,), bwd)
    return out


def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(x.data.reshape(shape))
    tape = active_tape()
    if tape is not None and _tracked(x):
        orig = x.data.shape

        def bwd(g):
            x.accumulate_grad(g.reshape(orig))

        tape.record("reshape", out, (x,), bwd)
    return out
