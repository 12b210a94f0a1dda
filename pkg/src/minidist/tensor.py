"""Reverse-mode autodiff on float64 numpy arrays.

A Tape records every differentiable op in append order; backward walks the
node list once in reverse, so topological order is implicit and no recursion
or sorting is needed. Tapes live for a single training step. Parameters are
leaf tensors with a GradAccumulator; accumulators collect gradient sums and
fire their post hooks exactly once per backward pass in which the parameter
received a gradient, after its final contribution. Bucketed data-parallel
and sharded strategies attach to those hooks.

The active tape is thread local: every worker thread records and replays its
own graph without touching the others.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np
from scipy.special import erf

from .errors import ShapeMismatchError, StateError, ValidationError

_TLS = threading.local()
_TAPE_SERIAL = itertools.count(1)

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _active_tape():
    return getattr(_TLS, "tape", None)


class GradAccumulator:
    """Additive gradient buffer for one leaf tensor.

    post_hooks receive the owner's parameter_index (assigned by ParameterSet,
    None for free-standing tensors). Accumulation is additive across backward
    passes until zero() is called.
    """

    __slots__ = ("parameter_index", "accumulated", "post_hooks")

    def __init__(self):
        self.parameter_index = None
        self.accumulated = None
        self.post_hooks = []

    def _add(self, g):
        if self.accumulated is None:
            self.accumulated = np.array(g, dtype=np.float64)
        else:
            self.accumulated = self.accumulated + g

    def _fire(self):
        for hook in self.post_hooks:
            hook(self.parameter_index)

    def zero(self):
        if self.accumulated is not None:
            self.accumulated = np.zeros_like(self.accumulated)


class Tensor:
    """Immutable float64 array plus autodiff bookkeeping.

    values never change in place; assign() swaps in a fresh array and is only
    legal between steps (no tape holds the old value by then, or the caller
    does not care). requires_grad=True creates a GradAccumulator, marking the
    tensor as a leaf.
    """

    __slots__ = ("values", "requires_grad", "_acc", "_tape_serial", "_node_id")

    def __init__(self, values, requires_grad=False):
        arr = np.array(values, dtype=np.float64)
        arr.setflags(write=False)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self._acc = GradAccumulator() if requires_grad else None
        self._tape_serial = 0
        self._node_id = None

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        # internal fast path: takes ownership of arr, no copy
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.values = arr
        t.requires_grad = requires_grad
        t._acc = GradAccumulator() if requires_grad else None
        t._tape_serial = 0
        t._node_id = None
        return t

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def grad(self):
        return self._acc.accumulated if self._acc is not None else None

    @property
    def accumulator(self):
        return self._acc

    def item(self):
        if self.values.size != 1:
            raise ValidationError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.values)

    def zero_grad(self):
        if self._acc is not None:
            self._acc.zero()

    def assign(self, values):
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.values.shape:
            raise ShapeMismatchError(
                f"assign shape {arr.shape} does not match tensor shape {self.values.shape}"
            )
        arr.setflags(write=False)
        self.values = arr

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)


class _Node:
    __slots__ = ("op", "inputs", "fn", "leaf")

    def __init__(self, op, inputs, fn, leaf):
        self.op = op
        self.inputs = inputs
        self.fn = fn
        self.leaf = leaf


class Tape:
    """Append-only op record for one step; reverse sweep computes gradients."""

    __slots__ = ("serial", "_nodes", "_value_bytes", "_consumed")

    def __init__(self):
        self.serial = next(_TAPE_SERIAL)
        self._nodes = []
        self._value_bytes = 0
        self._consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise StateError("a tape is already active in this thread")
        _TLS.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _TLS.tape = None
        return False

    @property
    def node_count(self):
        return len(self._nodes)

    @property
    def activation_bytes(self):
        """Payload bytes of all recorded op outputs (leaves excluded)."""
        return self._value_bytes

    def _append(self, op, input_ids, fn, out_bytes, leaf=None):
        self._nodes.append(_Node(op, input_ids, fn, leaf))
        self._value_bytes += out_bytes
        return len(self._nodes) - 1

    def _register_leaf(self, tensor):
        nid = self._append("leaf", (), None, 0, leaf=tensor)
        tensor._tape_serial = self.serial
        tensor._node_id = nid
        return nid

    def node_op(self, node_id):
        return self._nodes[node_id].op

    def node_inputs(self, node_id):
        return self._nodes[node_id].inputs

    def leaf_id(self, tensor):
        if tensor._tape_serial == self.serial:
            return tensor._node_id
        return None

    def backward(self, root):
        """Accumulate d(root)/d(leaf) into every reachable leaf accumulator.

        Visits nodes exactly once in reverse append order. A leaf's hooks fire
        when its own node is visited, which is after every consumer (consumers
        always have larger indices), so the accumulated value is final.
        """
        if self._consumed:
            raise StateError("tape already consumed by a previous backward")
        if not isinstance(root, Tensor) or root._tape_serial != self.serial:
            raise StateError("backward root was not recorded on this tape")
        if root.values.size != 1:
            raise ValidationError(f"backward root must be scalar, got shape {root.shape}")
        self._consumed = True

        grads = [None] * len(self._nodes)
        grads[root._node_id] = np.ones_like(root.values)
        for idx in range(len(self._nodes) - 1, -1, -1):
            g = grads[idx]
            grads[idx] = None
            node = self._nodes[idx]
            if node.leaf is not None:
                if g is not None:
                    acc = node.leaf._acc
                    acc._add(g)
                    acc._fire()
                continue
            if g is None:
                continue
            for input_id, contrib in zip(node.inputs, node.fn(g)):
                if input_id is None or contrib is None:
                    continue
                if grads[input_id] is None:
                    grads[input_id] = contrib
                else:
                    # never in place: contrib may alias g or another slot
                    grads[input_id] = grads[input_id] + contrib


def backward(root):
    """Run backward on the thread's active tape."""
    tape = _active_tape()
    if tape is None:
        raise StateError("backward called without an active tape")
    tape.backward(root)


def _input_id(tape, t):
    if t._tape_serial == tape.serial:
        return t._node_id
    if t._acc is not None:
        return tape._register_leaf(t)
    return None


def _apply(op, inputs, out_values, fn):
    out = Tensor._wrap(out_values)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is None:
        return out
    ids = tuple(_input_id(tape, t) for t in inputs)
    if all(i is None for i in ids):
        return out
    out._node_id = tape._append(op, ids, fn, out_values.size * 8)
    out._tape_serial = tape.serial
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b):
    """Elementwise add; also accepts a trailing-axis bias ([n,d] + [d])."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.shape == bv.shape:
        def fn(g):
            return g, g
    elif av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]:
        def fn(g):
            return g, g.sum(axis=0)
    else:
        raise ShapeMismatchError(f"cannot add shapes {av.shape} and {bv.shape}")
    return _apply("add", (a, b), av + bv, fn)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.shape != bv.shape:
        raise ShapeMismatchError(f"cannot multiply shapes {av.shape} and {bv.shape}")

    def fn(g):
        return g * bv, g * av

    return _apply("mul", (a, b), av * bv, fn)


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)

    def fn(g):
        return (g * s,)

    return _apply("scale", (a,), a.values * s, fn)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatchError(f"cannot matmul shapes {av.shape} and {bv.shape}")

    def fn(g):
        return g @ bv.T, av.T @ g

    return _apply("matmul", (a, b), av @ bv, fn)


def transpose(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatchError(f"transpose needs a 2-d tensor, got shape {a.shape}")

    def fn(g):
        return (g.T,)

    return _apply("transpose", (a,), a.values.T.copy(), fn)


def sum_all(a):
    a = _as_tensor(a)
    shape = a.shape

    def fn(g):
        return (np.broadcast_to(g, shape),)

    return _apply("sum", (a,), a.values.sum(), fn)


def softmax_rows(x):
    """Row-wise softmax of a 2-d tensor; each output row sums to 1."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeMismatchError(f"softmax_rows needs a 2-d tensor, got shape {x.shape}")
    xv = x.values
    m = xv.max(axis=1, keepdims=True)
    e = np.exp(xv - m)
    y = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _apply("softmax_rows", (x,), y, fn)


def masked_softmax_rows(x, mask):
    """Softmax restricted to mask-true entries; masked entries get weight 0.

    Equivalent to adding -inf to masked scores before a plain softmax, but
    keeps every stored value finite. Each row must have at least one valid
    entry.
    """
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 2 or mask.shape != x.shape:
        raise ShapeMismatchError(
            f"masked_softmax_rows needs matching 2-d shapes, got {x.shape} and {mask.shape}"
        )
    if not mask.any(axis=1).all():
        raise ValidationError("masked_softmax_rows: a row has no valid entries")
    xv = np.where(mask, x.values, -np.inf)
    m = xv.max(axis=1, keepdims=True)
    e = np.exp(xv - m)
    y = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        # y is zero at masked entries, so their gradient is zero too
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _apply("masked_softmax_rows", (x,), y, fn)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to mean 0, variance 1, then apply gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    xv = x.values
    squeeze = xv.ndim == 1
    if squeeze:
        xv = xv.reshape(1, -1)
    if xv.ndim != 2:
        raise ShapeMismatchError(f"layer_norm needs a 1-d or 2-d tensor, got shape {x.shape}")
    d = xv.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError(
            f"layer_norm gain/bias shapes {gain.shape}/{bias.shape} do not match width {d}"
        )
    mu = xv.mean(axis=1, keepdims=True)
    var = xv.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = (xv - mu) * inv
    out = xn * gain.values + bias.values
    if squeeze:
        out = out.reshape(-1)

    def fn(g):
        gm = g.reshape(1, -1) if squeeze else g
        gh = gm * gain.values
        dx = inv * (gh - gh.mean(axis=1, keepdims=True)
                    - xn * (gh * xn).mean(axis=1, keepdims=True))
        if squeeze:
            dx = dx.reshape(-1)
        return dx, (gm * xn).sum(axis=0), gm.sum(axis=0)

    return _apply("layer_norm", (x, gain, bias), out, fn)


def gelu(x):
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    x = _as_tensor(x)
    xv = x.values
    cdf = 0.5 * (1.0 + erf(xv * _INV_SQRT2))
    out = xv * cdf

    def fn(g):
        pdf = np.exp(-0.5 * xv * xv) * _INV_SQRT_2PI
        return (g * (cdf + xv * pdf),)

    return _apply("gelu", (x,), out, fn)


def embed_rows(table, ids):
    """Gather rows of an embedding table; backward scatter-adds."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeMismatchError(f"embed_rows table must be 2-d, got shape {table.shape}")
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise ValidationError("embed_rows ids must be a 1-d integer array")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ValidationError(f"embed_rows id out of range for table with {n} rows")
    shape = table.shape

    def fn(g):
        dt = np.zeros(shape)
        np.add.at(dt, ids, g)
        return (dt,)

    return _apply("embed_rows", (table,), table.values[ids], fn)


def col_slice(x, start, stop):
    """Columns [start, stop) of a 2-d tensor."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeMismatchError(f"col_slice needs a 2-d tensor, got shape {x.shape}")
    if not (0 <= start < stop <= x.shape[1]):
        raise ValidationError(f"col_slice bounds [{start}, {stop}) invalid for width {x.shape[1]}")
    shape = x.shape

    def fn(g):
        dx = np.zeros(shape)
        dx[:, start:stop] = g
        return (dx,)

    return _apply("col_slice", (x,), x.values[:, start:stop], fn)


def concat_cols(parts):
    """Concatenate 2-d tensors along columns."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValidationError("concat_cols needs at least one tensor")
    rows = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != rows:
            raise ShapeMismatchError(
                f"concat_cols row counts differ: {[p.shape for p in parts]}"
            )
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def fn(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(widths)))

    return _apply("concat_cols", tuple(parts), np.concatenate([p.values for p in parts], axis=1), fn)


def dropout(x, rate, rng):
    """Inverted dropout; rate 0 is a true no-op (no tape node)."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def fn(g):
        return (g * mask,)

    return _apply("dropout", (x,), x.values * mask, fn)


def cross_entropy_next_token(logits, targets):
    """Total negative log-likelihood of targets under row-wise softmax.

    Returns (scalar loss tensor, token count). The caller divides by the
    token count; keeping the sum makes cross-worker merging exact.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise ShapeMismatchError(f"cross entropy logits must be 2-d, got shape {logits.shape}")
    if targets.ndim != 1 or not np.issubdtype(targets.dtype, np.integer):
        raise ValidationError("cross entropy targets must be a 1-d integer array")
    t, v = logits.shape
    if targets.shape[0] != t:
        raise ShapeMismatchError(
            f"cross entropy got {t} logit rows but {targets.shape[0]} targets"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValidationError(f"cross entropy target id out of range for vocab {v}")
    lv = logits.values
    m = lv.max(axis=1, keepdims=True)
    e = np.exp(lv - m)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    log_probs = (lv - m) - np.log(z)
    total = -log_probs[np.arange(t), targets].sum()

    def fn(g):
        d = p.copy()
        d[np.arange(t), targets] -= 1.0
        return (d * g,)

    return _apply("cross_entropy", (logits,), np.float64(total), fn), t
