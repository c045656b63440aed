"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major NumPy array (float32 for training,
float64 for gradient and consistency checks). Operations executed while a
:class:`Tape` is active record themselves; :func:`backward` replays the
tape in reverse and returns a gradient for every requires-grad leaf.

Forward results are checked for NaN/Inf while finite checks are enabled
(the default): divergence should fail fast, at the op that produced it.
"""

from __future__ import annotations

import numpy as np

from .kernels import active as K

_FLOAT_DTYPES = (np.float32, np.float64)
_finite_checks = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf assertions on op outputs; returns the previous value."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


class Tensor:
    """Immutable-by-convention dense array plus autodiff metadata."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, rg={self.requires_grad})"

    # operator sugar; all routing through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def tensor(data, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def normal(rng, shape, dtype=np.float32, requires_grad=False) -> Tensor:
    """Standard-normal draws from a deterministic stream (see lapflow.rng)."""
    return Tensor(rng.normal(shape, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Execution-ordered record of differentiable operations.

    Use as a context manager; ops executed inside record themselves when at
    least one input requires grad. Nested tapes record to the innermost.
    """

    def __init__(self):
        self.nodes = []
        self._produced = set()
        self._leaves = {}

    def watch(self, tensors):
        """Register leaves up front so unused ones still get zero grads."""
        for t in tensors:
            if t.requires_grad:
                self._leaves[id(t)] = t

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


_TAPE_STACK: list[Tape] = []


def _record(out_data, inputs, make_vjp, name):
    """Wrap a forward result, recording a node if a tape is listening."""
    if _finite_checks and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{name}'")
    tape = _TAPE_STACK[-1] if _TAPE_STACK else None
    rg = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = rg
    if rg:
        needs = tuple(t.requires_grad for t in inputs)
        tape.nodes.append(_Node(out, inputs, make_vjp(needs)))
        tape._produced.add(id(out))
        for t in inputs:
            if t.requires_grad and id(t) not in tape._produced:
                tape._leaves[id(t)] = t
    return out


def backward(tape: Tape, loss: Tensor):
    """Reverse pass over the tape; returns {leaf Tensor: gradient array}.

    Every requires-grad leaf seen by the tape gets an entry; leaves the
    loss does not reach get zeros.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            tid = id(t)
            if tid in grads:
                grads[tid] = grads[tid] + gi
            else:
                grads[tid] = gi
    out = {}
    for tid, leaf in tape._leaves.items():
        g = grads.get(tid)
        out[leaf] = np.zeros_like(leaf.data) if g is None else g
    return out


# --------------------------------------------------------------------------
# elementwise / broadcast ops
# --------------------------------------------------------------------------

def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of NumPy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    out = a.data + b.data

    def make_vjp(needs):
        def vjp(g):
            return (_unbroadcast(g, a.shape) if needs[0] else None,
                    _unbroadcast(g, b.shape) if needs[1] else None)
        return vjp

    return _record(out, (a, b), make_vjp, "add")


def sub(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    out = a.data - b.data

    def make_vjp(needs):
        def vjp(g):
            return (_unbroadcast(g, a.shape) if needs[0] else None,
                    _unbroadcast(-g, b.shape) if needs[1] else None)
        return vjp

    return _record(out, (a, b), make_vjp, "sub")


def mul(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def make_vjp(needs):
        def vjp(g):
            return (_unbroadcast(g * bd, a.shape) if needs[0] else None,
                    _unbroadcast(g * ad, b.shape) if needs[1] else None)
        return vjp

    return _record(out, (a, b), make_vjp, "mul")


def matmul(a: Tensor, b: Tensor):
    """Matrix product with NumPy batch broadcasting on leading axes."""
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def make_vjp(needs):
        def vjp(g):
            ga = gb = None
            if needs[0]:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            if needs[1]:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
            return ga, gb
        return vjp

    return _record(out, (a, b), make_vjp, "matmul")


# --------------------------------------------------------------------------
# kernel-backed ops
# --------------------------------------------------------------------------

def _rows(x):
    """View an array as contiguous [rows, last_axis]."""
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def layernorm(x: Tensor, eps: float = 1e-6):
    """Affine-free layer normalization over the last axis."""
    if x.shape[-1] < 1:
        raise ValueError("layernorm needs a non-empty last axis")
    x2 = _rows(x.data)
    y2, inv_std = K.layernorm_fw(x2, eps)
    out = y2.reshape(x.shape)

    def make_vjp(needs):
        def vjp(g):
            dx = K.layernorm_bw(y2, inv_std, _rows(g))
            return (dx.reshape(x.shape),)
        return vjp

    return _record(out, (x,), make_vjp, "layernorm")


def softmax_masked(logits: Tensor, mask):
    """Softmax over the last axis of ``logits + mask``.

    mask is a plain array of 0 / -inf whose leading shape broadcasts along
    rows (a [n, n] mask applies per query position of [..., n, n] logits).
    Masked entries are exactly zero in the output; a fully masked row is an
    error because it means the caller built an invalid attention mask.
    """
    mask = np.ascontiguousarray(mask, dtype=logits.dtype)
    m2 = mask.reshape(-1, mask.shape[-1])
    x2 = _rows(logits.data)
    if x2.shape[0] % m2.shape[0] != 0:
        raise ValueError(f"mask rows {m2.shape} do not tile logits rows {x2.shape}")
    p2 = K.masked_softmax_fw(x2, m2)
    out = p2.reshape(logits.shape)

    def make_vjp(needs):
        def vjp(g):
            dx = K.softmax_bw(p2, _rows(g))
            return (dx.reshape(logits.shape),)
        return vjp

    return _record(out, (logits,), make_vjp, "softmax_masked")


def gelu(x: Tensor):
    xf = x.data.reshape(-1)
    out = K.gelu_fw(xf).reshape(x.shape)

    def make_vjp(needs):
        def vjp(g):
            return (K.gelu_bw(xf, g.reshape(-1)).reshape(x.shape),)
        return vjp

    return _record(out, (x,), make_vjp, "gelu")


def silu(x: Tensor):
    xf = x.data.reshape(-1)
    out = K.silu_fw(xf).reshape(x.shape)

    def make_vjp(needs):
        def vjp(g):
            return (K.silu_bw(xf, g.reshape(-1)).reshape(x.shape),)
        return vjp

    return _record(out, (x,), make_vjp, "silu")


# --------------------------------------------------------------------------
# shape ops
# --------------------------------------------------------------------------

def reshape(x: Tensor, shape):
    out = np.ascontiguousarray(x.data.reshape(shape))
    old = x.shape

    def make_vjp(needs):
        def vjp(g):
            return (g.reshape(old),)
        return vjp

    return _record(out, (x,), make_vjp, "reshape")


def transpose(x: Tensor, axes):
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def make_vjp(needs):
        def vjp(g):
            return (np.ascontiguousarray(g.transpose(inv)),)
        return vjp

    return _record(out, (x,), make_vjp, "transpose")


def concat(tensors, axis):
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def make_vjp(needs):
        def vjp(g):
            parts = np.split(g, splits, axis=axis)
            return tuple(p if need else None for p, need in zip(parts, needs))
        return vjp

    return _record(out, tensors, make_vjp, "concat")


def narrow(x: Tensor, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])

    def make_vjp(needs):
        def vjp(g):
            full = np.zeros_like(x.data)
            full[idx] = g
            return (full,)
        return vjp

    return _record(out, (x,), make_vjp, "narrow")


def split(x: Tensor, sizes, axis):
    """Split into consecutive chunks of the given sizes along axis."""
    outs = []
    start = 0
    for s in sizes:
        outs.append(narrow(x, axis, start, s))
        start += s
    if start != x.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis {axis} of {x.shape}")
    return outs


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False):
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def make_vjp(needs):
        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape).astype(x.dtype, copy=True),)
        return vjp

    return _record(out, (x,), make_vjp, "sum")


def tmean(x: Tensor, axis=None, keepdims=False):
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    shape = x.shape
    n = x.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])

    def make_vjp(needs):
        def vjp(g):
            if axis is None:
                full = np.broadcast_to(g, shape)
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                full = np.broadcast_to(gg, shape)
            return ((full / n).astype(x.dtype, copy=False),)
        return vjp

    return _record(out, (x,), make_vjp, "mean")


# --------------------------------------------------------------------------
# lookup and spatial ops
# --------------------------------------------------------------------------

def embedding(table: Tensor, idx):
    """Row gather: out[i] = table[idx[i]]; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table {table.shape}")
    out = table.data[idx]

    def make_vjp(needs):
        def vjp(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            return (gt,)
        return vjp

    return _record(out, (table,), make_vjp, "embedding")


def _down2_arr(x):
    h, w = x.shape[-2], x.shape[-1]
    r = x.reshape(x.shape[:-2] + (h // 2, 2, w // 2, 2))
    return r.mean(axis=(-3, -1))


def _up2_arr(x):
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


def down2(x: Tensor):
    """2x2 average pooling of the trailing spatial axes."""
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ValueError(f"down2 needs even spatial dims, got {h}x{w}")
    out = _down2_arr(x.data)

    def make_vjp(needs):
        def vjp(g):
            return ((_up2_arr(g) * 0.25).astype(x.dtype, copy=False),)
        return vjp

    return _record(out, (x,), make_vjp, "down2")


def up2(x: Tensor):
    """2x nearest-neighbor upsampling of the trailing spatial axes."""
    out = _up2_arr(x.data)

    def make_vjp(needs):
        def vjp(g):
            # each input pixel fans out to a 2x2 block: backward is block-sum
            return ((_down2_arr(g) * 4.0).astype(x.dtype, copy=False),)
        return vjp

    return _record(out, (x,), make_vjp, "up2")


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def grad_check(f, xs, h=1e-5):
    """Max relative error between tape gradients and central differences.

    f maps the tensors in ``xs`` to a scalar Tensor; xs must be float64 for
    the finite-difference oracle to have headroom. Error is measured as
    |analytic - numeric| / max(1, |analytic|), maximized over coordinates.
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    for x in xs:
        if x.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        x.requires_grad = True

    with Tape() as tape:
        loss = f(*xs)
    grads = backward(tape, loss)

    worst = 0.0
    for x in xs:
        analytic = grads[x]
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*xs).data)
            flat[i] = orig - h
            fm = float(f(*xs).data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst
