"""Float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape, operations are plain
numpy calls, which is what evaluation uses.
"""
import threading

import numpy as np

from . import _kernels

LN_EPS = 1e-5


class DimensionError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_from_op", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._from_op = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- tape

_state = threading.local()


def _stack():
    st = getattr(_state, "tapes", None)
    if st is None:
        st = _state.tapes = []
    return st


def active_tape():
    st = _stack()
    return st[-1] if st else None


class Tape:
    """Records operations in execution order; replayed backwards once."""

    def __init__(self):
        self.entries = []
        self._done = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def record(self, out, inputs, backward):
        if self._done:
            raise TapeError("tape already replayed; start a new Tape")
        self.entries.append((out, inputs, backward))

    def reset(self):
        self.entries = []
        self._done = False

    def backward(self, loss, seed=None):
        if self._done:
            raise TapeError("backward called twice on the same tape")
        self._done = True
        if seed is None:
            if loss.data.size != 1:
                raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(seed, dtype=np.float64)}
        leaves = {}
        for out, inputs, backward in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = backward(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if not t._from_op:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads[key]
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.entries = []


def _make(data, inputs, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._from_op = True
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    else:
        out.requires_grad = False
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- linear algebra

def _mm(x, w):
    # numpy loops over leading axes of an N-d @ 2-d product; one flat GEMM is faster
    if x.ndim > 2 and w.ndim == 2:
        return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[1],))
    return x @ w


def matmul(a, b):
    """Matrix product with numpy batching rules over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(_mm(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(_mm(ad, bd), (a, b), backward)


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward)


def take_rows(table, ids):
    """Gather rows of a 2-D table by integer ids (embedding lookup)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (acc,)

    return _make(table.data[ids], (table,), backward)


def select(x, index):
    """Basic-slicing view ``x[index]``; gradient scattered back into zeros."""
    x = as_tensor(x)

    def backward(g):
        acc = np.zeros_like(x.data)
        acc[index] = g
        return (acc,)

    return _make(np.ascontiguousarray(x.data[index]), (x,), backward)


# ---------------------------------------------------------------- elementwise

def _check_same(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    """Elementwise sum. ``b`` may broadcast along leading axes (bias add)."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}") from None
    if out.shape != a.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(out, (a, b), lambda g: (g, _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def add_const(x, c):
    """Add a constant array (no gradient), e.g. an attention mask bias."""
    x = as_tensor(x)
    return _make(x.data + c, (x,), lambda g: (g,))


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def gelu(x):
    x = as_tensor(x)
    y, slope = _kernels.gelu_fwd(x.data)
    return _make(y, (x,), lambda g: (g * slope,))


ACTIVATIONS = {"gelu": gelu, "relu": relu, "tanh": tanh}
ACTIVATION_IDS = {"gelu": 0, "relu": 1, "tanh": 2}


def elementwise(op, *args):
    """Dispatch by name: add, mul, relu, gelu, tanh."""
    fns = {"add": add, "mul": mul, **ACTIVATIONS}
    if op not in fns:
        raise ValueError(f"unknown elementwise op {op!r}")
    return fns[op](*args)


# ---------------------------------------------------------------- reductions & normalisation

def sum_all(x):
    x = as_tensor(x)
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def softmax(x, axis=-1):
    x = as_tensor(x)
    nd = x.ndim
    axis = axis % nd if nd else 0
    if nd == 0:
        raise DimensionError("softmax needs at least one axis")
    if axis != nd - 1:
        moved = np.moveaxis(x.data, axis, -1)
        y = np.moveaxis(_kernels.softmax_fwd(np.ascontiguousarray(moved)), -1, axis)

        def backward(g):
            ym = np.ascontiguousarray(np.moveaxis(y, axis, -1))
            gm = np.ascontiguousarray(np.moveaxis(g, axis, -1))
            return (np.moveaxis(_kernels.softmax_bwd(ym, gm), -1, axis),)

        return _make(np.ascontiguousarray(y), (x,), backward)
    y = _kernels.softmax_fwd(x.data)
    return _make(y, (x,), lambda g: (_kernels.softmax_bwd(y, np.ascontiguousarray(g)),))


def layer_norm(x, gain, bias, eps=LN_EPS):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs width {n}")
    y, xhat, rstd = _kernels.layernorm_fwd(x.data, gain.data, bias.data, eps)

    def backward(g):
        return _kernels.layernorm_bwd(np.ascontiguousarray(g), xhat, rstd, gain.data)

    return _make(y, (x, gain, bias), backward)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    batch, vocab = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(f"target id out of range for vocab {vocab}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(batch)
    loss = np.mean(lse - z[rows, targets])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / batch),)

    return _make(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------- gradient checking

def grad_check(f, x, h=1e-5):
    """Max relative error between tape gradient and central differences.

    ``f`` maps a Tensor to a scalar Tensor. ``x`` is perturbed in place and
    restored.
    """
    x = as_tensor(x)
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        out = f(x)
    tape.backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    x.requires_grad = was

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
