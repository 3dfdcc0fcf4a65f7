"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``FLORA_NUMBA`` is not
``0``. Both implementations are always importable (``*_np`` / ``*_nb``) so
tests and the benchmark can compare them directly.
"""
import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("FLORA_NUMBA", "1") != "0"

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def _njit(func):
    if not HAVE_NUMBA:
        return None
    return numba.njit(cache=True, fastmath=False)(func)


# ---------------------------------------------------------------- gelu (tanh form)
# 0.5 * (1 + tanh(u)) == sigmoid(2u), so one exp gives both value and slope.

def gelu_fwd_np(x):
    """Returns ``(gelu(x), d gelu / dx)``."""
    x2 = x * x
    u2 = (2.0 * _GELU_C) * x * (1.0 + _GELU_K * x2)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-u2))
    y = x * s
    d = s + y * (1.0 - s) * ((2.0 * _GELU_C) * (1.0 + 3.0 * _GELU_K * x2))
    return y, d


def _gelu_fwd_loop(x):
    flat = x.ravel()
    y = np.empty_like(flat)
    d = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        v2 = v * v
        u2 = 1.5957691216057308 * v * (1.0 + 0.044715 * v2)
        s = 1.0 / (1.0 + math.exp(-u2))
        yy = v * s
        y[i] = yy
        d[i] = s + yy * (1.0 - s) * (1.5957691216057308 * (1.0 + 0.134145 * v2))
    return y.reshape(x.shape), d.reshape(x.shape)


_gelu_fwd_nb = _njit(_gelu_fwd_loop)


def gelu_fwd_nb(x):
    return _gelu_fwd_nb(np.ascontiguousarray(x))


# ---------------------------------------------------------------- layer norm (last axis)

def layernorm_fwd_np(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd


def layernorm_bwd_np(g, xhat, rstd, gain):
    n = xhat.shape[-1]
    lead = tuple(range(g.ndim - 1))
    dgain = (g * xhat).sum(axis=lead)
    dbias = g.sum(axis=lead)
    gx = g * gain
    dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                 - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
    return dx, dgain, dbias


def _layernorm_fwd_loop(x2, gain, bias, eps):
    rows, n = x2.shape
    y = np.empty_like(x2)
    xhat = np.empty_like(x2)
    rstd = np.empty((rows, 1))
    for r in range(rows):
        mu = 0.0
        for j in range(n):
            mu += x2[r, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x2[r, j] - mu
            var += d * d
        var /= n
        s = 1.0 / math.sqrt(var + eps)
        rstd[r, 0] = s
        for j in range(n):
            h = (x2[r, j] - mu) * s
            xhat[r, j] = h
            y[r, j] = h * gain[j] + bias[j]
    return y, xhat, rstd


def _layernorm_bwd_loop(g2, xhat, rstd, gain):
    rows, n = g2.shape
    dx = np.empty_like(g2)
    dgain = np.zeros(n)
    dbias = np.zeros(n)
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            gx = g2[r, j] * gain[j]
            m1 += gx
            m2 += gx * xhat[r, j]
            dgain[j] += g2[r, j] * xhat[r, j]
            dbias[j] += g2[r, j]
        m1 /= n
        m2 /= n
        s = rstd[r, 0]
        for j in range(n):
            dx[r, j] = s * (g2[r, j] * gain[j] - m1 - xhat[r, j] * m2)
    return dx, dgain, dbias


_layernorm_fwd_nb2 = _njit(_layernorm_fwd_loop)
_layernorm_bwd_nb2 = _njit(_layernorm_bwd_loop)


def layernorm_fwd_nb(x, gain, bias, eps):
    shape = x.shape
    y, xhat, rstd = _layernorm_fwd_nb2(np.ascontiguousarray(x).reshape(-1, shape[-1]),
                                       gain, bias, eps)
    return y.reshape(shape), xhat.reshape(shape), rstd.reshape(shape[:-1] + (1,))


def layernorm_bwd_nb(g, xhat, rstd, gain):
    shape = g.shape
    n = shape[-1]
    dx, dgain, dbias = _layernorm_bwd_nb2(np.ascontiguousarray(g).reshape(-1, n),
                                          xhat.reshape(-1, n), rstd.reshape(-1, 1), gain)
    return dx.reshape(shape), dgain, dbias


# ---------------------------------------------------------------- softmax (last axis)

def softmax_fwd_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd_np(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def _softmax_fwd_loop(x2):
    rows, n = x2.shape
    out = np.empty_like(x2)
    for r in range(rows):
        m = x2[r, 0]
        for j in range(1, n):
            if x2[r, j] > m:
                m = x2[r, j]
        s = 0.0
        for j in range(n):
            e = math.exp(x2[r, j] - m)
            out[r, j] = e
            s += e
        for j in range(n):
            out[r, j] /= s
    return out


def _softmax_bwd_loop(y2, g2):
    rows, n = y2.shape
    out = np.empty_like(y2)
    for r in range(rows):
        dot = 0.0
        for j in range(n):
            dot += g2[r, j] * y2[r, j]
        for j in range(n):
            out[r, j] = y2[r, j] * (g2[r, j] - dot)
    return out


_softmax_fwd_nb2 = _njit(_softmax_fwd_loop)
_softmax_bwd_nb2 = _njit(_softmax_bwd_loop)


def softmax_fwd_nb(x):
    shape = x.shape
    return _softmax_fwd_nb2(np.ascontiguousarray(x).reshape(-1, shape[-1])).reshape(shape)


def softmax_bwd_nb(y, g):
    shape = y.shape
    n = shape[-1]
    return _softmax_bwd_nb2(np.ascontiguousarray(y).reshape(-1, n),
                            np.ascontiguousarray(g).reshape(-1, n)).reshape(shape)


# ---------------------------------------------------------------- detection sweep

def sweep_counts_np(pos_sorted, neg_sorted, thresholds):
    """Integer error counts at each threshold.

    Returns ``(n_fr, n_fa)`` where ``n_fr[i]`` counts positives scoring strictly
    below ``thresholds[i]`` and ``n_fa[i]`` counts negatives scoring at or above it.
    """
    n_fr = np.searchsorted(pos_sorted, thresholds, side="left")
    n_fa = neg_sorted.size - np.searchsorted(neg_sorted, thresholds, side="left")
    return n_fr.astype(np.int64), n_fa.astype(np.int64)


def _sweep_counts_loop(pos_sorted, neg_sorted, thresholds):
    m = thresholds.size
    n_fr = np.empty(m, dtype=np.int64)
    n_fa = np.empty(m, dtype=np.int64)
    i = 0
    k = 0
    for t in range(m):
        th = thresholds[t]
        while i < pos_sorted.size and pos_sorted[i] < th:
            i += 1
        while k < neg_sorted.size and neg_sorted[k] < th:
            k += 1
        n_fr[t] = i
        n_fa[t] = neg_sorted.size - k
    return n_fr, n_fa


sweep_counts_nb = _njit(_sweep_counts_loop)


def _pick(name):
    impl = globals()[name + ("_nb" if USE_NUMBA else "_np")]
    return impl


gelu_fwd = _pick("gelu_fwd")
layernorm_fwd = _pick("layernorm_fwd")
layernorm_bwd = _pick("layernorm_bwd")
softmax_fwd = _pick("softmax_fwd")
softmax_bwd = _pick("softmax_bwd")
sweep_counts = _pick("sweep_counts")
