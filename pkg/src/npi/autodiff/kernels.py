"""Row-wise numeric kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports cleanly and the environment
variable ``NPI_NUMBA`` is not set to ``0``. Both paths take and return
contiguous arrays of the caller's dtype (float32 or float64).
"""

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("NPI_NUMBA", "1") != "0"

# kernels whose numba loop loses to numpy's vectorized transcendental functions
NUMPY_ONLY = frozenset({"gelu_fwd", "gelu_bwd", "softmax_fwd"})

_GELU_C = 0.7978845608028654  # sqrt(2/pi)


# --------------------------------------------------------------------------
# numpy reference implementations
# --------------------------------------------------------------------------


def layer_norm_fwd_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layer_norm_bwd_np(g, xhat, rstd, gain):
    gx = g * gain
    n = xhat.shape[1]
    a = gx.sum(axis=1, keepdims=True)
    b = (gx * xhat).sum(axis=1, keepdims=True)
    dx = (gx - a / n - xhat * (b / n)) * rstd[:, None]
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def gelu_fwd_np(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu_bwd_np(g, x):
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax_fwd_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd_np(g, y):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def scatter_add_rows_np(out, idx, rows):
    np.add.at(out, idx, rows)
    return out


def cooccurrence_np(ids, sent_ids, n_words, window):
    counts = np.zeros((n_words, n_words), dtype=np.float64)
    n = ids.shape[0]
    for off in range(1, window + 1):
        if off >= n:
            break
        a, b = ids[:-off], ids[off:]
        same = sent_ids[:-off] == sent_ids[off:]
        w = 1.0 / off
        np.add.at(counts, (a[same], b[same]), w)
        np.add.at(counts, (b[same], a[same]), w)
    return counts


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _layer_norm_fwd_nb(x, gain, bias, eps):
        r, n = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(r, dtype=x.dtype)
        for i in range(r):
            mu = 0.0
            for j in range(n):
                mu += x[i, j]
            mu /= n
            var = 0.0
            for j in range(n):
                d = x[i, j] - mu
                var += d * d
            var /= n
            s = 1.0 / np.sqrt(var + eps)
            rstd[i] = s
            for j in range(n):
                h = (x[i, j] - mu) * s
                xhat[i, j] = h
                y[i, j] = h * gain[j] + bias[j]
        return y, xhat, rstd

    @njit(cache=True)
    def _layer_norm_bwd_nb(g, xhat, rstd, gain):
        r, n = g.shape
        dx = np.empty_like(g)
        dgain = np.zeros(n, dtype=np.float64)
        dbias = np.zeros(n, dtype=np.float64)
        for i in range(r):
            a = 0.0
            b = 0.0
            for j in range(n):
                gx = g[i, j] * gain[j]
                a += gx
                b += gx * xhat[i, j]
                dgain[j] += g[i, j] * xhat[i, j]
                dbias[j] += g[i, j]
            a /= n
            b /= n
            for j in range(n):
                dx[i, j] = (g[i, j] * gain[j] - a - xhat[i, j] * b) * rstd[i]
        return dx, dgain.astype(g.dtype), dbias.astype(g.dtype)

    @njit(cache=True)
    def _gelu_fwd_nb(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.shape[0]):
            v = flat[i]
            out[i] = 0.5 * v * (1.0 + np.tanh(_GELU_C * (v + 0.044715 * v * v * v)))
        return out.reshape(x.shape)

    @njit(cache=True)
    def _gelu_bwd_nb(g, x):
        gf = g.ravel()
        xf = x.ravel()
        out = np.empty_like(xf)
        for i in range(xf.shape[0]):
            v = xf[i]
            t = np.tanh(_GELU_C * (v + 0.044715 * v * v * v))
            du = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
            out[i] = gf[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        return out.reshape(x.shape)

    @njit(cache=True)
    def _softmax_fwd_nb(x):
        r, n = x.shape
        y = np.empty_like(x)
        for i in range(r):
            m = x[i, 0]
            for j in range(1, n):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(n):
                e = np.exp(x[i, j] - m)
                y[i, j] = e
                s += e
            for j in range(n):
                y[i, j] = y[i, j] / s
        return y

    @njit(cache=True)
    def _softmax_bwd_nb(g, y):
        r, n = g.shape
        dx = np.empty_like(g)
        for i in range(r):
            dot = 0.0
            for j in range(n):
                dot += g[i, j] * y[i, j]
            for j in range(n):
                dx[i, j] = y[i, j] * (g[i, j] - dot)
        return dx

    @njit(cache=True)
    def _scatter_add_rows_nb(out, idx, rows):
        for i in range(idx.shape[0]):
            k = idx[i]
            for j in range(rows.shape[1]):
                out[k, j] += rows[i, j]
        return out

    @njit(cache=True)
    def _cooccurrence_nb(ids, sent_ids, n_words, window):
        counts = np.zeros((n_words, n_words), dtype=np.float64)
        n = ids.shape[0]
        for i in range(n):
            for off in range(1, window + 1):
                j = i + off
                if j >= n or sent_ids[j] != sent_ids[i]:
                    break
                w = 1.0 / off
                counts[ids[i], ids[j]] += w
                counts[ids[j], ids[i]] += w
        return counts


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


def layer_norm_fwd(x, gain, bias, eps):
    """Normalize each row of a 2-D array; returns (y, xhat, rstd)."""
    if USE_NUMBA:
        return _layer_norm_fwd_nb(x, gain, bias, x.dtype.type(eps))
    return layer_norm_fwd_np(x, gain, bias, eps)


def layer_norm_bwd(g, xhat, rstd, gain):
    if USE_NUMBA:
        return _layer_norm_bwd_nb(g, xhat, rstd, gain)
    return layer_norm_bwd_np(g, xhat, rstd, gain)


def gelu_fwd(x):
    if USE_NUMBA and "gelu_fwd" not in NUMPY_ONLY:
        return _gelu_fwd_nb(np.ascontiguousarray(x))
    return gelu_fwd_np(x)


def gelu_bwd(g, x):
    if USE_NUMBA and "gelu_bwd" not in NUMPY_ONLY:
        return _gelu_bwd_nb(np.ascontiguousarray(g), np.ascontiguousarray(x))
    return gelu_bwd_np(g, x)


def softmax_fwd(x):
    if USE_NUMBA and "softmax_fwd" not in NUMPY_ONLY:
        return _softmax_fwd_nb(x)
    return softmax_fwd_np(x)


def softmax_bwd(g, y):
    if USE_NUMBA:
        return _softmax_bwd_nb(g, y)
    return softmax_bwd_np(g, y)


def scatter_add_rows(out, idx, rows):
    """out[idx[i]] += rows[i], with repeated indices accumulating."""
    if USE_NUMBA:
        return _scatter_add_rows_nb(out, idx, rows)
    return scatter_add_rows_np(out, idx, rows)


def cooccurrence(ids, sent_ids, n_words, window):
    """Symmetric 1/distance-weighted co-occurrence counts within sentences."""
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    sent_ids = np.ascontiguousarray(sent_ids, dtype=np.int64)
    if USE_NUMBA:
        return _cooccurrence_nb(ids, sent_ids, n_words, window)
    return cooccurrence_np(ids, sent_ids, n_words, window)
