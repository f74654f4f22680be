"""
Hot inner-loop kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``LATENTPLAN_NUMBA`` is not
set to ``0``. Both paths compute the same math; the numpy path is the
reference and the tests run every kernel through both.
"""

import math
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def dec(f):
            return f

        return dec if not args or not callable(args[0]) else args[0]


GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


# -----------------------------------------------------------------------------
# numpy reference kernels
# -----------------------------------------------------------------------------


def _layernorm_fwd_np(x, gamma, beta, eps):
    """x (N, D) -> (y, mean, rstd)."""
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[:, None] * gamma + beta
    return y, mean, rstd


def _layernorm_bwd_np(dy, x, mean, rstd, gamma):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    g = dy * gamma
    d = x.shape[1]
    dx = rstd[:, None] * (
        g - g.sum(axis=1, keepdims=True) / d - xhat * (g * xhat).sum(axis=1, keepdims=True) / d
    )
    return dx, dgamma, dbeta


def _gelu_fwd_np(x):
    """Returns (gelu(x), tanh term) so backward can reuse the tanh."""
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd_np(x, t, dy):
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def _causal_softmax_fwd_np(s):
    """Row-wise softmax of s (N, T, T) where row i only sees columns j <= i."""
    t = s.shape[-1]
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    z = np.where(mask, -np.inf, s)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _causal_softmax_bwd_np(p, dp):
    return p * (dp - (p * dp).sum(axis=-1, keepdims=True))


def _xent_fwd_np(logits, targets, weights):
    """Weighted sum of -log softmax(logits)[target]; rows with target < 0 are skipped."""
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    lse = (m + np.log(s))[:, 0]
    valid = targets >= 0
    safe = np.where(valid, targets, 0)
    picked = logits[np.arange(logits.shape[0]), safe]
    loss = float(np.sum(np.where(valid, weights * (lse - picked), 0.0)))
    return loss, probs


def _xent_bwd_np(probs, targets, weights, g):
    valid = targets >= 0
    d = probs * (weights * valid)[:, None]
    rows = np.nonzero(valid)[0]
    d[rows, targets[rows]] -= weights[rows]
    return d * g


def _scatter_add_rows_np(out, idx, src):
    np.add.at(out, idx, src)
    return out


def _levenshtein_np(a, b):
    n, m = len(a), len(b)
    prev = np.arange(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        cur = np.empty(m + 1, dtype=np.int64)
        cur[0] = i
        sub = prev[:-1] + (b != a[i - 1])
        for j in range(1, m + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub[j - 1])
        prev = cur
    return int(prev[m])


# -----------------------------------------------------------------------------
# numba kernels
# -----------------------------------------------------------------------------


@njit(cache=True)
def _layernorm_fwd_nb(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    mean = np.empty(n)
    rstd = np.empty(n)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / math.sqrt(var + eps)
        mean[i] = mu
        rstd[i] = r
        for j in range(d):
            y[i, j] = (x[i, j] - mu) * r * gamma[j] + beta[j]
    return y, mean, rstd


@njit(cache=True)
def _layernorm_bwd_nb(dy, x, mean, rstd, gamma):
    n, d = x.shape
    dx = np.empty_like(x)
    dgamma = np.zeros(d)
    dbeta = np.zeros(d)
    for i in range(n):
        r = rstd[i]
        mu = mean[i]
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            xh = (x[i, j] - mu) * r
            g = dy[i, j] * gamma[j]
            s1 += g
            s2 += g * xh
            dgamma[j] += dy[i, j] * xh
            dbeta[j] += dy[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            xh = (x[i, j] - mu) * r
            dx[i, j] = r * (dy[i, j] * gamma[j] - s1 - xh * s2)
    return dx, dgamma, dbeta


@njit(cache=True)
def _tanh(z):
    # libm tanh is ~3x slower than this in a scalar loop; exp overflow gives the right limits
    return 1.0 - 2.0 / (math.exp(2.0 * z) + 1.0)


@njit(cache=True)
def _gelu_fwd_nb(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    th = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        t = _tanh(GELU_C * (v + GELU_A * v * v * v))
        th[i] = t
        out[i] = 0.5 * v * (1.0 + t)
    return out.reshape(x.shape), th.reshape(x.shape)


@njit(cache=True)
def _gelu_bwd_nb(x, th, dy):
    fx = x.ravel()
    ft = th.ravel()
    fd = dy.ravel()
    out = np.empty_like(fx)
    for i in range(fx.size):
        v = fx[i]
        t = ft[i]
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        out[i] = fd[i] * (0.5 * (1.0 + t) + 0.5 * v * dt)
    return out.reshape(x.shape)


@njit(cache=True)
def _causal_softmax_fwd_nb(s):
    n, t, _ = s.shape
    p = np.zeros_like(s)
    for b in range(n):
        for i in range(t):
            m = s[b, i, 0]
            for j in range(1, i + 1):
                if s[b, i, j] > m:
                    m = s[b, i, j]
            tot = 0.0
            for j in range(i + 1):
                e = math.exp(s[b, i, j] - m)
                p[b, i, j] = e
                tot += e
            for j in range(i + 1):
                p[b, i, j] /= tot
    return p


@njit(cache=True)
def _causal_softmax_bwd_nb(p, dp):
    n, t, _ = p.shape
    ds = np.zeros_like(p)
    for b in range(n):
        for i in range(t):
            dot = 0.0
            for j in range(i + 1):
                dot += p[b, i, j] * dp[b, i, j]
            for j in range(i + 1):
                ds[b, i, j] = p[b, i, j] * (dp[b, i, j] - dot)
    return ds


@njit(cache=True)
def _xent_fwd_nb(logits, targets, weights):
    n, c = logits.shape
    probs = np.empty_like(logits)
    loss = 0.0
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(c):
            e = math.exp(logits[i, j] - m)
            probs[i, j] = e
            s += e
        for j in range(c):
            probs[i, j] /= s
        if targets[i] >= 0:
            loss += weights[i] * (m + math.log(s) - logits[i, targets[i]])
    return loss, probs


@njit(cache=True)
def _xent_bwd_nb(probs, targets, weights, g):
    n, c = probs.shape
    d = np.zeros_like(probs)
    for i in range(n):
        if targets[i] < 0:
            continue
        w = weights[i] * g
        for j in range(c):
            d[i, j] = probs[i, j] * w
        d[i, targets[i]] -= w
    return d


@njit(cache=True)
def _scatter_add_rows_nb(out, idx, src):
    n, d = src.shape
    for i in range(n):
        r = idx[i]
        for j in range(d):
            out[r, j] += src[i, j]
    return out


@njit(cache=True)
def _levenshtein_nb(a, b):
    n = a.shape[0]
    m = b.shape[0]
    prev = np.arange(m + 1)
    cur = np.empty(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            if prev[j - 1] + cost < best:
                best = prev[j - 1] + cost
            cur[j] = best
        for j in range(m + 1):
            prev[j] = cur[j]
    return prev[m]


# -----------------------------------------------------------------------------
# dispatch
# -----------------------------------------------------------------------------

_NUMPY = {
    "layernorm_fwd": _layernorm_fwd_np,
    "layernorm_bwd": _layernorm_bwd_np,
    "gelu_fwd": _gelu_fwd_np,
    "gelu_bwd": _gelu_bwd_np,
    "causal_softmax_fwd": _causal_softmax_fwd_np,
    "causal_softmax_bwd": _causal_softmax_bwd_np,
    "xent_fwd": _xent_fwd_np,
    "xent_bwd": _xent_bwd_np,
    "scatter_add_rows": _scatter_add_rows_np,
    "levenshtein": _levenshtein_np,
}

_NUMBA = {
    "layernorm_fwd": _layernorm_fwd_nb,
    "layernorm_bwd": _layernorm_bwd_nb,
    "gelu_fwd": _gelu_fwd_nb,
    "gelu_bwd": _gelu_bwd_nb,
    "causal_softmax_fwd": _causal_softmax_fwd_nb,
    "causal_softmax_bwd": _causal_softmax_bwd_nb,
    "xent_fwd": _xent_fwd_nb,
    "xent_bwd": lambda probs, targets, weights, g: _xent_bwd_nb(probs, targets, weights, float(g)),
    "scatter_add_rows": _scatter_add_rows_nb,
    "levenshtein": lambda a, b: int(_levenshtein_nb(a, b)),
}

BACKENDS = ("numpy", "numba") if HAS_NUMBA else ("numpy",)

_active = _NUMPY


def set_backend(name: str) -> None:
    """Select ``"numpy"`` or ``"numba"`` kernels for the whole process."""
    global _active
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        _active = _NUMBA
    elif name == "numpy":
        _active = _NUMPY
    else:
        raise ValueError(f"unknown backend {name!r}")


def get_backend() -> str:
    return "numba" if _active is _NUMBA else "numpy"


def _default_backend() -> str:
    flag = os.environ.get("LATENTPLAN_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off") or not HAS_NUMBA:
        return "numpy"
    return "numba"


set_backend(_default_backend())


def layernorm_fwd(x, gamma, beta, eps=1e-5):
    return _active["layernorm_fwd"](np.ascontiguousarray(x), gamma, beta, eps)


def layernorm_bwd(dy, x, mean, rstd, gamma):
    return _active["layernorm_bwd"](np.ascontiguousarray(dy), np.ascontiguousarray(x), mean, rstd, gamma)


def gelu_fwd(x):
    """Returns (gelu(x), tanh cache for gelu_bwd)."""
    return _active["gelu_fwd"](np.ascontiguousarray(x))


def gelu_bwd(x, t, dy):
    return _active["gelu_bwd"](np.ascontiguousarray(x), t, np.ascontiguousarray(dy))


def causal_softmax_fwd(s):
    return _active["causal_softmax_fwd"](np.ascontiguousarray(s))


def causal_softmax_bwd(p, dp):
    return _active["causal_softmax_bwd"](np.ascontiguousarray(p), np.ascontiguousarray(dp))


def xent_fwd(logits, targets, weights):
    return _active["xent_fwd"](
        np.ascontiguousarray(logits), np.asarray(targets, dtype=np.int64), np.asarray(weights, dtype=np.float64)
    )


def xent_bwd(probs, targets, weights, g):
    return _active["xent_bwd"](
        probs, np.asarray(targets, dtype=np.int64), np.asarray(weights, dtype=np.float64), g
    )


def scatter_add_rows(out, idx, src):
    """out[idx[i]] += src[i] with repeated indices accumulated; mutates and returns out."""
    return _active["scatter_add_rows"](out, np.asarray(idx, dtype=np.int64), np.ascontiguousarray(src))


def levenshtein(a, b) -> int:
    """Unit-cost edit distance between two integer sequences."""
    return _active["levenshtein"](np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))
