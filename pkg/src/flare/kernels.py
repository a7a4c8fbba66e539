"""Hot numeric kernels with a numba backend and a pure-numpy fallback.

The training loop spends most of its time in layer normalization, row
softmax and GELU (forward and backward). Each primitive has two
implementations selected by the ``FLARE_BACKEND`` environment variable
("numba" or "numpy"; default "numba" when numba imports cleanly). The two
backends agree to floating-point tolerance, not bitwise; a fixed backend
is bit-deterministic run to run. Row-wise kernels take 2D (rows, dim)
arrays, GELU takes any shape. ``benchmarks/bench_kernels.py`` compares
the two backends.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - mirror environments without numba
    _HAS_NUMBA = False

# tanh-form GELU; same constants in both backends so they agree closely
_GELU_K0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_K1 = 0.044715


# ---------------------------------------------------------------- numpy --


def _layernorm_fwd_np(x, gamma, beta, eps):
    mu = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mu[:, None]) * rstd[:, None] * gamma + beta
    return y.astype(x.dtype, copy=False), mu.astype(x.dtype, copy=False), rstd.astype(x.dtype, copy=False)


def _layernorm_bwd_np(dy, x, gamma, mu, rstd):
    xhat = (x - mu[:, None]) * rstd[:, None]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx.astype(x.dtype, copy=False), dgamma.astype(gamma.dtype, copy=False), dbeta.astype(gamma.dtype, copy=False)


def _softmax_fwd_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_bwd_np(dy, y):
    inner = (dy * y).sum(axis=1, keepdims=True)
    return (y * (dy - inner)).astype(y.dtype, copy=False)


def _gelu_fwd_np(x):
    u = _GELU_K0 * (x + _GELU_K1 * x * x * x)
    return (0.5 * x * (1.0 + np.tanh(u))).astype(x.dtype, copy=False)


def _gelu_bwd_np(dy, x):
    u = _GELU_K0 * (x + _GELU_K1 * x * x * x)
    t = np.tanh(u)
    du = _GELU_K0 * (1.0 + 3.0 * _GELU_K1 * x * x)
    g = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    return (dy * g).astype(x.dtype, copy=False)


# ---------------------------------------------------------------- numba --

if _HAS_NUMBA:

    @njit(cache=True)
    def _layernorm_fwd_nb(x, gamma, beta, eps):
        n, d = x.shape
        y = np.empty_like(x)
        mu = np.empty(n, x.dtype)
        rstd = np.empty(n, x.dtype)
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += x[i, j]
            m = acc / d
            var = 0.0
            for j in range(d):
                c = x[i, j] - m
                var += c * c
            r = 1.0 / np.sqrt(var / d + eps)
            mu[i] = m
            rstd[i] = r
            for j in range(d):
                y[i, j] = (x[i, j] - m) * r * gamma[j] + beta[j]
        return y, mu, rstd

    @njit(cache=True)
    def _layernorm_bwd_nb(dy, x, gamma, mu, rstd):
        n, d = x.shape
        dx = np.empty_like(x)
        dgamma = np.zeros(d, gamma.dtype)
        dbeta = np.zeros(d, gamma.dtype)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                xh = (x[i, j] - mu[i]) * rstd[i]
                dxh = dy[i, j] * gamma[j]
                m1 += dxh
                m2 += dxh * xh
                dgamma[j] += dy[i, j] * xh
                dbeta[j] += dy[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                xh = (x[i, j] - mu[i]) * rstd[i]
                dxh = dy[i, j] * gamma[j]
                dx[i, j] = rstd[i] * (dxh - m1 - xh * m2)
        return dx, dgamma, dbeta

    @njit(cache=True)
    def _softmax_fwd_nb(x):
        n, d = x.shape
        y = np.empty_like(x)
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, d):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(d):
                e = np.exp(x[i, j] - mx)
                y[i, j] = e
                s += e
            for j in range(d):
                y[i, j] /= s
        return y

    @njit(cache=True)
    def _softmax_bwd_nb(dy, y):
        n, d = y.shape
        dx = np.empty_like(y)
        for i in range(n):
            inner = 0.0
            for j in range(d):
                inner += dy[i, j] * y[i, j]
            for j in range(d):
                dx[i, j] = y[i, j] * (dy[i, j] - inner)
        return dx

    # tanh(u) computed as sign(u) * (1 - e) / (1 + e) with e = exp(-2|u|):
    # scalar libm tanh is ~3x slower than exp here, the argument never
    # overflows, and the form is exactly odd, which keeps gelu's
    # g(x) - g(-x) = x identity tight

    @njit(cache=True)
    def _gelu_fwd_nb(x):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.size):
            v = flat_x[i]
            u = _GELU_K0 * (v + _GELU_K1 * v * v * v)
            e = np.exp(-2.0 * abs(u))
            t = (1.0 - e) / (1.0 + e)
            if u < 0.0:
                t = -t
            flat_o[i] = 0.5 * v * (1.0 + t)
        return out

    @njit(cache=True)
    def _gelu_bwd_nb(dy, x):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_d = dy.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.size):
            v = flat_x[i]
            u = _GELU_K0 * (v + _GELU_K1 * v * v * v)
            e = np.exp(-2.0 * abs(u))
            t = (1.0 - e) / (1.0 + e)
            if u < 0.0:
                t = -t
            du = _GELU_K0 * (1.0 + 3.0 * _GELU_K1 * v * v)
            flat_o[i] = flat_d[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        return out


# ------------------------------------------------------------- dispatch --

_IMPLS = {
    "numpy": {
        "layernorm_fwd": _layernorm_fwd_np,
        "layernorm_bwd": _layernorm_bwd_np,
        "softmax_fwd": _softmax_fwd_np,
        "softmax_bwd": _softmax_bwd_np,
        "gelu_fwd": _gelu_fwd_np,
        "gelu_bwd": _gelu_bwd_np,
    }
}
if _HAS_NUMBA:
    _IMPLS["numba"] = {
        "layernorm_fwd": _layernorm_fwd_nb,
        "layernorm_bwd": _layernorm_bwd_nb,
        "softmax_fwd": _softmax_fwd_nb,
        "softmax_bwd": _softmax_bwd_nb,
        "gelu_fwd": _gelu_fwd_nb,
        "gelu_bwd": _gelu_bwd_nb,
    }


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_IMPLS))


def _resolve_default() -> str:
    env = os.environ.get("FLARE_BACKEND", "").strip().lower()
    if env:
        if env not in ("numba", "numpy"):
            raise ValueError(f"FLARE_BACKEND must be 'numba' or 'numpy', got {env!r}")
        if env == "numba" and not _HAS_NUMBA:
            raise ValueError("FLARE_BACKEND=numba but numba is not importable")
        return env
    return "numba" if _HAS_NUMBA else "numpy"


_BACKEND = _resolve_default()


def set_backend(name: str) -> None:
    """Switch kernel backend at runtime (used by tests and benchmarks)."""
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    global _BACKEND
    _BACKEND = name


def get_backend() -> str:
    return _BACKEND


def layernorm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Row layernorm over the last axis of 2D ``x``; returns (y, mean, rstd)."""
    return _IMPLS[_BACKEND]["layernorm_fwd"](x, gamma, beta, eps)


def layernorm_bwd(dy: np.ndarray, x: np.ndarray, gamma: np.ndarray, mu: np.ndarray, rstd: np.ndarray):
    """Backward of :func:`layernorm_fwd`; returns (dx, dgamma, dbeta)."""
    return _IMPLS[_BACKEND]["layernorm_bwd"](dy, x, gamma, mu, rstd)


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    """Row softmax of a 2D array, numerically shifted by the row max."""
    return _IMPLS[_BACKEND]["softmax_fwd"](x)


def softmax_bwd(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return _IMPLS[_BACKEND]["softmax_bwd"](dy, y)


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    """Elementwise tanh-approximation GELU, any shape."""
    return _IMPLS[_BACKEND]["gelu_fwd"](np.ascontiguousarray(x))


def gelu_bwd(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return _IMPLS[_BACKEND]["gelu_bwd"](np.ascontiguousarray(dy), np.ascontiguousarray(x))
