"""Parameter containers and neural-net building blocks on the autodiff tape.

Parameters live in a flat ``dict[str, Tensor]`` keyed by a canonical
dotted path ("dit.block3.self.wq", ...). Dict insertion order is the
enumeration order, so two constructions from the same config enumerate
identically. Layers are plain functions taking (params, name, inputs).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, gelu, layer_norm, matmul, reshape, softmax, transpose

Params = dict


# ----------------------------------------------------------------- init --


def xavier_uniform(rng: np.random.Generator, d_in: int, d_out: int, dtype) -> np.ndarray:
    lim = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-lim, lim, size=(d_in, d_out)).astype(dtype)


def normal_init(rng: np.random.Generator, shape, dtype, std: float = 0.02) -> np.ndarray:
    return (std * rng.standard_normal(shape)).astype(dtype)


def init_linear(params: Params, name: str, d_in: int, d_out: int, rng, dtype) -> None:
    params[f"{name}.w"] = Tensor(xavier_uniform(rng, d_in, d_out, dtype), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(d_out, dtype), requires_grad=True)


def init_layernorm(params: Params, name: str, d: int, dtype) -> None:
    params[f"{name}.g"] = Tensor(np.ones(d, dtype), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(d, dtype), requires_grad=True)


def init_attention(params: Params, name: str, d_model: int, rng, dtype) -> None:
    for proj in ("wq", "wk", "wv", "wo"):
        init_linear(params, f"{name}.{proj}", d_model, d_model, rng, dtype)


def init_ffn(params: Params, name: str, d_model: int, d_hidden: int, rng, dtype) -> None:
    init_linear(params, f"{name}.fc1", d_model, d_hidden, rng, dtype)
    init_linear(params, f"{name}.fc2", d_hidden, d_model, rng, dtype)


# --------------------------------------------------------------- layers --


def linear(params: Params, name: str, x: Tensor) -> Tensor:
    """Affine map over the last axis; batched inputs are flattened to one
    GEMM, which is much faster than stacked small matmuls on one core."""
    w = params[f"{name}.w"]
    b = params[f"{name}.b"]
    d_in = w.shape[0]
    lead = x.shape[:-1]
    x2 = reshape(x, (-1, d_in))
    y2 = matmul(x2, w) + b
    return reshape(y2, (*lead, w.shape[1]))


def layernorm(params: Params, name: str, x: Tensor, eps: float = 1e-5) -> Tensor:
    return layer_norm(x, params[f"{name}.g"], params[f"{name}.b"], eps)


def ffn(params: Params, name: str, x: Tensor) -> Tensor:
    return linear(params, f"{name}.fc2", gelu(linear(params, f"{name}.fc1", x)))


def attention(params: Params, name: str, x_q: Tensor, x_kv: Tensor, n_heads: int) -> Tensor:
    """Multi-head attention of queries ``x_q`` (B, S, D) over ``x_kv``
    (B, T, D). Self-attention when both arguments are the same tensor."""
    bsz, s_q, d = x_q.shape
    s_kv = x_kv.shape[1]
    hd = d // n_heads
    q = linear(params, f"{name}.wq", x_q)
    k = linear(params, f"{name}.wk", x_kv)
    v = linear(params, f"{name}.wv", x_kv)
    q = transpose(reshape(q, (bsz, s_q, n_heads, hd)), (0, 2, 1, 3))
    k = transpose(reshape(k, (bsz, s_kv, n_heads, hd)), (0, 2, 1, 3))
    v = transpose(reshape(v, (bsz, s_kv, n_heads, hd)), (0, 2, 1, 3))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
    att = softmax(scores)
    ctx = matmul(att, v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (bsz, s_q, d))
    return linear(params, f"{name}.wo", ctx)


def sinusoid_features(tau: np.ndarray, dim: int, dtype) -> np.ndarray:
    """Sinusoidal features of flow time tau in [0, 1], shape (B, dim)."""
    if dim % 2:
        raise ValueError("sinusoid feature dim must be even")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(tau, dtype=np.float64).reshape(-1, 1) * 1000.0 * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


# ---------------------------------------------------- parameter plumbing --


def structural_signature(params: Params) -> tuple:
    """Names, shapes and dtypes in enumeration order."""
    return tuple((k, v.shape, str(v.dtype)) for k, v in params.items())


def zero_grads(params: Params) -> None:
    for p in params.values():
        p.grad = None


def clone_params(params: Params) -> Params:
    out = {}
    for k, v in params.items():
        out[k] = Tensor(v.data.copy(), requires_grad=v.requires_grad)
    return out


def freeze_params(params: Params) -> Params:
    """Grad-free view sharing the same arrays; forwards through it build no tape."""
    return {k: Tensor(v.data) for k, v in params.items()}


def param_vector(params: Params) -> np.ndarray:
    return np.concatenate([p.data.ravel() for p in params.values()])


def set_param_vector(params: Params, vec: np.ndarray) -> None:
    off = 0
    for p in params.values():
        n = p.data.size
        p.data = vec[off : off + n].reshape(p.data.shape).astype(p.data.dtype)
        off += n
    if off != vec.size:
        raise ValueError("vector length does not match parameter count")


def grad_vector(params: Params) -> np.ndarray:
    chunks = []
    for p in params.values():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        chunks.append(np.asarray(g).ravel())
    return np.concatenate(chunks)


def subtree(params: Params, prefix: str) -> Params:
    """Sub-dict of parameters whose names start with ``prefix``."""
    return {k: v for k, v in params.items() if k.startswith(prefix)}
