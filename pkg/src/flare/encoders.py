"""Input encoders and output decoders around the diffusion transformer.

The vision-language embedding model is a small q-former: image patches and
instruction tokens are fused by self-attention blocks, then a fixed set of
learned queries reads the fused stream through interleaved self- and
cross-attention blocks. Its output, M tokens of width d_model, serves both
as conditioning for the policy and (through a frozen copy) as the
alignment target. State and noised-action encoders lift raw inputs to
token width; small MLPs decode velocity and predicted-future tokens back
out.

All encoders take batched inputs. Tensors flow on the autodiff tape;
plain ndarrays (images, tokens, proprio, tau) enter as constants.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, broadcast_to, concat, embedding, gelu, reshape
from .config import ModelConfig
from .nn import (
    Params,
    attention,
    ffn,
    init_attention,
    init_ffn,
    init_layernorm,
    init_linear,
    layernorm,
    linear,
    normal_init,
    sinusoid_features,
)


# ------------------------------------------------------ embedding model --


def init_embedding_model(params: Params, cfg: ModelConfig, rng, prefix: str = "vl.") -> None:
    d = cfg.d_model
    dt = cfg.np_dtype
    patch_dim = cfg.patch_size * cfg.patch_size * cfg.n_channels
    init_linear(params, f"{prefix}patch", patch_dim, d, rng, dt)
    params[f"{prefix}vis_pos"] = Tensor(normal_init(rng, (cfg.n_patches, d), dt), requires_grad=True)
    params[f"{prefix}tok"] = Tensor(normal_init(rng, (cfg.vocab_size, d), dt), requires_grad=True)
    params[f"{prefix}txt_pos"] = Tensor(normal_init(rng, (cfg.text_len, d), dt), requires_grad=True)
    for i in range(cfg.n_fusion_blocks):
        blk = f"{prefix}fusion{i}"
        init_layernorm(params, f"{blk}.ln1", d, dt)
        init_attention(params, f"{blk}.attn", d, rng, dt)
        init_layernorm(params, f"{blk}.ln2", d, dt)
        init_ffn(params, f"{blk}.ffn", d, cfg.ffn_mult * d, rng, dt)
    init_layernorm(params, f"{prefix}fusion_norm", d, dt)
    # learned queries carry no positional embedding: q-former outputs must
    # permute with the queries
    params[f"{prefix}queries"] = Tensor(normal_init(rng, (cfg.n_queries, d), dt), requires_grad=True)
    for i in range(cfg.n_qformer_blocks):
        blk = f"{prefix}qf{i}"
        init_layernorm(params, f"{blk}.ln1", d, dt)
        init_attention(params, f"{blk}.self", d, rng, dt)
        init_layernorm(params, f"{blk}.ln2", d, dt)
        init_attention(params, f"{blk}.cross", d, rng, dt)
        init_layernorm(params, f"{blk}.ln3", d, dt)
        init_ffn(params, f"{blk}.ffn", d, cfg.ffn_mult * d, rng, dt)
    init_layernorm(params, f"{prefix}qnorm", d, dt)


def patchify(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """uint8 images (B, S, S, C) -> centered float patches (B, P, p*p*C)."""
    b = images.shape[0]
    p = cfg.patch_size
    g = cfg.image_size // p
    x = images.astype(cfg.np_dtype) / 255.0 - 0.5
    x = x.reshape(b, g, p, g, p, cfg.n_channels)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, g * g, p * p * cfg.n_channels))


def encode_vl(params: Params, images: np.ndarray, tokens: np.ndarray, cfg: ModelConfig, prefix: str = "vl.") -> Tensor:
    """Embed one observation (image + instruction) into M tokens (B, M, D)."""
    images = np.asarray(images)
    tokens = np.asarray(tokens)
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.n_channels):
        raise ValueError(f"images must be (B, {cfg.image_size}, {cfg.image_size}, {cfg.n_channels})")
    if tokens.ndim != 2 or tokens.shape[1] != cfg.text_len:
        raise ValueError(f"tokens must be (B, {cfg.text_len})")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")
    if images.shape[0] != tokens.shape[0]:
        raise ValueError("batch size mismatch between images and tokens")
    bsz = images.shape[0]

    vis = linear(params, f"{prefix}patch", Tensor(patchify(images, cfg)))
    vis = vis + params[f"{prefix}vis_pos"]
    txt = embedding(params[f"{prefix}tok"], tokens) + params[f"{prefix}txt_pos"]
    x = concat([vis, txt], axis=1)
    for i in range(cfg.n_fusion_blocks):
        blk = f"{prefix}fusion{i}"
        h = layernorm(params, f"{blk}.ln1", x)
        x = x + attention(params, f"{blk}.attn", h, h, cfg.n_heads)
        x = x + ffn(params, f"{blk}.ffn", layernorm(params, f"{blk}.ln2", x))
    fused = layernorm(params, f"{prefix}fusion_norm", x)

    q = broadcast_to(reshape(params[f"{prefix}queries"], (1, cfg.n_queries, cfg.d_model)), (bsz, cfg.n_queries, cfg.d_model))
    for i in range(cfg.n_qformer_blocks):
        blk = f"{prefix}qf{i}"
        h = layernorm(params, f"{blk}.ln1", q)
        q = q + attention(params, f"{blk}.self", h, h, cfg.n_heads)
        q = q + attention(params, f"{blk}.cross", layernorm(params, f"{blk}.ln2", q), fused, cfg.n_heads)
        q = q + ffn(params, f"{blk}.ffn", layernorm(params, f"{blk}.ln3", q))
    return layernorm(params, f"{prefix}qnorm", q)


# -------------------------------------------------- state / action sides --


def init_state_encoder(params: Params, cfg: ModelConfig, rng, prefix: str = "state.") -> None:
    init_linear(params, f"{prefix}fc1", cfg.d_state, cfg.d_model, rng, cfg.np_dtype)
    init_linear(params, f"{prefix}fc2", cfg.d_model, cfg.d_model, rng, cfg.np_dtype)


def encode_state(params: Params, q: np.ndarray, cfg: ModelConfig, prefix: str = "state.") -> Tensor:
    """Proprioceptive vector (B, d_state) in [0, 1] -> one token (B, 1, D)."""
    q = np.asarray(q)
    if q.ndim != 2 or q.shape[1] != cfg.d_state:
        raise ValueError(f"state must be (B, {cfg.d_state})")
    x = Tensor((2.0 * q - 1.0).astype(cfg.np_dtype))
    h = gelu(linear(params, f"{prefix}fc1", x))
    out = linear(params, f"{prefix}fc2", h)
    return reshape(out, (q.shape[0], 1, cfg.d_model))


def init_action_encoder(params: Params, cfg: ModelConfig, rng, prefix: str = "act.") -> None:
    init_linear(params, f"{prefix}fc1", cfg.d_action, cfg.d_model, rng, cfg.np_dtype)
    init_linear(params, f"{prefix}fc2", cfg.d_model, cfg.d_model, rng, cfg.np_dtype)


def encode_actions(params: Params, a_tau, tau, cfg: ModelConfig, prefix: str = "act.") -> Tensor:
    """Noised normalized chunk (B, H, d_a) + flow time -> tokens (B, H, D).

    Sinusoidal features of tau join the hidden features between the two
    layers, so every action token carries the current flow time.
    """
    data = a_tau.data if isinstance(a_tau, Tensor) else np.asarray(a_tau)
    if data.ndim != 3 or data.shape[1] != cfg.horizon or data.shape[2] != cfg.d_action:
        raise ValueError(f"action chunk must be (B, {cfg.horizon}, {cfg.d_action})")
    tau_vec = np.broadcast_to(np.asarray(tau, dtype=np.float64), (data.shape[0],))
    if np.any(tau_vec < 0.0) or np.any(tau_vec > 1.0):
        raise ValueError("tau must lie in [0, 1]")
    x = a_tau if isinstance(a_tau, Tensor) else Tensor(data.astype(cfg.np_dtype))
    h = gelu(linear(params, f"{prefix}fc1", x))
    temb = sinusoid_features(tau_vec, cfg.d_model, cfg.np_dtype)
    h = h + Tensor(temb[:, None, :])
    return linear(params, f"{prefix}fc2", h)


def init_action_decoder(params: Params, cfg: ModelConfig, rng, prefix: str = "adec.") -> None:
    init_linear(params, f"{prefix}fc1", cfg.d_model, cfg.d_model, rng, cfg.np_dtype)
    init_linear(params, f"{prefix}fc2", cfg.d_model, cfg.d_action, rng, cfg.np_dtype)


def decode_actions(params: Params, x: Tensor, cfg: ModelConfig, prefix: str = "adec.") -> Tensor:
    """Action-position tokens (B, H, D) -> velocity predictions (B, H, d_a)."""
    if x.shape[1] != cfg.horizon or x.shape[2] != cfg.d_model:
        raise ValueError(f"expected (B, {cfg.horizon}, {cfg.d_model}) action tokens")
    return linear(params, f"{prefix}fc2", gelu(linear(params, f"{prefix}fc1", x)))


def init_future_decoder(params: Params, cfg: ModelConfig, rng, prefix: str = "fdec.") -> None:
    # hidden width 2*D so the decoder can represent an exact identity
    init_linear(params, f"{prefix}fc1", cfg.d_model, 2 * cfg.d_model, rng, cfg.np_dtype)
    init_linear(params, f"{prefix}fc2", 2 * cfg.d_model, cfg.d_model, rng, cfg.np_dtype)


def decode_future(params: Params, x: Tensor, cfg: ModelConfig, prefix: str = "fdec.") -> Tensor:
    """Tapped future tokens (B, M, D) -> predicted embedding tokens (B, M, D)."""
    if x.ndim != 3 or x.shape[1] != cfg.n_future_tokens or x.shape[2] != cfg.d_model:
        raise ValueError(f"expected (B, {cfg.n_future_tokens}, {cfg.d_model}) future tokens")
    return linear(params, f"{prefix}fc2", gelu(linear(params, f"{prefix}fc1", x)))
