"""Policy assembly: encoders + diffusion transformer + decoders.

The token sequence is [state, H action tokens, M future queries] plus a
learned positional table (self-attention alone cannot tell chunk indices
apart). The action head reads the final-normed stream at the action
positions; the alignment head reads the raw tap. Actions are normalized
for flow matching: deltas scaled by the clip bound to [-1, 1], gripper
mapped {0,1} -> {-1,+1}; the environment-facing side denormalizes.
"""

from __future__ import annotations

import numpy as np

from . import encoders, flowmatch
from .autodiff import Tensor, broadcast_to, concat, reshape
from .config import ModelConfig
from .dit import SEG_ACTION, SEG_FUTURE, SEG_STATE, TokenSequence, dit_final_norm, dit_forward, init_dit
from .flowmatch import FlowConfig
from .nn import Params, freeze_params, normal_init


def init_policy(cfg: ModelConfig, rng) -> Params:
    params: Params = {}
    encoders.init_embedding_model(params, cfg, rng)
    encoders.init_state_encoder(params, cfg, rng)
    encoders.init_action_encoder(params, cfg, rng)
    if cfg.n_future_tokens > 0:
        params["future_tokens"] = Tensor(
            normal_init(rng, (cfg.n_future_tokens, cfg.d_model), cfg.np_dtype), requires_grad=True
        )
    params["seq_pos"] = Tensor(normal_init(rng, (cfg.seq_len, cfg.d_model), cfg.np_dtype), requires_grad=True)
    init_dit(params, cfg, rng)
    encoders.init_action_decoder(params, cfg, rng)
    if cfg.n_future_tokens > 0:
        encoders.init_future_decoder(params, cfg, rng)
    return params


def assemble_sequence(params: Params, state_tok: Tensor, action_toks: Tensor, cfg: ModelConfig) -> TokenSequence:
    bsz = state_tok.shape[0]
    parts = [state_tok, action_toks]
    if cfg.n_future_tokens > 0:
        fut = reshape(params["future_tokens"], (1, cfg.n_future_tokens, cfg.d_model))
        parts.append(broadcast_to(fut, (bsz, cfg.n_future_tokens, cfg.d_model)))
    seq = concat(parts, axis=1) + params["seq_pos"]
    seg = np.array([SEG_STATE] + [SEG_ACTION] * cfg.horizon + [SEG_FUTURE] * cfg.n_future_tokens, dtype=np.int8)
    return TokenSequence(seq, seg)


def forward_given_vl(
    params: Params,
    vl: Tensor,
    q: np.ndarray,
    a_tau,
    tau,
    cfg: ModelConfig,
    l_tap: int,
    want_actions: bool = True,
    want_future: bool = False,
):
    """Velocity and/or predicted-future tokens for precomputed conditioning."""
    state_tok = encoders.encode_state(params, q, cfg)
    action_toks = encoders.encode_actions(params, a_tau, tau, cfg)
    seq = assemble_sequence(params, state_tok, action_toks, cfg)
    out = dit_forward(params, seq, vl, l_tap, cfg)
    v = None
    if want_actions:
        h = dit_final_norm(params, out.final_tokens)
        v = encoders.decode_actions(params, h[:, 1 : 1 + cfg.horizon, :], cfg)
    fut = None
    if want_future:
        fut = encoders.decode_future(params, out.tap_future, cfg)
    return v, fut


def policy_forward(
    params: Params,
    images: np.ndarray,
    tokens: np.ndarray,
    q: np.ndarray,
    a_tau,
    tau,
    cfg: ModelConfig,
    l_tap: int,
    want_actions: bool = True,
    want_future: bool = False,
):
    vl = encoders.encode_vl(params, images, tokens, cfg)
    return forward_given_vl(params, vl, q, a_tau, tau, cfg, l_tap, want_actions, want_future)


# -------------------------------------------------- action normalization --


def normalize_actions(a: np.ndarray, action_clip: float) -> np.ndarray:
    """Raw env actions -> flow space: deltas to [-1, 1], gripper to {-1, +1}."""
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    out[..., 0] = a[..., 0] / action_clip
    out[..., 1] = a[..., 1] / action_clip
    out[..., 2] = (a[..., 2] - 0.5) / 0.5
    return out


def denormalize_actions(a: np.ndarray, action_clip: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    out[..., 0] = a[..., 0] * action_clip
    out[..., 1] = a[..., 1] * action_clip
    out[..., 2] = a[..., 2] * 0.5 + 0.5
    return out


# -------------------------------------------------------------- sampling --


def predict_action_chunk(
    params: Params,
    image: np.ndarray,
    tokens: np.ndarray,
    q: np.ndarray,
    cfg: ModelConfig,
    flow_cfg: FlowConfig,
    rng: np.random.Generator,
    action_clip: float,
) -> np.ndarray:
    """Sample one raw-space action chunk (H, d_a) for a single observation."""
    vl = encoders.encode_vl(params, image[None], tokens[None], cfg)

    def velocity(phi, a, q_vec, tau):
        v, _ = forward_given_vl(
            params, phi, q_vec[None], a[None].astype(cfg.np_dtype), tau, cfg, cfg.n_dit_blocks
        )
        return v.data[0]

    chunk = flowmatch.euler_integrate(velocity, vl, q, flow_cfg, rng, cfg.d_action)
    return denormalize_actions(chunk, action_clip)


def make_policy_fn(params: Params, cfg: ModelConfig, flow_cfg: FlowConfig, action_clip: float, seed):
    """Closed-loop policy callable (image, tokens, proprio) -> raw chunk.

    Parameters are frozen into a grad-free view once; the policy owns its
    integration-noise rng, seeded here for reproducible evaluation.
    """
    frozen = freeze_params(params)
    rng = np.random.default_rng(seed)

    def policy_fn(image, tokens, q):
        return predict_action_chunk(frozen, image, tokens, q, cfg, flow_cfg, rng, action_clip)

    return policy_fn
