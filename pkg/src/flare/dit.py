"""Diffusion transformer over the [state, actions, future] token sequence.

Pre-layernorm blocks: cross-attention into the vision-language embedding
tokens, self-attention over the full sequence (no causal mask), then an
MLP. The forward pass also returns the future-token activations tapped
after an intermediate block; that tap is the input to the alignment head,
so everything above the tap layer is invisible to the alignment loss.

``dit_forward`` returns the raw post-block stream. The final layernorm is
a separate call applied by the action head, which keeps the tap at layer
L equal (bitwise) to the returned stream when L is the last block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .config import ModelConfig
from .nn import Params, attention, ffn, init_attention, init_ffn, init_layernorm, layernorm

SEG_STATE = 0
SEG_ACTION = 1
SEG_FUTURE = 2


@dataclass(eq=False)
class TokenSequence:
    tokens: Tensor  # (B, S, D)
    segment_ids: np.ndarray  # (S,) values in {SEG_STATE, SEG_ACTION, SEG_FUTURE}


@dataclass(eq=False)
class DiTOutput:
    final_tokens: Tensor  # (B, S, D) after the last block, before the final norm
    tap_future: Tensor  # (B, n_future, D) future positions after block l_tap


def init_dit(params: Params, cfg: ModelConfig, rng, prefix: str = "dit.") -> None:
    d = cfg.d_model
    dt = cfg.np_dtype
    for i in range(cfg.n_dit_blocks):
        blk = f"{prefix}block{i}"
        init_layernorm(params, f"{blk}.ln1", d, dt)
        init_attention(params, f"{blk}.cross", d, rng, dt)
        init_layernorm(params, f"{blk}.ln2", d, dt)
        init_attention(params, f"{blk}.self", d, rng, dt)
        init_layernorm(params, f"{blk}.ln3", d, dt)
        init_ffn(params, f"{blk}.ffn", d, cfg.ffn_mult * d, rng, dt)
    init_layernorm(params, f"{prefix}norm", d, dt)


def _future_span(segment_ids: np.ndarray) -> tuple[int, int]:
    idx = np.flatnonzero(segment_ids == SEG_FUTURE)
    if idx.size == 0:
        n = len(segment_ids)
        return n, n
    lo, hi = int(idx[0]), int(idx[-1]) + 1
    if hi - lo != idx.size or hi != len(segment_ids):
        raise ValueError("future tokens must form the trailing segment")
    return lo, hi


def dit_forward(
    params: Params, seq: TokenSequence, vl: Tensor, l_tap: int, cfg: ModelConfig, prefix: str = "dit."
) -> DiTOutput:
    """Run all blocks; tap future-token activations after block ``l_tap``.

    ``l_tap`` is 1-indexed: l_tap = n_dit_blocks taps the final stream.
    """
    if not 1 <= l_tap <= cfg.n_dit_blocks:
        raise ValueError(f"l_tap must be in [1, {cfg.n_dit_blocks}], got {l_tap}")
    if seq.tokens.shape[1] != len(seq.segment_ids):
        raise ValueError("segment_ids length must match sequence length")
    if np.isnan(seq.tokens.data).any():
        raise FloatingPointError("NaN in input token sequence")
    if np.isnan(vl.data).any():
        raise FloatingPointError("NaN in vision-language embedding")
    lo, hi = _future_span(seq.segment_ids)
    x = seq.tokens
    tap = None
    for i in range(cfg.n_dit_blocks):
        blk = f"{prefix}block{i}"
        x = x + attention(params, f"{blk}.cross", layernorm(params, f"{blk}.ln1", x), vl, cfg.n_heads)
        h = layernorm(params, f"{blk}.ln2", x)
        x = x + attention(params, f"{blk}.self", h, h, cfg.n_heads)
        x = x + ffn(params, f"{blk}.ffn", layernorm(params, f"{blk}.ln3", x))
        if i + 1 == l_tap:
            tap = x[:, lo:hi, :]
    return DiTOutput(final_tokens=x, tap_future=tap)


def dit_final_norm(params: Params, x: Tensor, prefix: str = "dit.") -> Tensor:
    """Final layernorm, applied by the action head only."""
    return layernorm(params, f"{prefix}norm", x)
