"""Model architecture configuration shared by the encoders and the transformer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    image_size: int = 48
    patch_size: int = 8
    n_channels: int = 3
    text_len: int = 8
    vocab_size: int = 11
    n_fusion_blocks: int = 4
    n_queries: int = 8
    n_qformer_blocks: int = 2
    d_state: int = 3
    d_action: int = 3
    horizon: int = 16
    n_future_tokens: int = 8
    n_dit_blocks: int = 8
    ffn_mult: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 2:
            raise ValueError("d_model must be even (sinusoidal features)")
        if self.n_queries < 1:
            raise ValueError("n_queries must be >= 1")
        if self.n_future_tokens < 0:
            raise ValueError("n_future_tokens must be >= 0")
        if self.n_dit_blocks < 1 or self.n_fusion_blocks < 1 or self.n_qformer_blocks < 1:
            raise ValueError("block counts must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_fused_tokens(self) -> int:
        """Vision patches plus text tokens entering the fusion trunk."""
        return self.n_patches + self.text_len

    @property
    def seq_len(self) -> int:
        """State token + action tokens + future query tokens."""
        return 1 + self.horizon + self.n_future_tokens

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64
