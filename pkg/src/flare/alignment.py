"""Future-alignment objective and the EMA target embedding.

The policy's tapped future tokens, decoded by a small MLP, are pulled
toward the embedding of the observation one chunk ahead, computed by a
frozen copy of the embedding model. The target tracks the policy's
embedding by exponential moving average after each optimizer step; no
gradient ever reaches it. Alignment cost per token is one minus cosine
similarity, averaged over token index (and batch).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoders
from .autodiff import Tensor, clamp_min, sqrt
from .config import ModelConfig
from .nn import Params


@dataclass(frozen=True)
class FlareConfig:
    lam: float = 0.2
    l_tap: int = 6
    n_future_tokens: int = 8
    ema_rho: float = 0.995

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.l_tap < 1:
            raise ValueError("l_tap must be >= 1")
        if not 0.0 <= self.ema_rho <= 1.0:
            raise ValueError("ema_rho must be in [0, 1]")
        if self.n_future_tokens < 0:
            raise ValueError("n_future_tokens must be >= 0")


def align_loss(pred, target: np.ndarray, eps: float = 1e-8):
    """Mean over batch and token index of (1 - cos(pred_m, target_m)).

    ``pred`` may be a Tensor (differentiable) or ndarray; ``target`` is
    always treated as a constant. The denominator is clamped at ``eps`` so
    zero vectors yield a finite loss and gradient.
    """
    pred_t = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred))
    target = np.asarray(target)
    if pred_t.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred_t.shape} vs target {target.shape}")
    if pred_t.ndim < 2 or pred_t.shape[-2] == 0:
        raise ValueError("alignment requires at least one future token")
    tgt = Tensor(target.astype(pred_t.dtype, copy=False))
    dot = (pred_t * tgt).sum(axis=-1)
    np2 = (pred_t * pred_t).sum(axis=-1)
    nt2 = (tgt * tgt).sum(axis=-1)
    # clamp inside the sqrt: keeps the value identical for healthy norms
    # while avoiding the infinite sqrt gradient at zero
    denom = sqrt(clamp_min(np2 * nt2, eps * eps))
    cos = dot / denom
    return (1.0 - cos).mean()


def combined_loss(fm_loss, align, lam: float):
    """Total objective fm + lam * align; exactly fm when lam is 0 or no
    alignment term is present."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if align is None or lam == 0.0:
        return fm_loss
    return fm_loss + lam * align


def make_target(params: Params, prefix: str = "vl.") -> dict[str, np.ndarray]:
    """Frozen copy of the policy's embedding parameters."""
    return {k: v.data.copy() for k, v in params.items() if k.startswith(prefix)}


def _array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v)


def ema_update(target: dict[str, np.ndarray], policy_vl: dict, rho: float) -> dict[str, np.ndarray]:
    """target <- rho * target + (1 - rho) * policy, key by key, in place.

    rho = 1 freezes the target exactly (no arithmetic applied); rho = 0
    copies the policy. Keys and shapes must match exactly.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must be in [0, 1]")
    if set(target) != set(policy_vl):
        missing = set(target) ^ set(policy_vl)
        raise ValueError(f"target/policy key mismatch: {sorted(missing)[:4]}")
    if rho == 1.0:
        return target
    for k in target:
        p = _array(policy_vl[k])
        if p.shape != target[k].shape:
            raise ValueError(f"shape mismatch for {k}: {target[k].shape} vs {p.shape}")
        if rho == 0.0:
            target[k] = p.copy()
        else:
            target[k] = rho * target[k] + (1.0 - rho) * p
    return target


def flare_targets(
    target: dict[str, np.ndarray], images: np.ndarray, tokens: np.ndarray, cfg: ModelConfig
) -> np.ndarray:
    """Alignment targets (B, M, D): future observations through the frozen
    target embedding. Returns a plain array, so nothing can backprop here."""
    frozen = {k: Tensor(v) for k, v in target.items()}
    return encoders.encode_vl(frozen, images, tokens, cfg).data
