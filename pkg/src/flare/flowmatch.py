"""Flow-matching math for action chunks.

The noised chunk interpolates linearly between Gaussian noise at tau=0 and
the clean chunk at tau=1, so the regression target for the velocity field
is the constant difference (actions - noise). Training times are drawn by
skewing Beta(1.5, 1) toward zero: tau = s * (1 - x) with x ~ Beta(1.5, 1)
and s = 0.999, which also keeps tau strictly below 1. Sampling integrates
the learned field with K forward-Euler steps from pure noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FlowConfig:
    k_steps: int = 4
    s: float = 0.999
    beta_a: float = 1.5
    beta_b: float = 1.0
    horizon: int = 16

    def __post_init__(self):
        if self.k_steps < 1:
            raise ValueError("k_steps must be >= 1")
        if not 0.0 < self.s <= 1.0:
            raise ValueError("s must be in (0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.beta_a <= 0 or self.beta_b <= 0:
            raise ValueError("beta shape parameters must be positive")


def sample_tau(cfg: FlowConfig, rng: np.random.Generator, size=None):
    """Draw flow times in [0, s); scalar when ``size`` is None."""
    x = rng.beta(cfg.beta_a, cfg.beta_b, size=size)
    return cfg.s * (1.0 - x)


def tau_cdf(cfg: FlowConfig, t):
    """Analytic CDF of the tau distribution: F(t) = 1 - (1 - t/s)^a on [0, s].

    For x ~ Beta(a, 1), P(x <= u) = u^a, and tau = s(1 - x), so
    P(tau <= t) = P(x >= 1 - t/s) = 1 - (1 - t/s)^a. Requires b = 1.
    """
    if cfg.beta_b != 1.0:
        raise ValueError("closed-form CDF assumes beta_b == 1")
    t = np.asarray(t, dtype=np.float64)
    u = np.clip(1.0 - t / cfg.s, 0.0, 1.0)
    return np.where(t < 0, 0.0, 1.0 - u**cfg.beta_a)


def ks_statistic(samples: np.ndarray, cdf) -> float:
    """Two-sided Kolmogorov-Smirnov distance between samples and a CDF."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = x.size
    if n == 0:
        raise ValueError("need at least one sample")
    f = np.asarray(cdf(x), dtype=np.float64)
    lo = np.arange(n) / n
    hi = np.arange(1, n + 1) / n
    return float(np.max(np.maximum(f - lo, hi - f)))


def _check_tau(tau) -> np.ndarray:
    tau = np.asarray(tau)
    if np.any(tau < 0.0) or np.any(tau > 1.0):
        raise ValueError("tau must lie in [0, 1]")
    return tau


def noise_chunk(actions: np.ndarray, tau, eps: np.ndarray) -> np.ndarray:
    """Interpolate tau * actions + (1 - tau) * eps.

    ``tau`` is a scalar or a per-sample vector broadcast over leading axes.
    """
    actions = np.asarray(actions)
    eps = np.asarray(eps)
    if actions.shape != eps.shape:
        raise ValueError(f"shape mismatch: actions {actions.shape} vs eps {eps.shape}")
    tau = _check_tau(tau)
    if tau.ndim == 1:
        tau = tau.reshape((-1,) + (1,) * (actions.ndim - 1))
    return tau * actions + (1.0 - tau) * eps


def velocity_target(actions: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Target velocity of the linear path, constant in tau."""
    actions = np.asarray(actions)
    eps = np.asarray(eps)
    if actions.shape != eps.shape:
        raise ValueError(f"shape mismatch: actions {actions.shape} vs eps {eps.shape}")
    return actions - eps


def fm_loss(v_pred: np.ndarray, v_target: np.ndarray) -> float:
    """Mean squared error over all elements."""
    v_pred = np.asarray(v_pred)
    v_target = np.asarray(v_target)
    if v_pred.shape != v_target.shape:
        raise ValueError(f"shape mismatch: pred {v_pred.shape} vs target {v_target.shape}")
    d = v_pred - v_target
    return float(np.mean(d * d))


def euler_integrate(policy_fn, phi, q, cfg: FlowConfig, rng: np.random.Generator, action_dim: int) -> np.ndarray:
    """Integrate the velocity field from pure noise with K Euler steps.

    ``policy_fn(phi, a_tau, q, tau)`` returns the predicted velocity for a
    noised chunk at time tau; steps are taken at tau = k/K for k = 0..K-1
    with step size 1/K. Raises on non-finite velocities.
    """
    a = rng.standard_normal((cfg.horizon, action_dim))
    for k in range(cfg.k_steps):
        v = np.asarray(policy_fn(phi, a, q, k / cfg.k_steps))
        if v.shape != a.shape:
            raise ValueError(f"policy velocity shape {v.shape} != chunk shape {a.shape}")
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("non-finite velocity during integration")
        a = a + v / cfg.k_steps
    return a
