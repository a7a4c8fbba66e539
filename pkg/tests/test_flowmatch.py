import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flare.flowmatch import (
    FlowConfig,
    euler_integrate,
    fm_loss,
    ks_statistic,
    noise_chunk,
    sample_tau,
    tau_cdf,
    velocity_target,
)

CFG = FlowConfig()


def test_endpoints():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((16, 3))
    eps = rng.standard_normal((16, 3))
    np.testing.assert_array_equal(noise_chunk(a, 0.0, eps), eps)
    np.testing.assert_array_equal(noise_chunk(a, 1.0, eps), a)


def test_velocity_is_path_derivative():
    # finite differences on the interpolant reproduce the constant target
    rng = np.random.default_rng(1)
    a = rng.standard_normal((16, 3))
    eps = rng.standard_normal((16, 3))
    h = 1e-4
    fd = (noise_chunk(a, 0.5 + h, eps) - noise_chunk(a, 0.5 - h, eps)) / (2 * h)
    v = velocity_target(a, eps)
    np.testing.assert_allclose(fd, v, rtol=1e-9, atol=1e-9)


def test_fm_loss_matches_elementwise_oracle():
    rng = np.random.default_rng(2)
    p = rng.standard_normal((4, 16, 3))
    t = rng.standard_normal((4, 16, 3))
    acc = 0.0
    for idx in np.ndindex(p.shape):
        acc += (p[idx] - t[idx]) ** 2
    assert abs(fm_loss(p, t) - acc / p.size) < 1e-12
    assert fm_loss(p, p) == 0.0


def test_shape_mismatch_errors():
    a = np.zeros((4, 3))
    with pytest.raises(ValueError):
        noise_chunk(a, 0.5, np.zeros((5, 3)))
    with pytest.raises(ValueError):
        velocity_target(a, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        fm_loss(a, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        noise_chunk(a, 1.5, a)
    with pytest.raises(ValueError):
        noise_chunk(a, -0.1, a)


def test_per_sample_tau_vector():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((4, 8, 3))
    eps = rng.standard_normal((4, 8, 3))
    tau = np.array([0.0, 0.25, 0.5, 1.0])
    out = noise_chunk(a, tau, eps)
    for i, t in enumerate(tau):
        np.testing.assert_allclose(out[i], t * a[i] + (1 - t) * eps[i], rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(min_value=0.0, max_value=1.0), st.integers(min_value=0, max_value=2**31 - 1))
def test_one_step_completion_recovers_actions(tau, seed):
    # from any point on the path, one full step of the target velocity
    # lands on the clean chunk: A_tau + (1 - tau) * (A - eps) == A
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((5, 3))
    eps = rng.standard_normal((5, 3))
    rec = noise_chunk(a, tau, eps) + (1.0 - tau) * velocity_target(a, eps)
    np.testing.assert_allclose(rec, a, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("k", [1, 4, 16])
def test_euler_constant_field_exact(k):
    cfg = FlowConfig(k_steps=k, horizon=16)
    target = np.random.default_rng(7).standard_normal((16, 3))
    seen_taus = []
    start = {}

    def oracle(phi, a, q, tau):
        seen_taus.append(tau)
        if not start:
            start["a0"] = a.copy()
        return target - start["a0"]

    out = euler_integrate(oracle, None, None, cfg, np.random.default_rng(11), action_dim=3)
    np.testing.assert_allclose(out, target, atol=1e-6)
    assert seen_taus == [i / k for i in range(k)]


def test_euler_raises_on_nonfinite_velocity():
    cfg = FlowConfig(k_steps=2, horizon=4)

    def bad(phi, a, q, tau):
        v = np.zeros_like(a)
        v[0, 0] = np.nan
        return v

    with pytest.raises(FloatingPointError):
        euler_integrate(bad, None, None, cfg, np.random.default_rng(0), action_dim=3)


def test_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(k_steps=0)
    with pytest.raises(ValueError):
        FlowConfig(s=0.0)
    with pytest.raises(ValueError):
        FlowConfig(s=1.2)
    with pytest.raises(ValueError):
        FlowConfig(horizon=0)


def test_tau_distribution_bounds_and_mean():
    rng = np.random.default_rng(0)
    taus = sample_tau(CFG, rng, size=100_000)
    assert taus.min() >= 0.0 and taus.max() <= CFG.s
    # E[tau] = s * b / (a + b) = 0.999 * 0.4
    expect = CFG.s * CFG.beta_b / (CFG.beta_a + CFG.beta_b)
    assert abs(taus.mean() - expect) < 3 * taus.std() / np.sqrt(taus.size)
    scalar = sample_tau(CFG, rng)
    assert isinstance(scalar, float) and 0.0 <= scalar <= CFG.s


def test_tau_cdf_closed_form():
    # hand-derived: P(tau <= t) = 1 - (1 - t/s)^1.5
    for t in [0.0, 0.1, 0.5, 0.9, CFG.s]:
        expect = 1.0 - (1.0 - t / CFG.s) ** 1.5
        assert abs(float(tau_cdf(CFG, t)) - expect) < 1e-15
    assert float(tau_cdf(CFG, -1.0)) == 0.0
    assert float(tau_cdf(CFG, 1.0)) == 1.0
    with pytest.raises(ValueError):
        tau_cdf(FlowConfig(beta_b=2.0), 0.5)


def test_tau_ks_against_analytic_cdf():
    rng = np.random.default_rng(123)
    taus = sample_tau(CFG, rng, size=100_000)
    stat = ks_statistic(taus, lambda t: tau_cdf(CFG, t))
    assert stat < 0.01


def test_ks_statistic_sanity():
    # uniform samples vs uniform CDF: tiny; vs wrong CDF: large
    u = np.random.default_rng(5).uniform(size=50_000)
    assert ks_statistic(u, lambda x: x) < 0.01
    assert ks_statistic(u, lambda x: np.asarray(x) ** 3) > 0.2
    with pytest.raises(ValueError):
        ks_statistic(np.array([]), lambda x: x)
