import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from benard_ldp.noise import (Additive, ControlPath, CovarianceSpec, DiagonalBounded,
                              InvalidControlError, LinearClipped, action, apply_sigma,
                              apply_sigma_to_control, check_control, epsilon_guard, h0_norm_sq,
                              in_S_M, lq_distance_sq, lq_norm_sq, make_sigma,
                              sample_wiener_increment, verify_assumptions)
from benard_ldp.operators import PhysicsParams
from benard_ldp.spectral_core import SpectralField, random_field


@pytest.fixture(scope="module")
def cov(free_basis):
    return CovarianceSpec.power_law(free_basis, 1.0, 1.5)


def test_power_law_and_trace(free_basis, cov):
    np.testing.assert_allclose(cov.lambdas, (1 + free_basis.eigenvalues) ** -1.5)
    assert cov.trace == pytest.approx(np.sum(cov.lambdas))
    assert cov.tail_estimate(1.0, 1.5) > 0


def test_covariance_rejects_negative():
    with pytest.raises(ValueError):
        CovarianceSpec(np.array([1.0, -0.1]))


def test_wiener_increment_mean_square():
    spec = CovarianceSpec(np.array([1.0, 0.5]))
    dW = sample_wiener_increment(spec, 0.01, np.random.default_rng(0), batch=(100_000,))
    sq = np.sum(dW**2, axis=-1)
    se = np.std(sq) / math.sqrt(sq.size)
    assert abs(np.mean(sq) - 0.015) <= 3 * se


def test_wiener_increment_zero_dt():
    spec = CovarianceSpec(np.array([1.0, 0.5]))
    assert not np.any(sample_wiener_increment(spec, 0.0, np.random.default_rng(0)))


def test_wiener_covariance_matrix(free_basis, cov):
    dW = sample_wiener_increment(cov, 0.1, np.random.default_rng(3), batch=(100_000,)).coeffs
    C = np.cov(dW[:, :6].T)
    expect = np.diag(cov.lambdas[:6] * 0.1)
    se = np.sqrt(2.0 / 100_000) * np.sqrt(np.outer(np.diag(expect), np.diag(expect)))
    assert np.all(np.abs(C - expect) <= 5 * se + 1e-15)


def test_additive_lq_norm_is_trace(free_basis, cov, rng):
    s = Additive(cov)
    f = random_field(free_basis, rng, batch=(10,))
    np.testing.assert_allclose(lq_norm_sq(s, f), cov.trace)


def test_diagonal_bounded_zero_gain(free_basis, cov, rng):
    s = DiagonalBounded(cov, b0=0.0, b1=0.0)
    assert np.all(lq_norm_sq(s, random_field(free_basis, rng, batch=(5,))) == 0)


@pytest.mark.parametrize("family", ["additive", "diagonal_bounded", "linear_clipped"])
def test_growth_and_lipschitz_hold(free_basis, cov, family):
    s = make_sigma(family, cov)
    for scale in (0.1, 1.0, 10.0):
        g, l = verify_assumptions(s, free_basis, 10_000, np.random.default_rng(5), scale=scale)
        assert (g, l) == (0, 0)


def test_linear_clipped_growth_bound(free_basis, cov, rng):
    s = LinearClipped(cov, scale=2.0, clip=0.5)
    f = random_field(free_basis, rng, batch=(1000,)) * 10.0
    assert np.all(lq_norm_sq(s, f) <= s.K * (1 + np.sum(f.coeffs**2, -1)) * (1 + 1e-12))
    g = random_field(free_basis, rng, batch=(1000,)) * 10.0
    assert np.all(lq_distance_sq(s, f, g) <= s.L * np.sum((f - g).coeffs ** 2, -1) * (1 + 1e-12))


def test_apply_sigma_linear_and_additive(free_basis, cov, rng):
    s = DiagonalBounded(cov)
    f = random_field(free_basis, rng)
    w1, w2 = random_field(free_basis, rng), random_field(free_basis, rng)
    lhs = apply_sigma(s, f, w1 * 2.0 + w2 * -3.0).coeffs
    rhs = 2.0 * apply_sigma(s, f, w1).coeffs - 3.0 * apply_sigma(s, f, w2).coeffs
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    a = Additive(cov)
    np.testing.assert_array_equal(apply_sigma(a, f, w1).coeffs,
                                  apply_sigma(a, random_field(free_basis, rng), w1).coeffs)


def test_control_outside_support_rejected():
    spec = CovarianceSpec(np.array([1.0, 0.0]))
    with pytest.raises(InvalidControlError):
        check_control(spec, np.array([[0.0, 1.0]]))
    s = Additive(spec)
    with pytest.raises(InvalidControlError):
        apply_sigma_to_control(s, np.zeros(2), np.array([0.0, 1.0]))


def test_action_values(cov):
    T, n = 1.0, 10
    assert action(ControlPath.zero(cov, T, n)) == 0.0
    z = np.zeros((n, cov.lambdas.size))
    z[:, 0] = 1.0  # |h|_0 = 1
    h = ControlPath.from_whitened(cov, T, z)
    assert action(h) == pytest.approx(0.5)
    assert in_S_M(h, 1.0) and not in_S_M(h, 0.99)


def test_h0_isometry(cov, rng):
    h = rng.standard_normal(cov.lambdas.size) * cov.sqrt_lambdas
    explicit = np.sum((h / np.sqrt(cov.lambdas)) ** 2)
    assert h0_norm_sq(cov, h) == pytest.approx(explicit, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 40), c=st.floats(-5, 5))
def test_action_refinement_and_scaling(cov, seed, n, c):
    r = np.random.default_rng(seed)
    h = ControlPath.from_whitened(cov, 2.0, r.standard_normal((n, cov.lambdas.size)))
    assert action(h.resample(2 * n)) == pytest.approx(action(h), rel=1e-12)
    scaled = ControlPath(h.values * c, h.T, cov)
    assert action(scaled) == pytest.approx(c * c * action(h), rel=1e-12, abs=1e-300)


def test_control_csv_roundtrip(cov, tmp_path, rng):
    h = ControlPath.from_whitened(cov, 1.0, rng.standard_normal((8, cov.lambdas.size)))
    p = tmp_path / "h.csv"
    h.to_csv(p)
    back = ControlPath.from_csv(p, cov, 1.0, 8)
    np.testing.assert_array_equal(back.values, h.values)


def test_epsilon_guard_pattern(cov):
    p = PhysicsParams(1.0, 1.0)
    s = DiagonalBounded(cov)
    e = epsilon_guard(p, s, 1.0, 1.0, 0.1)
    assert 0 < e <= p.nu_wedge_kappa / (2 * s.L)
    assert e <= p.nu_wedge_kappa / (8 * 2 * s.K)
    # tighter with a larger horizon or budget
    assert epsilon_guard(p, s, 2.0, 1.0, 0.1) < e
    assert epsilon_guard(p, s, 1.0, 5.0, 0.1) < e


def test_constants_are_recorded(cov):
    a, d, l = Additive(cov, 2.0), DiagonalBounded(cov, 1.0, 0.5), LinearClipped(cov, 1.0, 1.0)
    assert a.K == pytest.approx(4 * cov.trace) and a.L == 0
    assert d.K == pytest.approx(2.25 * cov.trace)
    assert l.L == pytest.approx(np.max(cov.lambdas))
    for s in (a, d, l):
        Kt, Lt = s.constants_L4(2 * math.pi)
        assert Kt >= s.K and Lt >= 0


def test_make_sigma_unknown_family(cov):
    with pytest.raises(ValueError):
        make_sigma("cubic", cov)
