import math

import numpy as np
import pytest

import oracles
from benard_ldp.integrators import (BenardModel, BlowUpError, DyadicIncrementObserver,
                                    EpsilonGuardWarning, IntegratorConfig, TrajectoryRecord,
                                    control_norm_bound, dyadic_increment_statistic,
                                    energy_balance_residuals, run_ensemble, run_skeleton,
                                    run_stochastic, step, x_distance)
from benard_ldp.ldp_action import two_mode_toy
from benard_ldp.noise import ControlPath, CovarianceSpec, action, make_sigma
from benard_ldp.operators import PhysicsParams, nonlinear_coeffs, coupling_coeffs
from benard_ldp.spectral_core import Domain, SpectralField, build_basis, embed, random_field


@pytest.fixture(scope="module")
def model(free_basis):
    cov = CovarianceSpec.power_law(free_basis, 1.0, 1.5)
    return BenardModel(free_basis, PhysicsParams(1.0, 1.0), cov, make_sigma("diagonal_bounded", cov))


def temp_mode(basis):
    return basis.n_vel + int(np.flatnonzero((basis.temp_k1 == 0) & (basis.temp_k == 0))[0])


def test_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig(T=1.0, n_steps=10, record_stride=3)
    with pytest.raises(ValueError):
        IntegratorConfig(T=1.0, n_steps=10, epsilon=-1)
    with pytest.raises(ValueError):
        IntegratorConfig(scheme="milstein")
    assert IntegratorConfig(T=2.0, n_steps=4).dt == 0.5
    assert IntegratorConfig(epsilon=1.0, epsilon_guard=0.5).exceeds_guard


def test_zero_is_fixed_point(model):
    out = step(model, np.zeros(model.basis.n), None, None, IntegratorConfig())
    assert not np.any(out)


def test_single_temperature_mode_decay(model):
    i = temp_mode(model.basis)
    mu = model.basis.eigenvalues[i]
    lin = BenardModel(model.basis, PhysicsParams(1.0, 0.5), nonlinear=False)
    errs = []
    for n in (100, 200, 400):
        cfg = IntegratorConfig(T=0.2, n_steps=n)
        c = np.zeros(model.basis.n)
        c[i] = 1.0
        rec = run_skeleton(lin, c, None, cfg)
        k = np.arange(n + 1)
        np.testing.assert_allclose(rec.states[:, i], (1 + cfg.dt * 0.5 * mu) ** -k.astype(float), rtol=1e-12)
        errs.append(abs(rec.states[-1, i] - math.exp(-0.5 * mu * 0.2)))
    assert errs[0] / errs[1] > 1.8 and errs[1] / errs[2] > 1.8


def test_step_agrees_with_fine_explicit_euler(model, rng):
    c0 = random_field(model.basis, rng).coeffs * 0.5
    a = model.a_diag

    def explicit(c, dt, m):
        for _ in range(m):
            c = c + dt * (-a * c - nonlinear_coeffs(model.basis, c) - coupling_coeffs(model.basis, c))
        return c

    diffs = []
    for dt in (2e-3, 1e-3, 5e-4):
        si = step(model, c0, None, None, IntegratorConfig(T=dt, n_steps=1))
        diffs.append(np.linalg.norm(si - explicit(c0, dt / 100, 100)))
    assert diffs[0] / diffs[1] > 1.8 and diffs[1] / diffs[2] > 1.8


def test_skeleton_zero_data(model):
    rec = run_skeleton(model, np.zeros(model.basis.n), None, IntegratorConfig(T=1.0, n_steps=50))
    assert not np.any(rec.states) and rec.x_norm_sq == 0


def test_skeleton_energy_growth_bound(model, rng):
    xi = random_field(model.basis, rng).coeffs
    T = 1.0
    rec = run_skeleton(model, xi, None, IntegratorConfig(T=T, n_steps=200))
    assert rec.sup_H_sq[-1] <= xi @ xi * math.exp(2 * T)
    assert np.all(np.diff(rec.sup_H_sq) >= 0) and np.all(np.diff(rec.int_V_sq) >= 0)
    assert rec.x_norm_sq == pytest.approx(rec.sup_H_sq[-1] + rec.int_V_sq[-1])


def test_controlled_skeleton_within_reported_bound(model, rng):
    xi = random_field(model.basis, rng).coeffs
    cov = model.covariance
    h = ControlPath.from_whitened(cov, 1.0, rng.standard_normal((100, model.basis.n)))
    M = 2 * action(h)
    rec = run_skeleton(model, xi, h, IntegratorConfig(T=1.0, n_steps=100))
    assert np.isfinite(rec.x_norm_sq)
    assert rec.x_norm_sq <= control_norm_bound(model.params, model.sigma, 1.0, M, xi @ xi)


def test_eps_zero_is_deterministic_and_matches_skeleton(model, rng):
    xi = random_field(model.basis, rng).coeffs
    cfg = IntegratorConfig(T=0.5, n_steps=50)
    a = run_skeleton(model, xi, None, cfg)
    b = run_stochastic(model, xi, None, cfg, np.random.default_rng(1))
    c = run_stochastic(model, xi, None, cfg, np.random.default_rng(99))
    assert np.array_equal(a.states, b.states) and np.array_equal(b.states, c.states)


def test_ou_terminal_moments(frozen):
    toy = two_mode_toy()
    xi = np.array([0.5, -0.3])
    cfg = IntegratorConfig(T=1.0, n_steps=1000, epsilon=1.0)
    rec = run_stochastic(toy, xi, None, cfg, np.random.default_rng(7), n_paths=10_000)
    x = rec.states[-1]
    mean = np.array(frozen["ou_mean"])
    cov = np.array(frozen["ou_cov"]).reshape(2, 2)
    n = x.shape[0]
    se_mean = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(x.mean(0) - mean) <= 4 * se_mean + 1e-3 * np.abs(mean))
    var = x.var(0, ddof=1)
    assert np.all(np.abs(var - np.diag(cov)) <= 4 * np.diag(cov) * math.sqrt(2 / n) + 2e-3 * np.diag(cov))


def test_ou_oracle_frozen_values_reproducible(frozen):
    L, S, _ = oracles.toy_matrices()
    mean, cov = oracles.ou_moments(L, S, np.array([0.5, -0.3]), 1.0)
    np.testing.assert_allclose(mean, frozen["ou_mean"], rtol=1e-12)
    np.testing.assert_allclose(cov.ravel(), frozen["ou_cov"], rtol=1e-10)


def test_strong_order_additive_linear():
    toy = two_mode_toy()
    xi = np.array([0.5, -0.3])
    n_fine, paths, T = 4096, 400, 1.0
    rng = np.random.default_rng(11)
    dW = rng.standard_normal((n_fine, paths, 2)) * np.sqrt(toy.covariance.lambdas * T / n_fine)

    def run(n):
        r = n_fine // n
        inc = dW.reshape(n, r, paths, 2).sum(axis=1)
        it = iter(inc)
        from benard_ldp.integrators import integrate

        cfg = IntegratorConfig(T=T, n_steps=n, epsilon=1.0)
        return integrate(toy, np.broadcast_to(xi, (paths, 2)).copy(), None, cfg,
                         noise=lambda k, shape: inc[k], keep_states=True).states[-1]

    ref = run(n_fine)
    ns = [16, 32, 64, 128]
    errs = [np.sqrt(np.mean(np.sum((run(n) - ref) ** 2, -1))) for n in ns]
    slope = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert slope >= 0.5


def test_energy_identity_residual_first_order(model, rng):
    xi = random_field(model.basis, rng).coeffs
    tot = []
    for n in (100, 200, 400):
        rec = run_skeleton(model, xi, None, IntegratorConfig(T=1.0, n_steps=n))
        tot.append(np.sum(np.abs(energy_balance_residuals(model, rec))))
    order = np.log2(tot[0] / tot[1]), np.log2(tot[1] / tot[2])
    assert min(order) >= 0.9


def test_galerkin_consistency_under_refinement():
    T, n = 0.5, 100
    recs = []
    sizes = (2, 4, 8, 16)
    bases = [build_basis(Domain(), k, k) for k in sizes]
    finest = bases[-1]
    c = np.zeros(bases[0].n)
    c[:] = 0.3 * np.sin(np.arange(bases[0].n) + 1.0)
    xi0 = SpectralField(c, bases[0])
    for b in bases:
        m = BenardModel(b, PhysicsParams(0.5, 0.5))
        rec = run_skeleton(m, embed(xi0, b).coeffs, None, IntegratorConfig(T=T, n_steps=n))
        st = embed(SpectralField(rec.states, b), finest).coeffs
        recs.append(TrajectoryRecord(rec.times, st, rec.sup_H_sq, rec.int_V_sq, finest, rec.dt))
    d = [x_distance(recs[i], recs[i + 1]) for i in range(len(recs) - 1)]
    assert d[0] > d[1] > d[2]


def test_dyadic_statistic_constant_and_smooth(model):
    b = model.basis
    n_steps = 1024
    times = np.linspace(0, 1, n_steps + 1)
    const = np.tile(np.linspace(0.1, 0.2, b.n), (n_steps + 1, 1))
    z = np.zeros(n_steps + 1)
    rec = TrajectoryRecord(times, const, z, z, b, 1 / n_steps)
    assert np.all(dyadic_increment_statistic(rec, 6, 1e9) == 0)
    smooth = np.outer(np.sin(2 * times), np.ones(b.n) / b.n)
    rec = TrajectoryRecord(times, smooth, z, z, b, 1 / n_steps)
    I = dyadic_increment_statistic(rec, 6, 1e9, levels=range(2, 7))
    rates = np.log2(I[:-1] / I[1:])
    assert np.all(rates > 1.8)


def test_dyadic_streaming_matches_offline(model, rng):
    xi = random_field(model.basis, rng).coeffs
    cfg = IntegratorConfig(T=1.0, n_steps=256, epsilon=0.1)
    rec = run_ensemble(model, xi, None, cfg, 5, 20, chunk_size=8, keep_states=True,
                       observer_factory=lambda: [DyadicIncrementObserver(range(1, 6), 256, cfg.dt)])
    streamed = rec.observers["dyadic_increments"].mean(-1)
    np.testing.assert_allclose(streamed, dyadic_increment_statistic(rec, 5, 1e30), rtol=1e-10)


def test_dyadic_insufficient_density(model):
    z = np.zeros(9)
    rec = TrajectoryRecord(np.linspace(0, 1, 9), np.zeros((9, model.basis.n)), z, z, model.basis, 1 / 8)
    with pytest.raises(ValueError):
        dyadic_increment_statistic(rec, 4, 1.0)


def test_x_distance_properties(model, rng):
    b = model.basis
    i = temp_mode(b)
    lin = BenardModel(b, PhysicsParams(1.0, 1.0), nonlinear=False)
    cfg = IntegratorConfig(T=0.5, n_steps=50)
    c = np.zeros(b.n)
    c[i] = 0.7
    rec = run_skeleton(lin, c, None, cfg)
    zero = run_skeleton(lin, np.zeros(b.n), None, cfg)
    assert x_distance(rec, rec) == 0
    mu = b.eigenvalues[i]
    want = oracles.decay_x_norm_sq(0.7, mu, mu, cfg.dt, cfg.n_steps)
    assert x_distance(rec, zero) ** 2 == pytest.approx(want, rel=1e-12)
    recs = [run_skeleton(model, random_field(b, rng).coeffs, None, cfg) for _ in range(6)]
    for a_, b_, c_ in [(0, 1, 2), (3, 4, 5), (1, 3, 5)]:
        assert x_distance(recs[a_], recs[c_]) <= (x_distance(recs[a_], recs[b_])
                                                 + x_distance(recs[b_], recs[c_])) * (1 + 1e-12)


def test_x_distance_grid_mismatch(model):
    a = run_skeleton(model, np.zeros(model.basis.n), None, IntegratorConfig(T=1, n_steps=10))
    b = run_skeleton(model, np.zeros(model.basis.n), None, IntegratorConfig(T=1, n_steps=20))
    with pytest.raises(ValueError):
        x_distance(a, b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_reported_with_step(free_basis):
    m = BenardModel(free_basis, PhysicsParams(1e-6, 1e-6))
    xi = np.full(free_basis.n, 1e3)
    with pytest.raises(BlowUpError) as exc:
        run_skeleton(m, xi, None, IntegratorConfig(T=10.0, n_steps=20))
    assert exc.value.step >= 1
    rec = run_skeleton(m, np.broadcast_to(xi, (2, free_basis.n)).copy(), None,
                       IntegratorConfig(T=10.0, n_steps=20), on_blowup="mask")
    assert np.all(rec.blown_up)


def test_ensemble_independent_of_threads(model, rng):
    xi = random_field(model.basis, rng).coeffs
    cfg = IntegratorConfig(T=0.2, n_steps=40, epsilon=0.05)
    a = run_ensemble(model, xi, None, cfg, 3, 30, chunk_size=7, threads=1)
    b = run_ensemble(model, xi, None, cfg, 3, 30, chunk_size=7, threads=4)
    assert np.array_equal(a.sup_H_sq, b.sup_H_sq) and np.array_equal(a.int_V_sq, b.int_V_sq)


def test_guard_warning(model, rng):
    cfg = IntegratorConfig(T=0.1, n_steps=5, epsilon=1.0, epsilon_guard=1e-3)
    with pytest.warns(EpsilonGuardWarning):
        run_stochastic(model, np.zeros(model.basis.n), None, cfg, rng)


def test_gn_flags(model, rng):
    rec = run_skeleton(model, random_field(model.basis, rng).coeffs, None, IntegratorConfig(T=1, n_steps=20))
    flags = rec.gN_flags(rec.x_norm_sq)
    assert flags.all()
    assert not rec.gN_flags(0.0)[-1]
