"""Time stepping of the Galerkin system, controlled and skeleton equations.

One scheme is provided: semi-implicit Euler-Maruyama, implicit in A and
explicit (left point) in B, R, the control term and the noise,

    (I + dt A) phi_{k+1} = phi_k + dt (-B(phi_k) - R phi_k + sigma~(phi_k) h_k)
                           + sqrt(eps) sigma(phi_k) dW_k.

A is diagonal, so the implicit solve is a division.  States may carry a
leading batch axis (one row per Monte-Carlo path); all paths advance
together.
"""

from __future__ import annotations

import dataclasses
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .noise import ControlPath, check_control
from .operators import PhysicsParams, a_diagonal, coupling_coeffs, nonlinear_coeffs
from .spectral_core import SpectralField


class BlowUpError(FloatingPointError):
    """Non-finite state; carries the step index and the offending paths."""

    def __init__(self, step, paths=None):
        self.step = step
        self.paths = paths
        msg = f"non-finite state at step {step}"
        if paths is not None:
            msg += f" (paths {list(paths)[:10]})"
        super().__init__(msg)


class EpsilonGuardWarning(UserWarning):
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class BenardModel:
    """Galerkin Boussinesq model: basis, physics, noise and control coefficients."""

    basis: object
    params: PhysicsParams = PhysicsParams()
    covariance: object = None
    sigma: object = None
    sigma_tilde: object = None
    nonlinear: bool = True

    @property
    def control_sigma(self):
        return self.sigma_tilde if self.sigma_tilde is not None else self.sigma

    @property
    def a_diag(self):
        d = self.__dict__.get("_a_diag")
        if d is None:
            d = a_diagonal(self.basis, self.params)
            d.setflags(write=False)
            object.__setattr__(self, "_a_diag", d)
        return d

    def explicit_drift(self, c, h=None):
        """-B(phi) - R phi + sigma~(phi) h."""
        out = -coupling_coeffs(self.basis, c)
        if self.nonlinear:
            out -= nonlinear_coeffs(self.basis, c)
        if h is not None:
            out += self.control_sigma.gain(c) * h
        return out

    def linear_drift_matrix(self):
        """Matrix of phi -> -A phi - R phi."""
        n = self.basis.n
        return -np.diag(self.a_diag) - coupling_coeffs(self.basis, np.eye(n)).T


@dataclasses.dataclass(frozen=True)
class IntegratorConfig:
    T: float = 1.0
    n_steps: int = 1000
    epsilon: float = 0.0
    record_stride: int = 1
    scheme: str = "semi_implicit_em"
    epsilon_guard: float | None = None

    def __post_init__(self):
        if not (self.T > 0 and self.n_steps > 0):
            raise ValueError("T and n_steps must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.scheme != "semi_implicit_em":
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.record_stride < 1 or self.n_steps % self.record_stride:
            raise ValueError("record_stride must divide n_steps")

    @property
    def dt(self):
        return self.T / self.n_steps

    @property
    def exceeds_guard(self):
        return self.epsilon_guard is not None and self.epsilon > self.epsilon_guard


@dataclasses.dataclass
class TrajectoryRecord:
    """Recorded states and energy monitors.

    ``sup_H_sq[r]`` is max_{t_i <= t_r} |phi(t_i)|^2 and ``int_V_sq[r]`` the
    left-point sum of ||phi(t_i)||^2 dt over t_i < t_r, both over every step
    (not only recorded ones).  Trailing axes after the first are batch axes.
    """

    times: np.ndarray
    states: np.ndarray | None
    sup_H_sq: np.ndarray
    int_V_sq: np.ndarray
    basis: object
    dt: float
    blown_up: np.ndarray | None = None
    observers: dict = dataclasses.field(default_factory=dict)

    @property
    def x_norm_sq(self):
        return self.sup_H_sq[-1] + self.int_V_sq[-1]

    def gN_flags(self, N):
        """Indicator of G_N(t) at each recorded time."""
        return (self.sup_H_sq <= N) & (self.int_V_sq <= N)

    def state(self, r=-1):
        return SpectralField(self.states[r], self.basis)

    def summary_rows(self):
        """(t, |phi|^2, ||phi||^2, sup monitor, int monitor) per recorded time, path-averaged."""
        if self.states is None:
            raise ValueError("summary needs recorded states")
        h = np.sum(self.states**2, axis=-1)
        v = np.sum(self.basis.eigenvalues * self.states**2, axis=-1)
        ax = tuple(range(1, h.ndim))
        return np.column_stack([self.times, h.mean(axis=ax), v.mean(axis=ax),
                                self.sup_H_sq.mean(axis=ax), self.int_V_sq.mean(axis=ax)])


def _coeffs(x):
    return x.coeffs if isinstance(x, SpectralField) else np.asarray(x, dtype=float)


def step(model, state, h_k, dW_k, config):
    """One semi-implicit Euler-Maruyama step; ``h_k``/``dW_k`` may be None."""
    c = _coeffs(state)
    dt = config.dt
    rhs = c + dt * model.explicit_drift(c, None if h_k is None else _coeffs(h_k))
    if dW_k is not None and config.epsilon > 0:
        rhs = rhs + np.sqrt(config.epsilon) * model.sigma.gain(c) * _coeffs(dW_k)
    out = rhs / (1.0 + dt * model.a_diag)
    if not np.all(np.isfinite(out)):
        raise BlowUpError(-1)
    return SpectralField(out, model.basis) if isinstance(state, SpectralField) else out


def _control_values(model, control, config):
    if control is None:
        return None
    values = control.values if isinstance(control, ControlPath) else np.asarray(control, float)
    if isinstance(control, ControlPath) and abs(control.T - config.T) > 1e-12 * config.T:
        raise ValueError(f"control horizon {control.T} != integration horizon {config.T}")
    if values.shape[0] != config.n_steps:
        if isinstance(control, ControlPath):
            values = control.resample(config.n_steps).values
        else:
            raise ValueError(f"control has {values.shape[0]} cells, expected {config.n_steps}")
    if model.control_sigma is None:
        if np.any(values != 0):
            raise ValueError("nonzero control needs a diffusion coefficient")
        return None
    check_control(model.control_sigma.covariance, values)
    return values if np.any(values != 0) else None


def integrate(model, xi, control, config, noise=None, observers=(), keep_states=True,
              on_blowup="raise"):
    """Core loop.  ``noise(k, shape)`` returns dW_k (or None for eps = 0).

    ``on_blowup="mask"`` zeroes diverged paths, flags them in
    ``record.blown_up`` and sets their monitors to NaN instead of raising.
    """
    basis = model.basis
    c = np.array(_coeffs(xi), dtype=float)
    batch = c.shape[:-1]
    h = _control_values(model, control, config)
    dt, n = config.dt, config.n_steps
    eig = basis.eigenvalues
    denom = 1.0 + dt * model.a_diag
    stride = config.record_stride
    n_rec = n // stride + 1
    rec_states = np.empty((n_rec,) + c.shape) if keep_states else None
    sup_h = np.empty((n_rec,) + batch)
    int_v = np.empty((n_rec,) + batch)
    blown = np.zeros(batch, dtype=bool)
    sqrt_eps = np.sqrt(config.epsilon)
    stochastic = config.epsilon > 0 and noise is not None

    run_sup = np.sum(c**2, axis=-1)
    run_int = np.zeros(batch)
    for k in range(n + 1):
        if k % stride == 0:
            r = k // stride
            if keep_states:
                rec_states[r] = c
            sup_h[r] = run_sup
            int_v[r] = run_int
        for obs in observers:
            obs.update(k, c)
        if k == n:
            break
        run_int = run_int + dt * np.sum(eig * c**2, axis=-1)
        rhs = c + dt * model.explicit_drift(c, None if h is None else h[k])
        if stochastic:
            dW = noise(k, c.shape)
            rhs += sqrt_eps * model.sigma.gain(c) * dW
        c = rhs / denom
        bad = ~np.all(np.isfinite(c), axis=-1)
        if np.any(bad):
            if on_blowup == "raise":
                idx = np.nonzero(np.atleast_1d(bad))[0] if batch else None
                raise BlowUpError(k + 1, idx)
            blown |= bad
            c[bad] = 0.0
        run_sup = np.maximum(run_sup, np.sum(c**2, axis=-1))
        if np.any(blown):
            run_sup = np.where(blown, np.nan, run_sup)
            run_int = np.where(blown, np.nan, run_int)
    times = np.arange(n_rec) * (dt * stride)
    rec = TrajectoryRecord(times, rec_states, sup_h, int_v, basis, dt,
                           blown if batch else None)
    for obs in observers:
        rec.observers[obs.name] = obs.result(rec)
    return rec


def wiener_noise(covariance, dt, rng):
    scale = np.sqrt(covariance.lambdas * dt)

    def draw(k, shape):
        return rng.standard_normal(shape) * scale

    return draw


def _check_guard(config):
    if config.exceeds_guard:
        warnings.warn(f"epsilon={config.epsilon:g} exceeds the well-posedness guard "
                      f"eps_0={config.epsilon_guard:g}", EpsilonGuardWarning, stacklevel=3)


def run_skeleton(model, xi, control, config, **kw):
    """Deterministic controlled equation (eps = 0): the map h -> phi_h."""
    cfg = dataclasses.replace(config, epsilon=0.0)
    return integrate(model, xi, control, cfg, noise=None, **kw)


def run_stochastic(model, xi, control, config, rng, n_paths=None, **kw):
    """Sample path(s) of the stochastic controlled equation.

    With ``n_paths`` the initial datum is broadcast to a batch of paths.
    With eps = 0 no random numbers are drawn and the result equals
    :func:`run_skeleton` bitwise.
    """
    _check_guard(config)
    xi = _coeffs(xi)
    if n_paths is not None:
        xi = np.broadcast_to(xi, (n_paths, xi.shape[-1])).copy()
    noise = None
    if config.epsilon > 0:
        if model.sigma is None or model.covariance is None:
            raise ValueError("eps > 0 needs a covariance and a diffusion coefficient")
        noise = wiener_noise(model.covariance, config.dt, rng)
    return integrate(model, xi, control, config, noise=noise, **kw)


def chunk_rng(seed, chunk):
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(chunk),)))


def run_ensemble(model, xi, control, config, seed, n_paths, chunk_size=64, threads=1,
                 observer_factory=None, keep_states=False, on_blowup="mask"):
    """Monte-Carlo paths in fixed-size chunks with per-chunk random streams.

    Chunk c always uses the stream keyed by (seed, c), so results do not
    depend on ``threads``.  Returns a record whose batch axis is the path
    index; observer results are concatenated along that axis.
    """
    _check_guard(config)
    starts = list(range(0, n_paths, chunk_size))

    def one(ci):
        m = min(chunk_size, n_paths - starts[ci])
        obs = observer_factory() if observer_factory is not None else ()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EpsilonGuardWarning)
            return run_stochastic(model, xi, control, config, chunk_rng(seed, ci), n_paths=m,
                                  observers=obs, keep_states=keep_states, on_blowup=on_blowup)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, range(len(starts))))
    else:
        parts = [one(i) for i in range(len(starts))]
    first = parts[0]
    cat = lambda name, axis: np.concatenate([getattr(p, name) for p in parts], axis=axis)
    rec = TrajectoryRecord(first.times, cat("states", 1) if keep_states else None,
                           cat("sup_H_sq", 1), cat("int_V_sq", 1), first.basis, first.dt,
                           cat("blown_up", 0))
    for key in first.observers:
        rec.observers[key] = np.concatenate([p.observers[key] for p in parts], axis=-1)
    return rec


# ---------------------------------------------------------------------------
# observers and diagnostics


class XDistanceObserver:
    """Per-path X-distance^2 to a reference trajectory, accumulated in stream."""

    name = "x_distance_sq"

    def __init__(self, reference_states, eigenvalues, dt):
        self.ref = reference_states
        self.eig = eigenvalues
        self.dt = dt
        self.sup = None
        self.integral = None
        self.n = reference_states.shape[0] - 1

    def update(self, k, c):
        e = c - self.ref[k]
        h = np.sum(e**2, axis=-1)
        self.sup = h if self.sup is None else np.maximum(self.sup, h)
        if k < self.n:
            v = self.dt * np.sum(self.eig * e**2, axis=-1)
            self.integral = v if self.integral is None else self.integral + v

    def result(self, record):
        return self.sup + self.integral


class DyadicIncrementObserver:
    """Streaming sum over s of |phi(s) - phi(s_bar_n)|^2 dt for dyadic levels n.

    s runs over the step grid, s_bar_n is the right end of the dyadic cell of
    length T 2^-n containing s.  Deviations are taken from the cell's first
    state to keep the quadratic expansion well conditioned.
    """

    name = "dyadic_increments"

    def __init__(self, levels, n_steps, dt):
        self.levels = list(levels)
        self.dt = dt
        self.m = []
        for n in self.levels:
            if n_steps % (2**n):
                raise ValueError(f"n_steps={n_steps} not divisible by 2^{n}")
            self.m.append(n_steps // 2**n)
        self.state = [None] * len(self.levels)
        self.total = None

    def update(self, k, c):
        if self.total is None:
            self.total = np.zeros((len(self.levels),) + c.shape[:-1])
        for i, m in enumerate(self.m):
            st = self.state[i]
            if k > 0 and k % m == 0:
                start, s1, s2 = st
                dbar = c - start
                self.total[i] += self.dt * (s2 - 2 * np.sum(s1 * dbar, -1) + m * np.sum(dbar**2, -1))
                st = None
            if st is None:
                st = [c.copy(), np.zeros_like(c), np.zeros(c.shape[:-1])]
            d = c - st[0]
            st[1] += d
            st[2] += np.sum(d**2, -1)
            self.state[i] = st

    def result(self, record):
        return self.total


def dyadic_increment_statistic(records, n_levels, N, levels=None):
    """I_n = mean over paths of 1_{G_N(T)} sum_s |phi(s) - phi(s_bar_n)|^2 ds.

    ``records`` is a TrajectoryRecord with states (optionally batched) or a
    list of them; the recorded grid must be dense enough that every dyadic
    cell of the finest level contains a whole number of recorded intervals.
    Returns an array over ``levels`` (default 1..n_levels).
    """
    recs = records if isinstance(records, (list, tuple)) else [records]
    levels = list(range(1, n_levels + 1)) if levels is None else list(levels)
    values = []
    for rec in recs:
        if rec.states is None:
            raise ValueError("dyadic statistic needs recorded states")
        R = rec.states.shape[0] - 1
        ds = rec.times[1] - rec.times[0]
        gate = (rec.sup_H_sq[-1] <= N) & (rec.int_V_sq[-1] <= N)
        row = []
        for n in levels:
            if R % (2**n):
                raise ValueError(f"{R} recorded intervals cannot resolve dyadic level {n}")
            m = R // 2**n
            i = np.arange(R)
            sbar = (i // m + 1) * m
            diff = rec.states[i] - rec.states[sbar]
            contrib = ds * np.sum(diff**2, axis=(0, -1))
            row.append(np.mean(np.where(gate, contrib, 0.0)) * np.size(gate) / max(np.size(gate), 1))
        values.append(row)
    if len(recs) == 1:
        return np.asarray(values[0])
    return np.mean(np.asarray(values), axis=0)


def x_distance(rec_a, rec_b):
    """sqrt(sup_t |a - b|^2 + int ||a - b||^2 dt) on the common recorded grid."""
    if rec_a.states is None or rec_b.states is None:
        raise ValueError("x_distance needs recorded states")
    if rec_a.states.shape != rec_b.states.shape or not np.allclose(rec_a.times, rec_b.times):
        raise ValueError("records are on different grids")
    e = rec_a.states - rec_b.states
    eig = rec_a.basis.eigenvalues
    ds = rec_a.times[1] - rec_a.times[0]
    sup = np.max(np.sum(e**2, axis=-1), axis=0)
    integral = ds * np.sum(np.sum(eig * e[:-1] ** 2, axis=-1), axis=0)
    return np.sqrt(sup + integral)


def energy_balance_residuals(model, record):
    """Per-step residuals of the discrete energy balance (needs stride 1, no noise).

    r_k = |phi_{k+1}|^2 - |phi_k|^2 + 2 dt <A phi_{k+1}, phi_{k+1}> - 4 dt (u2, theta)_k
    """
    s = record.states
    dt = record.dt
    if not np.isclose(record.times[1] - record.times[0], dt):
        raise ValueError("energy residuals need every step recorded")
    C = model.basis.coupling_matrix
    a, b = model.basis.split(s)
    u2theta = np.einsum("...i,ij,...j->...", a, C, b)
    h = np.sum(s**2, axis=-1)
    dis = np.sum(model.a_diag * s**2, axis=-1)
    return h[1:] - h[:-1] + 2 * dt * dis[1:] - 4 * dt * u2theta[:-1]


def control_norm_bound(params, sigma_tilde, T, M, xi_norm_sq):
    """Explicit bound on sup|phi|^2 + int ||phi||^2 for the skeleton with h in S_M.

    From d(1+|phi|^2) <= (2 + 2 sqrt(K) |h|_0)(1+|phi|^2) - 2(nu^kappa)||phi||^2
    and Gronwall with int |h|_0 <= sqrt(T M):
    (1 + |xi|^2) exp(2T + 2 sqrt(K T M)) (1 + 1/(2 nu^kappa)).
    """
    K = 0.0 if sigma_tilde is None else sigma_tilde.K
    growth = np.exp(2 * T + 2 * np.sqrt(K * T * M))
    return float((1 + xi_norm_sq) * growth * (1 + 1 / (2 * params.nu_wedge_kappa)))
