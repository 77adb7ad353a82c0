"""Trace-class covariance, diffusion coefficients and control paths.

Q is diagonal in the Galerkin basis, Q e_j = lambda_j e_j, so P_n commutes
with Q^{1/2} and the Cameron-Martin norm is |v|_0^2 = sum v_j^2 / lambda_j.
Every built-in diffusion coefficient is diagonal in the same basis,
sigma(phi) e_j = gain_j(phi) e_j, which gives
|sigma(phi)|_{L_Q}^2 = sum_j lambda_j gain_j(phi)^2.
"""

from __future__ import annotations

import csv
import dataclasses

import numpy as np

from .spectral_core import SpectralField


class InvalidControlError(ValueError):
    """A control charges a mode outside the support of Q."""


@dataclasses.dataclass(frozen=True, eq=False)
class CovarianceSpec:
    lambdas: np.ndarray
    basis: object = None

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float)
        if lam.ndim != 1:
            raise ValueError("lambdas must be one-dimensional")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("covariance eigenvalues must be finite and >= 0")
        if self.basis is not None and lam.size != self.basis.n:
            raise ValueError(f"{lam.size} eigenvalues for a basis of size {self.basis.n}")
        lam.setflags(write=False)
        object.__setattr__(self, "lambdas", lam)

    @classmethod
    def power_law(cls, basis, amplitude=1.0, decay_s=1.5):
        """lambda_j = amplitude * (1 + eigenvalue_j)^(-decay_s), decay_s > 1."""
        if not decay_s > 1:
            raise ValueError(f"decay_s must exceed 1 for a trace-class Q, got {decay_s}")
        if amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        return cls(amplitude * (1.0 + basis.eigenvalues) ** (-decay_s), basis)

    @property
    def trace(self):
        return float(np.sum(self.lambdas))

    @property
    def support(self):
        return self.lambdas > 0

    @property
    def sqrt_lambdas(self):
        return np.sqrt(self.lambdas)

    def tail_estimate(self, amplitude, decay_s, factor=8):
        """Approximate sum of power-law eigenvalues beyond the retained modes.

        Uses the Dirichlet-periodic lattice (2 pi k1 / l)^2 + (pi k2)^2 for both
        fields up to ``factor`` times the retained cutoffs, plus the 2D Weyl
        integral of the remainder.
        """
        b = self.basis
        l = b.domain.l
        K1 = factor * max(b.max_k1, 1)
        K2 = factor * max(b.max_k2, b.modes_per_k1)
        k1 = np.arange(-K1, K1 + 1)[:, None]
        k2 = np.arange(1, K2 + 1)[None, :]
        eig = ((2 * np.pi * k1 / l) ** 2 + (np.pi * k2) ** 2).ravel()
        total = 2 * np.sum(amplitude * (1 + eig) ** (-decay_s))
        cut = min((2 * np.pi * K1 / l) ** 2, (np.pi * K2) ** 2)
        # Weyl: #{eig <= E} ~ l E / (4 pi) per field in the half-plane count
        density = 2 * l / (4 * np.pi)
        remainder = density * amplitude * (1 + cut) ** (1 - decay_s) / (decay_s - 1)
        return max(float(total + remainder - self.trace), 0.0)


def sample_wiener_increment(spec, dt, rng, batch=()):
    """Q-Wiener increment over dt: independent N(0, lambda_j dt) per mode."""
    if dt < 0:
        raise ValueError("dt must be >= 0")
    z = rng.standard_normal(tuple(batch) + spec.lambdas.shape)
    inc = z * np.sqrt(spec.lambdas * dt)
    return SpectralField(inc, spec.basis) if spec.basis is not None else inc


# ---------------------------------------------------------------------------
# diffusion coefficients


class DiffusionCoefficient:
    """sigma(phi) acting diagonally: (sigma(phi) w)_j = gain_j(phi) w_j.

    Subclasses set ``name``, implement :meth:`gain` and :meth:`gain_derivative`
    (elementwise d gain_j / d phi_j), and record the growth and Lipschitz
    constants K, L of |sigma(phi)|_{L_Q}^2 <= K (1 + |phi|^2) and
    |sigma(phi) - sigma(psi)|_{L_Q}^2 <= L |phi - psi|^2.
    """

    name = "abstract"
    state_dependent = True

    def __init__(self, covariance):
        self.covariance = covariance

    def gain(self, c):
        raise NotImplementedError

    def gain_derivative(self, c):
        raise NotImplementedError

    @property
    def K(self):
        raise NotImplementedError

    @property
    def L(self):
        raise NotImplementedError

    def constants_L4(self, domain_area):
        """(K~, L~) for the L^4 form of the bounds: |phi| <= |D|^{1/4} |phi|_{L4}."""
        s = max(1.0, np.sqrt(domain_area))
        return self.K * s, self.L * np.sqrt(domain_area)

    def params(self):
        return {}


class Additive(DiffusionCoefficient):
    """sigma(phi) = S0, a fixed diagonal operator (identity by default)."""

    name = "additive"
    state_dependent = False

    def __init__(self, covariance, s0=None):
        super().__init__(covariance)
        n = covariance.lambdas.size
        self.s0 = np.ones(n) if s0 is None else np.broadcast_to(np.asarray(s0, float), (n,)).copy()

    def gain(self, c):
        return np.broadcast_to(self.s0, np.shape(c))

    def gain_derivative(self, c):
        return np.zeros(np.shape(c))

    @property
    def K(self):
        return float(np.sum(self.covariance.lambdas * self.s0**2))

    @property
    def L(self):
        return 0.0

    def params(self):
        return {"s0": "ones" if np.all(self.s0 == 1) else list(map(float, self.s0))}


class DiagonalBounded(DiffusionCoefficient):
    """gain_j(phi) = b0 + b1 tanh(phi_j): bounded and Lipschitz."""

    name = "diagonal_bounded"

    def __init__(self, covariance, b0=1.0, b1=0.5):
        super().__init__(covariance)
        self.b0, self.b1 = float(b0), float(b1)

    def gain(self, c):
        return self.b0 + self.b1 * np.tanh(c)

    def gain_derivative(self, c):
        return self.b1 / np.cosh(c) ** 2

    @property
    def K(self):
        return (abs(self.b0) + abs(self.b1)) ** 2 * self.covariance.trace

    @property
    def L(self):
        return self.b1**2 * float(np.max(self.covariance.lambdas))

    def params(self):
        return {"b0": self.b0, "b1": self.b1}


class LinearClipped(DiffusionCoefficient):
    """gain_j(phi) = scale * clip(phi_j, -clip, clip): multiplicative, vanishes at 0."""

    name = "linear_clipped"

    def __init__(self, covariance, scale=1.0, clip=1.0):
        super().__init__(covariance)
        if clip <= 0:
            raise ValueError("clip must be positive")
        self.scale, self.clip = float(scale), float(clip)

    def gain(self, c):
        return self.scale * np.clip(c, -self.clip, self.clip)

    def gain_derivative(self, c):
        return self.scale * (np.abs(c) < self.clip).astype(float)

    @property
    def K(self):
        lam = self.covariance.lambdas
        return self.scale**2 * min(float(np.max(lam)), self.clip**2 * float(np.sum(lam)))

    @property
    def L(self):
        return self.scale**2 * float(np.max(self.covariance.lambdas))

    def params(self):
        return {"scale": self.scale, "clip": self.clip}


SIGMA_FAMILIES = {
    "additive": Additive,
    "diagonal_bounded": DiagonalBounded,
    "linear_clipped": LinearClipped,
}


def make_sigma(family, covariance, **params):
    try:
        cls = SIGMA_FAMILIES[family]
    except KeyError:
        raise ValueError(f"unknown sigma family {family!r}; choose from {sorted(SIGMA_FAMILIES)}") from None
    return cls(covariance, **params)


def _coeffs(x):
    return x.coeffs if isinstance(x, SpectralField) else np.asarray(x, dtype=float)


def lq_norm_sq(sigma, field):
    """|sigma(phi)|_{L_Q}^2 = tr(sigma Q sigma^*) = sum_j lambda_j gain_j^2."""
    g = sigma.gain(_coeffs(field))
    return np.sum(sigma.covariance.lambdas * g**2, axis=-1)


def lq_distance_sq(sigma, f, g):
    d = sigma.gain(_coeffs(f)) - sigma.gain(_coeffs(g))
    return np.sum(sigma.covariance.lambdas * d**2, axis=-1)


def apply_sigma(sigma, field, direction):
    """sigma(phi) w for a direction w in H (coefficients)."""
    c = _coeffs(field)
    out = sigma.gain(c) * _coeffs(direction)
    return SpectralField(out, field.basis) if isinstance(field, SpectralField) else out


def check_control(covariance, h):
    h = np.asarray(h, dtype=float)
    bad = (~covariance.support) & (h != 0)
    if np.any(bad):
        modes = np.nonzero(bad.reshape(-1, bad.shape[-1]).any(axis=0))[0]
        raise InvalidControlError(f"control charges modes outside the support of Q: {modes[:10].tolist()}")
    return h


def apply_sigma_to_control(sigma, field, h0vec):
    """sigma(phi) h for h in H0; rejects components where lambda_j = 0."""
    h = check_control(sigma.covariance, _coeffs(h0vec))
    return apply_sigma(sigma, field, h)


def h0_norm_sq(covariance, h):
    """|h|_0^2 = sum h_j^2 / lambda_j (infinite off the support)."""
    h = np.asarray(h, dtype=float)
    lam = covariance.lambdas
    off = (lam == 0) & (h != 0)
    safe = np.where(lam > 0, lam, 1.0)
    val = np.sum(np.where(lam > 0, h**2 / safe, 0.0), axis=-1)
    return np.where(np.any(off, axis=-1), np.inf, val)


# ---------------------------------------------------------------------------
# controls


@dataclasses.dataclass
class ControlPath:
    """Piecewise-constant h on a uniform grid of n_steps cells over [0, T].

    ``values[k]`` are the H-coordinates of h on [k dt, (k+1) dt).
    """

    values: np.ndarray
    T: float
    covariance: CovarianceSpec

    def __post_init__(self):
        self.values = check_control(self.covariance, np.atleast_2d(np.asarray(self.values, float)))
        if self.T <= 0:
            raise ValueError("T must be positive")

    @classmethod
    def zero(cls, covariance, T, n_steps):
        return cls(np.zeros((n_steps, covariance.lambdas.size)), T, covariance)

    @classmethod
    def from_whitened(cls, covariance, T, z):
        """h = Q^{1/2} z, so |h|_0 = |z| on the support of Q."""
        return cls(np.asarray(z, float) * covariance.sqrt_lambdas, T, covariance)

    def whitened(self):
        lam = self.covariance.lambdas
        return np.where(lam > 0, self.values / np.sqrt(np.where(lam > 0, lam, 1.0)), 0.0)

    @property
    def n_steps(self):
        return self.values.shape[0]

    @property
    def dt(self):
        return self.T / self.n_steps

    def h0_norms_sq(self):
        return h0_norm_sq(self.covariance, self.values)

    def resample(self, n_steps):
        """Same path on a grid of ``n_steps`` cells (must be a multiple or divisor)."""
        if n_steps % self.n_steps == 0:
            return ControlPath(np.repeat(self.values, n_steps // self.n_steps, axis=0),
                               self.T, self.covariance)
        if self.n_steps % n_steps == 0:
            r = self.n_steps // n_steps
            v = self.values.reshape(n_steps, r, -1).mean(axis=1)
            return ControlPath(v, self.T, self.covariance)
        raise ValueError(f"cannot resample {self.n_steps} cells to {n_steps}")

    def to_csv(self, path):
        """Rows (t, mode_id, value) with t the left end of each cell."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "mode_id", "value"])
            for k, row in enumerate(self.values):
                t = k * self.dt
                for j in np.nonzero(row)[0]:
                    w.writerow([repr(float(t)), int(j), repr(float(row[j]))])

    @classmethod
    def from_csv(cls, path, covariance, T, n_steps):
        values = np.zeros((n_steps, covariance.lambdas.size))
        dt = T / n_steps
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                k = int(round(float(rec["t"]) / dt))
                values[k, int(rec["mode_id"])] = float(rec["value"])
        return cls(values, T, covariance)


def action(control):
    """(1/2) sum_k |h_k|_0^2 dt, exact for a piecewise-constant path."""
    return 0.5 * float(np.sum(control.h0_norms_sq())) * control.dt


def in_S_M(control, M):
    return 2.0 * action(control) <= M


# ---------------------------------------------------------------------------
# well-posedness guard


def epsilon_guard(params, sigma, T, M, c_embed, sigma_tilde=None, p=2):
    """Smallness threshold eps_0 = min(eps_{0,p}, (nu ^ kappa) / (2 L)).

    eps_{0,i} = 1 ^ (nu^kappa)/(8 i K) ^ (nu^kappa)/(144 i K [1 + C_i e^{C_i}]^2)
    ^ eps_{0,i-1}, with C_i = 2 i T + i^2 c K~ M / delta_1 and
    delta_1 = (nu^kappa) i / 2; ``c_embed`` is the constant c in
    |phi|_{L4}^2 <= c ||phi||^2 (c1 * c2 from the basis constants).
    """
    nk = params.nu_wedge_kappa
    K = sigma.K
    sigma_tilde = sigma if sigma_tilde is None else sigma_tilde
    K_tilde = sigma_tilde.K
    eps = 1.0
    for i in range(1, p + 1):
        delta1 = nk * i / 2.0
        Ci = 2 * i * T + i * i * c_embed * K_tilde * M / delta1
        bound = 1.0
        if K > 0:
            with np.errstate(over="ignore"):
                growth = (1.0 + Ci * np.exp(Ci)) ** 2
            bound = min(bound, nk / (8 * i * K), nk / (144 * i * K * growth))
        eps = min(eps, bound)
    if sigma.L > 0:
        eps = min(eps, nk / (2 * sigma.L))
    return float(eps)


def verify_assumptions(sigma, basis, n_samples, rng, scale=1.0):
    """Count violations of the growth and Lipschitz bounds on random states."""
    phi = rng.standard_normal((n_samples, basis.n)) * scale
    psi = rng.standard_normal((n_samples, basis.n)) * scale
    growth = lq_norm_sq(sigma, phi) - sigma.K * (1 + np.sum(phi**2, -1))
    lip = lq_distance_sq(sigma, phi, psi) - sigma.L * np.sum((phi - psi) ** 2, -1)
    tol = 1e-12 * (1 + sigma.K + sigma.L)
    return int(np.sum(growth > tol)), int(np.sum(lip > tol))
