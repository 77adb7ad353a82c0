"""
Galerkin eigenbases, quadrature grids and norms for the periodic strip.

The domain is D = (0, l) x (0, 1), periodic in x1 and bounded by walls at
x2 = 0 and x2 = 1.  Temperature modes are Dirichlet-periodic Laplacian
eigenfunctions.  Velocity modes are built from a streamfunction
psi = c(x1) f(x2), so u = (c f', -c' f) is divergence-free identically;
the vertical profile f is analytic in ``free_slip`` mode and is computed
by a Legendre-Galerkin solve of the clamped Stokes eigenproblem in
``no_slip`` mode.

A state phi = (u, theta) is carried as one flat coefficient vector, velocity
coefficients first.  All transforms are separable dense products over a
quadrature grid sized so that cubic products of retained modes integrate
exactly (free_slip) or to round-off (no_slip).
"""

from __future__ import annotations

import dataclasses
import struct
from functools import cached_property

import numpy as np
import scipy.linalg
from numpy.polynomial import legendre as npleg


BC_MODES = ("free_slip", "no_slip")

VEL_PARTS = {
    # name: (horizontal derivative order, vertical profile index, sign)
    "u1": (0, 1, 1.0),
    "u2": (1, 0, -1.0),
    "d1u1": (1, 1, 1.0),
    "d2u1": (0, 2, 1.0),
    "d1u2": (2, 0, -1.0),
    "d2u2": (1, 1, -1.0),
}
TEMP_PARTS = {
    "t": (0, 0),
    "d1t": (1, 0),
    "d2t": (0, 1),
}


class ConfigurationError(ValueError):
    """Inconsistent domain / cutoff / grid choice."""


class BasisError(RuntimeError):
    """Eigen-solve failure or a non-physical eigenvalue."""


@dataclasses.dataclass(frozen=True)
class Domain:
    """Strip (0, l) x (0, 1).

    ``n_grid_x1`` is the number of periodic nodes in x1.  ``n_grid_x2`` is the
    number of trapezoid intervals (free_slip) or Gauss-Legendre nodes
    (no_slip) in x2.  ``None`` picks a size from the cutoffs when a basis is
    built.
    """

    l: float = 2.0 * np.pi
    n_grid_x1: int | None = None
    n_grid_x2: int | None = None

    def __post_init__(self):
        if not self.l > 0:
            raise ConfigurationError(f"domain.l must be positive, got {self.l}")
        for name in ("n_grid_x1", "n_grid_x2"):
            n = getattr(self, name)
            if n is not None and (n < 4 or n % 2):
                raise ConfigurationError(f"domain.{name} must be even and >= 4, got {n}")


@dataclasses.dataclass
class PhysicalField:
    """Grid values of (u1, u2, theta); trailing shape is (n1, n2)."""

    u1: np.ndarray
    u2: np.ndarray
    theta: np.ndarray


# ---------------------------------------------------------------------------
# 1D building blocks


def _horizontal_tables(l, max_k1, x1):
    """Values and first two derivatives of the real Fourier functions.

    Slot 0 is the constant, slot 2k-1 is cos(k), slot 2k is sin(k).
    Returns array (3, n1, S) and the signed wavenumber of each slot.
    """
    n_slots = 2 * max_k1 + 1
    tab = np.zeros((3, x1.size, n_slots))
    k_signed = np.zeros(n_slots, dtype=int)
    tab[0, :, 0] = 1.0 / np.sqrt(l)
    amp = np.sqrt(2.0 / l)
    for k in range(1, max_k1 + 1):
        a = 2.0 * np.pi * k / l
        c, s = np.cos(a * x1), np.sin(a * x1)
        ic, is_ = 2 * k - 1, 2 * k
        tab[0, :, ic], tab[0, :, is_] = amp * c, amp * s
        tab[1, :, ic], tab[1, :, is_] = -a * amp * s, a * amp * c
        tab[2, :, ic], tab[2, :, is_] = -a * a * amp * c, -a * a * amp * s
        k_signed[ic], k_signed[is_] = k, -k
    return tab, k_signed


def _shen_biharmonic(n):
    """Legendre coefficients (n, n+4) of clamped functions on [-1, 1].

    phi_k = L_k - 2(2k+5)/(2k+7) L_{k+2} + (2k+3)/(2k+7) L_{k+4}
    vanishes together with its derivative at y = +-1.
    """
    coef = np.zeros((n, n + 4))
    for k in range(n):
        coef[k, k] = 1.0
        coef[k, k + 2] = -2.0 * (2 * k + 5) / (2 * k + 7)
        coef[k, k + 4] = (2 * k + 3) / (2 * k + 7)
    return coef


def _legendre_eval(coef, x2, deriv):
    """Evaluate Legendre series (rows of coef, variable y = 2 x2 - 1) in x2."""
    y = 2.0 * x2 - 1.0
    c = coef.T
    if deriv:
        c = npleg.legder(c, deriv) * 2.0**deriv
    return npleg.legval(y, c).reshape(coef.shape[0], -1) if coef.ndim == 2 else npleg.legval(y, c)


def solve_clamped_stokes(alpha, n_modes, n_poly=None):
    """Lowest Stokes eigenpairs of the clamped channel at wavenumber alpha.

    Solves (D^2 - a^2)^2 f = lam (a^2 - D^2) f on (0, 1) with
    f = f' = 0 at both walls, in weak form, on a Shen-Legendre basis.
    Eigenvectors are normalised so that int (f'^2 + a^2 f^2) dx2 = 1, which is
    unit H-norm for the velocity field built from f.

    Returns (eigenvalues (n_modes,), Legendre coefficients (n_modes, n_poly+4)).
    """
    if n_poly is None:
        n_poly = 2 * n_modes + 20
    if n_poly < n_modes:
        raise BasisError("polynomial space smaller than requested mode count")
    shen = _shen_biharmonic(n_poly)
    yq, wq = npleg.leggauss(n_poly + 8)
    xq, wx = (yq + 1.0) / 2.0, wq / 2.0
    f = _legendre_eval(shen, xq, 0)
    fp = _legendre_eval(shen, xq, 1)
    fpp = _legendre_eval(shen, xq, 2)
    a2 = alpha * alpha
    stiff = (fpp * wx) @ fpp.T + 2 * a2 * (fp * wx) @ fp.T + a2 * a2 * (f * wx) @ f.T
    mass = (fp * wx) @ fp.T + a2 * (f * wx) @ f.T
    try:
        lam, vec = scipy.linalg.eigh(stiff, mass, subset_by_index=[0, n_modes - 1])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise BasisError(f"clamped Stokes eigen-solve failed at alpha={alpha}: {exc}") from exc
    if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
        raise BasisError(f"non-positive Stokes eigenvalue at alpha={alpha}: {lam.min()}")
    coef = vec.T @ shen
    for row in coef:
        j = np.argmax(np.abs(row))
        if row[j] < 0:
            row *= -1.0
    return lam, coef


def _sine_profiles(k, x2, kind):
    """sqrt(2) sin(pi k x2) or sqrt(2) cos(pi k x2) and two derivatives."""
    a = np.pi * k
    s, c = np.sin(a * x2), np.cos(a * x2)
    r2 = np.sqrt(2.0)
    if kind == "sin":
        return r2 * s, r2 * a * c, -r2 * a * a * s
    return r2 * c, -r2 * a * s, -r2 * a * a * c


# ---------------------------------------------------------------------------
# basis


def _sort_modes(eig, k1, idx):
    """Ascending eigenvalue; ties by |k1|, cos before sin, vertical index."""
    key_eig = np.round(eig, 9)
    sign = (k1 < 0).astype(int)
    return np.lexsort((idx, sign, np.abs(k1), key_eig))


class GalerkinBasis:
    """Orthonormal velocity and temperature eigenmodes on a quadrature grid.

    Instances are immutable after construction and can be shared between
    workers.  Use :func:`build_basis` rather than the constructor.
    """

    def __init__(self, domain, max_k1, max_k2, modes_per_k1, bc_mode,
                 vel_eig_table, vel_coef_table, n_poly):
        self.domain = domain
        self.max_k1 = int(max_k1)
        self.max_k2 = int(max_k2)
        self.modes_per_k1 = int(modes_per_k1)
        self.bc_mode = bc_mode
        self.n_poly = n_poly
        # per |k1| eigenvalues (K1+1, J) and, for no_slip, Legendre profiles
        self._vel_eig_table = vel_eig_table
        self._vel_coef_table = vel_coef_table

        l = domain.l
        n1 = domain.n_grid_x1
        self.x1 = np.arange(n1) * (l / n1)
        self.w1 = l / n1
        if bc_mode == "free_slip":
            n2 = domain.n_grid_x2
            self.x2 = np.linspace(0.0, 1.0, n2 + 1)
            self.w2 = np.full(n2 + 1, 1.0 / n2)
            self.w2[[0, -1]] *= 0.5
        else:
            y, w = npleg.leggauss(domain.n_grid_x2)
            self.x2 = (y + 1.0) / 2.0
            self.w2 = w / 2.0

        self._hx, slot_k = _horizontal_tables(l, self.max_k1, self.x1)
        S, J, K2 = 2 * self.max_k1 + 1, self.modes_per_k1, self.max_k2

        # temperature profiles (3, K2, n2)
        gt = np.zeros((3, K2, self.x2.size))
        for k in range(1, K2 + 1):
            gt[:, k - 1] = _sine_profiles(k, self.x2, "sin")
        self._gt = gt

        self._slot_k = slot_k
        fv = self.velocity_profiles(self.x2)
        vel_eig_slot = np.array([vel_eig_table[abs(k)] for k in slot_k])
        self._fv = fv
        self._fv_t = np.ascontiguousarray(fv.transpose(0, 1, 3, 2))

        # global mode lists
        vs, vj = np.meshgrid(np.arange(S), np.arange(J), indexing="ij")
        vs, vj = vs.ravel(), vj.ravel()
        veig = vel_eig_slot[vs, vj]
        order = _sort_modes(veig, slot_k[vs], vj)
        self.vel_slot, self.vel_j = vs[order], vj[order]
        self.vel_k1 = slot_k[self.vel_slot]
        self.vel_eig = veig[order]

        ts, tk = np.meshgrid(np.arange(S), np.arange(K2), indexing="ij")
        ts, tk = ts.ravel(), tk.ravel()
        k1t = slot_k[ts]
        teig = (2.0 * np.pi * k1t / l) ** 2 + (np.pi * (tk + 1)) ** 2
        order = _sort_modes(teig, k1t, tk)
        self.temp_slot, self.temp_k = ts[order], tk[order]
        self.temp_k1 = slot_k[self.temp_slot]
        self.temp_eig = teig[order]
        self._freeze()

    def velocity_profiles(self, x2):
        """Vertical profiles (3, n_slots, J, len(x2)): f, f' and f'' per slot and index.

        u1 = c(x1) f'(x2) and u2 = -c'(x1) f(x2); for k1 = 0 the u1 profile
        is stored in the f' row and the f row is zero.
        """
        x2 = np.asarray(x2, dtype=float)
        S, J, l = self.n_slots, self.modes_per_k1, self.domain.l
        fv = np.zeros((3, S, J, x2.size))
        for s in range(S):
            k = abs(self._slot_k[s])
            if k == 0:
                kind = "sin" if self.bc_mode == "no_slip" else "cos"
                for j in range(J):
                    g, gp, _ = _sine_profiles(j + 1, x2, kind)
                    fv[1, s, j], fv[2, s, j] = g, gp
            elif self.bc_mode == "free_slip":
                a = 2.0 * np.pi * k / l
                for j in range(J):
                    m = j + 1
                    amp = np.sqrt(2.0 / ((np.pi * m) ** 2 + a * a))
                    f, fp, fpp = _sine_profiles(m, x2, "sin")
                    fv[:, s, j] = amp / np.sqrt(2.0) * np.stack([f, fp, fpp])
            else:
                coef = self._vel_coef_table[k]
                for d in range(3):
                    fv[d, s] = _legendre_eval(coef, x2, d)
        return fv

    def _freeze(self):
        for name in ("vel_slot", "vel_j", "vel_k1", "vel_eig",
                     "temp_slot", "temp_k", "temp_k1", "temp_eig"):
            getattr(self, name).setflags(write=False)

    # -- sizes -------------------------------------------------------------
    @property
    def n_vel(self):
        return self.vel_slot.size

    @property
    def n_temp(self):
        return self.temp_slot.size

    @property
    def n(self):
        return self.n_vel + self.n_temp

    @property
    def n_slots(self):
        return 2 * self.max_k1 + 1

    @property
    def grid_shape(self):
        return (self.x1.size, self.x2.size)

    @cached_property
    def eigenvalues(self):
        """Stokes eigenvalues then Laplacian eigenvalues, in coefficient order."""
        e = np.concatenate([self.vel_eig, self.temp_eig])
        e.setflags(write=False)
        return e

    def mode_keys(self):
        """Hashable identity of every coefficient, stable across resolutions."""
        keys = [("u", int(k), int(j)) for k, j in zip(self.vel_k1, self.vel_j)]
        keys += [("t", int(k), int(m)) for k, m in zip(self.temp_k1, self.temp_k)]
        return keys

    def subset(self, vel_idx, temp_idx):
        """Basis restricted to the listed velocity / temperature coefficients."""
        new = object.__new__(GalerkinBasis)
        new.__dict__.update({k: v for k, v in self.__dict__.items()
                             if k not in ("eigenvalues", "coupling_matrix")})
        vel_idx = np.asarray(vel_idx, dtype=int)
        temp_idx = np.asarray(temp_idx, dtype=int)
        for name in ("vel_slot", "vel_j", "vel_k1", "vel_eig"):
            setattr(new, name, getattr(self, name)[vel_idx].copy())
        for name in ("temp_slot", "temp_k", "temp_k1", "temp_eig"):
            setattr(new, name, getattr(self, name)[temp_idx].copy())
        new._freeze()
        return new

    def split(self, c):
        return c[..., : self.n_vel], c[..., self.n_vel:]

    # -- transforms -----------------------------------------------------------
    def _scatter_vel(self, a):
        out = np.zeros(a.shape[:-1] + (self.n_slots, self.modes_per_k1))
        out[..., self.vel_slot, self.vel_j] = a
        return out

    def _scatter_temp(self, b):
        out = np.zeros(b.shape[:-1] + (self.n_slots, self.max_k2))
        out[..., self.temp_slot, self.temp_k] = b
        return out

    def vel_grid(self, a, parts=("u1", "u2")):
        """Velocity quantities on the grid; ``a`` has shape (..., n_vel)."""
        A = self._scatter_vel(np.asarray(a, dtype=float))[..., :, None, :]
        profiles = {}
        out = {}
        for name in parts:
            hd, vd, sign = VEL_PARTS[name]
            if vd not in profiles:
                profiles[vd] = (A @ self._fv[vd])[..., 0, :]
            out[name] = sign * (self._hx[hd] @ profiles[vd])
        return out

    def vel_project(self, **fields):
        """Weighted transpose of :meth:`vel_grid`: sum_k int field_k * mode_k."""
        acc = None
        for name, g in fields.items():
            hd, vd, sign = VEL_PARTS[name]
            pg = (self._hx[hd].T * (self.w1 * sign)) @ (np.asarray(g) * self.w2)
            c = (pg[..., :, None, :] @ self._fv_t[vd])[..., 0, :]
            acc = c if acc is None else acc + c
        return acc[..., self.vel_slot, self.vel_j]

    def temp_grid(self, b, parts=("t",)):
        B = self._scatter_temp(np.asarray(b, dtype=float))
        out = {}
        for name in parts:
            hd, vd = TEMP_PARTS[name]
            out[name] = self._hx[hd] @ B @ self._gt[vd]
        return out

    def temp_project(self, **fields):
        acc = None
        for name, g in fields.items():
            hd, vd = TEMP_PARTS[name]
            c = (self._hx[hd].T * self.w1) @ (np.asarray(g) * self.w2) @ self._gt[vd].T
            acc = c if acc is None else acc + c
        return acc[..., self.temp_slot, self.temp_k]

    def integrate(self, g):
        """Quadrature of a grid field (..., n1, n2) over D."""
        return self.w1 * np.sum(np.asarray(g) * self.w2, axis=(-2, -1))

    @cached_property
    def coupling_matrix(self):
        """C[i, j] = int u2(vel mode i) * theta(temp mode j)."""
        grid = self.temp_grid(np.eye(self.n_temp))["t"]
        c = self.vel_project(u2=grid).T.copy()
        c.setflags(write=False)
        return c


# ---------------------------------------------------------------------------
# construction


def _auto_grid(domain, max_k1, max_k2, modes_per_k1, bc_mode, n_poly):
    n1 = domain.n_grid_x1
    if n1 is None:
        n1 = 4 * max_k1 + 2
        n1 += n1 % 2
        n1 = max(n1, 4)
    if bc_mode == "free_slip":
        min2 = 2 * max(max_k2, modes_per_k1) + 2
    else:
        min2 = 2 * (n_poly + 3) + 4
        min2 = max(min2, int(np.ceil(2.5 * np.pi * max_k2)) + 24)
    n2 = domain.n_grid_x2
    if n2 is None:
        n2 = min2 + min2 % 2
    return dataclasses.replace(domain, n_grid_x1=n1, n_grid_x2=n2)


def _check_headroom(domain, max_k1, max_k2, modes_per_k1, bc_mode, n_poly):
    n1, n2 = domain.n_grid_x1, domain.n_grid_x2
    if n1 <= 3 * max_k1:
        raise ConfigurationError(
            f"n_grid_x1={n1} lacks dealiasing headroom for max_k1={max_k1} (need > {3 * max_k1})")
    if bc_mode == "free_slip":
        kmax = max(max_k2, modes_per_k1)
        if 2 * n2 <= 3 * kmax:
            raise ConfigurationError(
                f"n_grid_x2={n2} lacks dealiasing headroom for vertical cutoff {kmax} "
                f"(need > {1.5 * kmax})")
    else:
        deg = n_poly + 3
        if 2 * n2 - 1 < 3 * deg:
            raise ConfigurationError(
                f"n_grid_x2={n2} Gauss nodes cannot integrate cubic products of degree-{deg} "
                f"profiles (need >= {int(np.ceil((3 * deg + 1) / 2))})")
        if n2 < 1.5 * np.pi * max_k2:
            raise ConfigurationError(
                f"n_grid_x2={n2} Gauss nodes too few for temperature cutoff {max_k2}")


def build_temperature_basis(domain, max_k1, max_k2):
    """Dirichlet-periodic Laplacian modes; returns (signed k1, k2, eigenvalues).

    Mode (k1, k2) is sqrt(2/l) cos|sin(2 pi |k1| x1 / l) * sqrt(2) sin(pi k2 x2)
    (1/sqrt(l) for k1 = 0), eigenvalue (2 pi k1 / l)^2 + (pi k2)^2, with
    k1 > 0 for cosine and k1 < 0 for sine.
    """
    if max_k1 < 0 or max_k2 < 1:
        raise ConfigurationError("temperature cutoffs must satisfy max_k1 >= 0, max_k2 >= 1")
    k1 = np.arange(-max_k1, max_k1 + 1)
    K1, K2 = np.meshgrid(k1, np.arange(1, max_k2 + 1), indexing="ij")
    K1, K2 = K1.ravel(), K2.ravel()
    eig = (2.0 * np.pi * K1 / domain.l) ** 2 + (np.pi * K2) ** 2
    order = _sort_modes(eig, K1, K2)
    return K1[order], K2[order], eig[order]


def build_velocity_basis(domain, max_k1, max_modes_per_k1, bc_mode, n_poly=None):
    """Stokes eigenvalues (K1+1, J) per |k1| and no_slip Legendre profiles.

    free_slip: streamfunction sin(pi m x2), eigenvalue a^2 + (pi m)^2; the k1=0
    column holds the shear modes cos(pi m x2) with eigenvalue (pi m)^2.
    no_slip: clamped Stokes eigenproblem for k1 != 0, shear modes
    sin(pi m x2) for k1 = 0.
    """
    if bc_mode not in BC_MODES:
        raise ConfigurationError(f"bc_mode must be one of {BC_MODES}, got {bc_mode!r}")
    J = int(max_modes_per_k1)
    if J < 1:
        raise ConfigurationError("max_modes_per_k1 must be >= 1")
    if n_poly is None:
        n_poly = 2 * J + 20
    eig = np.zeros((max_k1 + 1, J))
    coef = [None] * (max_k1 + 1)
    m = np.arange(1, J + 1)
    eig[0] = (np.pi * m) ** 2
    for k in range(1, max_k1 + 1):
        a = 2.0 * np.pi * k / domain.l
        if bc_mode == "free_slip":
            eig[k] = a * a + (np.pi * m) ** 2
        else:
            eig[k], coef[k] = solve_clamped_stokes(a, J, n_poly)
    return eig, coef, n_poly


def build_basis(domain=None, max_k1=4, max_k2=4, modes_per_k1=None, bc_mode="free_slip",
                n_poly=None):
    """Full Galerkin basis for phi = (u, theta) on a dealiased grid."""
    domain = Domain() if domain is None else domain
    if max_k1 < 0 or max_k2 < 1:
        raise ConfigurationError("cutoffs must satisfy max_k1 >= 0 and max_k2 >= 1")
    J = max_k2 if modes_per_k1 is None else int(modes_per_k1)
    eig, coef, n_poly = build_velocity_basis(domain, max_k1, J, bc_mode, n_poly)
    domain = _auto_grid(domain, max_k1, max_k2, J, bc_mode, n_poly)
    _check_headroom(domain, max_k1, max_k2, J, bc_mode, n_poly)
    return GalerkinBasis(domain, max_k1, max_k2, J, bc_mode, eig, coef, n_poly)


# ---------------------------------------------------------------------------
# fields


@dataclasses.dataclass
class SpectralField:
    """Coefficients of phi = (u, theta); leading axes of ``coeffs`` are batch axes."""

    coeffs: np.ndarray
    basis: GalerkinBasis

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape[-1:] != (self.basis.n,):
            raise ValueError(
                f"coefficient length {self.coeffs.shape[-1:]} does not match basis size {self.basis.n}")

    @classmethod
    def zeros(cls, basis, batch=()):
        return cls(np.zeros(tuple(batch) + (basis.n,)), basis)

    @classmethod
    def from_parts(cls, basis, u_coeffs, theta_coeffs):
        return cls(np.concatenate([np.asarray(u_coeffs, float), np.asarray(theta_coeffs, float)],
                                  axis=-1), basis)

    @property
    def u_coeffs(self):
        return self.coeffs[..., : self.basis.n_vel]

    @property
    def theta_coeffs(self):
        return self.coeffs[..., self.basis.n_vel:]

    def velocity_only(self):
        c = self.coeffs.copy()
        c[..., self.basis.n_vel:] = 0.0
        return SpectralField(c, self.basis)

    def temperature_only(self):
        c = self.coeffs.copy()
        c[..., : self.basis.n_vel] = 0.0
        return SpectralField(c, self.basis)

    def __add__(self, other):
        return SpectralField(self.coeffs + other.coeffs, self.basis)

    def __sub__(self, other):
        return SpectralField(self.coeffs - other.coeffs, self.basis)

    def __mul__(self, scalar):
        return SpectralField(self.coeffs * scalar, self.basis)

    __rmul__ = __mul__

    def __neg__(self):
        return SpectralField(-self.coeffs, self.basis)


def random_field(basis, rng, smoothness=1.0, batch=()):
    """Gaussian coefficients with standard deviation (1 + eigenvalue)^(-smoothness)."""
    z = rng.standard_normal(tuple(batch) + (basis.n,))
    return SpectralField(z * (1.0 + basis.eigenvalues) ** (-smoothness), basis)


def synth(field):
    """Coefficients -> grid values of (u1, u2, theta)."""
    b = field.basis
    v = b.vel_grid(field.u_coeffs)
    t = b.temp_grid(field.theta_coeffs)["t"]
    return PhysicalField(v["u1"], v["u2"], t)


def analyze(physical, basis):
    """Grid values -> coefficients by quadrature projection onto the modes."""
    expected = basis.grid_shape
    for name in ("u1", "u2", "theta"):
        if np.shape(getattr(physical, name))[-2:] != expected:
            raise ValueError(f"{name} grid shape {np.shape(getattr(physical, name))} "
                             f"does not match basis grid {expected}")
    a = basis.vel_project(u1=physical.u1, u2=physical.u2)
    t = basis.temp_project(t=physical.theta)
    return SpectralField(np.concatenate([a, t], axis=-1), basis)


# ---------------------------------------------------------------------------
# norms


def inner_H(f, g):
    return np.sum(f.coeffs * g.coeffs, axis=-1)


def norm_H(field):
    return np.sqrt(np.sum(field.coeffs**2, axis=-1))


def norm_V(field):
    return np.sqrt(np.sum(field.basis.eigenvalues * field.coeffs**2, axis=-1))


def norm_L4(field, part="all"):
    """|phi|_{L^4} with |phi|^2 = u1^2 + u2^2 + theta^2 pointwise.

    ``part`` selects ``"u"``, ``"theta"`` or ``"all"``.
    """
    b = field.basis
    sq = 0.0
    if part in ("u", "all"):
        v = b.vel_grid(field.u_coeffs)
        sq = sq + v["u1"] ** 2 + v["u2"] ** 2
    if part in ("theta", "all"):
        sq = sq + b.temp_grid(field.theta_coeffs)["t"] ** 2
    if part not in ("u", "theta", "all"):
        raise ValueError(f"unknown part {part!r}")
    return b.integrate(sq**2) ** 0.25


def gradient_norm_sq(field):
    """int |grad u|^2 + |grad theta|^2 by quadrature (equals norm_V^2)."""
    b = field.basis
    v = b.vel_grid(field.u_coeffs, ("d1u1", "d2u1", "d1u2", "d2u2"))
    t = b.temp_grid(field.theta_coeffs, ("d1t", "d2t"))
    g = sum(x**2 for x in v.values()) + t["d1t"] ** 2 + t["d2t"] ** 2
    return b.integrate(g)


def divergence_residual(field):
    """int (d1 u1 + d2 u2)^2 over D."""
    v = field.basis.vel_grid(field.u_coeffs, ("d1u1", "d2u2"))
    return field.basis.integrate((v["d1u1"] + v["d2u2"]) ** 2)


def ladyzhenskaya_ratio(field, part):
    """|f|_{L4}^2 / (|f| ||f||) for the velocity or temperature part."""
    f = field.velocity_only() if part == "u" else field.temperature_only()
    den = norm_H(f) * norm_V(f)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, norm_L4(f, part) ** 2 / np.where(den > 0, den, 1.0), 0.0)


def estimate_constants(basis, sample_count, rng, fields=None):
    """Empirical Ladyzhenskaya constant c1 and exact Poincare constant c2.

    c1_hat is the largest |f|_{L4}^2 / (|f| ||f||) over the sampled velocity
    and temperature parts; ``fields`` (a batched SpectralField) overrides
    the random draw so a caller can calibrate on its own samples.
    c2_hat = 1 / sqrt(smallest eigenvalue).
    """
    if fields is None:
        if sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        fields = random_field(basis, rng, batch=(sample_count,))
    c1 = max(np.max(ladyzhenskaya_ratio(fields, "u")) if basis.n_vel else 0.0,
             np.max(ladyzhenskaya_ratio(fields, "theta")) if basis.n_temp else 0.0)
    c2 = 1.0 / np.sqrt(np.min(basis.eigenvalues))
    return float(c1), float(c2)


def embed(field, target_basis):
    """Copy coefficients into another basis by matching mode identities."""
    index = {key: i for i, key in enumerate(target_basis.mode_keys())}
    out = np.zeros(field.coeffs.shape[:-1] + (target_basis.n,))
    src = [(i, index[k]) for i, k in enumerate(field.basis.mode_keys()) if k in index]
    if src:
        si, ti = np.array(src).T
        out[..., ti] = field.coeffs[..., si]
    return SpectralField(out, target_basis)


# ---------------------------------------------------------------------------
# basis cache ("BNRD" container, kind 1)

MAGIC = b"BNRD"
VERSION = 1
KIND_BASIS = 1
KIND_SNAPSHOTS = 2


def _write_array(fh, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<Q", arr.size))
    fh.write(arr.tobytes())


def _read_array(fh):
    (size,) = struct.unpack("<Q", fh.read(8))
    return np.frombuffer(fh.read(8 * size), dtype="<f8").copy()


def save_basis_cache(basis, path):
    """Write the eigen data needed to rebuild ``basis`` without re-solving.

    Layout (little endian): magic "BNRD", u32 version, u32 kind=1,
    f64 l, u32 max_k1, u32 max_k2, u32 modes_per_k1, u32 bc (0 free_slip,
    1 no_slip), u32 n_grid_x1, u32 n_grid_x2, u32 n_poly, then
    u64-length-prefixed f64 arrays: eigenvalues (K1+1)*J and, for no_slip,
    Legendre profile coefficients (K1+1)*J*(n_poly+4) (k1 = 0 block zero).
    """
    d = basis.domain
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, KIND_BASIS))
        fh.write(struct.pack("<d", d.l))
        fh.write(struct.pack("<7I", basis.max_k1, basis.max_k2, basis.modes_per_k1,
                             BC_MODES.index(basis.bc_mode), d.n_grid_x1, d.n_grid_x2,
                             basis.n_poly))
        _write_array(fh, basis._vel_eig_table)
        coef = np.zeros((basis.max_k1 + 1, basis.modes_per_k1, basis.n_poly + 4))
        if basis.bc_mode == "no_slip":
            for k in range(1, basis.max_k1 + 1):
                coef[k] = basis._vel_coef_table[k]
        _write_array(fh, coef)


def load_basis_cache(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a BNRD file")
        version, kind = struct.unpack("<II", fh.read(8))
        if version != VERSION or kind != KIND_BASIS:
            raise ValueError(f"{path}: unsupported version/kind {version}/{kind}")
        (l,) = struct.unpack("<d", fh.read(8))
        k1, k2, J, bc, n1, n2, n_poly = struct.unpack("<7I", fh.read(28))
        eig = _read_array(fh).reshape(k1 + 1, J)
        coef_flat = _read_array(fh).reshape(k1 + 1, J, n_poly + 4)
    bc_mode = BC_MODES[bc]
    coef = [None] + [coef_flat[k] for k in range(1, k1 + 1)] if bc_mode == "no_slip" else [None] * (k1 + 1)
    domain = Domain(l, n1, n2)
    return GalerkinBasis(domain, k1, k2, J, bc_mode, eig, coef, n_poly)
