"""Linear and bilinear operators of the Boussinesq system in Galerkin form.

A = (nu A1, kappa A2) is diagonal in the eigenbasis.  B(phi) = (B1(u,u),
B2(u,theta)) is evaluated pseudo-spectrally: grid products on the dealiased
quadrature grid followed by projection onto the retained modes.  R couples
buoyancy and the vertical velocity, R phi = (-theta e2, -u2).
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .spectral_core import SpectralField


_ALL_VEL = ("u1", "u2", "d1u1", "d2u1", "d1u2", "d2u2")
_ALL_TEMP = ("t", "d1t", "d2t")


@dataclasses.dataclass(frozen=True)
class PhysicsParams:
    nu: float = 1.0
    kappa: float = 1.0

    def __post_init__(self):
        if not (self.nu > 0 and self.kappa > 0):
            raise ValueError(f"nu and kappa must be positive, got {self.nu}, {self.kappa}")

    @property
    def nu_wedge_kappa(self):
        return min(self.nu, self.kappa)


def a_diagonal(basis, params):
    """Diagonal of A in coefficient order: nu * lambda, kappa * mu."""
    return np.concatenate([params.nu * basis.vel_eig, params.kappa * basis.temp_eig])


# ---------------------------------------------------------------------------
# array kernels (shared with the integrators)


def _advect(v, t):
    u1, u2 = v["u1"], v["u2"]
    return (u1 * v["d1u1"] + u2 * v["d2u1"],
            u1 * v["d1u2"] + u2 * v["d2u2"],
            u1 * t["d1t"] + u2 * t["d2t"])


def nonlinear_coeffs(basis, c):
    """Coefficients of P_n B(phi) for coefficient array c (..., n)."""
    a, b = basis.split(c)
    v = basis.vel_grid(a, _ALL_VEL)
    t = basis.temp_grid(b, ("d1t", "d2t"))
    adv1, adv2, advt = _advect(v, t)
    return np.concatenate([basis.vel_project(u1=adv1, u2=adv2),
                           basis.temp_project(t=advt)], axis=-1)


def nonlinear_jvp(basis, c, dc):
    """Directional derivative DB(phi)[dphi] = B(dphi, phi) + B(phi, dphi)."""
    a, b = basis.split(c)
    da, db = basis.split(dc)
    v = basis.vel_grid(a, _ALL_VEL)
    t = basis.temp_grid(b, ("d1t", "d2t"))
    dv = basis.vel_grid(da, _ALL_VEL)
    dt = basis.temp_grid(db, ("d1t", "d2t"))
    g1 = (dv["u1"] * v["d1u1"] + dv["u2"] * v["d2u1"]
          + v["u1"] * dv["d1u1"] + v["u2"] * dv["d2u1"])
    g2 = (dv["u1"] * v["d1u2"] + dv["u2"] * v["d2u2"]
          + v["u1"] * dv["d1u2"] + v["u2"] * dv["d2u2"])
    gt = (dv["u1"] * t["d1t"] + dv["u2"] * t["d2t"]
          + v["u1"] * dt["d1t"] + v["u2"] * dt["d2t"])
    return np.concatenate([basis.vel_project(u1=g1, u2=g2),
                           basis.temp_project(t=gt)], axis=-1)


def nonlinear_vjp(basis, c, mu):
    """Transpose action DB(phi)^T mu, exact for the quadrature-discretised B.

    <DB(phi) d, mu> = sum_w [du_i d_i u_j mu_j + u_i d_i du_j mu_j
                             + du_i d_i theta mu_t + u_i d_i dtheta mu_t],
    so each grid factor multiplying a d-quantity is projected back with the
    weighted transpose of the transform that produced it.
    """
    a, b = basis.split(c)
    ma, mb = basis.split(mu)
    v = basis.vel_grid(a, _ALL_VEL)
    t = basis.temp_grid(b, ("d1t", "d2t"))
    mv = basis.vel_grid(ma)
    mt = basis.temp_grid(mb)["t"]
    u1, u2 = v["u1"], v["u2"]
    m1, m2 = mv["u1"], mv["u2"]
    ga = basis.vel_project(
        u1=v["d1u1"] * m1 + v["d1u2"] * m2 + t["d1t"] * mt,
        u2=v["d2u1"] * m1 + v["d2u2"] * m2 + t["d2t"] * mt,
        d1u1=u1 * m1, d2u1=u2 * m1, d1u2=u1 * m2, d2u2=u2 * m2,
    )
    gb = basis.temp_project(d1t=u1 * mt, d2t=u2 * mt)
    return np.concatenate([ga, gb], axis=-1)


def coupling_coeffs(basis, c):
    """Coefficients of R phi."""
    a, b = basis.split(c)
    C = basis.coupling_matrix
    return np.concatenate([-(b @ C.T), -(a @ C)], axis=-1)


# ---------------------------------------------------------------------------
# field-level API


def apply_A(params, field):
    return SpectralField(field.coeffs * a_diagonal(field.basis, params), field.basis)


def apply_B(field):
    return SpectralField(nonlinear_coeffs(field.basis, field.coeffs), field.basis)


def apply_R(field):
    return SpectralField(coupling_coeffs(field.basis, field.coeffs), field.basis)


def apply_F(params, field):
    """F(phi) = -A phi - B(phi) - R phi."""
    b, c = field.basis, field.coeffs
    out = -(c * a_diagonal(b, params)) - nonlinear_coeffs(b, c) - coupling_coeffs(b, c)
    return SpectralField(out, b)


def pairing_b1(u, v, w):
    """<B1(u, v), w> = int u_i d_i v_j w_j, using the velocity parts."""
    b = u.basis
    gu = b.vel_grid(u.u_coeffs)
    gv = b.vel_grid(v.u_coeffs, ("d1u1", "d2u1", "d1u2", "d2u2"))
    gw = b.vel_grid(w.u_coeffs)
    integrand = ((gu["u1"] * gv["d1u1"] + gu["u2"] * gv["d2u1"]) * gw["u1"]
                 + (gu["u1"] * gv["d1u2"] + gu["u2"] * gv["d2u2"]) * gw["u2"])
    return b.integrate(integrand)


def pairing_b2(u, theta, eta):
    """<B2(u, theta), eta> = int u_i d_i theta eta."""
    b = u.basis
    gu = b.vel_grid(u.u_coeffs)
    gt = b.temp_grid(theta.theta_coeffs, ("d1t", "d2t"))
    ge = b.temp_grid(eta.theta_coeffs)["t"]
    return b.integrate((gu["u1"] * gt["d1t"] + gu["u2"] * gt["d2t"]) * ge)


def dual_norm_B1(u):
    """|P_n B1(u, u)|_{V1'} over the retained velocity modes.

    For a functional l on span{w_i}, sup_{||w||=1} l(w) = sqrt(sum l(w_i)^2 / lambda_i).
    """
    b = u.basis
    a, _ = b.split(nonlinear_coeffs(b, u.velocity_only().coeffs))
    return np.sqrt(np.sum(a**2 / b.vel_eig, axis=-1))


def pairing(f, g):
    """Duality <f, g> between coefficient fields (an H inner product here)."""
    return np.sum(f.coeffs * g.coeffs, axis=-1)


# ---------------------------------------------------------------------------
# sampled checks of the bilinear identities and inequalities


def bilinear_identity_residuals(field):
    """Relative sizes of <B1(u,u),u> and <B2(u,theta),theta>.

    Scales are |u|_{L4}^2 ||u|| and |u|_{L4} |theta|_{L4} ||theta||, the
    natural size of each trilinear form.
    """
    from .spectral_core import norm_L4, norm_V

    u = field.velocity_only()
    th = field.temperature_only()
    r1 = np.abs(pairing_b1(u, u, u))
    r2 = np.abs(pairing_b2(u, th, th))
    s1 = norm_L4(u, "u") ** 2 * norm_V(u)
    s2 = norm_L4(u, "u") * norm_L4(th, "theta") * norm_V(th)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s1 > 0, r1 / s1, 0.0), np.where(s2 > 0, r2 / s2, 0.0)


def _calibrated_c1(fields):
    from .spectral_core import ladyzhenskaya_ratio

    return max(float(np.max(ladyzhenskaya_ratio(f, part))) for f in fields for part in ("u", "theta"))


def inequality_suite(params, phi, psi, chi, alphas=(0.1, 1.0, 10.0), c1=None, rtol=1e-12):
    """Sample-wise check of the Ladyzhenskaya, Poincare, B-bounds and monotonicity.

    ``phi``, ``psi``, ``chi`` are batched fields on one basis; chi supplies
    the test directions (v, eta).  c1 defaults to the largest Ladyzhenskaya
    ratio over every field involved (phi, psi, chi and phi - psi), so the
    constant is a property of the sample and not a tuning knob.  c2 is the
    exact Poincare constant 1/sqrt(lambda_min).  Returns a dict mapping each
    check to (violations, max lhs/rhs) plus the constants used.
    """
    from .spectral_core import norm_H, norm_L4, norm_V

    basis = phi.basis
    diff = phi - psi
    if c1 is None:
        c1 = _calibrated_c1((phi, psi, chi, diff))
    c2 = 1.0 / np.sqrt(np.min(basis.eigenvalues))
    out = {"c1": c1, "c2": c2}
    slack = 1.0 + rtol

    def record(name, lhs, rhs):
        lhs, rhs = np.asarray(lhs), np.asarray(rhs)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0), np.where(lhs > 0, np.inf, 0.0))
        out[name] = (int(np.sum(lhs > rhs * slack + 1e-300)), float(np.max(ratio)))

    parts = {"u": lambda f: f.velocity_only(), "theta": lambda f: f.temperature_only()}
    vl4_l, vl4_r = [], []
    for f in (phi, psi, chi, diff):
        for part, sel in parts.items():
            g = sel(f)
            vl4_l.append(norm_L4(g, part) ** 2)
            vl4_r.append(c1 * norm_H(g) * norm_V(g))
    record("VL4", np.concatenate(vl4_l), np.concatenate(vl4_r))
    record("Poincare", norm_H(phi), c2 * norm_V(phi))

    u, th = phi.velocity_only(), phi.temperature_only()
    v, eta = chi.velocity_only(), chi.temperature_only()
    uL4, thL4 = norm_L4(u, "u"), norm_L4(th, "theta")
    record("normB1V'", dual_norm_B1(u), uL4**2)
    b2 = np.abs(pairing_b2(u, th, eta))
    record("inegB2", b2, uL4 * thL4 * norm_V(eta))
    record("inegB2_c1", b2, c1 * norm_H(phi) * norm_V(phi) * norm_V(eta))

    b1v = np.abs(pairing_b1(u, u, v))
    b2e = np.abs(pairing_b2(u, th, eta))
    vL4, eL4 = norm_L4(v, "u"), norm_L4(eta, "theta")
    nu_sq, phi_v_sq, u_h_sq = norm_V(u) ** 2, norm_V(phi) ** 2, norm_H(u) ** 2
    for a in alphas:
        k = 27.0 * c1**2 / (256.0 * a**3)
        record(f"BB1[alpha={a:g}]", b1v, a * nu_sq + k * u_h_sq * vL4**4)
        record(f"BB2[alpha={a:g}]", b2e, a * phi_v_sq + k * u_h_sq * eL4**4)

    # difference identity and the bound with the analytic constant sqrt(2) c1
    bphi = nonlinear_coeffs(basis, phi.coeffs)
    bpsi = nonlinear_coeffs(basis, psi.coeffs)
    lhs = np.sum((bphi - bpsi) * diff.coeffs, axis=-1)
    U, Th = diff.velocity_only(), diff.temperature_only()
    rhs_id = -pairing_b1(U, U, psi.velocity_only()) - pairing_b2(U, Th, psi.temperature_only())
    scale = norm_H(diff) * norm_V(diff) * norm_V(psi)
    with np.errstate(invalid="ignore", divide="ignore"):
        out["diffB_identity"] = float(np.max(np.abs(lhs - rhs_id) / np.where(scale > 0, scale, 1.0)))
    c_diff = np.sqrt(2.0) * c1
    record("diffB-1", np.abs(lhs), c_diff * scale)
    with np.errstate(invalid="ignore", divide="ignore"):
        out["diffB_empirical_c"] = float(np.max(np.abs(lhs) / np.where(scale > 0, scale, 1.0)))

    Fphi = apply_F(params, phi).coeffs
    Fpsi = apply_F(params, psi).coeffs
    mono = np.sum((Fphi - Fpsi) * diff.coeffs, axis=-1) + params.nu_wedge_kappa * norm_V(diff) ** 2
    record("mono1", mono, c_diff * scale + norm_H(diff) ** 2)
    return out
