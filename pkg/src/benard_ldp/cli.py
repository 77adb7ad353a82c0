"""Galerkin simulation and large-deviation experiments for stochastic Benard convection.

    benard-ldp <command> [--config PATH] [--seed N] [--threads N] [--out DIR]

Commands: simulate, skeleton, mam, weakconv, compactness, increments,
mcldp, diagnostics, selftest.  Exit codes: 0 success, 1 runtime failure,
2 configuration error, 3 selftest failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
import traceback
import warnings

import numpy as np

from . import integrators as itg
from . import ldp_action as ldp
from .config import ConfigError, build_control, build_initial, build_model, load_config, parse_config
from .fileio import CsvSink, save_snapshots, write_csv, write_manifest, write_status
from .noise import action, epsilon_guard, verify_assumptions
from .operators import bilinear_identity_residuals, inequality_suite, pairing_b2
from .spectral_core import (Domain, analyze, build_basis, divergence_residual, norm_H,
                            random_field, synth)

log = logging.getLogger("benard_ldp")

COMMANDS = ("simulate", "skeleton", "mam", "weakconv", "compactness", "increments", "mcldp",
            "diagnostics", "selftest")


class SelftestFailure(RuntimeError):
    pass


def _summary(out, rec):
    write_csv(os.path.join(out, "summary.csv"),
              ["t", "H_norm_sq", "V_norm_sq", "sup_monitor", "int_monitor"], rec.summary_rows())


def _kv(out, name, pairs):
    write_csv(os.path.join(out, name), ["key", "value"], pairs)


def _guard(model, cfg):
    from .spectral_core import estimate_constants

    c1, c2 = estimate_constants(model.basis, 200, np.random.default_rng(0))
    return epsilon_guard(model.params, model.sigma, cfg["integrator"]["T"], cfg["integrator"]["M"],
                         c1 * c2, model.sigma_tilde)


def cmd_simulate(cfg, out, seed, threads):
    model = build_model(cfg)
    xi = build_initial(cfg, model.basis)
    control = build_control(cfg, model)
    ic = dataclasses.replace(cfg.integrator(), epsilon_guard=_guard(model, cfg))
    it = cfg["integrator"]
    rec = itg.run_ensemble(model, xi, control, ic, seed, it["paths"], chunk_size=it["chunk_size"],
                           threads=threads, keep_states=True)
    _summary(out, rec)
    save_snapshots(os.path.join(out, "snapshots.bnrd"), rec.times, rec.states[:, 0])
    write_csv(os.path.join(out, "paths.csv"), ["path", "sup_H_sq", "int_V_sq", "x_norm_sq", "blown_up"],
              [(p, rec.sup_H_sq[-1, p], rec.int_V_sq[-1, p], rec.x_norm_sq[p], rec.blown_up[p])
               for p in range(rec.sup_H_sq.shape[1])])
    _kv(out, "result.csv", [("epsilon", ic.epsilon), ("epsilon_guard", ic.epsilon_guard),
                            ("exceeds_guard", ic.exceeds_guard),
                            ("blown_up_paths", int(np.sum(rec.blown_up)))])
    return 0


def cmd_skeleton(cfg, out, seed, threads):
    model = build_model(cfg)
    xi = build_initial(cfg, model.basis)
    control = build_control(cfg, model)
    rec = itg.run_skeleton(model, xi, control, cfg.integrator())
    _summary(out, rec)
    save_snapshots(os.path.join(out, "snapshots.bnrd"), rec.times, rec.states)
    control.to_csv(os.path.join(out, "control.csv"))
    M = cfg["integrator"]["M"]
    bound = itg.control_norm_bound(model.params, model.control_sigma, cfg["integrator"]["T"],
                                   max(M, 2 * action(control)), float(xi @ xi))
    _kv(out, "result.csv", [("action", action(control)), ("x_norm_sq", float(rec.x_norm_sq)),
                            ("x_norm_sq_bound", bound)])
    return 0


def cmd_mam(cfg, out, seed, threads):
    model = build_model(cfg)
    xi = build_initial(cfg, model.basis)
    it, m = cfg["integrator"], cfg["mam"]
    T, n = it["T"], it["n_steps"]
    opts = ldp.OptimizerOptions(rho_schedule=m["rho_schedule"], max_iters=m["max_iters"],
                                control_steps=m["control_steps"], seed=seed)
    if m["target"] == "terminal":
        psi = np.zeros(model.basis.n)
        if m["terminal_mode"] >= 0:
            if m["terminal_mode"] >= model.basis.n:
                raise ConfigError("mam.terminal_mode: index outside the basis")
            psi[m["terminal_mode"]] = m["terminal_value"]
        target = ldp.TerminalTarget(psi, m["tolerance"])
    else:
        ref = itg.run_skeleton(model, xi, None, itg.IntegratorConfig(T, n)).states
        target = ldp.ExitTarget(ref, m["delta"], tolerance=m["tolerance"])
    res = ldp.minimize_action(ldp.ActionProblem(model, xi, T, n, target, it["M"], opts))
    with CsvSink(os.path.join(out, "iterations.csv"),
                 ["stage", "rho", "iterations", "objective", "action", "gap", "monotone"]) as sink:
        for i, h in enumerate(res.history):
            sink.row([i, h["rho"], h["iterations"], h["objective"], h["action"], h["gap"],
                      h["monotone"]])
    res.h_star.to_csv(os.path.join(out, "h_star.csv"))
    pairs = [("action", res.action_value), ("feasibility_gap", res.feasibility_gap),
             ("feasible", res.feasible), ("converged", res.converged), ("iterations", res.iterations)]
    linear = not model.nonlinear and isinstance(model.control_sigma, ldp.Additive)
    if linear and m["target"] == "terminal":
        pairs.append(("gramian_action_discrete", ldp.gramian_action(model, xi, target.psi_T, T, n)))
        pairs.append(("gramian_action_continuous", ldp.gramian_action(model, xi, target.psi_T, T)))
    elif linear:
        pairs.append(("exit_oracle_action", ldp.exit_event_oracle(model, T, n, m["delta"])[0]))
    _kv(out, "result.csv", pairs)
    return 0


def cmd_weakconv(cfg, out, seed, threads):
    model = build_model(cfg)
    xi = build_initial(cfg, model.basis)
    control = build_control(cfg, model)
    it, w = cfg["integrator"], cfg["weakconv"]
    rows = ldp.weak_convergence_experiment(model, xi, control, w["eps_grid"], w["paths"], seed,
                                           it["T"], it["n_steps"], w["chunk_size"], threads)
    write_csv(os.path.join(out, "weakconv.csv"), ["epsilon", "mean_x_dist_sq", "ci95", "blowups"], rows)
    eps = [r[0] for r in rows]
    means = [r[1] for r in rows]
    _kv(out, "result.csv", [("loglog_slope", ldp.fit_loglog_slope(eps, means))])
    return 0


def cmd_compactness(cfg, out, seed, threads):
    model = build_model(cfg)
    xi = build_initial(cfg, model.basis)
    control = build_control(cfg, model)
    c = cfg["compactness"]
    cov = model.control_sigma.covariance
    if not (0 <= c["g_mode"] < model.basis.n) or cov.lambdas[c["g_mode"]] <= 0:
        raise ConfigError("compactness.g_mode: must index a mode in the support of Q")
    g = np.zeros(model.basis.n)
    g[c["g_mode"]] = math.sqrt(cov.lambdas[c["g_mode"]])
    rows = ldp.compactness_experiment(model, xi, control, g, c["amplitude"], c["n_list"])
    write_csv(os.path.join(out, "compactness.csv"), ["n", "x_distance", "action"], rows)
    return 0


def increments_table(model, xi, control, ic, seed, levels, paths, N, chunk_size, threads=1):
    """Rows (n, I_n, I_n 2^{n/2}) from streamed dyadic sums gated by G_N(T)."""
    factory = lambda: [itg.DyadicIncrementObserver(levels, ic.n_steps, ic.dt)]
    rec = itg.run_ensemble(model, xi, control, ic, seed, paths, chunk_size=chunk_size,
                           threads=threads, observer_factory=factory)
    gate = (rec.sup_H_sq[-1] <= N) & (rec.int_V_sq[-1] <= N)
    tot = rec.observers["dyadic_increments"]
    rows = []
    for i, n in enumerate(levels):
        val = float(np.mean(np.where(gate, tot[i], 0.0)))
        rows.append((int(n), val, val * 2 ** (n / 2)))
    return rows


def cmd_increments(cfg, out, seed, threads):
    model = build_model(cfg)
    xi = build_initial(cfg, model.basis)
    control = build_control(cfg, model)
    inc = cfg["increments"]
    rows = increments_table(model, xi, control, cfg.integrator(), seed, inc["levels"], inc["paths"],
                            inc["N"], inc["chunk_size"], threads)
    write_csv(os.path.join(out, "increments.csv"), ["level", "I_n", "I_n_scaled"], rows)
    scaled = [r[2] for r in rows]
    _kv(out, "result.csv", [("max_min_ratio", max(scaled) / min(scaled) if min(scaled) > 0 else math.inf)])
    return 0


def cmd_mcldp(cfg, out, seed, threads):
    model = build_model(cfg)
    xi = build_initial(cfg, model.basis)
    it, mc = cfg["integrator"], cfg["mcldp"]
    rows = ldp.mc_ldp_estimate(model, xi, mc["delta"], mc["eps_grid"], mc["paths"], seed, it["T"],
                               it["n_steps"], mc["chunk_size"], threads)
    write_csv(os.path.join(out, "mcldp.csv"),
              ["epsilon", "hits", "paths", "p_hat", "eps_log_p", "zero_hits"], rows)
    if not model.nonlinear and isinstance(model.control_sigma, ldp.Additive):
        val, k = ldp.exit_event_oracle(model, it["T"], it["n_steps"], mc["delta"])
        _kv(out, "result.csv", [("exit_oracle_action", val), ("sup_time_index", k)])
    return 0


def cmd_diagnostics(cfg, out, seed, threads):
    model = build_model(cfg)
    basis = model.basis
    d = cfg["diagnostics"]
    rng = np.random.default_rng(seed)
    rows = []
    n, chunk = d["samples"], d["chunk"]
    fields = [random_field(basis, rng, batch=(n,)) for _ in range(3)]
    from .spectral_core import SpectralField, estimate_constants

    c1 = max(estimate_constants(basis, 0, rng, fields=f)[0] for f in fields + [fields[0] - fields[1]])
    merged = {}
    for s in range(0, n, chunk):
        part = [SpectralField(f.coeffs[s:s + chunk], basis) for f in fields]
        res = inequality_suite(model.params, *part, alphas=d["alphas"], c1=c1)
        for k, v in res.items():
            if isinstance(v, tuple):
                a, b = merged.get(k, (0, -math.inf))
                merged[k] = (a + v[0], max(b, v[1]))
            else:
                merged[k] = max(merged.get(k, -math.inf), v)
    for k, v in merged.items():
        if isinstance(v, tuple):
            rows.append((k, v[1], v[0] == 0, v[0]))
        else:
            rows.append((k, v, True, 0))
    r1, r2 = bilinear_identity_residuals(fields[0])
    rows.append(("bilinear_B1_rel", float(np.max(r1)), bool(np.max(r1) <= 1e-10), 0))
    rows.append(("bilinear_B2_rel", float(np.max(r2)), bool(np.max(r2) <= 1e-10), 0))
    for label, sig in (("sigma", model.sigma), ("sigma_tilde", model.sigma_tilde)):
        if sig is None:
            continue
        g, lv = verify_assumptions(sig, basis, 1000, rng)
        rows.append((f"{label}_growth_violations", g, g == 0, g))
        rows.append((f"{label}_lipschitz_violations", lv, lv == 0, lv))
        rows.append((f"{label}_K", sig.K, True, 0))
        rows.append((f"{label}_L", sig.L, True, 0))
    eps0 = epsilon_guard(model.params, model.sigma, cfg["integrator"]["T"], cfg["integrator"]["M"],
                         merged["c1"] * merged["c2"], model.sigma_tilde)
    rows.append(("epsilon_guard", eps0, True, 0))
    write_csv(os.path.join(out, "diagnostics.csv"), ["check", "value", "pass", "violations"], rows)
    return 0


def run_selftest(out=None):
    """Identity oracles on the analytic free-slip basis plus integrator/adjoint checks."""
    rows = []

    def check(name, value, threshold):
        rows.append((name, float(value), float(threshold), bool(value <= threshold)))

    basis = build_basis(Domain(), 8, 8, bc_mode="free_slip")
    rng = np.random.default_rng(12345)
    f = random_field(basis, rng, batch=(200,))
    r1, r2 = bilinear_identity_residuals(f)
    check("bilinear_B1", np.max(r1), 1e-10)
    check("bilinear_B2", np.max(r2), 1e-10)
    g = random_field(basis, rng, batch=(200,))
    u, th, eta = f.velocity_only(), f.temperature_only(), g.temperature_only()
    anti = np.abs(pairing_b2(u, th, eta) + pairing_b2(u, eta, th))
    check("antisymmetry_B2", np.max(anti), 1e-10)
    phys = synth(f)
    grid_energy = basis.integrate(phys.u1**2 + phys.u2**2 + phys.theta**2)
    check("parseval", np.max(np.abs(grid_energy - norm_H(f) ** 2) / norm_H(f) ** 2), 1e-12)
    check("roundtrip", np.max(np.abs(analyze(phys, basis).coeffs - f.coeffs)), 1e-12)
    check("divergence", np.max(divergence_residual(f)), 1e-20)

    toy = ldp.two_mode_toy()
    xi = np.array([0.5, -0.3])
    prob = ldp.ActionProblem(toy, xi, 1.0, 100, ldp.TerminalTarget(np.array([0.2, 0.4])))
    check("adjoint_gradient", ldp.gradient_check(prob, rho=10.0)[0], 1e-5)
    res = ldp.minimize_action(prob)
    oracle = ldp.gramian_action(toy, xi, np.array([0.2, 0.4]), 1.0, 100)
    check("mam_vs_gramian", abs(res.action_value - oracle) / oracle, 1e-3)
    ic = itg.IntegratorConfig(T=0.1, n_steps=20)
    x0 = random_field(basis, rng).coeffs
    from .noise import CovarianceSpec, make_sigma
    cov = CovarianceSpec.power_law(basis, 1.0, 1.5)
    model = itg.BenardModel(basis, sigma=make_sigma("diagonal_bounded", cov), covariance=cov)
    a = itg.run_skeleton(model, x0, None, ic)
    b = itg.run_stochastic(model, x0, None, ic, np.random.default_rng(1))
    check("eps0_bitwise", 0.0 if np.array_equal(a.states, b.states) else 1.0, 0.0)
    if out is not None:
        write_csv(os.path.join(out, "selftest.csv"), ["check", "value", "threshold", "pass"], rows)
    return rows


def cmd_selftest(cfg, out, seed, threads):
    rows = run_selftest(out)
    for name, value, thr, ok in rows:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {value:.3e} (<= {thr:.1e})")
    if not all(r[3] for r in rows):
        raise SelftestFailure("selftest failed")
    return 0


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def build_parser():
    p = argparse.ArgumentParser(prog="benard-ldp", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--seed", type=int, help="random seed (overrides run.seed)")
    p.add_argument("--threads", type=int, help="worker threads (overrides run.threads)")
    p.add_argument("--out", help="output directory (overrides run.output_dir)")
    p.add_argument("--basis-cache", help="BNRD basis cache path (overrides run.basis_cache)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else parse_config("")
        run = cfg["run"]
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            run["seed"] = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            run["threads"] = args.threads
        if args.out is not None:
            run["output_dir"] = args.out
        if args.basis_cache is not None:
            run["basis_cache"] = args.basis_cache
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = run["output_dir"]
    try:
        write_manifest(out, args.command, cfg.text, run["seed"],
                       extra=[("threads_note", "results do not depend on the thread count")])
    except OSError as exc:
        print(f"cannot write to {out}: {exc}", file=sys.stderr)
        return 1
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always", itg.EpsilonGuardWarning)
            code = HANDLERS[args.command](cfg, out, run["seed"], run["threads"])
    except ConfigError as exc:
        write_status(out, "partial", f"config error: {exc}")
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SelftestFailure as exc:
        write_status(out, "failed", str(exc))
        return 3
    except Exception as exc:  # report, mark outputs partial, exit 1
        write_status(out, "partial", traceback.format_exc())
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1
    write_status(out, "complete")
    return code


if __name__ == "__main__":
    sys.exit(main())
