"""INI run configuration: schema, validation and model construction.

Every section and key is declared in ``SCHEMA``; anything else is rejected
with its ``section.key`` path, so a misspelt key never falls back to a
default silently.  Lists are comma separated.
"""

from __future__ import annotations

import configparser
import dataclasses
import math

import numpy as np

from .integrators import BenardModel, IntegratorConfig
from .noise import ControlPath, CovarianceSpec, make_sigma
from .operators import PhysicsParams
from .spectral_core import Domain, build_basis, load_basis_cache, random_field


class ConfigError(ValueError):
    pass


def _floats(s):
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s):
    return None if s.strip().lower() in ("", "none", "auto") else int(s)


def _choice(*options):
    def parse(s):
        s = s.strip()
        if s not in options:
            raise ValueError(f"{s!r} not in {options}")
        return s

    return parse


_SIGMA_KEYS = {"family": (_choice("additive", "diagonal_bounded", "linear_clipped", "same"), None),
               "s0": (float, None), "b0": (float, None), "b1": (float, None),
               "scale": (float, None), "clip": (float, None)}
_FAMILY_KEYS = {"additive": {"s0"}, "diagonal_bounded": {"b0", "b1"},
                "linear_clipped": {"scale", "clip"}, "same": set()}

SCHEMA = {
    "domain": {"l": (float, 2 * math.pi), "n_grid_x1": (_opt_int, None),
               "n_grid_x2": (_opt_int, None)},
    "basis": {"max_k1": (int, 4), "max_k2": (int, 4), "modes_per_k1": (_opt_int, None),
              "bc_mode": (_choice("free_slip", "no_slip"), "free_slip"),
              "n_poly": (_opt_int, None), "model": (_choice("full", "two_mode_toy"), "full"),
              "nonlinear": (_bool, True)},
    "physics": {"nu": (float, 1.0), "kappa": (float, 1.0)},
    "noise": {"amplitude": (float, 1.0), "decay_s": (float, 1.5)},
    "sigma": dict(_SIGMA_KEYS, family=(_SIGMA_KEYS["family"][0], "diagonal_bounded")),
    "sigma_tilde": dict(_SIGMA_KEYS, family=(_SIGMA_KEYS["family"][0], "same")),
    "integrator": {"T": (float, 1.0), "n_steps": (int, 1000), "epsilon": (float, 0.0),
                   "record_stride": (int, 1), "scheme": (_choice("semi_implicit_em"), "semi_implicit_em"),
                   "paths": (int, 1), "chunk_size": (int, 64), "M": (float, 1.0)},
    "initial": {"kind": (_choice("zero", "random", "mode"), "random"), "amplitude": (float, 1.0),
                "smoothness": (float, 1.0), "seed": (int, 0), "mode": (int, 0), "value": (float, 0.1)},
    "control": {"kind": (_choice("zero", "constant", "file"), "zero"), "mode": (int, 0),
                "value": (float, 0.0), "path": (str, "")},
    "mam": {"target": (_choice("terminal", "exit"), "terminal"), "terminal_mode": (int, -1),
            "terminal_value": (float, 0.0), "delta": (float, 0.5), "tolerance": (float, 1e-6),
            "rho_schedule": (_floats, (1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8)),
            "max_iters": (int, 500), "control_steps": (_opt_int, None)},
    "weakconv": {"eps_grid": (_floats, (1e-1, 1e-2, 1e-3, 1e-4)), "paths": (int, 200),
                 "chunk_size": (int, 64)},
    "compactness": {"amplitude": (float, 1.0), "g_mode": (int, 0),
                    "n_list": (_ints, (4, 8, 16, 32, 64))},
    "increments": {"levels": (_ints, (3, 4, 5, 6, 7, 8)), "paths": (int, 200), "N": (float, 1e6),
                   "chunk_size": (int, 50)},
    "mcldp": {"delta": (float, 0.5), "eps_grid": (_floats, (1.0, 0.6, 0.45, 0.35)),
              "paths": (int, 100000), "chunk_size": (int, 4096)},
    "diagnostics": {"samples": (int, 1000), "chunk": (int, 250), "max_k": (int, 16),
                    "alphas": (_floats, (0.1, 1.0, 10.0))},
    "run": {"seed": (int, 0), "threads": (int, 1), "output_dir": (str, "out"),
            "basis_cache": (str, "")},
}


@dataclasses.dataclass
class RunConfig:
    values: dict
    text: str

    def __getitem__(self, section):
        return self.values[section]

    def integrator(self):
        s = self["integrator"]
        return IntegratorConfig(T=s["T"], n_steps=s["n_steps"], epsilon=s["epsilon"],
                                record_stride=s["record_stride"], scheme=s["scheme"])


def parse_config(text):
    """Validate INI text against ``SCHEMA`` and fill defaults."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
    for section, keys in SCHEMA.items():
        got = dict(cp[section]) if cp.has_section(section) else {}
        vals = {}
        for key, raw in got.items():
            if key not in keys:
                raise ConfigError(f"unknown key {section}.{key}")
            try:
                vals[key] = keys[key][0](raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}") from None
        for key, (_, default) in keys.items():
            vals.setdefault(key, default)
        values[section] = vals
    for sec in ("sigma", "sigma_tilde"):
        allowed = _FAMILY_KEYS[values[sec]["family"]] | {"family"}
        given = set(cp[sec]) if cp.has_section(sec) else set()
        extra = sorted(given - allowed)
        if extra:
            raise ConfigError(f"key {sec}.{extra[0]} does not apply to family "
                              f"{values[sec]['family']!r}")
    if values["sigma"]["family"] == "same":
        raise ConfigError("sigma.family must name a family")
    _check_ranges(values)
    return RunConfig(values, text)


def _check_ranges(v):
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(f"{key}: {msg}")

    need(v["physics"]["nu"] > 0, "physics.nu", "must be > 0")
    need(v["physics"]["kappa"] > 0, "physics.kappa", "must be > 0")
    need(v["domain"]["l"] > 0, "domain.l", "must be > 0")
    need(v["basis"]["max_k1"] >= 0, "basis.max_k1", "must be >= 0")
    need(v["basis"]["max_k2"] >= 1, "basis.max_k2", "must be >= 1")
    need(v["noise"]["decay_s"] > 1, "noise.decay_s", "must be > 1 for a trace-class Q")
    need(v["noise"]["amplitude"] > 0, "noise.amplitude", "must be > 0")
    it = v["integrator"]
    need(it["T"] > 0, "integrator.T", "must be > 0")
    need(it["n_steps"] > 0, "integrator.n_steps", "must be > 0")
    need(it["epsilon"] >= 0, "integrator.epsilon", "must be >= 0")
    need(it["record_stride"] >= 1 and it["n_steps"] % it["record_stride"] == 0,
         "integrator.record_stride", "must divide n_steps")
    need(it["paths"] >= 1, "integrator.paths", "must be >= 1")
    need(it["chunk_size"] >= 1, "integrator.chunk_size", "must be >= 1")
    need(v["run"]["threads"] >= 1, "run.threads", "must be >= 1")
    need(v["run"]["seed"] >= 0, "run.seed", "must be >= 0")
    rho = v["mam"]["rho_schedule"]
    need(len(rho) > 0 and all(r > 0 for r in rho) and all(a < b for a, b in zip(rho, rho[1:])),
         "mam.rho_schedule", "must be positive and strictly increasing")
    need(v["mam"]["tolerance"] > 0, "mam.tolerance", "must be > 0")
    need(all(e >= 0 for e in v["weakconv"]["eps_grid"]), "weakconv.eps_grid", "must be >= 0")
    need(all(e > 0 for e in v["mcldp"]["eps_grid"]), "mcldp.eps_grid", "must be > 0")
    need(all(n >= 1 for n in v["compactness"]["n_list"]), "compactness.n_list", "must be >= 1")
    need(all(n >= 0 for n in v["increments"]["levels"]), "increments.levels", "must be >= 0")
    need(v["control"]["kind"] != "file" or v["control"]["path"], "control.path",
         "required when control.kind = file")


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


# ---------------------------------------------------------------------------
# construction


def _sigma_from(section, cov):
    fam = section["family"]
    params = {k: section[k] for k in _FAMILY_KEYS[fam] if section[k] is not None}
    return make_sigma(fam, cov, **params)


def build_model(cfg):
    from .ldp_action import two_mode_toy

    b, ph, nz = cfg["basis"], cfg["physics"], cfg["noise"]
    if b["model"] == "two_mode_toy":
        sig = cfg["sigma"]
        if sig["family"] != "additive" or cfg["sigma_tilde"]["family"] != "same":
            raise ConfigError("basis.model = two_mode_toy needs sigma.family = additive")
        s0 = 1.0 if sig["s0"] is None else sig["s0"]
        return two_mode_toy(ph["nu"], ph["kappa"], cfg["domain"]["l"], nz["amplitude"],
                            nz["decay_s"], s0)
    cache = cfg["run"]["basis_cache"]
    basis = None
    if cache:
        try:
            basis = load_basis_cache(cache)
        except FileNotFoundError:
            basis = None
    if basis is None:
        d = cfg["domain"]
        basis = build_basis(Domain(d["l"], d["n_grid_x1"], d["n_grid_x2"]), b["max_k1"],
                            b["max_k2"], b["modes_per_k1"], b["bc_mode"], b["n_poly"])
        if cache:
            from .spectral_core import save_basis_cache

            save_basis_cache(basis, cache)
    cov = CovarianceSpec.power_law(basis, nz["amplitude"], nz["decay_s"])
    sigma = _sigma_from(cfg["sigma"], cov)
    st = None if cfg["sigma_tilde"]["family"] == "same" else _sigma_from(cfg["sigma_tilde"], cov)
    return BenardModel(basis, PhysicsParams(ph["nu"], ph["kappa"]), cov, sigma, st,
                       nonlinear=b["nonlinear"])


def build_initial(cfg, basis):
    s = cfg["initial"]
    xi = np.zeros(basis.n)
    if s["kind"] == "random":
        rng = np.random.default_rng(s["seed"])
        xi = s["amplitude"] * random_field(basis, rng, s["smoothness"]).coeffs
    elif s["kind"] == "mode":
        if not 0 <= s["mode"] < basis.n:
            raise ConfigError(f"initial.mode: index {s['mode']} outside 0..{basis.n - 1}")
        xi[s["mode"]] = s["value"]
    return xi


def build_control(cfg, model, T=None, n_steps=None):
    s = cfg["control"]
    T = cfg["integrator"]["T"] if T is None else T
    n_steps = cfg["integrator"]["n_steps"] if n_steps is None else n_steps
    cov = model.control_sigma.covariance
    if s["kind"] == "zero":
        return ControlPath.zero(cov, T, n_steps)
    if s["kind"] == "file":
        return ControlPath.from_csv(s["path"], cov, T, n_steps)
    if not 0 <= s["mode"] < model.basis.n:
        raise ConfigError(f"control.mode: index {s['mode']} outside 0..{model.basis.n - 1}")
    if cov.lambdas[s["mode"]] <= 0:
        raise ConfigError(f"control.mode: mode {s['mode']} is outside the support of Q")
    v = np.zeros((n_steps, model.basis.n))
    v[:, s["mode"]] = s["value"]
    return ControlPath(v, T, cov)
