import filecmp

import numpy as np
import pytest

from benard_ldp.cli import main
from benard_ldp.config import ConfigError, build_model, parse_config
from benard_ldp.fileio import load_snapshots, read_csv, save_snapshots

SMALL = """
[basis]
max_k1 = 2
max_k2 = 2
[integrator]
T = 0.2
n_steps = 20
epsilon = 0.05
paths = 6
chunk_size = 4
"""

TOY = """
[basis]
model = two_mode_toy
[sigma]
family = additive
s0 = 1.0
[integrator]
T = 1.0
n_steps = 100
[initial]
kind = zero
"""


def run(tmp_path, command, text, name="out", extra=()):
    cfg = tmp_path / f"{name}.ini"
    cfg.write_text(text)
    out = tmp_path / name
    code = main([command, "--config", str(cfg), "--out", str(out), *extra])
    return code, out


def csv_table(path):
    header, rows = read_csv(path)
    return {r[0]: r[1] for r in rows} if header == ["key", "value"] else rows


@pytest.mark.parametrize("text, needle", [
    ("[physics]\nnu = -1\n", "physics.nu"),
    ("[integrator]\nn_steps = 10\nrecord_stride = 3\n", "integrator.record_stride"),
    ("[physics]\nviscosity = 1\n", "physics.viscosity"),
    ("[plotting]\ndpi = 10\n", "plotting"),
    ("[sigma]\nfamily = additive\nb0 = 1\n", "sigma.b0"),
    ("[noise]\ndecay_s = 1.0\n", "noise.decay_s"),
])
def test_config_errors_exit_2(tmp_path, capsys, text, needle):
    code, out = run(tmp_path, "skeleton", text)
    assert code == 2
    assert needle in capsys.readouterr().err
    with pytest.raises(ConfigError):
        parse_config(text)


def test_bad_seed_flag(tmp_path):
    code, _ = run(tmp_path, "skeleton", SMALL, extra=("--seed", "-4"))
    assert code == 2


def test_mode_index_out_of_range_is_config_error(tmp_path):
    code, out = run(tmp_path, "skeleton", SMALL + "[initial]\nkind = mode\nmode = 9999\n")
    assert code == 2
    assert "partial" in (out / "status.txt").read_text()


def test_selftest_passes(tmp_path, capsys):
    code = main(["selftest", "--out", str(tmp_path / "st")])
    assert code == 0
    text = capsys.readouterr().out
    assert "FAIL" not in text and text.count("PASS") >= 8


def test_skeleton_zero_data_gives_zero_trajectory(tmp_path):
    code, out = run(tmp_path, "skeleton", SMALL + "[initial]\nkind = zero\n")
    assert code == 0
    times, states = load_snapshots(out / "snapshots.bnrd")
    assert times.size == 21 and not np.any(states)
    assert float(csv_table(out / "result.csv")["x_norm_sq"]) == 0.0
    for name in ("manifest.txt", "status.txt", "summary.csv", "control.csv"):
        assert (out / name).exists()
    assert "complete" in (out / "status.txt").read_text()


def test_snapshot_roundtrip(tmp_path, rng):
    t = np.linspace(0, 1, 5)
    s = rng.standard_normal((5, 7))
    save_snapshots(tmp_path / "s.bnrd", t, s)
    t2, s2 = load_snapshots(tmp_path / "s.bnrd")
    assert np.array_equal(t, t2) and np.array_equal(s, s2)
    (tmp_path / "bad.bnrd").write_bytes(b"XXXX" + bytes(32))
    with pytest.raises(ValueError):
        load_snapshots(tmp_path / "bad.bnrd")


@pytest.mark.filterwarnings("ignore::benard_ldp.integrators.EpsilonGuardWarning")
def test_simulate_byte_identical_and_thread_independent(tmp_path):
    a = run(tmp_path, "simulate", SMALL, "a", ("--seed", "7"))
    b = run(tmp_path, "simulate", SMALL, "b", ("--seed", "7"))
    c = run(tmp_path, "simulate", SMALL, "c", ("--seed", "7", "--threads", "3"))
    d = run(tmp_path, "simulate", SMALL, "d", ("--seed", "8"))
    assert a[0] == b[0] == c[0] == d[0] == 0
    for name in ("summary.csv", "paths.csv", "result.csv", "snapshots.bnrd"):
        assert filecmp.cmp(a[1] / name, b[1] / name, shallow=False)
        assert filecmp.cmp(a[1] / name, c[1] / name, shallow=False)
    assert not filecmp.cmp(a[1] / "paths.csv", d[1] / "paths.csv", shallow=False)


def test_mam_toy_reports_gramian(tmp_path):
    text = TOY.replace("kind = zero", "kind = mode\nmode = 0\nvalue = 0.5").replace("n_steps = 100", "n_steps = 100\nM = 500") + \
        "[mam]\nterminal_mode = 1\nterminal_value = 0.4\ntolerance = 1e-5\n"
    code, out = run(tmp_path, "mam", text)
    assert code == 0
    r = csv_table(out / "result.csv")
    assert r["feasible"] == "1"
    assert float(r["action"]) == pytest.approx(float(r["gramian_action_discrete"]), rel=1e-4)
    header, rows = read_csv(out / "iterations.csv")
    assert rows and header[0] == "stage"


def test_weakconv_toy_slope(tmp_path):
    text = TOY + "[weakconv]\neps_grid = 0, 1e-1, 1e-2, 1e-3\npaths = 1000\nchunk_size = 500\n"
    code, out = run(tmp_path, "weakconv", text)
    assert code == 0
    rows = csv_table(out / "weakconv.csv")
    assert rows[0][1] == "0.0"
    assert float(csv_table(out / "result.csv")["loglog_slope"]) == pytest.approx(1.0, abs=0.1)


def test_compactness_and_increments_and_mcldp(tmp_path):
    code, out = run(tmp_path, "compactness", SMALL + "[control]\nkind = constant\nvalue = 0.2\n"
                    "[compactness]\nn_list = 1, 4\n", "comp")
    assert code == 0 and len(csv_table(out / "compactness.csv")) == 2
    inc = SMALL.replace("n_steps = 20", "n_steps = 64") + "[increments]\nlevels = 2, 3\npaths = 4\n"
    code, out = run(tmp_path, "increments", inc, "inc")
    assert code == 0 and len(csv_table(out / "increments.csv")) == 2
    code, out = run(tmp_path, "mcldp", TOY + "[mcldp]\neps_grid = 0.5\npaths = 200\n", "mc")
    assert code == 0
    assert float(csv_table(out / "result.csv")["exit_oracle_action"]) > 0


def test_diagnostics_small(tmp_path):
    code, out = run(tmp_path, "diagnostics", SMALL + "[diagnostics]\nsamples = 60\nchunk = 30\n")
    assert code == 0
    rows = csv_table(out / "diagnostics.csv")
    assert all(r[2] == "1" for r in rows), [r for r in rows if r[2] != "1"]


def test_toy_requires_additive():
    with pytest.raises(ConfigError):
        build_model(parse_config("[basis]\nmodel = two_mode_toy\n"))


def test_basis_cache_flag(tmp_path):
    cache = tmp_path / "basis.bnrd"
    code, _ = run(tmp_path, "skeleton", SMALL, "one", ("--basis-cache", str(cache)))
    assert code == 0 and cache.exists()
    code, out = run(tmp_path, "skeleton", SMALL, "two", ("--basis-cache", str(cache)))
    assert code == 0
    assert filecmp.cmp(tmp_path / "one" / "summary.csv", out / "summary.csv", shallow=False)


def test_unwritable_output_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["skeleton", "--out", str(blocker / "sub")]) == 1
