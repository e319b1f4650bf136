import json

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from fracnsfp import cli_io
from fracnsfp.cli_io import ConfigError, main, parse_config

SMALL = """
[time]
dt = 0.01
n_steps = 12
[basis]
n_modes_x = 1
n_modes_q = 6
[run]
checkpoint_every = 5
"""


def write_cfg(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults_are_the_benchmark():
    cfg = parse_config("")
    m = cfg.model
    assert m.alpha.alpha == 0.75 and m.spring.kind == "fene" and m.spring.b == 10.0
    assert (m.Re, m.lambda_deb, m.eps, m.gamma_c, m.dim) == (1.0, 1.0, 0.5, 0.1, 2)
    assert (cfg.grid.dt, cfg.grid.n_steps) == (5e-3, 200)
    assert (cfg.n_modes_x, cfg.n_modes_q) == (2, 15)
    assert cfg.initial.preset == "gaussian-bump-x" and cfg.initial.shear_amplitude == 1.0


@pytest.mark.parametrize(
    "text,where",
    [
        ("[model]\nalpha = 0.5\n", "[model] alpha"),
        ("[model]\nalpha = 1.2\n", "[model] alpha"),
        ("[model]\nb = 2\n", "[model] b"),
        ("[model]\nbeta = 1\n", "[model] beta"),
        ("[solver]\nx = 1\n", "[solver]"),
        ("[time]\ndt = fast\n", "[time] dt"),
        ("[time]\ndt = -1\n", "[time] dt"),
        ("[initial]\npreset = vortex\n", "[initial] preset"),
        ("[initial]\ncoefficient_file = nowhere.npz\n", "[initial] coefficient_file"),
        ("[model]\nnondimensionalize = yes\n", "[model] nondimensionalize"),
        ("[physical]\nzeta = 1\n", "[physical]"),
        ("[run]\npicard = maybe\n", "[run] picard"),
        ("[convergence]\nreference_factor = 4\n", "[convergence] reference_factor"),
    ],
)
def test_invalid_configs_name_the_key(text, where):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert str(info.value).startswith(where)


def test_physical_section_nondimensionalizes():
    text = "[model]\nnondimensionalize = true\n[physical]\nzeta=2\nH=0.5\nkBT=1\nrho=1\neta=0.5\nN=3\nL0=1\nU0=2\n"
    cfg = parse_config(text)
    assert cfg.model.Re == pytest.approx(4.0)
    assert cfg.model.gamma_c == pytest.approx(0.75)


@given(
    alpha=st.floats(0.51, 1.0),
    b=st.floats(2.1, 100.0),
    dt=st.floats(1e-4, 0.1),
    n=st.integers(0, 500),
    gamma_c=st.floats(0.0, 5.0),
    spring=st.sampled_from(["fene", "hookean", "FENE"]),
)
def test_config_roundtrip(alpha, b, dt, n, gamma_c, spring):
    text = f"[model]\nalpha = {alpha!r}\nb = {b!r}\ngamma_c = {gamma_c!r}\nspring = {spring}\n[time]\ndt = {dt!r}\nn_steps = {n}\n"
    cfg = parse_config(text)
    assert cfg.model.alpha.alpha == alpha
    assert cfg.model.gamma_c == gamma_c
    assert cfg.grid.dt == dt and cfg.grid.n_steps == n
    assert cfg.model.spring.kind == spring.lower()


def test_run_resume_verify_are_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg), "--out", str(a)]) == 0
    files = sorted(p.name for p in a.iterdir())
    assert files == [
        "checkpoint_000005.npz",
        "checkpoint_000010.npz",
        "checkpoint_000012.npz",
        "diagnostics.csv",
        "summary.json",
        "trajectory.csv",
    ]
    b.mkdir()
    (b / "checkpoint_000005.npz").write_bytes((a / "checkpoint_000005.npz").read_bytes())
    assert main(["resume", "--config", str(cfg), "--out", str(b)]) == 0
    for name in ("trajectory.csv", "diagnostics.csv", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    before = (a / "diagnostics.csv").read_bytes()
    assert main(["verify", "--config", str(cfg), "--out", str(a)]) == 0
    assert (a / "diagnostics.csv").read_bytes() == before
    summary = json.loads((a / "summary.json").read_text())
    assert summary["all_pass"] and summary["steps"] == 12


def test_trajectory_floats_roundtrip_exactly(tmp_path):
    cfg = parse_config(SMALL)
    ops, u0, psi0 = cli_io.build_problem(cfg)
    state = cli_io.run_solver(cfg, ops, u0, psi0)
    cli_io.write_trajectory(tmp_path / "t.csv", state, cfg.grid.dt)
    back = cli_io.read_trajectory(tmp_path / "t.csv", ops.vb.size, ops.shape)
    assert np.array_equal(back.history.psi, state.history.psi)
    assert np.array_equal(back.history.phi, state.history.phi)
    assert np.array_equal(back.u, state.u)
    header = (tmp_path / "t.csv").read_text().split("\n")[0].split(",")
    assert header[:3] == ["step", "t", "u_0"] and "psi_0_0" in header and "phi_0_0" in header
    with pytest.raises(ValueError):
        cli_io.read_trajectory(tmp_path / "t.csv", ops.vb.size + 1, ops.shape)


def test_damaged_checkpoint_is_skipped(tmp_path):
    cfg = parse_config(SMALL)
    ops, u0, psi0 = cli_io.build_problem(cfg)
    tmp_path.mkdir(exist_ok=True)
    cli_io.run_solver(cfg, ops, u0, psi0, n_steps=10, out=tmp_path)
    (tmp_path / "checkpoint_000010.npz").write_bytes(b"not a zip file")
    path, state = cli_io.latest_checkpoint(tmp_path, cfg, ops)
    assert path.name == "checkpoint_000005.npz" and state.step == 5


def test_checkpoint_header_mismatch(tmp_path):
    cfg = parse_config(SMALL)
    ops, u0, psi0 = cli_io.build_problem(cfg)
    cli_io.run_solver(cfg, ops, u0, psi0, n_steps=5, out=tmp_path)
    other = parse_config(SMALL.replace("dt = 0.01", "dt = 0.02"))
    with pytest.raises(ValueError, match="parameters"):
        cli_io.load_checkpoint(tmp_path / "checkpoint_000005.npz", other, ops)
    assert cli_io.latest_checkpoint(tmp_path, other, ops) == (None, None)


def test_resume_without_checkpoint_reports_failure(tmp_path, capsys):
    assert main(["resume", "--config", str(write_cfg(tmp_path, SMALL)), "--out", str(tmp_path / "o")]) == 2
    line = json.loads((tmp_path / "o" / "failures.jsonl").read_text().splitlines()[0])
    assert line["subcommand"] == "resume" and line["criterion"] == "checkpoint"
    assert "checkpoint" in capsys.readouterr().err


def test_bad_config_reports_failure(tmp_path):
    cfg = write_cfg(tmp_path, "[model]\nalpha = 0.3\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    line = json.loads((tmp_path / "o" / "failures.jsonl").read_text())
    assert line["criterion"] == "config" and "[model] alpha" in line["detail"]


def test_step_failure_flushes_partial_trajectory(tmp_path):
    cfg = parse_config(SMALL)
    ops, u0, psi0 = cli_io.build_problem(cfg)
    u0 = u0.copy()
    u0[0] = np.nan
    np.savez(tmp_path / "init.npz", u=u0, psi=psi0)
    text = SMALL + "[initial]\ncoefficient_file = init.npz\n"
    out = tmp_path / "o"
    assert main(["run", "--config", str(write_cfg(tmp_path, text)), "--out", str(out)]) == 1
    rows = (out / "trajectory.csv").read_text().strip().split("\n")
    assert len(rows) == 2
    assert json.loads((out / "failures.jsonl").read_text())["criterion"] == "step"


def test_coefficient_file_shape_checked(tmp_path):
    np.savez(tmp_path / "init.npz", u=np.zeros(3), psi=np.zeros((2, 2)))
    cfg = parse_config(SMALL + "[initial]\ncoefficient_file = init.npz\n", base_dir=tmp_path)
    with pytest.raises(ConfigError, match="coefficient_file"):
        cli_io.build_problem(cfg)


def test_verify_kernels_csv(tmp_path):
    text = "[kernels]\nalphas = 0.75\ndts = 0.01, 0.001\n"
    assert main(["verify-kernels", "--config", str(write_cfg(tmp_path, text)), "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "kernel_identities.csv").read_text().strip().split("\n")
    assert lines[0] == "identity_name,alpha,dt,residual"
    assert len(lines) == 1 + 14


def test_mc_subcommand_small(tmp_path):
    text = SMALL + "[mc]\nn_paths = 3000\nt_final = 0.2\ntv_threshold = 0.2\nbins = 4\n"
    out = tmp_path / "o"
    assert main(["mc", "--config", str(write_cfg(tmp_path, text)), "--out", str(out), "--seed", "3"]) == 0
    res = json.loads((out / "mc_summary.json").read_text())
    assert res["status"] == "PASS" and res["tv"] == pytest.approx(res["tv_from_files"])
    assert (out / "mc_histogram.csv").exists() and (out / "solver_marginal.csv").exists()


def test_convergence_subcommand(tmp_path):
    text = SMALL + "[convergence]\nt_final = 0.08\nk_levels = 1 2\n"
    out = tmp_path / "o"
    assert main(["convergence", "--config", str(write_cfg(tmp_path, text)), "--out", str(out)]) == 0
    rows = (out / "convergence.csv").read_text().strip().split("\n")
    assert rows[0] == "dt,u_error,psi_error,mass_drift" and len(rows) == 4
    assert len((out / "convergence_k.csv").read_text().strip().split("\n")) == 3


def test_mc_anisotropy_checked_only_when_mc_runs(tmp_path):
    text = "[model]\nb = 20\n"
    assert parse_config(text).model.spring.b == 20.0
    out = tmp_path / "o"
    assert main(["mc", "--config", str(write_cfg(tmp_path, text)), "--out", str(out)]) == 2
    assert "[mc] anisotropy" in (out / "failures.jsonl").read_text()


def test_zero_steps_writes_initial_state_only(tmp_path):
    text = SMALL.replace("n_steps = 12", "n_steps = 0")
    out = tmp_path / "o"
    assert main(["run", "--config", str(write_cfg(tmp_path, text)), "--out", str(out)]) == 0
    rows = (out / "trajectory.csv").read_text().strip().split("\n")
    assert len(rows) == 2 and rows[1].startswith("0,0,")
    assert len((out / "diagnostics.csv").read_text().strip().split("\n")) == 2
