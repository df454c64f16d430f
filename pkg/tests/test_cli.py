import json

import numpy as np
import pytest

from sgspde.cli import EXIT_HYPOTHESIS, EXIT_IO, EXIT_NONCONVERGENCE, EXIT_OK, main
from sgspde.grid import load_field
from sgspde.manifest import ManifestError, parse_manifest
from sgspde.solver import HypothesisError

HEAT = """\
grid: {dim: 1, n_points: 32, half_width: 6.0}
problem:
  generator:
    symbol: "br(x)^2 * br(xi)^2"
    order: [2, 2]
    hypo_order: [2, 2]
  gamma: {expr: "-u^3", C: 4.0, locality: {radius: 1.0}}
  sigma: {expr: "u / br(x)", C: 1.0}
  u0: "0.5 * exp(-x^2)"
  measure: {type: atoms, atoms: [[[0.0], 1.0]]}
  T: 0.2
  index: {z: 0.0, zeta: 0.0}
  kappa: 0.0
  lambda: 0.25
config: {dt: 0.02, K: 1, paths: 8, seed: 7}
"""

OU = """\
grid: {dim: 1, n_points: 32, half_width: 6.0}
problem:
  generator: {symbol: "br(xi)^2", order: [0, 2], hypo_order: [0, 2]}
  gamma: "0"
  sigma: {expr: "1", C: 4.0}
  u0: "0"
  measure: {type: density, density_expr: "br(xi)^(-2)"}
  T: 0.05
  index: [0, 0]
  lambda: 0.25
config: {dt: 0.005, K: 31, paths: 40, seed: 1}
simulate: {horizon: 0.05}
spectral: {lambdas: [0.0, 0.2, 0.4]}
"""


def write(tmp_path, text, name="m.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run(tmp_path, command, text, *extra, out="out"):
    return main([command, "--manifest", write(tmp_path, text), "--out", str(tmp_path / out), *extra])


# --- manifest parsing ---------------------------------------------------------

def test_manifest_builds_problem():
    m = parse_manifest(HEAT)
    assert m.spec.generator.kind == "separable"
    assert m.spec.gamma.locality is not None and m.spec.gamma.locality.center is m.spec.u0
    assert m.config.K == 1 and m.config.paths == 8
    assert m.spec.lam == 0.25


def test_json_manifest_equivalent():
    import yaml

    data = yaml.safe_load(OU)
    m = parse_manifest(json.dumps(data, indent=1))
    assert m.config.K == 31 and m.options["simulate"]["horizon"] == 0.05


def test_overrides():
    m = parse_manifest(HEAT, overrides={"seed": 99, "threads": 4, "paths": None})
    assert m.config.seed == 99 and m.config.threads == 4 and m.config.paths == 8


@pytest.mark.parametrize("text,line", [
    (HEAT.replace('symbol: "br(x)^2 * br(xi)^2"', 'symbol: "br(x)^2 ** * br(xi)"'), 4),
    (HEAT.replace("T: 0.2", "T: fast"), 11),
    (HEAT.replace("grid: {dim: 1,", "grid: {dim: 1,,"), 1),
    (HEAT.replace("  u0:", "  u0 ["), 10),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ManifestError) as err:
        parse_manifest(text, "m.yaml")
    assert err.value.line == line
    assert str(err.value).startswith(f"m.yaml:{line}")


def test_missing_section():
    with pytest.raises(ManifestError, match="measure"):
        parse_manifest(HEAT.replace("  measure: {type: atoms, atoms: [[[0.0], 1.0]]}\n", ""))


def test_lambda_range_is_a_hypothesis_error():
    with pytest.raises(HypothesisError, match=r"λ ∉ \[0,1/2\)"):
        parse_manifest(HEAT.replace("lambda: 0.25", "lambda: 0.6"))


# --- commands ------------------------------------------------------------------

def test_check_passes_for_sg_heat(tmp_path, capsys):
    assert run(tmp_path, "check", HEAT) == EXIT_OK
    rep = json.loads((tmp_path / "out" / "check.json").read_text())
    assert rep["ok"]
    names = {h["name"] for h in rep["hypotheses"]}
    assert {"parabolicity", "spectral_condition", "measure_symmetry", "gamma_lip_bounds"} <= names
    assert next(h for h in rep["hypotheses"] if h["name"] == "parabolicity")["C"] == pytest.approx(1)


def test_check_rejects_lambda(tmp_path, capsys):
    code = run(tmp_path, "check", HEAT.replace("lambda: 0.25", "lambda: 0.6"))
    assert code == EXIT_HYPOTHESIS
    assert "λ ∉ [0,1/2)" in capsys.readouterr().err


def test_check_rejects_asymmetric_measure(tmp_path, capsys):
    text = OU.replace('density_expr: "br(xi)^(-2)"', 'density_expr: "exp(-(xi - 1)^2)"')
    assert run(tmp_path, "check", text) == EXIT_HYPOTHESIS
    out = capsys.readouterr()
    assert "FAIL  measure_symmetry" in out.out and "mirror" in out.out
    assert "measure_symmetry" in out.err


def test_check_rejects_asymmetric_atoms(tmp_path, capsys):
    text = HEAT.replace("atoms: [[[0.0], 1.0]]", "atoms: [[[0.5], 1.0]]")
    assert run(tmp_path, "check", text) == EXIT_HYPOTHESIS
    assert "symmetr" in capsys.readouterr().err.lower()


def test_parse_error_exit_code(tmp_path, capsys):
    assert run(tmp_path, "check", HEAT.replace("T: 0.2", "T: [")) == EXIT_IO
    assert main(["check", "--manifest", str(tmp_path / "missing.yaml")]) == EXIT_IO
    assert main(["nonsense"]) == EXIT_IO


def test_simulate_bundle(tmp_path):
    assert run(tmp_path, "simulate", HEAT, "--snapshots", "2") == EXIT_OK
    out = tmp_path / "out"
    report = json.loads((out / "report.json").read_text())
    assert report["contraction"]["certified"] and report["horizon"] == 0.2
    data = np.loadtxt(out / "moments.csv", delimiter=",", skiprows=1)
    assert data.shape == (11, 4)
    snaps = sorted((out / "snapshots").glob("*.bin"))
    assert len(snaps) == 2 * 11
    f = load_field(snaps[0])
    assert f.grid.n_points == 32
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 7 and "version" in manifest


def test_simulate_deterministic_problem_has_zero_variance(tmp_path):
    text = HEAT.replace('sigma: {expr: "u / br(x)", C: 1.0}', 'sigma: "0"').replace("paths: 8", "paths: 1")
    assert run(tmp_path, "simulate", text) == EXIT_OK
    data = np.loadtxt(tmp_path / "out" / "moments.csv", delimiter=",", skiprows=1)
    assert np.all(data[:, 2] == 0)


def test_simulate_is_reproducible(tmp_path):
    assert run(tmp_path, "simulate", OU, out="a") == EXIT_OK
    assert run(tmp_path, "simulate", OU, out="b") == EXIT_OK
    a = (tmp_path / "a" / "moments.csv").read_bytes()
    assert a == (tmp_path / "b" / "moments.csv").read_bytes()
    assert run(tmp_path, "simulate", OU, "--seed", "2", out="c") == EXIT_OK
    assert a != (tmp_path / "c" / "moments.csv").read_bytes()


def test_simulate_nonconvergence_exit(tmp_path):
    text = HEAT.replace('gamma: {expr: "-u^3", C: 4.0, locality: {radius: 1.0}}',
                        'gamma: {expr: "60 * u", C: 200.0}')
    assert run(tmp_path, "simulate", text) == EXIT_NONCONVERGENCE


def test_verify_battery(tmp_path):
    assert run(tmp_path, "verify", OU) == EXIT_OK
    rep = json.loads((tmp_path / "out" / "verify.json").read_text())
    names = [c["name"] for c in rep["checks"]]
    assert names == ["residual", "decay_bound", "ito_isometry", "linear_crosscheck"]


def test_basis_dump(tmp_path):
    assert run(tmp_path, "basis", OU) == EXIT_OK
    meta = json.loads((tmp_path / "out" / "basis" / "basis.json").read_text())
    assert meta["K"] == 31 and meta["gram_error"] < 1e-10
    assert len(list((tmp_path / "out" / "basis").glob("h*.bin"))) == 31


def test_spectral_sweep(tmp_path):
    assert run(tmp_path, "spectral", OU) == EXIT_OK
    lines = (tmp_path / "out" / "spectral.csv").read_text().splitlines()
    assert lines[0].startswith("lambda,") and len(lines) == 4


def test_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SGSPDE_OUT", str(tmp_path / "env"))
    assert main(["basis", "--manifest", write(tmp_path, OU)]) == EXIT_OK
    assert (tmp_path / "env" / "basis" / "basis.json").exists()
