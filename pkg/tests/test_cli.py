import json

import numpy as np
import pytest

from specdescent.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from specdescent.linalg import fractional_power_oracle, haar_factor_matrix, log_spaced_spectrum
from specdescent.matio import read_smat, write_smat


@pytest.fixture
def grad_file(tmp_path):
    g = haar_factor_matrix(24, 12, log_spaced_spectrum(12, 10.0), 0)
    path = tmp_path / "g.smat"
    write_smat(path, g)
    return g, path


def test_fit_then_apply_with_ledger(tmp_path, grad_file):
    g, gpath = grad_file
    sched = tmp_path / "s.json"
    assert main(["fit", "--a", "1", "--b", "2", "--steps", "8", "--out", str(sched)]) == EXIT_OK
    out, ledger = tmp_path / "o.smat", tmp_path / "l.json"
    argv = ["apply", "--in", str(gpath), "--a", "1", "--b", "2", "--steps", "8"]
    argv += ["--schedule", str(sched), "--out", str(out), "--ledger", str(ledger)]
    assert main(argv) == EXIT_OK
    o, _ = read_smat(out)
    np.testing.assert_allclose(o, fractional_power_oracle(g, 1, 2), atol=1e-8)
    assert json.loads(ledger.read_text())["ledger"]["qr"] == 9


def test_apply_divergence_exits_three(tmp_path):
    g = haar_factor_matrix(24, 12, log_spaced_spectrum(12, 1e4), 2)
    gpath = tmp_path / "g.smat"
    write_smat(gpath, g)
    argv = ["--precision", "f32", "apply", "--in", str(gpath), "--a", "3", "--b", "4"]
    argv += ["--scheme", "direct", "--steps", "40", "--out", str(tmp_path / "o.smat")]
    assert main(argv) == EXIT_NUMERIC


@pytest.mark.parametrize(
    "argv",
    [
        ["fit", "--a", "1"],
        ["apply", "--in", "missing.smat", "--a", "1", "--b", "2"],
        ["direction", "--kind", "freon", "--in", "missing.smat"],
        ["kaon-pdf", "--lambda", "5.0"],
        ["bench-stability", "--kappas", "0.5"],
        ["nonsense"],
    ],
)
def test_config_errors_exit_two(argv, tmp_path):
    assert main(argv + ["--out-dir", str(tmp_path)] if argv[0] != "nonsense" else argv) == EXIT_CONFIG


@pytest.mark.parametrize("kind", ["muon", "kaon", "tsgd", "sgd"])
def test_direction_kinds(kind, grad_file, tmp_path):
    _, gpath = grad_file
    out = tmp_path / f"{kind}.smat"
    assert main(["direction", "--kind", kind, "--in", str(gpath), "--out", str(out)]) == EXIT_OK
    d, _ = read_smat(out)
    assert d.shape == (24, 12) and np.all(np.isfinite(d))


def test_freon_direction(grad_file, tmp_path):
    _, gpath = grad_file
    out = tmp_path / "f.smat"
    argv = ["direction", "--kind", "freon", "--a", "2", "--b", "3", "--in", str(gpath), "--out", str(out)]
    assert main(argv) == EXIT_OK


def test_global_flags_before_subcommand_survive(tmp_path):
    argv = ["--out-dir", str(tmp_path), "--seed", "3", "kaon-pdf", "--particles", "100"]
    argv += ["--burn-in", "5", "--collect", "2"]
    assert main(argv) == EXIT_OK
    lines = (tmp_path / "hist.csv").read_text().splitlines()
    assert lines[0] == "bin_left,bin_right,count" and len(lines) == 201


def test_bench_stability_and_sv_compare(tmp_path):
    argv = ["--out-dir", str(tmp_path), "bench-stability", "--sizes", "16x8", "--kappas", "1,100"]
    argv += ["--exponents", "1/2", "--methods", "coupled-chol:10,direct:20"]
    assert main(argv) == EXIT_OK
    assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 1 + 2 * 2 * 2
    argv = ["--out-dir", str(tmp_path), "sv-compare", "--m", "16", "--n", "8", "--exponent", "2/3"]
    assert main(argv) == EXIT_OK
    assert (tmp_path / "svcomp.csv").exists()


def test_rf_train_and_diagnose(tmp_path):
    problem = tmp_path / "rf.json"
    problem.write_text(json.dumps({"o": 6, "d": 5, "n": 10, "seed": 1}))
    trace = tmp_path / "t.csv"
    argv = ["rf-train", "--config", str(problem), "--method", "gd", "--steps", "5", "--out", str(trace)]
    assert main(argv) == EXIT_OK
    assert trace.read_text().splitlines()[0] == "step,loss,eta,c,gamma,phi"
    d = tmp_path / "d.smat"
    write_smat(d, np.ones((6, 5)))
    rec = tmp_path / "r.json"
    argv = ["diagnose", "--problem", str(problem), "--direction", str(d), "--alpha", "0.01", "--out", str(rec)]
    assert main(argv) == EXIT_OK
    got = json.loads(rec.read_text())
    assert got["predicted_delta"] == pytest.approx(got["actual_delta"], rel=1e-10)


def test_rf_divergence_exits_three(tmp_path):
    problem = tmp_path / "rf.json"
    problem.write_text(json.dumps({"o": 6, "d": 5, "n": 10}))
    argv = ["rf-train", "--config", str(problem), "--method", "gd", "--lr", "1e9", "--steps", "200"]
    assert main(argv + ["--out", str(tmp_path / "t.csv")]) == EXIT_NUMERIC


def test_diagnose_shape_mismatch(tmp_path):
    problem = tmp_path / "rf.json"
    problem.write_text(json.dumps({"o": 6, "d": 5, "n": 10}))
    d = tmp_path / "d.smat"
    write_smat(d, np.ones((2, 2)))
    assert main(["diagnose", "--problem", str(problem), "--direction", str(d), "--alpha", "1"]) == EXIT_CONFIG
