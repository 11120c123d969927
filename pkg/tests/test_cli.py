import hashlib
import os
import subprocess
import sys

import numpy as np
import pytest

from s2fl import load_bundle, load_model
from s2fl.cli import main, read_label_csv
from s2fl.dataio import read_pgm


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def tree_digest(path):
    h = {}
    for name in sorted(os.listdir(path)):
        h[name] = hashlib.sha256((path / name).read_bytes()).hexdigest()
    return h


@pytest.fixture(scope="module")
def small_bundle(tmp_path_factory):
    path = tmp_path_factory.mktemp("bundle")
    assert main(["synth", "--out", str(path), "--seed", "3", "--train-per-class", "15",
                 "--test-per-class", "10", "--unlabeled-per-class", "2"]) == 0
    return path


def test_end_to_end_seed7(tmp_path, capsys):
    b, m = tmp_path / "b", tmp_path / "m"
    assert run(["synth", "--out", b, "--seed", 7], capsys)[0] == 0
    assert run(["fit", "--bundle", b, "--out", m, "--ds", 5], capsys)[0] == 0
    assert run(["transform", "--bundle", b, "--model", m, "--out", tmp_path / "t"], capsys)[0] == 0
    assert run(["classify", "--bundle", b, "--model", m, "--out", tmp_path / "c", "--map"], capsys)[0] == 0
    code, out, _ = run(["evaluate", "--predictions", tmp_path / "c" / "predictions.csv", "--bundle", b,
                        "--out", tmp_path / "e"], capsys)
    assert code == 0 and "oa=" in out
    for f in ["manifest.txt", "theta0.f64", "theta_1.f64", "theta_2.f64", "P.f64", "convergence.csv"]:
        assert (m / f).is_file()
    for f in ["predictions.csv", "reference.csv", "classmap.pgm", "classmap.legend.txt"]:
        assert (tmp_path / "c" / f).is_file()
    assert (tmp_path / "e" / "report.txt").read_text() == out
    assert (tmp_path / "e" / "confusion.csv").is_file()
    assert (tmp_path / "t" / "features.f64").stat().st_size == 10 * 800 * 8

    conv = (m / "convergence.csv").read_text().splitlines()
    assert conv[0] == "iter,objective,rel_delta,res_H,res_G"
    assert float(conv[-1].split(",")[2]) < 1e-4

    bundle = load_bundle(b)
    pred = read_label_csv(tmp_path / "c" / "predictions.csv")
    assert len(pred) == bundle.n_all
    np.testing.assert_array_equal(read_pgm(tmp_path / "c" / "classmap.pgm").ravel(),
                                  [pred[i] for i in range(bundle.n_all)])
    assert load_model(m).model.d_s == 5


def test_fit_rejects_oversized_subspace(tmp_path, small_bundle, capsys):
    code, _, err = run(["fit", "--bundle", small_bundle, "--out", tmp_path / "m", "--ds", 19], capsys)
    assert code != 0
    assert err.strip().splitlines()[-1].startswith("S2FL-ERR:INVALID_DS:")


def test_missing_bundle_is_io_error(tmp_path, capsys):
    code, _, err = run(["fit", "--bundle", tmp_path / "none", "--out", tmp_path / "m"], capsys)
    assert code != 0 and err.startswith("S2FL-ERR:IO:")


def test_evaluate_identical_files(tmp_path, capsys):
    p = tmp_path / "p.csv"
    p.write_text("pixel,label\n0,1\n1,2\n2,3\n3,1\n")
    code, out, _ = run(["evaluate", "--predictions", p, "--reference", p, "--out", tmp_path / "e"], capsys)
    assert code == 0 and "oa=1.000000" in out.splitlines()


def test_evaluate_missing_prediction(tmp_path, capsys):
    p = tmp_path / "p.csv"
    r = tmp_path / "r.csv"
    p.write_text("0,1\n")
    r.write_text("0,1\n5,2\n")
    code, _, err = run(["evaluate", "--predictions", p, "--reference", r, "--out", tmp_path / "e"], capsys)
    assert code != 0 and err.startswith("S2FL-ERR:VALIDATION:") and "5" in err


def test_commands_are_deterministic(tmp_path, small_bundle, capsys):
    for tag in ("a", "b"):
        assert run(["fit", "--bundle", small_bundle, "--out", tmp_path / tag / "m", "--ds", 3, "--q", 5,
                    "--max-outer", 8], capsys)[0] == 0
        assert run(["classify", "--bundle", small_bundle, "--model", tmp_path / tag / "m",
                    "--out", tmp_path / tag / "c", "--map", "--fusion", "mean"], capsys)[0] == 0
    assert tree_digest(tmp_path / "a" / "m") == tree_digest(tmp_path / "b" / "m")
    assert tree_digest(tmp_path / "a" / "c") == tree_digest(tmp_path / "b" / "c")


def test_cml_and_modes(tmp_path, small_bundle, capsys):
    m = tmp_path / "m"
    assert run(["fit", "--bundle", small_bundle, "--out", m, "--ds", 3, "--q", 5, "--max-outer", 5], capsys)[0] == 0
    for extra in (["--cml-modality", "2"], ["--mode", "shared"], ["--mode", "specific", "--fusion", "sum"]):
        assert run(["classify", "--bundle", small_bundle, "--model", m, "--out", tmp_path / "c"] + extra,
                   capsys)[0] == 0
    code, _, err = run(["classify", "--bundle", small_bundle, "--model", m, "--out", tmp_path / "c",
                        "--cml-modality", "3"], capsys)
    assert code != 0 and err.startswith("S2FL-ERR:VALIDATION:")


def test_cv_command(tmp_path, small_bundle, capsys):
    code, out, _ = run(["cv", "--bundle", small_bundle, "--out", tmp_path / "cv", "--folds", 3,
                        "--grid-q", "5", "--grid-sigma", "1", "--grid-alpha", "0.01,1", "--grid-beta", "0.1",
                        "--grid-ds", "3", "--max-outer", 4], capsys)
    assert code == 0
    rows = (tmp_path / "cv" / "cv_report.csv").read_text().splitlines()
    assert len(rows) == 3
    best = dict(line.split("=") for line in (tmp_path / "cv" / "best.txt").read_text().splitlines())
    assert best["d_s"] == "3" and best["q"] == "5"


def test_cv_folds_too_large(tmp_path, small_bundle, capsys):
    code, _, err = run(["cv", "--bundle", small_bundle, "--out", tmp_path / "cv", "--folds", 20,
                        "--grid-q", "5", "--grid-sigma", "1", "--grid-alpha", "1", "--grid-beta", "1",
                        "--grid-ds", "3"], capsys)
    assert code != 0 and err.startswith("S2FL-ERR:VALIDATION:") and "--folds" in err


def test_console_script_quiet(tmp_path):
    env = dict(os.environ, S2FL_LOG="quiet")
    proc = subprocess.run([sys.executable, "-m", "s2fl.cli", "synth", "--out", str(tmp_path / "b")],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0 and proc.stderr == ""
    proc = subprocess.run([sys.executable, "-m", "s2fl.cli", "evaluate", "--predictions", str(tmp_path / "x"),
                           "--reference", str(tmp_path / "x"), "--out", str(tmp_path / "e")],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 2 and proc.stderr.startswith("S2FL-ERR:IO:")
