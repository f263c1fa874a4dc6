import csv
import json

import numpy as np
import pytest

from compfactor.cli import main
from compfactor.harness import financial_fixture


def _synth(tmp_path, *extra):
    model, data = tmp_path / "model.json", tmp_path / "data.csv"
    code = main([
        "synth", "--p", "8", "--q", "3", "--kx", "1", "--ku", "1", "--tau", "0.3",
        "--n", "800", "-o", str(model), "--data-out", str(data), *extra,
    ])
    assert code == 0
    return model, data


def test_synth_then_fit_composite(tmp_path, capsys):
    model, data = _synth(tmp_path)
    assert json.loads(model.read_text())["kind"] == "population"
    fit = tmp_path / "fit.json"
    code = main([
        "fit-composite", "--data", str(data), "--p", "8", "--lambda", "0.1", "--gamma", "1.5",
        "--tol", "1e-8", "--max-iters", "20000", "-o", str(fit),
    ])
    assert code == 0
    payload = json.loads(fit.read_text())
    assert payload["converged"]
    assert payload["kkt"]["max"] <= 1e-5
    assert "converged=True" in capsys.readouterr().out


def test_fit_composite_from_model_file_matches_data_file(tmp_path):
    model, data = _synth(tmp_path)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["fit-composite", "--data", str(data), "--p", "8", "-o", str(a)]) == 0
    assert main(["fit-composite", "--model", str(model), "--n", "800", "-o", str(b)]) == 0
    oa, ob = json.loads(a.read_text())["objective"], json.loads(b.read_text())["objective"]
    assert oa == pytest.approx(ob, rel=1e-12)


def test_exit_codes(tmp_path):
    _, data = _synth(tmp_path)
    # non-convergence is fatal only with --strict
    base = ["fit-composite", "--data", str(data), "--p", "8", "--max-iters", "2", "-o", str(tmp_path / "f.json")]
    assert main(base) == 0
    assert main(base + ["--strict"]) == 3
    assert main(["fit-composite", "--data", str(tmp_path / "missing.csv"), "--p", "8"]) == 2
    assert main(["fit-composite", "--no-such-flag"]) == 2


def test_config_file_and_flag_precedence(tmp_path):
    _, data = _synth(tmp_path)
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# solver settings\nlambda = 0.3\ngamma = 2.0\nmax-iters = 4000\n")
    out = tmp_path / "fit.json"
    assert main(["fit-composite", "--config", str(cfg), "--data", str(data), "--p", "8", "-o", str(out)]) == 0
    assert json.loads(out.read_text())["lambda"] == 0.3
    assert main([
        "fit-composite", "--config", str(cfg), "--data", str(data), "--p", "8", "--lambda", "0.2", "-o", str(out)
    ]) == 0
    payload = json.loads(out.read_text())
    assert payload["lambda"] == 0.2 and payload["gamma"] == 2.0
    cfg.write_text("bogus_key = 1\n")
    assert main(["fit-composite", "--config", str(cfg), "--data", str(data), "--p", "8"]) == 2


def test_certify_prints_three_rows(tmp_path, capsys):
    out = tmp_path / "cert.json"
    code = main([
        "certify", "--p", "12", "--q", "2", "--tau", "0.2", "--samples", "3",
        "--restarts", "4", "--iters", "60", "-o", str(out),
    ])
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    rows = [ln for ln in lines if ln.split() and ln.split()[0] in ("chi", "xi", "varphi")]
    assert len(rows) == 3
    assert all(ln.split()[-1] in ("PASS", "FAIL") for ln in rows)
    payload = json.loads(out.read_text())
    assert set(payload) == {"assumptions", "theorem_constants"}


def test_interpret_on_fixture_writes_strength_table(tmp_path):
    y, panel = financial_fixture(seed=0, n_months=120, p=10, n_factors=3, n_driving=1)
    resp, pan = tmp_path / "resp.csv", tmp_path / "panel.csv"
    y.to_csv(resp)
    panel.to_csv(pan)
    out = tmp_path / "interp"
    code = main([
        "interpret", "--responses", str(resp), "--panel", str(pan), "--standardize",
        "--cv-lambda-lo", "0.05", "--cv-lambda-hi", "1.0", "--cv-step", "0.05",
        "--n-lambda", "4", "--n-gamma", "3", "--max-iters", "1500", "--tol", "1e-4", "-o", str(out),
    ])
    assert code == 0
    with open(out / "strengths.csv", newline="") as fh:
        table = list(csv.reader(fh))
    assert table[0][0] == "covariate"
    assert [r[0] for r in table[1:]] == list(panel.names)
    cands = list(csv.DictReader(open(out / "candidates.csv", newline="")))
    assert len(cands) > 0
    assert json.loads((out / "factor_model.json").read_text())["kind"] == "factor_model"
    assert isinstance(json.loads((out / "interpretation.json").read_text()), dict)


def test_recover_experiment_tiny(tmp_path):
    out = tmp_path / "rec"
    code = main([
        "recover-experiment", "--p", "8", "--q", "3", "--models", "1:1", "--n-values", "300",
        "--trials", "2", "--n-lambda", "3", "--n-gamma", "2", "--max-iters", "300", "--tol", "1e-4",
        "-o", str(out),
    ])
    assert code == 0
    rows = list(csv.DictReader(open(out / "recovery.csv", newline="")))
    assert len(rows) == 1 and rows[0]["trials"] == "2"
    assert 0.0 <= float(rows[0]["probability"]) <= 1.0
    dev = rows[0]["mean_deviation"]
    assert dev == "" or np.isfinite(float(dev))
