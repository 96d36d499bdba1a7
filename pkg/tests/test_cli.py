import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from crossgee.cli import RunConfig, ingest_csv, load_config, main, run
from crossgee.errors import DuplicateError, ParseError, RunConfigError, SchemaError

from conftest import crossover_dataset, write_csv
from test_engine import SIM_SCENARIO, sim_data


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_blood_pressure_shape(tmp_path):
    ds = crossover_dataset(n_per_seq=2, sequences=("ABC", "ACB", "BAC", "BCA", "CAB", "CBA"), L=10)
    out = ingest_csv(write_csv(tmp_path / "bp.csv", ds))
    assert (out.n, out.P, out.L, out.N) == (12, 3, 10, 360)
    assert out.balanced


def test_cattle_shape_with_pretreatment_rows(tmp_path):
    ds = crossover_dataset(n_per_seq=4, L=3)
    path = tmp_path / "cows.csv"
    rows = ds.to_rows()
    extra = []
    for r in rows:
        r["pre"] = "0"
    for r in list(rows):
        if r["occasion"] == 1:
            for k, v in ((-1, 10.0), (0, 12.0)):
                extra.append({**r, "occasion": k, "response": v, "pre": "1"})
    rows += extra
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    out = ingest_csv(path, {"pretreatment": "pre"})
    assert out.N == 48 and out.L == 3
    np.testing.assert_array_equal(out.baseline, 11.0)


def test_column_mapping_and_covariates(tmp_path):
    ds = crossover_dataset(n_per_seq=2)
    path = tmp_path / "d.csv"
    rows = [{("cow" if k == "subject" else k): v for k, v in r.items()} for r in ds.to_rows()]
    for i, r in enumerate(rows):
        r["weight"] = str(400 + i)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    out = ingest_csv(path, {"subject": "cow"})
    assert out.n == 4 and "weight" in out.covariates


def test_empty_file(tmp_path):
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(SchemaError):
        ingest_csv(tmp_path / "e.csv")
    (tmp_path / "h.csv").write_text("subject,period,occasion,treatment,sequence,response\n")
    with pytest.raises(SchemaError):
        ingest_csv(tmp_path / "h.csv")


def test_missing_column(tmp_path):
    (tmp_path / "m.csv").write_text("subject,period,occasion,treatment,response\n1,1,1,A,0.5\n")
    with pytest.raises(SchemaError, match="sequence"):
        ingest_csv(tmp_path / "m.csv")


def test_non_numeric_response_reports_row(tmp_path):
    (tmp_path / "p.csv").write_text(
        "subject,period,occasion,treatment,sequence,response\n1,1,1,A,AB,0.5\n1,2,1,B,AB,oops\n"
    )
    with pytest.raises(ParseError, match="row 3"):
        ingest_csv(tmp_path / "p.csv")


def test_duplicate_cell(tmp_path):
    (tmp_path / "d.csv").write_text(
        "subject,period,occasion,treatment,sequence,response\n1,1,1,A,AB,0.5\n1,1,1,A,AB,0.7\n"
    )
    with pytest.raises(DuplicateError):
        ingest_csv(tmp_path / "d.csv")


@pytest.fixture(scope="module")
def sim_csv(tmp_path_factory):
    ds, _ = sim_data(15, seed=2)
    return write_csv(tmp_path_factory.mktemp("data") / "sim.csv", ds)


def test_compare_seven_structures(sim_csv, tmp_path):
    code = main(["compare", "--data", str(sim_csv), "--formula", SIM_SCENARIO.formula,
                 "--structure", "all", "--out", str(tmp_path)])
    assert code == 0
    rows = read_csv(tmp_path / "comparison.csv")
    assert len(rows) == 7 and list(rows[0]) == ["structure", "qic", "delta", "params", "converged"]
    doc = json.loads((tmp_path / "fit.json").read_text())
    winner = min((r for r in rows if r["converged"] == "true"), key=lambda r: float(r["qic"]))
    assert doc["structure"] == winner["structure"]


def test_fit_intercept_only(sim_csv, tmp_path):
    assert main(["fit", "--data", str(sim_csv), "--formula", "intercept", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "coefficients.csv")
    assert len(rows) == 1 and rows[0]["label"] == "intercept"
    assert list(rows[0]) == ["label", "estimate", "robust_se", "robust_z", "p_value", "model_se"]


def test_fit_outputs_are_reproducible(sim_csv, tmp_path):
    args = ["fit", "--data", str(sim_csv), "--formula", SIM_SCENARIO.formula, "--structure", "kron_ar1"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    for name in ("fit.json", "coefficients.csv", "psi.csv", "working_correlation.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_config_file_and_overrides(sim_csv, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(
        "[run]\n"
        f"data = {sim_csv}\n"
        f"formula = {SIM_SCENARIO.formula}\n"
        "structure = independence, kron_ar1 ; two candidates\n"
        "out = from_config\n"
        "[options]\nmax_iter = 50\n"
    )
    c = load_config(cfg, "compare")
    assert c.structures == ["independence", "kron_ar1"] and c.options.max_iter == 50
    assert main(["compare", "--config", str(cfg), "--out", str(tmp_path / "flag")]) == 0
    assert len(read_csv(tmp_path / "flag" / "comparison.csv")) == 2
    assert not (tmp_path / "from_config").exists()


def test_simulate_deterministic_across_threads(tmp_path):
    base = ["simulate", "--n-grid", "2", "--reps", "2", "--seed", "5"]
    assert main(base + ["--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    assert main(base + ["--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    a = (tmp_path / "a" / "sim_results.csv").read_bytes()
    assert a == (tmp_path / "b" / "sim_results.csv").read_bytes()
    assert a.startswith(b"n,structure,metric,value,lo,hi\n") and a.count(b"\n") > 1


def test_validation_errors():
    with pytest.raises(RunConfigError):
        RunConfig("fit").validate()
    with pytest.raises(RunConfigError):
        RunConfig("fit", data="/nonexistent.csv").validate()
    with pytest.raises(RunConfigError):
        RunConfig("simulate", threads=0).validate()


@pytest.mark.parametrize("argv, fragment", [
    (["fit", "--data", "/nonexistent.csv"], "cli.RunConfigError"),
    (["fit", "--config", "/nonexistent.ini"], "cli.RunConfigError"),
])
def test_error_exit_codes(argv, fragment, capsys):
    assert main(argv) != 0
    assert fragment in capsys.readouterr().err


def test_module_errors_are_qualified(sim_csv, capsys, tmp_path):
    assert main(["fit", "--data", str(sim_csv), "--structure", "bogus", "--out", str(tmp_path)]) == 1
    assert "correlation.ParamError" in capsys.readouterr().err
    assert main(["fit", "--data", str(sim_csv), "--formula", "intercept, period, sequence, sequence*period, treatment",
                 "--out", str(tmp_path)]) == 1
    assert "design.RankError" in capsys.readouterr().err


def test_console_entry_point(sim_csv, tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "crossgee", "fit", "--data", str(sim_csv), "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "fit.json").exists()
