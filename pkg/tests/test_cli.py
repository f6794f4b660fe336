import csv
import json

import numpy as np
import pytest

from changeplane.cli import ColumnSpec, UserError, load_csv, load_schema, main, validate
from changeplane.simlab import DgpConfig, gen_dataset
import jsonschema

SPEC = {"response": "y", "baseline": ["x1", "x2"], "difference": ["x1", "x2"],
        "grouping": ["u1", "u2"], "add_intercept_x": True, "add_intercept_z": True,
        "add_intercept_u": True}


def write_dataset(path, d):
    """CSV with columns y, x1, x2, u1, u2 (intercept columns are added by the spec)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y", "x1", "x2", "u1", "u2"])
        for i in range(d.n):
            w.writerow([repr(float(v)) for v in (d.y[i], d.X[i, 1], d.X[i, 2],
                                                d.U[i, 1], d.U[i, 2])])


@pytest.fixture
def files(tmp_path):
    def make(n=200, seed=0, beta_scale=1.0, dist="pareto21"):
        d, truth, labels = gen_dataset(DgpConfig(n=n, seed=seed, beta_scale=beta_scale,
                                                 error_dist=dist, design_scale=3.0))
        data = tmp_path / f"data_{n}_{seed}_{beta_scale}_{dist}.csv"
        write_dataset(data, d)
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps(SPEC))
        return str(data), str(spec), d, truth, labels
    return make


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# -- load_csv -----------------------------------------------------------------

def test_load_csv_examples(tmp_path):
    spec = ColumnSpec.from_dict({"response": "y", "baseline": ["x1"], "difference": ["x1"],
                                 "grouping": ["x1", "u"]})
    p = tmp_path / "ok.csv"
    p.write_text("y,x1,u\n1,2,3\n4,5,6\n7,8,9\n")
    d = load_csv(p, spec)
    assert d.n == 3
    np.testing.assert_array_equal(d.y, [1, 4, 7])
    np.testing.assert_array_equal(d.U, [[2, 3], [5, 6], [8, 9]])

    p.write_text("x1,u\n1,2\n3,4\n5,6\n")
    with pytest.raises(UserError, match="'y'"):
        load_csv(p, spec)

    p.write_text("y,x1,u\n1,2,3\n4,abc,6\n7,8,9\n")
    with pytest.raises(UserError) as exc:
        load_csv(p, spec)
    assert exc.value.args[1] == (2, "x1")

    p.write_text("")
    with pytest.raises(UserError, match="empty"):
        load_csv(p, spec)
    p.write_text("y,x1,u\n")
    with pytest.raises(UserError, match="no data"):
        load_csv(p, spec)


def test_load_csv_intercepts(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("y,x1,u\n1,2,3\n4,5,6\n7,8,9\n0,1,1\n")
    spec = ColumnSpec.from_dict({"response": "y", "baseline": ["x1"], "difference": ["x1"],
                                 "grouping": ["u"], "add_intercept_x": True,
                                 "add_intercept_u": True})
    d = load_csv(p, spec)
    np.testing.assert_array_equal(d.X[:, 0], 1)
    np.testing.assert_array_equal(d.U, [[1, 3], [1, 6], [1, 9], [1, 1]])
    assert d.Z.shape == (4, 1)


def test_column_spec_checks():
    with pytest.raises(UserError):
        ColumnSpec.from_dict({"response": "y", "baseline": ["y"], "difference": ["x"],
                              "grouping": ["a", "b"]}).check()
    with pytest.raises(UserError):
        ColumnSpec.from_dict({"response": "y", "baseline": ["x"], "difference": ["x"],
                              "grouping": ["a"]}).check()
    with pytest.raises((UserError, jsonschema.ValidationError)):
        ColumnSpec.from_dict({"response": "y"})


# -- fit ------------------------------------------------------------------------

def test_fit_round_trip(files, tmp_path, capsys):
    data, spec, d, truth, labels = files(n=400, seed=3, beta_scale=2.0, dist="gaussian")
    out = tmp_path / "fit.json"
    code, _, err = run(["fit", "--data", data, "--spec", spec, "--seed", "1",
                        "--out", str(out)], capsys)
    assert code == 0, err
    res = json.loads(out.read_text())
    validate(res, "fit_output")
    est = np.concatenate([res["alpha"], res["beta"]])
    assert np.linalg.norm(est - truth.theta) < 1.0
    assert np.mean(np.array(res["subgroup_labels"]) == labels) > 0.9
    assert res["ci"] is None


def test_fit_tau_inf_matches_ols_pipeline(files, tmp_path, capsys):
    from changeplane.changeplane_fit import fit_alternating
    from changeplane.core import FitConfig

    data, spec, *_ = files(n=150, seed=4)
    out = tmp_path / "fit.json"
    assert main(["fit", "--data", data, "--spec", spec, "--tau", "inf", "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert res["tau"] == "inf"
    d = load_csv(data, ColumnSpec.from_file(spec))
    fit = fit_alternating(d, FitConfig(tau_policy="infinite"))
    np.testing.assert_allclose(res["alpha"], fit.params.alpha, rtol=0, atol=1e-12)
    np.testing.assert_allclose(res["eta"], fit.params.eta, rtol=0, atol=1e-12)


def test_fit_is_byte_identical_on_rerun(files, tmp_path):
    data, spec, *_ = files(n=150, seed=5)
    outs = []
    for k in range(2):
        out = tmp_path / f"fit{k}.json"
        assert main(["fit", "--data", data, "--spec", spec, "--seed", "7", "--kernel", "normcdf",
                     "--h", "0.3", "--tau", "2.5", "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    res = json.loads(outs[0])
    assert res["kernel"] == "normal_cdf" and res["h"] == 0.3 and res["tau"] == 2.5


@pytest.mark.slow
def test_fit_with_bootstrap(files, tmp_path):
    data, spec, *_ = files(n=200, seed=6, dist="gaussian", beta_scale=2.0)
    out = tmp_path / "fit.json"
    assert main(["fit", "--data", data, "--spec", spec, "--bootstrap", "100", "--threads", "1",
                 "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    validate(res, "fit_output")
    ci = res["ci"]
    assert ci["B"] == 100 and ci["level"] == 0.95
    assert all(lo <= a <= hi for lo, a, hi in zip(ci["alpha"]["lower"], res["alpha"],
                                                   ci["alpha"]["upper"]))


# -- test -----------------------------------------------------------------------------

def _test_json(argv, tmp_path, name="t.json"):
    out = tmp_path / name
    code = main(argv + ["--out", str(out)])
    assert code == 0
    res = json.loads(out.read_text())
    validate(res, "test_output")
    return res


@pytest.mark.parametrize("method", ["rwast", "wast", "sst"])
def test_test_command_output(files, tmp_path, method):
    data, spec, *_ = files(n=120, seed=7)
    res = _test_json(["test", "--data", data, "--spec", spec, "--method", method, "--B", "150",
                      "--sst-grid", "100"], tmp_path)
    assert res["method"] == method and res["B"] == 150
    assert 0 < res["p_value"] <= 1 and res["runtime_seconds"] >= 0
    assert res["reject"] == (res["p_value"] <= 0.05)


def test_rwast_with_infinite_tau_equals_wast(files, tmp_path):
    data, spec, *_ = files(n=120, seed=8)
    a = _test_json(["test", "--data", data, "--spec", spec, "--method", "rwast", "--tau", "inf",
                    "--B", "100"], tmp_path, "a.json")
    b = _test_json(["test", "--data", data, "--spec", spec, "--method", "wast", "--B", "100"],
                   tmp_path, "b.json")
    assert abs(a["statistic"] - b["statistic"]) < 1e-10
    assert a["p_value"] == b["p_value"]


def test_null_and_signal_pvalues(files, tmp_path):
    keep = 0
    for seed in range(40):
        data, spec, *_ = files(n=200, seed=100 + seed, beta_scale=0.0)
        keep += _test_json(["test", "--data", data, "--spec", spec, "--B", "300",
                            "--seed", str(seed)], tmp_path)["p_value"] > 0.05
    assert keep >= 34
    hits = 0
    for seed in range(20):
        data, spec, *_ = files(n=400, seed=200 + seed, beta_scale=1.0)
        hits += _test_json(["test", "--data", data, "--spec", spec, "--B", "300",
                            "--seed", str(seed)], tmp_path)["p_value"] < 0.05
    assert hits >= 19


# -- simulate ----------------------------------------------------------------------------

def _read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_simulate_estimation_counts_and_rerun(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"grid": {"n": [60, 80], "dist": ["gaussian"],
                                        "method": ["AHu", "OLS"]},
                               "fit": {"n_starts": 2, "max_outer_iter": 5}}))
    dirs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["simulate", "--suite", "estimation", "--config", str(cfg), "--reps", "10",
                     "--seed", "3", "--threads", "1", "--out-dir", str(out)]) == 0
        dirs.append(out)
    rows = _read_csv(dirs[0] / "report.csv")
    assert len(rows) - 1 == 2 * 1 * 2 * 2           # n x dist x method x metric
    for name in ("report.csv", "raw.csv", "plot_data.csv"):
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()


def test_simulate_test_suite_shape(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"grid": {"n": [50, 60, 70], "method": ["rwast", "wast", "sst"],
                                        "beta_scale": [0]},
                               "sst_grid": 20}))
    out = tmp_path / "run"
    assert main(["simulate", "--suite", "test", "--config", str(cfg), "--reps", "3", "--B", "100",
                 "--threads", "1", "--out-dir", str(out)]) == 0
    rows = _read_csv(out / "report.csv")[1:]
    assert len(rows) == 9
    assert {(r[0], r[1]) for r in rows} == {(m, str(n)) for m in ("rwast", "wast", "sst")
                                            for n in (50, 60, 70)}


def test_simulate_bad_config_names_key(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"dgp": {"p": "three"}}))
    code, _, err = run(["simulate", "--suite", "estimation", "--config", str(cfg),
                        "--out-dir", str(tmp_path / "o")], capsys)
    assert code == 1
    assert "dgp/p" in json.loads(err)["error"]["message"]


# -- exit codes ------------------------------------------------------------------------------

def test_user_errors_exit_1(files, tmp_path, capsys):
    data, spec, *_ = files(n=60, seed=9)
    cases = [
        ["fit", "--data", str(tmp_path / "missing.csv"), "--spec", spec],
        ["fit", "--data", data, "--spec", spec, "--kernel", "box"],
        ["fit", "--data", data, "--spec", spec, "--tau", "-1"],
        ["test", "--data", data, "--spec", spec, "--B", "10"],
        ["test", "--data", data, "--spec", spec, "--method", "wast", "--tau", "2"],
        ["bogus"],
    ]
    for argv in cases:
        code, _, err = run(argv, capsys)
        assert code == 1, argv
        assert "error" in json.loads(err)


def test_parse_error_location_in_json(tmp_path, capsys):
    p = tmp_path / "d.csv"
    p.write_text("y,x1,x2,u1,u2\n1,2,3,4,5\n1,abc,3,4,5\n")
    s = tmp_path / "s.json"
    s.write_text(json.dumps(SPEC))
    code, _, err = run(["fit", "--data", str(p), "--spec", str(s)], capsys)
    assert code == 1
    assert json.loads(err)["error"]["location"] == {"row": 2, "column": "x1"}


def test_internal_error_exit_2(files, monkeypatch, capsys):
    import changeplane.changeplane_fit as cf

    data, spec, *_ = files(n=60, seed=10)

    def boom(*a, **k):
        raise RuntimeError("unexpected")

    monkeypatch.setattr(cf, "fit_alternating", boom)
    code, _, err = run(["fit", "--data", data, "--spec", spec], capsys)
    assert code == 2
    assert json.loads(err)["error"]["type"] == "RuntimeError"


def test_schemas_are_valid_json_schema():
    for name in ("column_spec", "fit_output", "test_output", "simulate_config"):
        jsonschema.Draft202012Validator.check_schema(load_schema(name))
