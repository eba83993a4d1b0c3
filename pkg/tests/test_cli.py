import json
import math

import numpy as np
import pytest

from covbalance import cli
from covbalance.cli import main


def write_dataset(path, rows, d=2):
    header = "t,y," + ",".join(f"x{i}" for i in range(1, d + 1))
    path.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")


def test_balance_two_rows_forced_weight(tmp_path, capsys):
    data = tmp_path / "data.csv"
    out = tmp_path / "w.csv"
    write_dataset(data, ["1,2.0,0.1,0.2", "0,1.0,0.4,-0.2"])
    code = main(["balance", str(data), "--method", "fw", "--output", str(out),
                 "--iterations", "5"])
    assert code == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "row,weight"
    weights = {int(r.split(",")[0]): float(r.split(",")[1]) for r in lines[1:]}
    assert weights[0] == 1.0          # treated row
    assert abs(weights[1] - 1.0) < 1e-12  # single control carries n1 = 1


def test_balance_schema_error_names_line(tmp_path, capsys):
    data = tmp_path / "bad.csv"
    write_dataset(data, ["1,2.0,0.1,0.2", "2,1.0,0.4,-0.2"])
    code = main(["balance", str(data), "--output", str(tmp_path / "w.csv")])
    assert code == 1
    err = capsys.readouterr().err
    assert "line 3" in err and "'2'" in err


def test_estimate_hand_fixture(tmp_path, capsys):
    data = tmp_path / "data.csv"
    weights = tmp_path / "w.csv"
    write_dataset(data, ["1,3.0,0.0,0.0", "0,1.0,0.0,0.0", "0,2.0,0.0,0.0"])
    weights.write_text("row,weight\n0,1\n1,0.4\n2,0.6\n", encoding="utf-8")
    code = main(["estimate", str(data), "--weights", str(weights)])
    assert code == 0
    out = capsys.readouterr().out
    assert abs(float(out.split()[1]) - 1.4) < 1e-12


def test_estimate_row_count_mismatch(tmp_path, capsys):
    data = tmp_path / "data.csv"
    weights = tmp_path / "w.csv"
    write_dataset(data, ["1,3.0,0.0,0.0", "0,1.0,0.0,0.0"])
    weights.write_text("row,weight\n0,1\n", encoding="utf-8")
    assert main(["estimate", str(data), "--weights", str(weights)]) == 1


def test_estimate_dr_matches_library(tmp_path, capsys):
    from covbalance import BalanceWeights, Dataset, att_dr, fit_outcome
    gen = np.random.default_rng(5)
    n = 12
    x = gen.normal(size=(n, 2))
    t = np.array([1] * 5 + [0] * 7)
    y = gen.normal(size=n)
    rows = [f"{t[i]},{float(y[i])!r},{float(x[i, 0])!r},{float(x[i, 1])!r}" for i in range(n)]
    data_path = tmp_path / "data.csv"
    write_dataset(data_path, rows)
    w_ctrl = gen.uniform(0.2, 2.0, 7)
    full = np.ones(n)
    full[t == 0] = w_ctrl
    w_path = tmp_path / "w.csv"
    w_path.write_text("row,weight\n" + "\n".join(
        f"{i},{full[i]:.17g}" for i in range(n)) + "\n", encoding="utf-8")
    code = main(["estimate", str(data_path), "--weights", str(w_path), "--dr"])
    assert code == 0
    printed = float(capsys.readouterr().out.split()[1])
    data = Dataset(x, t, y)
    expected = att_dr(BalanceWeights(w_ctrl, "raw"), data,
                      fit_outcome(data, "ols"))
    assert printed == expected  # 17 significant digits round-trip exactly


def test_balance_then_estimate_bit_for_bit(tmp_path, capsys):
    from covbalance import (BalanceWeights, Dataset, LinearBall, att_weighted,
                            fw_balance)
    gen = np.random.default_rng(7)
    n = 14
    x = gen.normal(size=(n, 2))
    t = np.array([1] * 6 + [0] * 8)
    y = gen.normal(size=n)
    rows = [f"{t[i]},{float(y[i])!r},{float(x[i, 0])!r},{float(x[i, 1])!r}" for i in range(n)]
    data_path = tmp_path / "data.csv"
    out = tmp_path / "w.csv"
    write_dataset(data_path, rows)
    assert main(["balance", str(data_path), "--method", "fw", "--output",
                 str(out), "--iterations", "40", "--lam", "1.0"]) == 0
    capsys.readouterr()
    assert main(["estimate", str(data_path), "--weights", str(out)]) == 0
    printed = float(capsys.readouterr().out.split()[1])
    data = Dataset(x, t, y)
    weights = fw_balance(data, LinearBall(), 1.0, 0.0, 40)
    assert printed == att_weighted(weights, data)


def test_distance_identical_files_zero(tmp_path, capsys):
    sample = tmp_path / "s.csv"
    sample.write_text("w,x1\n1,0.5\n0.5,-0.25\n", encoding="utf-8")
    code = main(["distance", str(sample), str(sample), "--family", "sign"])
    assert code == 0
    out = capsys.readouterr().out.splitlines()
    assert float(out[0].split()[1]) == 0.0
    assert float(out[1].split()[1]) < 1e-9


def test_distance_point_mass_fixture(tmp_path, capsys):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    a.write_text("w,x1\n1,1\n", encoding="utf-8")
    b.write_text("w,x1\n1,-1\n", encoding="utf-8")
    code = main(["distance", str(a), str(b), "--family", "sign", "--psi", "0"])
    assert code == 0
    out = capsys.readouterr().out.splitlines()
    assert abs(float(out[1].split()[1]) - math.sqrt(2 * math.log(2))) < 1e-9


def test_distance_sweep_monotone_below_ipm(tmp_path, capsys):
    gen = np.random.default_rng(11)
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    a.write_text("w,x1\n" + "\n".join(
        f"1,{float(v)!r}" for v in gen.uniform(-1, 1, 5)), encoding="utf-8")
    b.write_text("w,x1\n" + "\n".join(
        f"1,{float(v)!r}" for v in gen.uniform(-0.5, 1.5, 5)), encoding="utf-8")
    sweep = tmp_path / "sweep.dat"
    code = main(["distance", str(a), str(b), "--family", "sign",
                 "--sweep-out", str(sweep), "--sweep-points", "12"])
    assert code == 0
    out = capsys.readouterr().out.splitlines()
    metric = float(out[0].split()[1])
    rows = [line.split() for line in sweep.read_text().splitlines()
            if not line.startswith("#")]
    values = [float(r[1]) for r in rows]
    assert all(b >= a - 1e-8 for a, b in zip(values, values[1:]))
    assert all(v <= metric + 1e-9 for v in values)
    assert abs(values[-1] - metric) / metric < 0.01


def test_experiment_smoke_and_round_trip(tmp_path, capsys):
    config = {
        "spec": "shallow", "n": 60, "reps": 2, "seed": 3,
        "fw_iterations": 20,
        "output": str(tmp_path / "report.json"),
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(config), encoding="utf-8")
    code = main(["experiment", "--config", str(cfg_path), "--threads", "1"])
    assert code == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["schema"] == "covbalance-report/1"
    names = {r["name"] for r in doc["reports"]["60"]["rows"]}
    assert {"raw", "ipw", "ipwn", "aipw", "aipwn", "ols", "fw",
            "fw_dr"} <= names
    from covbalance import ReplicationReport
    again = ReplicationReport.from_dict(doc["reports"]["60"])
    assert again.to_dict() == doc["reports"]["60"]


def test_experiment_rmse_series(tmp_path, capsys):
    config = {
        "spec": "shallow", "n": [40, 60], "reps": 2, "seed": 3,
        "fw_iterations": 10,
        "output": str(tmp_path / "report.json"),
        "plot_dir": str(tmp_path / "plots"),
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(config), encoding="utf-8")
    assert main(["experiment", "--config", str(cfg_path), "--threads", "1"]) == 0
    series = (tmp_path / "plots" / "rmse_vs_n_raw.dat").read_text()
    rows = [line for line in series.splitlines() if not line.startswith("#")]
    assert len(rows) == 2


def test_verify_quick_passes(capsys):
    assert main(["verify", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "all property suites passed" in out
    assert "[pass]" in out


def test_verify_detects_corrupted_gradients(monkeypatch, capsys):
    import covbalance.numerics as numerics
    real = numerics.net_gradient_batch

    def corrupted(params, x, upstream):
        grads = real(params, x, upstream)
        grads.weights[0] = grads.weights[0] + 0.5
        return grads

    monkeypatch.setattr(numerics, "net_gradient_batch", corrupted)
    assert main(["verify", "--quick"]) == 3
    assert "FAIL" in capsys.readouterr().out


def test_usage_error_exit_code(capsys):
    assert main(["balance"]) == 1
    assert main(["nonsense"]) == 1
