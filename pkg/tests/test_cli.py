import csv
import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from fcsolve.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(tmp_path, *argv, name="out.json"):
    out = tmp_path / name
    code = main([*argv, "--out", str(out)])
    return code, out


def report(path):
    return json.loads(Path(path).read_text())


def table(path):
    rows = [r for r in csv.reader(ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#"))]
    return rows[0], np.array(rows[1:], dtype=float)


def test_fc_certifies_divergence(tmp_path):
    code, out = run(tmp_path, "fc", "--op", "divergence", "--dim", "3")
    rep = report(out)
    assert code == 0 and rep["verdict"] == "Certified" and rep["N0"] == 1 and rep["status"] == "ok"


def test_fc_threshold_is_config_error(tmp_path, capsys):
    code, out = run(tmp_path, "fc", "--op", "tracefree_symmetric_divergence", "--dim", "2")
    rep = report(out)
    assert code == 1 and rep["status"] == "error"
    assert "requires d ≥ 3" in rep["reason"]
    assert "config error" in capsys.readouterr().err


def test_fc_falsifies_single_partial(tmp_path):
    op = tmp_path / "d1only.op"
    op.write_text("dim 2\nrows 1\ncols 1\nterm 1 1 1 0 1 0\n")
    code, out = run(tmp_path, "fc", "--op-file", str(op), "--dim", "2")
    rep = report(out)
    assert code == 2 and rep["status"] == "falsified" and rep["exact"]
    xi = rep["witness_xi"]  # Gaussian rationals as [re, im]
    assert xi[0] == [0, 0] and xi[1][0] != 0 and xi[1][1] == 0
    assert rep["reason"]


def test_operator_file_error_has_position(tmp_path):
    op = tmp_path / "bad.op"
    op.write_text("dim 2\nrows 1\n  term 1 1 1 0\ncols 1\n")
    code, out = run(tmp_path, "fc", "--op-file", str(op), "--dim", "2")
    assert code == 1 and "line 3, column 3" in report(out)["reason"]


def test_toml_error_has_position(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text('op = "divergence"\ndim = = 2\n')
    code, out = run(tmp_path, "fc", "--config", str(cfg))
    assert code == 1 and "line 2, column" in report(out)["reason"]


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "extra.toml"
    cfg.write_text('op = "divergence"\ncolour = "blue"\n')
    code, out = run(tmp_path, "fc", "--config", str(cfg))
    assert code == 1 and "colour" in report(out)["reason"]


def test_missing_operator(tmp_path):
    code, out = run(tmp_path, "cokernel", "--dim", "2")
    assert code == 1 and "operator" in report(out)["reason"]


def test_augment_special_killing(tmp_path):
    code, out = run(tmp_path, "augment", "--special", "symmetric_divergence", "--dim", "3")
    rep = report(out)
    assert code == 0 and rep["n_variables"] == 6 and rep["curvature_max"] == 0.0
    assert rep["completely_integrable"] and rep["cokernel_dim"] == 6


def test_augment_maximal_killing(tmp_path):
    code, out = run(tmp_path, "augment", "--maximal", "--op", "killing", "--dim", "3")
    rep = report(out)
    assert code == 0 and rep["n_variables"] == 12 and rep["kind"] == "maximal"


def test_augment_lower_order_curvature(tmp_path):
    code, out = run(tmp_path, "augment", "--special", "divergence", "--lower-order", "B=(0,x1)", "--dim", "2")
    rep = report(out)
    assert code == 0 and not rep["completely_integrable"]
    assert rep["curvature_max"] == pytest.approx(1.0, abs=1e-6)


def test_augment_maximal_refuses_falsified(tmp_path):
    op = tmp_path / "d1only.op"
    op.write_text("dim 2\nrows 1\ncols 1\nterm 1 1 1 0 1 0\n")
    code, out = run(tmp_path, "augment", "--maximal", "--op-file", str(op), "--dim", "2")
    assert code == 2 and "falsified" in report(out)["reason"]


def test_kernel_table_with_oracle(tmp_path):
    code, out = run(tmp_path, "kernel", "--op", "divergence", "--dim", "2", "--weight", "bogovskii",
                    "--center", "0.2,0.1", "--y=0.1,0", "--grid=-1.5,1.5,11", "--oracle", name="k.csv")
    rep = report(tmp_path / "k.json")
    header, rows = table(out)
    assert code == 0 and rep["oracle_pass"] and rep["max_abs_discrepancy"] <= 1e-8
    assert header[:4] == ["x1", "x2", "y1", "y2"] and header[-1] == "abs_diff"
    assert np.max(rows[:, -1]) <= 1e-8 and len(rows) == 121
    assert all(r["pass"] for r in rep["decay"])


def test_kernel_skips_diagonal(tmp_path):
    code, out = run(tmp_path, "kernel", "--op", "divergence", "--dim", "2", "--y", "0,0", "--grid=-1,1,3",
                    name="k.csv")
    _, rows = table(out)
    assert report(tmp_path / "k.json")["n_near_diagonal_skipped"] == 1 and len(rows) == 8


def test_conic_kernel_table_outside_cap(tmp_path):
    code, out = run(tmp_path, "kernel", "--op", "double_divergence", "--dim", "2", "--weight", "conic",
                    "--axis", "1,0", "--aperture", "0.5", "--y", "0,0", "--grid=-2,2,15", name="k.csv")
    header, rows = table(out)
    ang = np.arctan2(np.abs(rows[:, 1]), rows[:, 0])
    outside = ang > 0.5
    assert code == 0 and outside.sum() > 100
    assert np.all(rows[outside][:, 4:] == 0.0)
    assert np.any(rows[~outside][:, 4:] != 0.0)


def test_solve_conic_config(tmp_path):
    code, out = run(tmp_path, "solve", "--config", str(CONFIGS / "divergence_conic_2d.toml"), name="u.csv")
    rep = report(tmp_path / "u.json")
    assert code == 0 and rep["pass"]
    assert rep["residual"]["residual_max"] <= 1e-5 and rep["support"]["passed"]
    header, rows = table(out)
    assert header[:2] == ["x1", "x2"] and rows.shape == (169, 4)


def test_solve_projected_double_divergence(tmp_path):
    code, out = run(tmp_path, "solve", "--config", str(CONFIGS / "double_divergence_bogovskii_2d.toml"),
                    name="u.csv")
    rep = report(tmp_path / "u.json")
    assert code == 0 and rep["pass"]
    assert rep["moments"]["max_abs"] <= 1e-11 and rep["residual"]["residual_max"] <= 1e-4


def test_solve_zero_data(tmp_path):
    code, out = run(tmp_path, "solve", "--config", str(CONFIGS / "zero_data.toml"), name="u.csv")
    _, rows = table(out)
    rep = report(tmp_path / "u.json")
    assert code == 0 and rep["zero_data"] and np.all(rows[:, 2:] == 0.0) and rows.shape == (49, 4)


def test_failed_check_exit_code(tmp_path):
    code, out = run(tmp_path, "kernel", "--op", "symmetric_divergence", "--dim", "2", "--grid=-1,1,5",
                    "--oracle", "--tol", "1e-15", name="k.csv")
    rep = report(tmp_path / "k.json")
    assert code == 4 and rep["status"] == "check_failed" and rep["reason"]


def test_cokernel_command(tmp_path):
    for op, d, dim in [("conformal_killing", 3, 10), ("tracefree_double_divergence", 2, 4), ("einstein", 3, 10)]:
        code, out = run(tmp_path, "cokernel", "--op", op, "--dim", str(d))
        rep = report(out)
        assert code == 0 and rep["dim"] == dim and all(rep["annihilated"]) and rep["dim_equals_n_variables"]


def test_verify_command(tmp_path):
    code, out = run(tmp_path, "verify", "--op", "divergence", "--dim", "2", "--weight", "conic", "--seed", "5")
    rep = report(out)
    assert code == 0 and rep["greens_identity"]["pass"]


def test_reports_are_deterministic(tmp_path):
    cfg = str(CONFIGS / "divergence_conic_2d.toml")
    a = main(["solve", "--config", cfg, "--out", str(tmp_path / "a.csv")])
    b = main(["solve", "--config", cfg, "--out", str(tmp_path / "b.csv"), "--threads", "3"])
    assert a == b == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    ja, jb = report(tmp_path / "a.json"), report(tmp_path / "b.json")
    ja["config"].pop("threads"), jb["config"].pop("threads")
    ja["config"].pop("out"), jb["config"].pop("out")
    assert ja == jb
    c = main(["solve", "--config", cfg, "--out", str(tmp_path / "c.csv")])
    assert c == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "c.json").read_bytes().replace(b"c.csv", b"a.csv")


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "fcsolve", "fc", "--op", "divergence", "--dim", "2"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0
    rep = json.loads(res.stdout)
    assert rep["N0"] == 1 and rep["config"]["seed"] == 0 and math.isfinite(rep["d"])
