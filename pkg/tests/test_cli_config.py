import copy
import csv
import json
from pathlib import Path

import numpy as np
import pytest

from stackelberg_lq import config as cfg
from stackelberg_lq.cli import EXIT_HARD, EXIT_OK, EXIT_SOFT, main
from stackelberg_lq.examples import scalar_game
from stackelberg_lq.pipeline import solve_equilibrium

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _raw(name="example_equality"):
    return json.loads((CONFIGS / f"{name}.json").read_text())


def _write(tmp_path, raw, name="problem.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


def _report(out):
    return json.loads((Path(out) / "report.json").read_text())


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# config loading

def test_shipped_configs_load():
    for name in ("example_equality", "example_inequality", "example_quadratic"):
        loaded = cfg.load_config(CONFIGS / f"{name}.json")
        assert loaded.spec.n == 1 and loaded.spec.m == 1


def test_expression_entries_match_example():
    spec = cfg.load_config(CONFIGS / "example_equality.json").spec
    t = spec.grid.times
    assert np.allclose(spec.constraints.alpha.values[:, 0, 0], 1 - np.exp(-t), rtol=0, atol=1e-15)
    assert np.allclose(spec.constraints.gamma.values[:, 0, 0], 2 * np.exp(-t), rtol=0, atol=1e-15)


def test_uniform_grid_entry_and_steps_override(tmp_path):
    raw = _raw()
    raw["time"]["n_steps"] = 4
    raw["dynamics"]["A"] = {"grid": "uniform", "values": [[[v]] for v in (0.0, 1.0, 2.0, 3.0, 4.0)]}
    loaded = cfg.load_config(_write(tmp_path, raw))
    assert np.array_equal(loaded.spec.dynamics.A.values[:, 0, 0], [0.0, 1.0, 2.0, 3.0, 4.0])
    with pytest.raises(cfg.ConfigError, match=r"dynamics\.A\.values"):
        cfg.load_config(_write(tmp_path, raw), n_steps=8)


def test_missing_field_named(tmp_path):
    raw = _raw()
    del raw["costs"]["E2"]
    with pytest.raises(cfg.ConfigError, match=r"costs\.E2: missing field"):
        cfg.load_config(_write(tmp_path, raw))


def test_shape_and_kind_errors(tmp_path):
    raw = _raw()
    raw["dynamics"]["B1"] = [[1.0, 2.0]]
    with pytest.raises(cfg.ConfigError, match=r"dynamics\.B1: shape"):
        cfg.load_config(_write(tmp_path, raw))
    raw = _raw()
    raw["constraints"][0]["kind"] = "le"
    with pytest.raises(cfg.ConfigError, match=r"constraints\[0\]\.kind"):
        cfg.load_config(_write(tmp_path, raw))


def test_invalid_json_reports_position(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "time": {"s": 0,\n}\n')
    with pytest.raises(cfg.ConfigError, match="line 3"):
        cfg.load_config(path)


def test_bad_expression_is_config_error(tmp_path):
    raw = _raw()
    raw["constraints"][0]["alpha"] = {"expr": "__import__('os')"}
    with pytest.raises(cfg.ConfigError, match=r"constraints\[0\]\.alpha"):
        cfg.load_config(_write(tmp_path, raw))


def test_inequalities_ordered_first(tmp_path):
    raw = _raw()
    ineq = copy.deepcopy(raw["constraints"][0])
    ineq.update(kind="ineq", a=0.5, beta=[3.0])
    raw["constraints"].append(ineq)
    loaded = cfg.load_config(_write(tmp_path, raw))
    c = loaded.spec.constraints
    assert loaded.constraint_order == [1, 0] and c.l_prime == 1
    assert np.array_equal(c.a, [0.5, 0.0])
    assert np.all(c.beta.values[:, 0, 0] == 3.0) and np.all(c.beta.values[:, 0, 1] == 2.0)


def test_constraint_rows_round_trip(tmp_path):
    spec = cfg.load_config(CONFIGS / "example_equality.json", n_steps=50).spec
    raw = _raw()
    raw["time"]["n_steps"] = 50
    raw["constraints"] = cfg.constraint_rows(spec.constraints)
    again = cfg.load_config(_write(tmp_path, raw)).spec.constraints
    for name in ("alpha", "beta", "gamma"):
        assert np.array_equal(getattr(again, name).values, getattr(spec.constraints, name).values)
    assert np.array_equal(again.a, spec.constraints.a)


# solve / check

def test_malformed_config_exits_hard(tmp_path, capsys):
    raw = _raw()
    del raw["costs"]["E2"]
    out = tmp_path / "out"
    assert main(["solve", "--config", _write(tmp_path, raw), "--out", str(out)]) == EXIT_HARD
    assert "costs.E2" in capsys.readouterr().err
    assert _report(out)["exit_code"] == EXIT_HARD


def test_missing_file_exits_hard(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == EXIT_HARD


def test_strongly_indefinite_terminal_reports_h3(tmp_path):
    raw = _raw()
    raw["costs"]["G2"] = [[-10.0]]
    out = tmp_path / "out"
    assert main(["check", "--config", _write(tmp_path, raw), "--out", str(out), "--dual-only"]) == EXIT_HARD
    rep = _report(out)
    assert rep["solver"]["blowup"] is True
    assert "H3 fails numerically" in rep["solver"]["message"]


def test_duplicated_equalities_named(tmp_path):
    raw = _raw()
    raw["constraints"].append(copy.deepcopy(raw["constraints"][0]))
    out = tmp_path / "out"
    code = main(["check", "--config", _write(tmp_path, raw), "--out", str(out), "--dual-only"])
    assert code == EXIT_SOFT
    rep = _report(out)
    assert rep["slater"]["independent"] is False
    chk = next(c for c in rep["checks"] if c["name"] == "independence")
    assert not chk["passed"] and "[0, 1]" in chk["detail"]


def test_inactive_inequality_gives_unconstrained_policy(tmp_path):
    out = tmp_path / "out"
    code = main(["solve", "--config", str(CONFIGS / "example_inequality.json"), "--out", str(out), "--dual-only"])
    assert code == EXIT_OK
    dual = _report(out)["dual"]
    assert dual["lambda_star"] == [0.0] and dual["status"] == "unconstrained optimum feasible"
    free = solve_equilibrium(scalar_game(constraint=None)).policy
    rows = _read_csv(out / "policy.csv")
    head, body = rows[0], np.array(rows[1:], dtype=float)
    col = {h: i for i, h in enumerate(head)}
    assert np.allclose(body[:, col["K1_00"]], free.K1.values[:, 0, 0], rtol=1e-14, atol=0)
    assert np.allclose(body[:, col["K1_01"]], free.K1.values[:, 0, 1], rtol=1e-14, atol=0)
    assert np.allclose(body[:, col["K2_00"]], free.K2.values[:, 0, 0], rtol=1e-14, atol=0)
    assert np.all(body[:, col["k1lam_0"]] == 0) and np.all(body[:, col["k2lam_0"]] == 0)


def test_equality_example_at_zero_rhs_is_unconstrained(tmp_path):
    # expected: lambda* = -a/S0 = 0 at a = 0, so the dual value is c
    out = tmp_path / "out"
    main(["solve", "--config", str(CONFIGS / "example_equality.json"), "--out", str(out), "--dual-only"])
    dual = _report(out)["dual"]
    assert dual["lambda_star"] == pytest.approx([0.0], abs=1e-10)
    assert dual["value"] == pytest.approx(dual["c"], abs=1e-10)
    assert dual["status"] == "unconstrained optimum feasible"


def test_check_example_all_pass(tmp_path):
    out = tmp_path / "out"
    assert main(["check", "--config", str(CONFIGS / "example_equality.json"), "--out", str(out)]) == EXIT_OK
    rep = _report(out)
    assert all(c["passed"] for c in rep["checks"])
    names = {c["name"] for c in rep["checks"]}
    assert {"riccati_residual", "kkt", "slater", "independence", "coercivity_H1", "coercivity_H2",
            "feasibility_0", "strong_duality"} <= names
    assert "policy" not in rep and not (out / "policy.csv").exists()


# sweep

def _sweep(tmp_path, name, lo, hi, count, tag="out"):
    out = tmp_path / tag
    code = main(["sweep", "--config", str(CONFIGS / f"{name}.json"), "--out", str(out), "--dual-only",
                 "--sweep-min", str(lo), "--sweep-max", str(hi), "--sweep-count", str(count)])
    return code, out


def test_zero_width_sweep_equals_solve(tmp_path):
    code, out = _sweep(tmp_path, "example_equality", 0.0, 0.0, 1)
    assert code == EXIT_OK
    rows = _read_csv(out / "sweep.csv")
    assert rows[0] == ["a", "lambda_1", "dual_value", "mc_value", "mc_se", "feasible", "active_set"]
    assert len(rows) == 2
    solve_out = tmp_path / "solve"
    main(["solve", "--config", str(CONFIGS / "example_equality.json"), "--out", str(solve_out), "--dual-only"])
    dual = _report(solve_out)["dual"]
    a, lam, value = (float(x) for x in rows[1][:3])
    assert a == 0.0 and lam == dual["lambda_star"][0] and value == dual["value"]
    # active_set lists inequality rows whose multiplier sits on the bound; equalities never appear
    assert rows[1][3:] == ["", "", "", ""]


def test_sweep_matches_solve_at_coinciding_points(tmp_path):
    _, out = _sweep(tmp_path, "example_inequality", -1.0, 1.0, 5)
    rows = _read_csv(out / "sweep.csv")[1:]
    raw = _raw("example_inequality")
    for row in rows:
        raw["constraints"][0]["a"] = float(row[0])
        sub = tmp_path / f"solve_{row[0]}"
        main(["solve", "--config", _write(tmp_path, raw), "--out", str(sub), "--dual-only"])
        dual = _report(sub)["dual"]
        assert abs(float(row[2]) - dual["value"]) <= 1e-12
        assert abs(float(row[1]) - dual["lambda_star"][0]) <= 1e-12


def test_sweep_csv_bit_stable(tmp_path):
    _, first = _sweep(tmp_path, "example_equality", -2.0, 2.0, 9, "first")
    _, second = _sweep(tmp_path, "example_equality", -2.0, 2.0, 9, "second")
    assert (first / "sweep.csv").read_bytes() == (second / "sweep.csv").read_bytes()


def test_sweep_with_monte_carlo_columns(tmp_path):
    out = tmp_path / "out"
    main(["sweep", "--config", str(CONFIGS / "example_inequality.json"), "--out", str(out), "--paths", "2000",
          "--steps", "200", "--sweep-min", "1", "--sweep-max", "1", "--sweep-count", "1"])
    row = _read_csv(out / "sweep.csv")[1]
    assert float(row[4]) > 0 and row[5] == "true" and row[6] == "1"


def test_sweep_rejects_bad_index(tmp_path):
    out = tmp_path / "out"
    code = main(["sweep", "--config", str(CONFIGS / "example_equality.json"), "--out", str(out), "--dual-only",
                 "--sweep-index", "3", "--sweep-min", "0", "--sweep-max", "1"])
    assert code == EXIT_HARD


# gen-constraints

def test_gen_constraints_writes_loadable_rows(tmp_path):
    out = tmp_path / "gen"
    assert main(["gen-constraints", "--config", str(CONFIGS / "example_quadratic.json"), "--out", str(out),
                 "--count", "6"]) == EXIT_OK
    rows = json.loads((out / "constraints.json").read_text())["constraints"]
    assert len(rows) == 6 and all(r["kind"] == "ineq" for r in rows)
    raw = _raw("example_quadratic")
    raw["constraints"] = rows
    loaded = cfg.load_config(_write(tmp_path, raw))
    assert loaded.spec.l == 6 and loaded.spec.constraints.l_prime == 6


def test_gen_constraints_needs_block(tmp_path, capsys):
    assert main(["gen-constraints", "--config", str(CONFIGS / "example_equality.json"),
                 "--out", str(tmp_path / "gen")]) == EXIT_HARD
    assert "quadratic_constraint" in capsys.readouterr().err
