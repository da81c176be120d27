"""``stackelberg-lq``: solve, sweep, check and constraint generation from JSON problem files."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfg
from .constraints import (
    EqualitiesInconsistent, NoStrictPoint, QuadraticConstraintWeights,
    approximate_quadratic_constraint, check_independence, find_slater_point,
)
from .dual import DualUnbounded, NonConvergence
from .model import InvalidSpecError, MatrixPath, SingularMatrixError, validate
from .montecarlo import SimulationConfig, SimulationError, coercivity_check, simulate_equilibrium
from .odes import IntegrationError
from .pipeline import EquilibriumSolution, solve_equilibrium

EXIT_OK, EXIT_HARD, EXIT_SOFT = 0, 1, 2
RESIDUAL_TOL = 1e-4


@dataclass
class Check:
    name: str
    passed: bool
    hard: bool
    detail: str = ""


@dataclass
class RunReport:
    sections: dict = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def add(self, name: str, passed: bool, hard: bool, detail: str = ""):
        self.checks.append(Check(name, bool(passed), hard, detail))

    @property
    def exit_code(self) -> int:
        if any(not c.passed and c.hard for c in self.checks):
            return EXIT_HARD
        if any(not c.passed for c in self.checks):
            return EXIT_SOFT
        return EXIT_OK

    def to_json(self) -> dict:
        return {
            **self.sections,
            "checks": [c.__dict__ for c in self.checks],
            "exit_code": self.exit_code,
        }


class _Timer:
    def __init__(self, report: RunReport, stage: str):
        self.report, self.stage = report, stage

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.report.timings[self.stage] = time.perf_counter() - self.t0


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, float) and not np.isfinite(x):
        return str(x)
    return x


def _write_report(report: RunReport, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(_jsonable(report.to_json()), indent=2, sort_keys=True) + "\n")
    # wall-clock numbers differ between runs; kept apart so report.json is reproducible
    (out / "timings.json").write_text(json.dumps(report.timings, indent=2, sort_keys=True) + "\n")


def _sim_config(loaded: cfg.LoadedConfig, args) -> SimulationConfig:
    s = loaded.simulation
    n_paths = args.paths if args.paths is not None else s.n_paths
    seed = args.seed if args.seed is not None else s.seed
    if s.antithetic and n_paths % 2:
        n_paths += 1
    return SimulationConfig(n_paths=n_paths, seed=seed, antithetic=s.antithetic)


def _est(e) -> dict:
    return {"mean": e.mean, "se": e.se}


def _dual_section(sol: EquilibriumSolution, order: list[int]) -> dict:
    d, ds = sol.dual_data, sol.dual
    lam = ds.lambda_star
    status = "unconstrained optimum feasible" if not np.any(lam) else "constraints active"
    return {
        "c": d.c, "b": d.b, "b_bar": d.b_bar, "S0": d.S0, "a": d.a, "l_prime": d.l_prime,
        "constraint_order": order,
        "lambda_star": lam, "value": ds.value, "active_set": ds.active_set, "rho_at_star": ds.rho_at_star,
        "kkt": {
            "stationarity": ds.kkt.stationarity, "primal_feasibility": ds.kkt.primal_feasibility,
            "complementary_slackness": ds.kkt.complementary_slackness, "tolerance": ds.kkt.tolerance,
        },
        "unique": ds.unique, "method": ds.method, "warnings": ds.warnings, "status": status,
    }


def _policy_summary(sol: EquilibriumSolution, samples: int = 5) -> dict:
    g = sol.spec.grid
    idx = np.round(np.linspace(0, g.n_steps, samples)).astype(int)
    pol, lam = sol.policy, sol.policy.lam
    return {
        "times": g.times[idx],
        "K1": pol.K1.values[idx], "k1_lambda": pol.k1.values[idx] @ lam,
        "K2": pol.K2.values[idx], "k2_lambda": pol.k2.values[idx] @ lam,
    }


def _write_policy_csv(sol: EquilibriumSolution, path: Path):
    pol, lam = sol.policy, sol.policy.lam
    m, z = pol.K1.rows, pol.K1.cols
    header = ["time"]
    header += [f"K1_{i}{j}" for i in range(m) for j in range(z)] + [f"k1lam_{i}" for i in range(m)]
    header += [f"K2_{i}{j}" for i in range(m) for j in range(z)] + [f"k2lam_{i}" for i in range(m)]
    o1, o2 = pol.k1.values @ lam, pol.k2.values @ lam
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, t in enumerate(sol.spec.grid.times):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in
                        np.concatenate([pol.K1[k].ravel(), o1[k], pol.K2[k].ravel(), o2[k]])])


def _solve_stages(loaded: cfg.LoadedConfig, report: RunReport) -> EquilibriumSolution | None:
    """Validation, Riccati layers, constraint adjoint and dual; fills the report."""
    spec = loaded.spec
    with _Timer(report, "validate"):
        val = validate(spec)
    report.sections["validation"] = {"ok": val.ok, "issues": val.issues, "condition_numbers": val.condition_numbers}
    report.add("validation", val.ok, hard=True, detail="; ".join(val.issues))
    if not val.ok:
        return None
    try:
        with _Timer(report, "riccati_and_dual"):
            sol = solve_equilibrium(spec)
    except IntegrationError as exc:
        report.sections["solver"] = {"blowup": True, "equation": getattr(exc, "equation", ""), "message": str(exc)}
        report.add("riccati_solvable", False, hard=True, detail=str(exc))
        return None
    except (DualUnbounded, NonConvergence, SingularMatrixError, InvalidSpecError) as exc:
        report.sections["solver"] = {"blowup": False, "message": str(exc)}
        report.add("dual_solvable", False, hard=True, detail=str(exc))
        return None

    with _Timer(report, "residuals"):
        r1, r2 = sol.phi1.residual(), sol.phi2.residual()
    n1 = 1.0 + float(np.max(np.linalg.norm(sol.phi1.phi1.values, axis=(1, 2))))
    n2 = 1.0 + float(np.max(np.linalg.norm(sol.phi2.phi2.values, axis=(1, 2))))
    report.sections["solver"] = {
        "blowup": False, "follower_riccati_residual": r1, "leader_riccati_residual": r2,
        "phi1_s": sol.phi1.phi1[0], "phi2_s": sol.phi2.phi2[0], "psi2_s": sol.psi2.psi2[0],
    }
    report.add("riccati_residual", r1 <= RESIDUAL_TOL * n1 and r2 <= RESIDUAL_TOL * n2, hard=True,
               detail=f"follower {r1:.3g}, leader {r2:.3g}")

    with _Timer(report, "slater"):
        report.sections["slater"] = _slater_section(sol, report)
    report.sections["dual"] = _dual_section(sol, loaded.constraint_order)
    report.add("kkt", sol.dual.kkt.ok, hard=True)
    if sol.dual.warnings:
        report.add("dual_warnings", False, hard=False, detail="; ".join(sol.dual.warnings))
    return sol


def _slater_section(sol: EquilibriumSolution, report: RunReport) -> dict:
    spec = sol.spec
    indep = check_independence(sol.adjoint, spec.grid, spec.constraints.l_prime)
    out = {"independent": indep.independent, "gram": indep.gram, "dependent_indices": indep.dependent_indices}
    detail = "" if indep.independent else f"dependent equality constraints {indep.dependent_indices}"
    report.add("independence", indep.independent, hard=False, detail=detail)
    try:
        sl = find_slater_point(sol.adjoint, spec)
        out.update(status=sl.status, strict_margins=sl.strict_margins, coefficients=sl.coefficients)
        report.add("slater", True, hard=False)
    except EqualitiesInconsistent as exc:
        out.update(status="equalities inconsistent", message=str(exc))
        report.add("slater", False, hard=True, detail=str(exc))
    except NoStrictPoint as exc:
        out.update(status="H4 unverified", message=str(exc))
        report.add("slater", False, hard=False, detail=str(exc))
    return out


def _coercivity_stage(sol: EquilibriumSolution, report: RunReport, K: int = 16):
    out = {}
    with _Timer(report, "coercivity"):
        for which in ("H1", "H2"):
            try:
                rep = coercivity_check(sol.spec, which, K, sol.phi1)
                out[which] = {"epsilon_hat": rep.epsilon_hat, "verdict": rep.verdict, "basis_size": K, "note": rep.note}
                report.add(f"coercivity_{which}", rep.verdict == "verified", hard=False, detail=rep.verdict)
            except (IntegrationError, ValueError) as exc:
                out[which] = {"error": str(exc)}
                report.add(f"coercivity_{which}", False, hard=False, detail=str(exc))
    report.sections["coercivity"] = out


def _mc_stage(sol: EquilibriumSolution, loaded: cfg.LoadedConfig, args, report: RunReport):
    sim = _sim_config(loaded, args)
    try:
        with _Timer(report, "monte_carlo"):
            rep = simulate_equilibrium(sol.spec, sol.aug, sol.phi2, sol.psi2, sol.policy, sim, dual_value=sol.dual.value)
    except SimulationError as exc:
        report.sections["simulation"] = {"error": str(exc)}
        report.add("simulation", False, hard=True, detail=str(exc))
        return
    report.sections["simulation"] = {
        "n_paths": rep.n_paths, "seed": sim.seed, "antithetic": sim.antithetic,
        "J1": _est(rep.J1), "J2": _est(rep.J2), "lagrangian": _est(rep.lagrangian),
        "rho": [_est(r) for r in rep.rho], "terminal_mean": rep.terminal_mean, "terminal_cov": rep.terminal_cov,
        "duality_z": rep.duality_z, "pass_flags": rep.pass_flags,
    }
    lp = sol.spec.constraints.l_prime
    for i in range(sol.spec.l):
        flag = bool(rep.pass_flags[f"constraint_{i}"])
        # equality infeasibility is a hard failure; inequality misses are reported softly
        report.add(f"feasibility_{i}", flag, hard=i >= lp, detail=f"rho_hat={rep.rho[i].mean:.6g} se={rep.rho[i].se:.3g}")
    report.add("strong_duality", bool(rep.pass_flags["strong_duality"]), hard=False, detail=f"z={rep.duality_z:.3g}")


def _load(args, report: RunReport) -> cfg.LoadedConfig | None:
    try:
        return cfg.load_config(args.config, n_steps=args.steps)
    except (OSError, cfg.ConfigError) as exc:
        report.sections["error"] = str(exc)
        report.add("config", False, hard=True, detail=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return None


def run_solve(args) -> int:
    report = RunReport()
    out = Path(args.out)
    loaded = _load(args, report)
    if loaded is not None:
        sol = _solve_stages(loaded, report)
        if sol is not None:
            report.sections["policy"] = _policy_summary(sol)
            _coercivity_stage(sol, report)
            if not args.dual_only:
                _mc_stage(sol, loaded, args, report)
            out.mkdir(parents=True, exist_ok=True)
            _write_policy_csv(sol, out / "policy.csv")
    _write_report(report, out)
    _print_summary(report)
    return report.exit_code


def run_check(args) -> int:
    report = RunReport()
    out = Path(args.out)
    loaded = _load(args, report)
    if loaded is not None:
        sol = _solve_stages(loaded, report)
        if sol is not None:
            _coercivity_stage(sol, report)
            if not args.dual_only:
                _mc_stage(sol, loaded, args, report)
    _write_report(report, out)
    _print_summary(report)
    return report.exit_code


SWEEP_COLUMNS = ("a", "lambda", "dual_value", "mc_value", "mc_se", "feasible", "active_set")


def sweep_rows(sol: EquilibriumSolution, index: int, values, sim: SimulationConfig | None) -> list[dict]:
    """Dual-layer (and optionally Monte Carlo) results along one right-hand side."""
    rows = []
    base = sol.spec.constraints.a.copy()
    for x in values:
        a = base.copy()
        a[index] = x
        s = sol.resolve_for_a(a)
        row = {"a": float(x), "lambda": s.dual.lambda_star, "dual_value": s.dual.value,
               "mc_value": None, "mc_se": None, "feasible": None, "active_set": s.dual.active_set}
        if sim is not None:
            rep = simulate_equilibrium(s.spec, s.aug, s.phi2, s.psi2, s.policy, sim, dual_value=s.dual.value)
            row.update(mc_value=rep.J2.mean, mc_se=rep.J2.se,
                       feasible=all(bool(v) for k, v in rep.pass_flags.items() if k.startswith("constraint_")))
        rows.append(row)
    return rows


def write_sweep_csv(rows: list[dict], l: int, path: Path):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a"] + [f"lambda_{i + 1}" for i in range(l)]
                   + ["dual_value", "mc_value", "mc_se", "feasible", "active_set"])
        fmt = lambda v: "" if v is None else repr(float(v))
        for r in rows:
            w.writerow([fmt(r["a"])] + [fmt(v) for v in r["lambda"]]
                       + [fmt(r["dual_value"]), fmt(r["mc_value"]), fmt(r["mc_se"]),
                          "" if r["feasible"] is None else str(r["feasible"]).lower(),
                          " ".join(str(i + 1) for i in r["active_set"])])


def run_sweep(args) -> int:
    report = RunReport()
    out = Path(args.out)
    loaded = _load(args, report)
    if loaded is None:
        _write_report(report, out)
        return report.exit_code
    sol = _solve_stages(loaded, report)
    if sol is None:
        _write_report(report, out)
        _print_summary(report)
        return report.exit_code
    l = sol.spec.l
    if not 0 <= args.sweep_index < l:
        print(f"error: --sweep-index must be in [0, {l - 1}]", file=sys.stderr)
        return EXIT_HARD
    if args.sweep_count < 1 or not (np.isfinite(args.sweep_min) and np.isfinite(args.sweep_max)):
        print("error: sweep range must be finite with at least one point", file=sys.stderr)
        return EXIT_HARD
    values = np.linspace(args.sweep_min, args.sweep_max, args.sweep_count)
    sim = None if args.dual_only else _sim_config(loaded, args)
    # sweep index refers to the columns of the assembled spec (inequalities first)
    with _Timer(report, "sweep"):
        rows = sweep_rows(sol, args.sweep_index, values, sim)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, l, out / "sweep.csv")
    _write_report(report, out)
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return report.exit_code


def run_gen_constraints(args) -> int:
    try:
        loaded = cfg.load_config(args.config, n_steps=args.steps)
        block = cfg._require(loaded.raw, "quadratic_constraint", "")
        grid, n, m = loaded.spec.grid, loaded.spec.n, loaded.spec.m
        mp = lambda key, shape: cfg._matrix_path(cfg._require(block, key, "quadratic_constraint"), grid, shape,
                                                 f"quadratic_constraint.{key}")
        weights = QuadraticConstraintWeights(
            D=mp("D", (n, n)), E1=mp("E1", (m, m)), E2=mp("E2", (m, m)),
            G=cfg._constant(cfg._require(block, "G", "quadratic_constraint"), (n, n), "quadratic_constraint.G"),
        )
        a0 = float(args.a0 if args.a0 is not None else cfg._require(block, "a0", "quadratic_constraint"))
        p = int(args.count if args.count is not None else cfg._require(block, "p", "quadratic_constraint"))
        seed = int(args.seed if args.seed is not None else block.get("seed", 0))
        pieces = int(block.get("n_pieces", 4))
        rows, _ = approximate_quadratic_constraint(weights, a0, p, seed, pieces)
    except (OSError, cfg.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_HARD
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "constraints.json").write_text(json.dumps({"constraints": cfg.constraint_rows(rows)}) + "\n")
    print(f"wrote {rows.l} affine rows to {out / 'constraints.json'}")
    return EXIT_OK


def _print_summary(report: RunReport):
    for c in report.checks:
        tag = "PASS" if c.passed else ("FAIL" if c.hard else "WARN")
        print(f"[{tag}] {c.name}" + (f": {c.detail}" if c.detail else ""))
    dual = report.sections.get("dual")
    if dual:
        print(f"lambda* = {list(map(float, dual['lambda_star']))}, dual value = {dual['value']:.10g} ({dual['status']})")
    print(f"exit code {report.exit_code}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stackelberg-lq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="problem file (JSON)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--paths", type=int, default=None, help="Monte Carlo paths")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--steps", type=int, default=None, help="override time.n_steps")
        p.add_argument("--dual-only", action="store_true", help="skip the Monte Carlo stage")

    for name, fn in (("solve", run_solve), ("check", run_check)):
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(func=fn)
    p = sub.add_parser("sweep")
    common(p)
    p.add_argument("--sweep-index", type=int, default=0)
    p.add_argument("--sweep-min", type=float, required=True)
    p.add_argument("--sweep-max", type=float, required=True)
    p.add_argument("--sweep-count", type=int, default=41)
    p.set_defaults(func=run_sweep)
    p = sub.add_parser("gen-constraints")
    p.add_argument("--config", required=True, help="problem file with a quadratic_constraint block")
    p.add_argument("--out", default="out")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--count", type=int, default=None, help="number of affine rows p")
    p.add_argument("--a0", type=float, default=None)
    p.set_defaults(func=run_gen_constraints)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
