"""JSON problem files.

Layout::

    {
      "time": {"s": 0, "T": 1, "n_steps": 2000},
      "dims": {"n": 1, "m": 1},
      "dynamics": {"A": ..., "B1": ..., "B2": ..., "C": ...},
      "costs": {"D1": ..., "E1": ..., "G1": ..., "D2": ..., "E2": ..., "G2": ...},
      "constraints": [{"kind": "eq" | "ineq", "alpha": ..., "beta": ..., "gamma": ..., "delta": ..., "a": 0.0}],
      "xi": [1.0],
      "simulation": {"n_paths": 50000, "seed": 0, "antithetic": true}
    }

A matrix entry is a constant 2-D array, ``{"grid": "uniform", "values": [...]}``
with one matrix per grid point, or ``{"expr": ...}`` where the expression (a
string, or a 2-D array of strings and numbers) is evaluated in ``t`` with
``exp, log, sqrt, sin, cos, tanh, pi`` available. Constraint columns
(``alpha, beta, gamma, delta``) may also be flat vectors. Inequality rows are
moved ahead of equality rows; ``constraint_order`` records the original index
of every column of the assembled spec.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ConstraintSpec, CostSpec, Dynamics, MatrixPath, ProblemSpec, TimeGrid

_EXPR_NAMES = {
    "exp": math.exp, "log": math.log, "sqrt": math.sqrt, "sin": math.sin, "cos": math.cos,
    "tanh": math.tanh, "pi": math.pi, "e": math.e,
}


class ConfigError(ValueError):
    """A problem file that cannot be turned into a spec; the message names the field."""


@dataclass(frozen=True)
class SimulationSettings:
    n_paths: int = 50_000
    seed: int = 0
    antithetic: bool = True


@dataclass(frozen=True, eq=False)
class LoadedConfig:
    spec: ProblemSpec
    simulation: SimulationSettings
    constraint_order: list[int]
    raw: dict


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    if key not in obj:
        raise ConfigError(f"{where}.{key}: missing field" if where else f"{key}: missing field")
    return obj[key]


def _eval_expr(expr, t: float, where: str) -> float:
    if isinstance(expr, (int, float)):
        return float(expr)
    if not isinstance(expr, str):
        raise ConfigError(f"{where}: expression entries must be strings or numbers")
    try:
        return float(eval(expr, {"__builtins__": {}}, {**_EXPR_NAMES, "t": t}))  # noqa: S307
    except Exception as exc:  # any failure inside a user expression is a config error
        raise ConfigError(f"{where}: cannot evaluate {expr!r} ({exc})") from exc


def _matrix_path(entry, grid: TimeGrid, shape: tuple[int, int], where: str, vector: bool = False) -> MatrixPath:
    if isinstance(entry, dict):
        if "expr" in entry:
            expr = entry["expr"]
            arr = np.array(expr, dtype=object)
            if arr.ndim == 0:
                arr = arr.reshape(1, 1)
            elif arr.ndim == 1:
                arr = arr.reshape(-1, 1) if vector else arr.reshape(1, -1)
            vals = np.array([
                [[_eval_expr(x, t, where) for x in row] for row in arr] for t in grid.times
            ])
            path = MatrixPath(grid, vals)
        elif entry.get("grid") == "uniform":
            vals = np.asarray(_require(entry, "values", where), dtype=float)
            if vector and vals.ndim == 2:
                vals = vals[:, :, None]
            if vals.ndim != 3 or vals.shape[0] != grid.n_steps + 1:
                raise ConfigError(
                    f"{where}.values: need {grid.n_steps + 1} samples of a {shape[0]}x{shape[1]} matrix, "
                    f"got array of shape {vals.shape}"
                )
            path = MatrixPath(grid, vals)
        else:
            raise ConfigError(f"{where}: object entries need 'expr' or grid='uniform' with 'values'")
    else:
        try:
            arr = np.asarray(entry, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: not a numeric array") from exc
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1) if vector else arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ConfigError(f"{where}: expected a 2-D array, got {arr.ndim}-D")
        path = MatrixPath.constant(grid, arr)
    if path.shape != shape:
        raise ConfigError(f"{where}: shape {path.shape}, expected {shape}")
    return path


def _constant(entry, shape, where: str, vector: bool = False) -> np.ndarray:
    try:
        arr = np.asarray(entry, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: not a numeric array") from exc
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if vector:
        arr = arr.reshape(-1)
        if arr.shape != (shape[0],):
            raise ConfigError(f"{where}: length {arr.size}, expected {shape[0]}")
        return arr
    if arr.shape != shape:
        raise ConfigError(f"{where}: shape {arr.shape}, expected {shape}")
    return arr


def spec_from_dict(raw: dict, n_steps: int | None = None) -> LoadedConfig:
    time = _require(raw, "time", "")
    try:
        grid = TimeGrid(
            float(_require(time, "s", "time")),
            float(_require(time, "T", "time")),
            int(n_steps if n_steps is not None else _require(time, "n_steps", "time")),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"time: {exc}") from exc
    dims = _require(raw, "dims", "")
    n, m = int(_require(dims, "n", "dims")), int(_require(dims, "m", "dims"))

    dyn_raw = _require(raw, "dynamics", "")
    mp = lambda obj, key, where, shape: _matrix_path(_require(obj, key, where), grid, shape, f"{where}.{key}")
    dyn = Dynamics(
        A=mp(dyn_raw, "A", "dynamics", (n, n)), B1=mp(dyn_raw, "B1", "dynamics", (n, m)),
        B2=mp(dyn_raw, "B2", "dynamics", (n, m)), C=mp(dyn_raw, "C", "dynamics", (n, n)),
        xi=_constant(_require(raw, "xi", ""), (n,), "xi", vector=True),
    )
    c_raw = _require(raw, "costs", "")
    costs = CostSpec(
        D1=mp(c_raw, "D1", "costs", (n, n)), E1=mp(c_raw, "E1", "costs", (m, m)),
        G1=_constant(_require(c_raw, "G1", "costs"), (n, n), "costs.G1"),
        D2=mp(c_raw, "D2", "costs", (n, n)), E2=mp(c_raw, "E2", "costs", (m, m)),
        G2=_constant(_require(c_raw, "G2", "costs"), (n, n), "costs.G2"),
    )

    rows = raw.get("constraints", [])
    if not isinstance(rows, list):
        raise ConfigError("constraints: expected a list")
    kinds = []
    for i, row in enumerate(rows):
        kind = _require(row, "kind", f"constraints[{i}]")
        if kind not in ("eq", "ineq"):
            raise ConfigError(f"constraints[{i}].kind: must be 'eq' or 'ineq', got {kind!r}")
        kinds.append(kind)
    order = [i for i, k in enumerate(kinds) if k == "ineq"] + [i for i, k in enumerate(kinds) if k == "eq"]
    if rows:
        cols = {"alpha": [], "beta": [], "gamma": []}
        deltas, rhs = [], []
        for i in order:
            row, where = rows[i], f"constraints[{i}]"
            cols["alpha"].append(_matrix_path(_require(row, "alpha", where), grid, (n, 1), f"{where}.alpha", True).values)
            cols["beta"].append(_matrix_path(_require(row, "beta", where), grid, (m, 1), f"{where}.beta", True).values)
            cols["gamma"].append(_matrix_path(_require(row, "gamma", where), grid, (m, 1), f"{where}.gamma", True).values)
            deltas.append(_constant(row.get("delta", [0.0] * n), (n,), f"{where}.delta", vector=True))
            rhs.append(float(_require(row, "a", where)))
        cons = ConstraintSpec(
            alpha=MatrixPath(grid, np.concatenate(cols["alpha"], axis=2)),
            beta=MatrixPath(grid, np.concatenate(cols["beta"], axis=2)),
            gamma=MatrixPath(grid, np.concatenate(cols["gamma"], axis=2)),
            delta=np.stack(deltas, axis=1), a=np.array(rhs), l_prime=kinds.count("ineq"),
        )
    else:
        cons = ConstraintSpec.empty(grid, n, m)

    sim_raw = raw.get("simulation", {}) or {}
    sim = SimulationSettings(
        n_paths=int(sim_raw.get("n_paths", 50_000)), seed=int(sim_raw.get("seed", 0)),
        antithetic=bool(sim_raw.get("antithetic", True)),
    )
    return LoadedConfig(ProblemSpec(dyn, costs, cons, grid), sim, order, raw)


def load_config(path: str | Path, n_steps: int | None = None) -> LoadedConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return spec_from_dict(raw, n_steps)


def constraint_rows(cons: ConstraintSpec) -> list[dict]:
    rows = []
    for i in range(cons.l):
        col = lambda p: {"grid": "uniform", "values": p.values[:, :, i].tolist()}
        rows.append({
            "kind": "ineq" if i < cons.l_prime else "eq",
            "alpha": col(cons.alpha), "beta": col(cons.beta), "gamma": col(cons.gamma),
            "delta": cons.delta[:, i].tolist(), "a": float(cons.a[i]),
        })
    return rows
