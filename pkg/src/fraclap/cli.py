"""Command line interface.

Subcommands: ``state-conv``, ``control-conv``, ``solver-stats`` run the
experiment suites; ``solve`` performs a single solve and dumps the solution.
Every flag can also be supplied through a plain ``key = value`` config file
(flag names with dashes replaced by underscores); explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import control as ctl
from . import fem, harness
from .fractional import SolveOptions, fractional_solve
from .mesh import unit_cube_mesh, unit_square_mesh, write_mesh


def _parse_levels(text: str):
    if ".." in text:
        lo, hi = text.split("..")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(t) for t in text.split(",") if t)


def _parse_s_list(text: str):
    return tuple(float(t) for t in text.split(",") if t)


def read_config_file(path: str) -> dict:
    """Plain key = value lines; '#' starts a comment."""
    values = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"malformed config line: {raw.rstrip()}")
            key, val = (t.strip() for t in line.split("=", 1))
            values[key.replace("-", "_")] = val
    return values


_COMMON = {
    "dim": (int, 2),
    "s": (_parse_s_list, None),          # per-command default below
    "levels": (_parse_levels, None),
    "ref_level": (int, None),
    "mu": (float, 0.1),
    "a": (float, -0.8),
    "b": (float, 0.8),
    "ck": (float, 1.1),
    "rtol": (float, 1e-8),
    "tol": (float, 1e-5),
    "mode": (str, None),
    "post_process": (bool, False),
    "out": (str, None),
    "threads": (int, 1),
    "seed": (int, 0),
    "config": (str, None),
    "level": (int, 4),
}

_DEFAULTS = {
    "state-conv": {"s": (0.05, 0.10, 0.25), "levels": (3, 4, 5, 6, 7),
                   "ref_level": 9},
    "control-conv": {"s": (0.05, 0.25, 0.5), "levels": (3, 4, 5, 6),
                     "ref_level": 8},
    "solver-stats": {"s": (0.05, 0.5, 0.95), "levels": (2, 3, 4, 5, 6, 7),
                     "ref_level": 99},
    "solve": {"s": (0.5,), "levels": (), "ref_level": 99},
}


def _add_flags(parser: argparse.ArgumentParser, names):
    for name in names:
        parse, _ = _COMMON[name]
        flag = "--" + name.replace("_", "-")
        if parse is bool:
            parser.add_argument(flag, action="store_const", const=True,
                                default=None, dest=name)
        else:
            parser.add_argument(flag, type=str, default=None, dest=name)


def _resolve(args: argparse.Namespace, command: str) -> dict:
    file_vals = {}
    if args.config:
        file_vals = read_config_file(args.config)
    out = {}
    for name, (parse, default) in _COMMON.items():
        raw = getattr(args, name, None)
        if raw is None and name in file_vals:
            raw = file_vals[name]
        if raw is None:
            value = _DEFAULTS[command].get(name, default)
        elif parse is bool:
            value = raw if isinstance(raw, bool) else \
                str(raw).lower() in ("1", "true", "yes", "on")
        else:
            value = parse(raw) if isinstance(raw, str) else raw
        out[name] = value
    return out


def _experiment_config(vals: dict, kind: str) -> harness.ExperimentConfig:
    return harness.ExperimentConfig(
        kind=kind, dim=vals["dim"], s_values=vals["s"],
        levels=vals["levels"], ref_level=vals["ref_level"], mu=vals["mu"],
        lower=vals["a"], upper=vals["b"], c_k=vals["ck"], rtol=vals["rtol"],
        opt_tol=vals["tol"], with_post_process=vals["post_process"],
        out_dir=vals["out"], threads=vals["threads"], seed=vals["seed"])


def _cmd_state_conv(vals: dict) -> int:
    tables = harness.run_state_convergence(
        _experiment_config(vals, "state_convergence"))
    for s, table in tables.items():
        print(f"# s = {s}")
        print(table.to_csv(), end="")
    return 0


def _cmd_control_conv(vals: dict) -> int:
    tables = harness.run_control_convergence(
        _experiment_config(vals, "control_convergence"))
    for s, per_series in tables.items():
        for name, table in per_series.items():
            print(f"# s = {s}, series = {name}")
            print(table.to_csv(), end="")
    return 0


def _cmd_solver_stats(vals: dict) -> int:
    cfg = _experiment_config(vals, "solver_stats")
    print(harness.run_solver_stats(cfg), end="")
    return 0


def _dump_vector(out_dir: str, name: str, values: np.ndarray):
    np.savetxt(os.path.join(out_dir, name), values, fmt="%.17g")


def _cmd_solve(vals: dict) -> int:
    out_dir = vals["out"] or "fraclap-out"
    os.makedirs(out_dir, exist_ok=True)
    m = 2 ** vals["level"]
    mesh = unit_square_mesh(m) if vals["dim"] == 2 else unit_cube_mesh(m)
    s = vals["s"][0]
    options = SolveOptions(c_k=vals["ck"], rtol=vals["rtol"])
    write_mesh(mesh, os.path.join(out_dir, "mesh.txt"))
    summary = {"dim": vals["dim"], "cells_per_side": m, "s": s,
               "n_vertices": mesh.n_vertices, "h": mesh.h}

    if vals["mode"] is None:
        res = fractional_solve(mesh, s, harness.hat_rhs(mesh), options)
        _dump_vector(out_dir, "state_u.txt", res.u.values)
        summary.update({
            "kind": "state", "n_systems": res.quadrature.n_systems,
            "n_alg1": res.stats.n_alg1, "n_alg2": res.stats.n_alg2,
            "n_amg_setups": res.stats.n_prec_setups,
            "n_matvec": res.stats.n_matvec,
        })
    else:
        problem = ctl.ControlProblem(
            mesh=mesh, s=s, mu=vals["mu"], lower=vals["a"], upper=vals["b"],
            desired=fem.interpolate(mesh, harness.eigen_desired),
            mode=vals["mode"], options=options)
        if vals["mode"] == ctl.VARIATIONAL:
            sol = ctl.solve_variational(problem, tol=vals["tol"])
        else:
            sol = ctl.solve_fully_discrete(problem, tol=vals["tol"])
        _dump_vector(out_dir, "control_z.txt", sol.control.values)
        _dump_vector(out_dir, "state_u.txt", sol.state.values)
        _dump_vector(out_dir, "adjoint_p.txt", sol.adjoint.values)
        if vals["post_process"] and vals["mode"] == ctl.FULLY_DISCRETE:
            zpp = ctl.post_process(problem, sol)
            _dump_vector(out_dir, "postprocessed_z.txt", zpp.values)
        summary.update({
            "kind": "control", "mode": vals["mode"],
            "objective": sol.objective, "iterations": sol.iterations,
            "residual": sol.residual, "mu": vals["mu"],
            "bounds": [vals["a"], vals["b"]],
            "n_matvec": sol.stats.n_matvec,
            "n_amg_setups": sol.stats.n_prec_setups,
        })
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fraclap",
        description="Spectral fractional Poisson solves and optimal control")
    sub = parser.add_subparsers(dest="command", required=True)
    flags = {
        "state-conv": ["dim", "s", "levels", "ref_level", "ck", "rtol",
                       "out", "threads", "seed", "config"],
        "control-conv": ["dim", "s", "levels", "ref_level", "mu", "a", "b",
                         "ck", "rtol", "tol", "post_process", "out",
                         "threads", "seed", "config"],
        "solver-stats": ["dim", "s", "levels", "ck", "rtol", "out",
                         "threads", "seed", "config"],
        "solve": ["dim", "s", "level", "mu", "a", "b", "ck", "rtol", "tol",
                  "mode", "post_process", "out", "seed", "config"],
    }
    runners = {
        "state-conv": _cmd_state_conv,
        "control-conv": _cmd_control_conv,
        "solver-stats": _cmd_solver_stats,
        "solve": _cmd_solve,
    }
    for command, names in flags.items():
        p = sub.add_parser(command)
        _add_flags(p, names)

    args = parser.parse_args(argv)
    try:
        vals = _resolve(args, args.command)
        if args.command == "solver-stats":
            vals["ref_level"] = max(vals["levels"]) + 1
        return runners[args.command](vals)
    except Exception as exc:                      # noqa: BLE001
        print(f"fraclap: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
