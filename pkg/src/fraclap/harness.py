"""Experiment engine: convergence-rate studies and solver statistics.

Experiments run on the structured unit-square/cube meshes with level ``j``
meaning ``2**j`` cells per side.  Errors are always measured on the
reference mesh after prolongation (exact for nested P1 spaces; cellwise for
P0 controls), and rate tables report log2 error ratios between successive
levels.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .control import (ControlProblem, FULLY_DISCRETE, VARIATIONAL,
                      solve_fully_discrete, solve_variational)
from .fem import NodalFunction
from .fractional import SolveOptions, fractional_solve
from .mesh import (Mesh, cell_parents, eval_p1, prolongation_matrix,
                   unit_cube_mesh, unit_square_mesh)

__all__ = [
    "ExperimentConfig",
    "eigen_desired",
    "RateTable",
    "hat_rhs",
    "compute_rates",
    "hs_error_surrogate",
    "run_state_convergence",
    "run_control_convergence",
    "run_solver_stats",
]


@dataclass
class ExperimentConfig:
    kind: str = "state_convergence"
    dim: int = 2
    s_values: tuple = (0.05, 0.10, 0.25)
    levels: tuple = (3, 4, 5, 6, 7)
    ref_level: int = 9
    mu: float = 0.1
    lower: float = -0.8
    upper: float = 0.8
    c_k: float = 1.1
    rtol: float = 1e-8
    opt_tol: float = 1e-5
    with_post_process: bool = True
    out_dir: str | None = None
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.levels and self.ref_level <= max(self.levels):
            raise ValueError("the reference level must exceed every study level")

    def solve_options(self) -> SolveOptions:
        return SolveOptions(c_k=self.c_k, rtol=self.rtol)


@dataclass
class RateTable:
    """Rows of (N_omega, h, error, rate); the first rate prints as 0.00."""

    label: str
    n_omega: list = field(default_factory=list)
    h: list = field(default_factory=list)
    error: list = field(default_factory=list)
    rate: list = field(default_factory=list)

    @classmethod
    def from_errors(cls, label, n_omega, h, errors) -> "RateTable":
        rates = compute_rates(errors, h)
        return cls(label=label, n_omega=list(n_omega), h=list(h),
                   error=list(errors), rate=rates)

    def to_csv(self) -> str:
        lines = ["N_omega,h,error,rate"]
        for n, h, e, r in zip(self.n_omega, self.h, self.error, self.rate):
            rate_txt = "" if r is None else f"{r:.2f}"
            lines.append(f"{n},{h:.4f},{e:.6e},{rate_txt}")
        return "\n".join(lines) + "\n"

    def to_gnuplot(self) -> str:
        lines = [f"# {self.label}", "# h error"]
        for h, e in zip(self.h, self.error):
            lines.append(f"{h:.6e} {e:.6e}")
        return "\n".join(lines) + "\n"

    def asymptotic_rate(self, points: int = 3) -> float:
        """Least-squares slope of log(error) vs log(h) over the last rows."""
        k = min(points, len(self.error))
        hs = np.log(np.asarray(self.h[-k:], dtype=float))
        es = np.log(np.asarray(self.error[-k:], dtype=float))
        return float(np.polyfit(hs, es, 1)[0])


def compute_rates(errors, hs):
    """r_i = log(e_{i-1}/e_i) / log(h_{i-1}/h_i); None for degenerate rows."""
    if len(errors) != len(hs):
        raise ValueError("errors and mesh sizes must align")
    rates = [0.0]
    for i in range(1, len(errors)):
        if errors[i] == 0.0 or errors[i - 1] == 0.0:
            rates.append(None)
        else:
            rates.append(math.log(errors[i - 1] / errors[i])
                         / math.log(hs[i - 1] / hs[i]))
    return rates if errors else []


def hs_error_surrogate(e_l2: float, e_h1: float, s: float) -> float:
    """Interpolation estimate of the H^s error: e_L2^(1-s) * e_H1^s."""
    if e_l2 < 0 or e_h1 < 0:
        raise ValueError("errors must be nonnegative")
    return e_l2 ** (1.0 - s) * e_h1 ** s


def _mesh(dim: int, m: int) -> Mesh:
    return unit_square_mesh(m) if dim == 2 else unit_cube_mesh(m)


def hat_rhs(mesh: Mesh) -> NodalFunction:
    """Clamped coarse hat: min(0.25, f0) with f0 the center hat scaled to 0.5.

    f0 is piecewise linear on the 2-cells-per-side mesh; the clamp contour
    runs along quarter-grid lines, so meshes must have cells_per_side
    divisible by 4 for the nodal interpolant to be exact (kinks resolved).
    """
    m = mesh.cells_per_side
    if m is None or m % 4 != 0:
        raise ValueError("hat rhs needs a structured mesh with "
                         "cells_per_side divisible by 4")
    base = _mesh(mesh.dim, 2)
    center_vals = np.zeros(base.n_vertices)
    center_vals[base.interior[0]] = 0.5
    f0 = eval_p1(base, center_vals, mesh.vertices)
    values = np.minimum(0.25, f0)
    return NodalFunction(mesh, values[mesh.interior])


class _Prolongator:
    """Chained P1 prolongations between structured levels, built lazily."""

    def __init__(self, meshes: dict):
        self.meshes = meshes
        self._mats = {}

    def _step(self, m: int):
        if m not in self._mats:
            self._mats[m] = prolongation_matrix(self.meshes[m],
                                                self.meshes[2 * m])
        return self._mats[m]

    def lift(self, values: np.ndarray, m_from: int, m_to: int) -> np.ndarray:
        out = values
        m = m_from
        while m < m_to:
            out = self._step(m) @ out
            m *= 2
        return out


def _write(out_dir: str | None, name: str, text: str):
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w") as fh:
        fh.write(text)


def _cache_path(out_dir: str | None, name: str):
    if out_dir is None:
        return None
    cache = os.path.join(out_dir, "cache")
    os.makedirs(cache, exist_ok=True)
    return os.path.join(cache, name)


def _cached_vector(path, compute):
    if path is not None and os.path.exists(path):
        return np.loadtxt(path).reshape(-1)
    vec = compute()
    if path is not None:
        np.savetxt(path, vec, fmt="%.17g")
    return vec


def _state_solution(mesh: Mesh, s: float, config: ExperimentConfig):
    opts = config.solve_options()
    return fractional_solve(mesh, s, hat_rhs(mesh), opts)


def run_state_convergence(config: ExperimentConfig) -> dict:
    """L2 errors of the fractional solves against a fine reference.

    Returns one RateTable per fractional power.
    """
    ms = [2 ** lv for lv in config.levels]
    m_ref = 2 ** config.ref_level
    meshes = {m: _mesh(config.dim, m) for m in _chain_sizes(ms, m_ref)}
    lift = _Prolongator(meshes)
    ref_mesh = meshes[m_ref]
    ref_ops = fem.operators(ref_mesh)

    def solve_level(args):
        s, m = args
        return (s, m), _state_solution(meshes[m], s, config).u.values

    jobs = [(s, m) for s in config.s_values for m in ms]
    results = {}
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            for key, vec in pool.map(solve_level, jobs):
                results[key] = vec
    else:
        for job in jobs:
            key, vec = solve_level(job)
            results[key] = vec

    tables = {}
    for s in config.s_values:
        path = _cache_path(config.out_dir,
                           f"state_ref_dim{config.dim}_m{m_ref}_s{s}"
                           f"_ck{config.c_k}_rtol{config.rtol}.txt")
        u_ref = _cached_vector(
            path, lambda: _state_solution(ref_mesh, s, config).u.values)
        errors, hs, n_omegas = [], [], []
        for m in ms:
            diff = u_ref - lift.lift(results[(s, m)], m, m_ref)
            err = math.sqrt(max(diff @ (ref_ops.mass @ diff), 0.0))
            errors.append(err)
            hs.append(meshes[m].h)
            n_omegas.append(meshes[m].n_vertices)
        table = RateTable.from_errors(f"state_L2_s{s}", n_omegas, hs, errors)
        tables[s] = table
        _write(config.out_dir, f"state_conv_s{s}.csv", table.to_csv())
        _write(config.out_dir, f"state_conv_s{s}.dat", table.to_gnuplot())
    return tables


def _chain_sizes(ms, m_ref):
    sizes = set()
    for m in ms:
        while m <= m_ref:
            sizes.add(m)
            m *= 2
    return sorted(sizes)


def run_solver_stats(config: ExperimentConfig) -> str:
    """Per-level solver statistics in CSV form (also returned as text)."""
    ms = [2 ** lv for lv in config.levels]
    rows = []

    def solve_one(args):
        s, m = args
        mesh = _mesh(config.dim, m)
        res = _state_solution(mesh, s, config)
        st = res.stats
        return (s, m), (mesh.n_vertices, s, res.quadrature.n_systems,
                        st.n_alg1, st.n_alg2, st.n_prec_setups)

    jobs = [(s, m) for s in config.s_values for m in ms]
    collected = {}
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            for key, row in pool.map(solve_one, jobs):
                collected[key] = row
    else:
        for job in jobs:
            key, row = solve_one(job)
            collected[key] = row
    for job in jobs:
        rows.append(collected[job])

    lines = ["N_omega,s,N_alpha,n_alg1,n_alg2,n_amg_setups"]
    for n_omega, s, n_alpha, n1, n2, setups in rows:
        lines.append(f"{n_omega},{s},{n_alpha},{n1},{n2},{setups}")
    text = "\n".join(lines) + "\n"
    _write(config.out_dir, "solver_stats.csv", text)
    return text


def _p1_at_quadrature(mesh: Mesh, full_values: np.ndarray, lam: np.ndarray):
    """Values of a P1 function at the quadrature points of every cell."""
    return full_values[mesh.cells] @ lam.T        # (n_cells, n_quad)


def _quad_l2(mesh: Mesh, w: np.ndarray, diff_at_quad: np.ndarray) -> float:
    return math.sqrt(float(mesh.volumes @ ((diff_at_quad ** 2) @ w)))


def _control_reference(config: ExperimentConfig, s: float, meshes, lift):
    """Variational reference solution, warm-started through coarser levels."""
    m_ref = 2 ** config.ref_level
    start = 2 ** max(config.levels)

    cache_base = (f"dim{config.dim}_m{m_ref}_s{s}_mu{config.mu}"
                  f"_a{config.lower}_b{config.upper}_ck{config.c_k}")
    paths = {name: _cache_path(config.out_dir, f"control_ref_{name}_{cache_base}.txt")
             for name in ("control", "state", "adjoint")}
    if all(p is not None and os.path.exists(p) for p in paths.values()):
        z = np.loadtxt(paths["control"]).reshape(-1)
        u = np.loadtxt(paths["state"]).reshape(-1)
        p = np.loadtxt(paths["adjoint"]).reshape(-1)
        return z, u, p

    z0 = None
    m = start
    sol = None
    while m <= m_ref:
        mesh = meshes[m] if m in meshes else _mesh(config.dim, m)
        problem = ControlProblem(
            mesh=mesh, s=s, mu=config.mu, lower=config.lower,
            upper=config.upper,
            desired=fem.interpolate(mesh, eigen_desired),
            mode=VARIATIONAL, options=config.solve_options())
        sol = solve_variational(problem, tol=config.opt_tol, z0=z0)
        if m < m_ref:
            z0 = lift.lift(sol.control.values, m, 2 * m)
        m *= 2
    z, u, p = sol.control.values, sol.state.values, sol.adjoint.values
    for name, vec in (("control", z), ("state", u), ("adjoint", p)):
        if paths[name] is not None:
            np.savetxt(paths[name], vec, fmt="%.17g")
    return z, u, p


def eigen_desired(points: np.ndarray) -> np.ndarray:
    """Desired state of the control study: a Laplacian eigenfunction."""
    out = np.sin(2 * np.pi * points[:, 0]) * np.sin(2 * np.pi * points[:, 1])
    for d in range(2, points.shape[1]):
        out = out * np.sin(2 * np.pi * points[:, d])
    return out


def run_control_convergence(config: ExperimentConfig) -> dict:
    """Control/state errors of both discretizations against a fine reference.

    Emits, per fractional power: P0 control error, post-processed control
    error, variational control error, state L2 error, and the H^s surrogate.
    """
    if config.dim != 2:
        raise ValueError("the control study is defined on the unit square")
    ms = [2 ** lv for lv in config.levels]
    m_ref = 2 ** config.ref_level
    meshes = {m: _mesh(config.dim, m) for m in _chain_sizes(ms, m_ref)}
    lift = _Prolongator(meshes)
    ref_mesh = meshes[m_ref]
    ref_ops = fem.operators(ref_mesh)
    lam, w = fem.simplex_quadrature(config.dim, degree=4)

    tables = {}
    for s in config.s_values:
        z_ref, u_ref, p_ref = _control_reference(config, s, meshes, lift)
        p_ref_full = NodalFunction(ref_mesh, p_ref).full_values()
        z_ref_quad = np.clip(-_p1_at_quadrature(ref_mesh, p_ref_full, lam)
                             / config.mu, config.lower, config.upper)

        series = {name: [] for name in
                  ("control_p0", "control_pp", "control_var",
                   "state_L2", "state_Hs")}
        hs, n_omegas = [], []
        for m in ms:
            mesh = meshes[m]
            desired = fem.interpolate(mesh, eigen_desired)
            base = dict(mesh=mesh, s=s, mu=config.mu, lower=config.lower,
                        upper=config.upper, desired=desired,
                        options=config.solve_options())
            p0_sol = solve_fully_discrete(
                ControlProblem(mode=FULLY_DISCRETE, **base),
                tol=config.opt_tol)
            var_sol = solve_variational(
                ControlProblem(mode=VARIATIONAL, **base),
                tol=config.opt_tol)

            parents = cell_parents(mesh, ref_mesh)
            z_p0_quad = p0_sol.control.values[parents][:, None]
            err_p0 = _quad_l2(ref_mesh, w, z_ref_quad - z_p0_quad)

            # post-processed control measured as the clamped adjoint
            # function (prolongation of the P1 adjoint is exact; clamping at
            # the quadrature points avoids the kink-interpolation error that
            # would otherwise cap the measured rate near h^1.5)
            p_p0_full = NodalFunction(
                ref_mesh,
                lift.lift(p0_sol.adjoint.values, m, m_ref)).full_values()
            zpp_quad = np.clip(
                -_p1_at_quadrature(ref_mesh, p_p0_full, lam) / config.mu,
                config.lower, config.upper)
            err_pp = _quad_l2(ref_mesh, w, z_ref_quad - zpp_quad)

            p_var_full = NodalFunction(
                ref_mesh,
                lift.lift(var_sol.adjoint.values, m, m_ref)).full_values()
            z_var_quad = np.clip(
                -_p1_at_quadrature(ref_mesh, p_var_full, lam) / config.mu,
                config.lower, config.upper)
            err_var = _quad_l2(ref_mesh, w, z_ref_quad - z_var_quad)

            du = u_ref - lift.lift(p0_sol.state.values, m, m_ref)
            e_l2 = math.sqrt(max(du @ (ref_ops.mass @ du), 0.0))
            e_h1 = math.sqrt(max(du @ (ref_ops.stiffness @ du), 0.0))

            series["control_p0"].append(err_p0)
            series["control_pp"].append(err_pp)
            series["control_var"].append(err_var)
            series["state_L2"].append(e_l2)
            series["state_Hs"].append(hs_error_surrogate(e_l2, e_h1, s))
            hs.append(mesh.h)
            n_omegas.append(mesh.n_vertices)

        tables[s] = {}
        for name, errs in series.items():
            table = RateTable.from_errors(f"{name}_s{s}", n_omegas, hs, errs)
            tables[s][name] = table
            _write(config.out_dir, f"control_conv_{name}_s{s}.csv",
                   table.to_csv())
            _write(config.out_dir, f"control_conv_{name}_s{s}.dat",
                   table.to_gnuplot())
    return tables
