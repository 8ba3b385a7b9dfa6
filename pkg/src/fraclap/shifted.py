"""Solvers for families of shifted SPD systems (A + alpha_l * M_h) V = Z.

The family is first normalized with the lumped mass so that every system
becomes (A~ + alpha~_l I) V~ = Z~ with the scaled operator's sup-norm equal
to one.  Systems with large shifts are well conditioned and are solved with
a shared-Krylov multishift conjugate gradient: one Lanczos basis of A~ is
grown lazily (the only matrix-vector products), and every shifted system is
solved inside that basis through scalar recurrences, which is algebraically
the classical shifted-CG iteration.  Once the basis would exceed ``n_max``
dimensions the remaining (small-shift) systems are solved sequentially by
preconditioned CG, rebuilding the preconditioner whenever the previous
system needed more than ``iter_cap`` iterations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .multigrid import IncompleteCholesky

__all__ = [
    "ShiftedFamily",
    "SolveStats",
    "normalize",
    "condition_bound",
    "solve_well_conditioned",
    "solve_preconditioned",
    "solve_family",
]


@dataclass(eq=False)
class SolveStats:
    """Bookkeeping for one family solve."""

    iterations: dict = field(default_factory=dict)   # label -> iteration count
    n_alg1: int = 0
    n_alg2: int = 0
    crossover: int | None = None        # label of the last multishift-solved system
    n_prec_setups: int = 0
    n_matvec: int = 0

    @property
    def n_systems(self) -> int:
        return self.n_alg1 + self.n_alg2


@dataclass(eq=False)
class ShiftedFamily:
    """Normalized shifted family, shifts sorted by decreasing magnitude."""

    A: sp.csr_matrix
    lumped_mass: np.ndarray
    rho: float
    shifts: np.ndarray            # original alpha_l, decreasing
    shifts_scaled: np.ndarray     # alpha_l / rho, decreasing
    labels: np.ndarray            # caller labels, parallel to shifts
    rhs: np.ndarray
    rhs_scaled: np.ndarray        # (1/rho) M_h^{-1/2} Z
    inv_sqrt_mass: np.ndarray
    _kappa: float | None = None

    @property
    def n(self) -> int:
        return self.rhs.shape[0]

    @property
    def n_shifts(self) -> int:
        return self.shifts.shape[0]

    def apply_scaled(self, x: np.ndarray) -> np.ndarray:
        """A~ x with A~ = (1/rho) M_h^{-1/2} A M_h^{-1/2}."""
        d = self.inv_sqrt_mass
        return d * (self.A @ (d * x)) / self.rho

    def unnormalize(self, v_scaled: np.ndarray) -> np.ndarray:
        """Map V~ back to V = M_h^{-1/2} V~ (acts on the last axis)."""
        return v_scaled * self.inv_sqrt_mass

    def kappa_estimate(self, steps: int = 20) -> float:
        """Condition number of A~ from a few Lanczos steps (diagnostic)."""
        if self._kappa is None:
            n = self.n
            if n == 1:
                self._kappa = 1.0
            else:
                q = np.ones(n) / np.sqrt(n)
                q_prev = np.zeros(n)
                a, b = [], []
                beta = 0.0
                for _ in range(min(steps, n)):
                    w = self.apply_scaled(q) - beta * q_prev
                    alpha = q @ w
                    w -= alpha * q
                    beta = float(np.linalg.norm(w))
                    a.append(alpha)
                    if beta < 1e-14:
                        break
                    b.append(beta)
                    q_prev, q = q, w / beta
                if len(a) == 1:
                    self._kappa = 1.0
                else:
                    ev = sla.eigvalsh_tridiagonal(a, b[:len(a) - 1])
                    self._kappa = float(ev[-1] / max(ev[0], 1e-300))
        return self._kappa


def normalize(A: sp.spmatrix, lumped_mass: np.ndarray, shifts: np.ndarray,
              Z: np.ndarray, labels=None) -> ShiftedFamily:
    """Scale the family to identity shifts with unit operator sup-norm."""
    lumped_mass = np.asarray(lumped_mass, dtype=float)
    if np.any(lumped_mass <= 0):
        raise ValueError("lumped mass must be strictly positive")
    A = sp.csr_matrix(A)
    shifts = np.asarray(shifts, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if labels is None:
        labels = np.arange(shifts.size)
    labels = np.asarray(labels)

    d = 1.0 / np.sqrt(lumped_mass)
    scaled = sp.diags(d) @ A @ sp.diags(d)
    rho = float(np.max(np.abs(scaled).sum(axis=1)))
    order = np.argsort(-shifts, kind="stable")
    return ShiftedFamily(
        A=A, lumped_mass=lumped_mass, rho=rho,
        shifts=shifts[order], shifts_scaled=shifts[order] / rho,
        labels=labels[order], rhs=Z, rhs_scaled=d * Z / rho,
        inv_sqrt_mass=d)


def condition_bound(family: ShiftedFamily, label) -> float:
    """Bound 1 + min(lambda_max / alpha~_l, kappa) on the 2-condition number.

    lambda_max(A~) <= 1 exactly after the sup-norm scaling; kappa(A~) is a
    Lanczos estimate.  Diagnostic only, never used by the solvers.
    """
    pos = np.flatnonzero(family.labels == label)
    if pos.size == 0:
        raise ValueError(f"unknown shift label {label!r}")
    alpha = family.shifts_scaled[pos[0]]
    return 1.0 + min(1.0 / alpha, family.kappa_estimate())


class _MultishiftScan:
    """Lanczos basis plus, per shift, the first converging Krylov dimension."""

    def __init__(self, family: ShiftedFamily, n_max: int, rtol: float):
        sig = family.shifts_scaled
        S = sig.size
        n = family.n
        z = family.rhs_scaled
        beta0 = float(np.linalg.norm(z))
        self.beta0 = beta0
        self.n = n
        self.n_basis = 0
        self.m_conv = np.zeros(S, dtype=np.int64)   # 0 means not converged
        self.a = np.zeros(n_max)
        self.b = np.zeros(n_max)
        self.D = np.zeros((S, n_max))
        self.C = np.zeros((S, n_max))
        self.Q = None
        if beta0 == 0.0:
            self.m_conv[:] = 1          # zero rhs: zero solutions, no work
            self.trivial = True
            return
        self.trivial = False

        tol_abs = rtol * beta0
        Q = np.empty((n_max, n))
        q_prev = np.zeros(n)
        q = z / beta0
        d_prev = np.zeros(S)
        c_prev = np.zeros(S)
        active = np.ones(S, dtype=bool)
        j = 0
        while j < n_max and active.any():
            Q[j] = q
            w = family.apply_scaled(q)
            if j > 0:
                w -= self.b[j - 1] * q_prev
            aj = float(q @ w)
            w -= aj * q
            bj = float(np.linalg.norm(w))
            self.a[j] = aj
            self.b[j] = bj
            if j == 0:
                d = aj + sig
                c = np.full(S, beta0)
            else:
                ratio = self.b[j - 1] / d_prev
                d = np.where(active, aj + sig - self.b[j - 1] * ratio, 1.0)
                c = np.where(active, -ratio * c_prev, 0.0)
            if np.any(d[active] <= 0.0):
                raise RuntimeError(
                    "shifted CG breakdown: operator is not positive definite")
            self.D[:, j] = np.where(active, d, self.D[:, j])
            self.C[:, j] = np.where(active, c, self.C[:, j])
            res = np.abs(c) / d * bj
            hit = active & (res <= tol_abs)
            self.m_conv[hit] = j + 1
            active &= ~hit
            d_prev, c_prev = d, c
            j += 1
            if active.any():
                if bj < 1e-300:
                    # invariant subspace: every remaining residual is zero
                    self.m_conv[active] = j
                    active[:] = False
                else:
                    q_prev, q = q, w / bj
        self.n_basis = j
        self.Q = Q[:j]

    def reconstruct(self, indices: np.ndarray, weights=None):
        """Galerkin solutions for the given shift indices (scaled space).

        With ``weights`` the weighted sum over those shifts is returned
        instead of the individual solutions.
        """
        indices = np.asarray(indices, dtype=np.int64)
        if self.trivial or indices.size == 0:
            if weights is not None:
                return np.zeros(self.n)
            return np.zeros((indices.size, self.n))
        m_arr = self.m_conv[indices]
        if np.any(m_arr <= 0):
            raise ValueError("reconstruction requested for unsolved shifts")
        m_max = int(m_arr.max())
        k = indices.size
        y = np.zeros(k)
        bsub = self.b
        D = self.D[indices]
        C = self.C[indices]
        store = None if weights is None else np.zeros(m_max)
        Y = None if weights is not None else np.zeros((k, m_max))
        for j in range(m_max - 1, -1, -1):
            last = m_arr - 1 == j
            inside = m_arr - 1 > j
            if last.any():
                y[last] = C[last, j] / D[last, j]
            if inside.any():
                y[inside] = (C[inside, j] - bsub[j] * y[inside]) / D[inside, j]
            live = last | inside
            if weights is not None:
                store[j] = np.sum(np.where(live, weights * y, 0.0))
            else:
                Y[live, j] = y[live]
        if weights is not None:
            return store @ self.Q[:m_max]
        return Y @ self.Q[:m_max]


def _multishift_stats(family: ShiftedFamily, scan: _MultishiftScan):
    unsolved = np.flatnonzero(scan.m_conv == 0)
    n_solved = int(unsolved[0]) if unsolved.size else family.n_shifts
    stats = SolveStats(n_alg1=n_solved, n_matvec=scan.n_basis)
    for i in range(n_solved):
        stats.iterations[family.labels[i]] = int(scan.m_conv[i])
    stats.crossover = None if n_solved == 0 else family.labels[n_solved - 1]
    return stats, n_solved


def solve_well_conditioned(family: ShiftedFamily, n_max: int, rtol: float):
    """Multishift CG for the leading shifts; stops when the shared basis
    would exceed ``n_max`` vectors.

    Returns ``(solutions, crossover_label, stats)``: one row per solved
    shift in family (decreasing-shift) order, in the scaled variables, each
    meeting the rtol residual bound; ``crossover_label`` identifies the last
    solved system (None if the very first shift already needs more than
    ``n_max`` basis vectors).
    """
    scan = _MultishiftScan(family, n_max, rtol)
    stats, n_solved = _multishift_stats(family, scan)
    solutions = scan.reconstruct(np.arange(n_solved))
    return solutions, stats.crossover, stats


def _pcg(op, b, x0, prec, rtol, maxiter):
    """Preconditioned CG; returns (x, iterations, converged, matvecs)."""
    x = x0.copy()
    r = b - op(x)
    matvecs = 1
    norm_b = float(np.linalg.norm(b))
    if norm_b == 0.0:
        return np.zeros_like(b), 0, True, matvecs
    tol = rtol * norm_b
    if np.linalg.norm(r) <= tol:
        return x, 0, True, matvecs
    z = prec(r)
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, maxiter + 1):
        Ap = op(p)
        matvecs += 1
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol:
            return x, it, True, matvecs
        z = prec(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, maxiter, False, matvecs


def solve_preconditioned(family: ShiftedFamily, start: int, iter_cap: int,
                         rtol: float, prec_factory=None, x_start=None,
                         weights=None):
    """Sequential PCG over family indices start..end (decreasing shifts).

    A preconditioner is (re)built for the current shift whenever the
    previous solve took more than ``iter_cap`` iterations; the initial guess
    of each system is the solution of its better-conditioned neighbor (or a
    caller-provided warm start).  Returns ``(solutions or weighted sum,
    stats)`` in scaled space.
    """
    S = family.n_shifts
    count = S - start
    stats = SolveStats(n_alg2=count)
    if count <= 0:
        if weights is not None:
            return np.zeros(family.n), stats
        return np.zeros((0, family.n)), stats

    if prec_factory is None:
        def prec_factory(alpha):
            return IncompleteCholesky(
                family.A + alpha * sp.diags(family.lumped_mass))

    sqrt_mass = 1.0 / family.inv_sqrt_mass

    def wrap(prec_obj):
        # mesh-space approximate inverse of (A + alpha M_h), mapped to the
        # normalized variables
        def apply(v):
            return family.rho * sqrt_mass * prec_obj.apply(sqrt_mass * v)
        return apply

    b = family.rhs_scaled
    out = np.zeros(family.n) if weights is not None else \
        np.zeros((count, family.n))
    prev = x_start if x_start is not None else np.zeros(family.n)
    prec = None
    prev_iters = iter_cap + 1
    maxiter = max(10 * iter_cap, 50)
    for pos in range(start, S):
        sigma = family.shifts_scaled[pos]
        label = family.labels[pos]

        def op(x, sigma=sigma):
            return family.apply_scaled(x) + sigma * x

        freshly_built = False
        if prev_iters > iter_cap:
            prec = wrap(prec_factory(family.shifts[pos]))
            stats.n_prec_setups += 1
            freshly_built = True
        x, iters, converged, mv = _pcg(op, b, prev, prec, rtol, maxiter)
        stats.n_matvec += mv
        if not converged:
            if not freshly_built:
                prec = wrap(prec_factory(family.shifts[pos]))
                stats.n_prec_setups += 1
                x, extra, converged, mv = _pcg(op, b, x, prec, rtol, maxiter)
                stats.n_matvec += mv
                iters += extra
            if not converged:
                raise RuntimeError(
                    f"PCG stagnation on shift {family.shifts[pos]:.4g} "
                    f"(label {label}): no convergence within {maxiter} "
                    f"iterations after a fresh preconditioner")
        stats.iterations[label] = iters
        prev_iters = iters
        prev = x
        if weights is not None:
            out += weights[pos] * x
        else:
            out[pos - start] = x
    return out, stats


def _merge_stats(s1: SolveStats, s2: SolveStats) -> SolveStats:
    merged = SolveStats(iterations={**s1.iterations, **s2.iterations},
                        n_alg1=s1.n_alg1 + s2.n_alg1,
                        n_alg2=s1.n_alg2 + s2.n_alg2,
                        crossover=s1.crossover,
                        n_prec_setups=s1.n_prec_setups + s2.n_prec_setups,
                        n_matvec=s1.n_matvec + s2.n_matvec)
    return merged


def solve_family(A, lumped_mass, shifts, Z, *, labels=None, rtol=1e-8,
                 n_max=500, iter_cap=20, prec_factory=None, weights=None):
    """Solve (A + alpha_l M_h) V^l = Z for every shift.

    ``weights`` switches the return value from the full solution stack
    (input shift order, one row per shift) to the weighted combination
    ``sum_l w_l V^l``, which avoids materializing every solution.
    """
    shifts = np.asarray(shifts, dtype=float)
    family = normalize(A, lumped_mass, shifts, Z, labels=labels)
    # the solvers stop on the normalized residual; dividing by the mass
    # scaling spread makes the bound hold for the un-normalized residual too
    mh = family.lumped_mass
    rtol = rtol / math.sqrt(float(mh.max() / mh.min()))
    order = np.argsort(-shifts, kind="stable")     # family order
    w_ordered = None
    if weights is not None:
        w_ordered = np.asarray(weights, dtype=float)[order]

    scan = _MultishiftScan(family, n_max, rtol)
    S = family.n_shifts
    stats1, n_solved = _multishift_stats(family, scan)

    x_start = None
    if n_solved < S and n_solved > 0 and not scan.trivial:
        x_start = scan.reconstruct(np.array([n_solved - 1]))[0]

    if weights is not None:
        combined = scan.reconstruct(np.arange(n_solved),
                                    weights=w_ordered[:n_solved])
        scan.Q = None                      # release the basis before PCG
        tail, stats2 = solve_preconditioned(
            family, n_solved, iter_cap, rtol, prec_factory=prec_factory,
            x_start=x_start, weights=w_ordered)
        stats = _merge_stats(stats1, stats2)
        if combined.size == 0:
            combined = np.zeros(family.n)
        return family.unnormalize(combined + tail), stats

    sols_scaled = scan.reconstruct(np.arange(n_solved))
    scan.Q = None
    tail, stats2 = solve_preconditioned(
        family, n_solved, iter_cap, rtol, prec_factory=prec_factory,
        x_start=x_start)
    stats = _merge_stats(stats1, stats2)
    all_scaled = np.vstack([sols_scaled.reshape(n_solved, family.n),
                            tail.reshape(S - n_solved, family.n)])
    solutions = family.unnormalize(all_scaled)
    # back to the caller's shift order
    inverse = np.empty(S, dtype=np.int64)
    inverse[order] = np.arange(S)
    return solutions[inverse], stats
