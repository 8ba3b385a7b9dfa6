"""Shifted-family normalization, multishift CG, and sequential PCG."""

import numpy as np
import pytest
import scipy.sparse as sp

from fraclap import (condition_bound, normalize, solve_family,
                     solve_well_conditioned, unit_square_mesh)
from fraclap.fem import operators
from fraclap.fractional import sinc_quadrature
from fraclap.harness import hat_rhs
from fraclap.shifted import solve_preconditioned


def plain_cg(A_apply, b, rtol, maxiter=10000):
    """Textbook conjugate gradients, used as an independent reference."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    tol = rtol * np.linalg.norm(b)
    for _ in range(maxiter):
        if np.sqrt(rr) <= tol:
            break
        Ap = A_apply(p)
        alpha = rr / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


class TestNormalize:
    def test_identity_case(self):
        n = 6
        Z = np.arange(1.0, n + 1)
        fam = normalize(sp.eye(n).tocsr(), np.ones(n), np.array([3.0, 0.5]), Z)
        assert fam.rho == pytest.approx(1.0)
        sols, _ = solve_family(sp.eye(n).tocsr(), np.ones(n),
                               np.array([3.0, 0.5]), Z, rtol=1e-12)
        np.testing.assert_allclose(sols[0], Z / 4.0, rtol=1e-10)
        np.testing.assert_allclose(sols[1], Z / 1.5, rtol=1e-10)

    def test_rejects_nonpositive_mass(self):
        with pytest.raises(ValueError):
            normalize(sp.eye(2).tocsr(), np.array([1.0, 0.0]),
                      np.array([1.0]), np.ones(2))

    def test_shifts_sorted_decreasing(self):
        fam = normalize(sp.eye(3).tocsr(), np.ones(3),
                        np.array([0.1, 10.0, 1.0]), np.ones(3),
                        labels=np.array([-1, 1, 0]))
        np.testing.assert_array_equal(fam.shifts, [10.0, 1.0, 0.1])
        np.testing.assert_array_equal(fam.labels, [1, 0, -1])

    def test_scaled_operator_has_unit_sup_norm(self):
        mesh = unit_square_mesh(8)
        ops = operators(mesh)
        fam = normalize(ops.stiffness, ops.lumped_mass, np.array([1.0]),
                        np.ones(mesh.n_interior))
        d = fam.inv_sqrt_mass
        scaled = sp.diags(d) @ ops.stiffness @ sp.diags(d) / fam.rho
        assert np.max(np.abs(scaled).sum(axis=1)) == pytest.approx(1.0)

    def test_single_dof_closed_form(self):
        mesh = unit_square_mesh(2)
        ops = operators(mesh)
        alphas = np.array([0.25, 4.0])
        Z = np.array([1.5])
        sols, _ = solve_family(ops.stiffness, ops.lumped_mass, alphas, Z,
                               rtol=1e-14)
        expected = Z / (4.0 + alphas * 0.125)
        np.testing.assert_allclose(sols[:, 0], expected, rtol=1e-12)


class TestConditionBound:
    def setup_method(self):
        mesh = unit_square_mesh(8)
        ops = operators(mesh)
        quad = sinc_quadrature(0.5, 0.5)
        self.family = normalize(ops.stiffness, ops.lumped_mass, quad.shifts,
                                np.ones(mesh.n_interior), labels=quad.l)
        self.labels = quad.l

    def test_dominant_shift_limit(self):
        # the largest quadrature shift is already nearly unconditioned
        assert condition_bound(self.family, self.labels[-1]) < 1.05
        huge = normalize(sp.eye(4).tocsr(), np.ones(4), np.array([1e8]),
                         np.ones(4))
        assert condition_bound(huge, 0) < 1.0 + 1e-7

    def test_unit_shift_bound(self):
        fam = normalize(sp.eye(4).tocsr(), np.ones(4), np.array([1.0]),
                        np.ones(4))
        assert condition_bound(fam, 0) <= 2.0 + 1e-12

    def test_monotone_in_label(self):
        bounds = [condition_bound(self.family, l) for l in self.labels]
        # label increasing = shift increasing = condition nonincreasing
        assert all(b1 >= b2 - 1e-12 for b1, b2 in zip(bounds, bounds[1:]))

    def test_unknown_label(self):
        with pytest.raises(ValueError):
            condition_bound(self.family, 10 ** 9)


class TestMultishift:
    def test_diagonal_closed_form(self):
        rng = np.random.default_rng(0)
        n = 50
        d = rng.uniform(0.5, 4.0, n)
        shifts = np.array([0.01, 0.3, 2.0, 40.0])
        Z = rng.standard_normal(n)
        sols, stats = solve_family(sp.diags(d).tocsr(), np.ones(n), shifts,
                                   Z, rtol=1e-10, n_max=300)
        np.testing.assert_allclose(
            sols, Z[None, :] / (d[None, :] + shifts[:, None]), atol=1e-9)
        assert stats.n_alg2 == 0

    def test_shared_basis_matvec_budget(self):
        mesh = unit_square_mesh(16)
        ops = operators(mesh)
        quad = sinc_quadrature(0.5, 0.4)
        Z = hat_rhs(mesh)
        fam = normalize(ops.stiffness, ops.lumped_mass, quad.shifts,
                        np.ones(mesh.n_interior), labels=quad.l)
        sols, crossover, stats = solve_well_conditioned(fam, 120, 1e-8)
        assert stats.n_matvec <= 120
        assert sols.shape == (stats.n_alg1, fam.n)
        assert crossover == fam.labels[stats.n_alg1 - 1]

    def test_agrees_with_plain_cg_per_shift(self):
        mesh = unit_square_mesh(16)
        ops = operators(mesh)
        quad = sinc_quadrature(0.25, 0.5)
        Z = np.asarray(
            ops.mass @ np.sin(np.pi * mesh.vertices[mesh.interior]).prod(axis=1))
        rtol = 1e-9
        sols, stats = solve_family(ops.stiffness, ops.lumped_mass,
                                   quad.shifts, Z, labels=quad.l, rtol=rtol,
                                   n_max=500)
        mh = ops.lumped_mass
        for i in np.linspace(0, quad.n_systems - 1, 7).astype(int):
            alpha = quad.shifts[i]

            def apply(x, alpha=alpha):
                return ops.stiffness @ x + alpha * (mh * x)

            ref = plain_cg(apply, Z, rtol=1e-12)
            scale = np.linalg.norm(ref)
            assert np.linalg.norm(sols[i] - ref) <= 10 * rtol * scale

    def test_breakdown_on_indefinite_operator(self):
        A = sp.diags(np.array([1.0, -2.0, 3.0])).tocsr()
        with pytest.raises(RuntimeError):
            solve_family(A, np.ones(3), np.array([0.1]), np.ones(3))

    def test_zero_rhs(self):
        mesh = unit_square_mesh(4)
        ops = operators(mesh)
        sols, stats = solve_family(ops.stiffness, ops.lumped_mass,
                                   np.array([0.5, 5.0]),
                                   np.zeros(mesh.n_interior))
        np.testing.assert_array_equal(sols, 0.0)
        assert stats.n_matvec == 0


class TestSequentialPCG:
    def _family(self, mesh_m=8, s=0.05, k=0.45):
        mesh = unit_square_mesh(mesh_m)
        ops = operators(mesh)
        quad = sinc_quadrature(s, k)
        Z = np.asarray(assemble_rhs(mesh))
        fam = normalize(ops.stiffness, ops.lumped_mass, quad.shifts, Z,
                        labels=quad.l)
        return fam

    def test_empty_range_is_noop(self):
        fam = self._family()
        sols, stats = solve_preconditioned(fam, fam.n_shifts, 20, 1e-8)
        assert sols.shape == (0, fam.n)
        assert stats.n_alg2 == 0
        assert stats.n_prec_setups == 0

    def test_rebuild_trigger_fires_iff_cap_exceeded(self):
        fam = self._family()
        # cap 0: every solve "exceeds" the cap, so every system rebuilds
        _, stats0 = solve_preconditioned(fam, fam.n_shifts - 12, 0, 1e-10)
        assert stats0.n_prec_setups == 12
        # generous cap: only the initial setup
        _, stats1 = solve_preconditioned(fam, fam.n_shifts - 12, 500, 1e-10)
        assert stats1.n_prec_setups == 1

    def test_exact_preconditioner_single_iteration(self):
        rng = np.random.default_rng(1)
        n = 30
        d = rng.uniform(1.0, 2.0, n)
        A = sp.diags(d).tocsr()
        Z = rng.standard_normal(n)
        shifts = np.array([1e-3, 1e-4, 1e-5])
        fam = normalize(A, np.ones(n), shifts, Z)
        # cap 0 rebuilds for every shift; IC(0) of a diagonal matrix is exact
        sols, stats = solve_preconditioned(fam, 0, 0, 1e-12)
        assert all(v <= 1 for v in stats.iterations.values())
        for x, alpha in zip(sols, fam.shifts):
            np.testing.assert_allclose(fam.unnormalize(x),
                                       Z / (d + alpha), rtol=1e-10)

    def test_residuals_of_full_family(self):
        mesh = unit_square_mesh(8)
        ops = operators(mesh)
        quad = sinc_quadrature(0.05, 0.45)
        Z = np.asarray(assemble_rhs(mesh))
        sols, stats = solve_family(ops.stiffness, ops.lumped_mass,
                                   quad.shifts, Z, labels=quad.l, rtol=1e-8,
                                   n_max=8)
        assert stats.n_alg2 > 0
        assert stats.n_systems == quad.n_systems
        norm_z = np.linalg.norm(Z)
        for v, alpha in zip(sols, quad.shifts):
            r = ops.stiffness @ v + alpha * (ops.lumped_mass * v) - Z
            assert np.linalg.norm(r) <= 1e-8 * norm_z


def assemble_rhs(mesh):
    return np.asarray(operators(mesh).mass @ hat_rhs(mesh).values)


class TestStats:
    def test_split_identity(self):
        mesh = unit_square_mesh(8)
        ops = operators(mesh)
        quad = sinc_quadrature(0.5, 0.5)
        Z = assemble_rhs(mesh)
        _, stats = solve_family(ops.stiffness, ops.lumped_mass, quad.shifts,
                                Z, labels=quad.l, n_max=40)
        assert stats.n_alg1 + stats.n_alg2 == quad.n_systems
        assert stats.crossover is not None

    def test_weighted_combination_matches_sum(self):
        mesh = unit_square_mesh(8)
        ops = operators(mesh)
        quad = sinc_quadrature(0.5, 0.6)
        Z = assemble_rhs(mesh)
        sols, _ = solve_family(ops.stiffness, ops.lumped_mass, quad.shifts,
                               Z, labels=quad.l, rtol=1e-11, n_max=50)
        combined, _ = solve_family(ops.stiffness, ops.lumped_mass,
                                   quad.shifts, Z, labels=quad.l, rtol=1e-11,
                                   n_max=50, weights=quad.weights)
        np.testing.assert_allclose(combined, quad.weights @ sols,
                                   rtol=1e-9, atol=1e-13)
