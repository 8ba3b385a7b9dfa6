"""Hierarchy construction and the preconditioners as SPD operators."""

import numpy as np
import pytest
import scipy.sparse as sp

from fraclap import (GeometricMultigrid, IncompleteCholesky, MeshHierarchy,
                     unit_cube_mesh, unit_square_mesh)
from fraclap.fem import operators


class TestMeshHierarchy:
    def test_levels_reach_the_coarse_cap(self):
        hier = MeshHierarchy.for_mesh(unit_square_mesh(128))
        sizes = [m.cells_per_side for m in hier.meshes]
        assert sizes[-1] == 128
        assert all(b == 2 * a for a, b in zip(sizes, sizes[1:]))
        assert hier.meshes[0].n_interior <= MeshHierarchy.COARSE_DOFS

    def test_cached_per_mesh(self):
        mesh = unit_square_mesh(16)
        assert MeshHierarchy.for_mesh(mesh) is MeshHierarchy.for_mesh(mesh)

    def test_requires_structured_mesh(self):
        mesh = unit_square_mesh(8)
        object.__setattr__(mesh, "cells_per_side", None)
        with pytest.raises(ValueError):
            MeshHierarchy(mesh)


class TestGeometricMultigrid:
    def _prec(self, m=32, alpha=1.0, dim=2):
        mesh = unit_square_mesh(m) if dim == 2 else unit_cube_mesh(m)
        hier = MeshHierarchy.for_mesh(mesh)
        return mesh, GeometricMultigrid(hier, alpha)

    def test_symmetric_positive_on_probes(self):
        rng = np.random.default_rng(0)
        mesh, prec = self._prec(m=64, alpha=3.0)
        n = mesh.n_interior
        for _ in range(5):
            v = rng.standard_normal(n)
            w = rng.standard_normal(n)
            Bv = prec.apply(v)
            Bw = prec.apply(w)
            assert v @ Bv > 0.0
            assert w @ Bv == pytest.approx(v @ Bw, rel=1e-10)

    def test_contracts_the_error(self):
        rng = np.random.default_rng(1)
        mesh, prec = self._prec(m=64, alpha=0.0)
        ops = operators(mesh)
        x_true = rng.standard_normal(mesh.n_interior)
        b = ops.stiffness @ x_true
        x = prec.apply(b)
        rel = np.linalg.norm(x - x_true) / np.linalg.norm(x_true)
        assert rel < 0.1

    def test_three_dimensional_cycle(self):
        rng = np.random.default_rng(2)
        mesh, prec = self._prec(m=8, alpha=2.0, dim=3)
        ops = operators(mesh)
        x_true = rng.standard_normal(mesh.n_interior)
        b = ops.stiffness @ x_true + 2.0 * (ops.lumped_mass * x_true)
        x = prec.apply(b)
        assert np.linalg.norm(x - x_true) / np.linalg.norm(x_true) < 0.2


class TestIncompleteCholesky:
    def test_exact_on_diagonal(self):
        rng = np.random.default_rng(3)
        d = rng.uniform(0.5, 3.0, 25)
        prec = IncompleteCholesky(sp.diags(d).tocsr())
        v = rng.standard_normal(25)
        np.testing.assert_allclose(prec.apply(v), v / d, rtol=1e-12)

    def test_strong_preconditioner_for_fem_matrix(self):
        mesh = unit_square_mesh(12)
        ops = operators(mesh)
        A = (ops.stiffness + 0.5 * sp.diags(ops.lumped_mass)).tocsr()
        prec = IncompleteCholesky(A)
        rng = np.random.default_rng(4)
        v = rng.standard_normal(mesh.n_interior)
        # SPD on probes and a genuine approximate inverse
        assert v @ prec.apply(v) > 0.0
        x = prec.apply(A @ v)
        assert np.linalg.norm(x - v) / np.linalg.norm(v) < 0.6
