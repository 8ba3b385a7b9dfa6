"""P1/P0 finite element assembly on simplicial meshes.

All matrices live on the interior degrees of freedom only (homogeneous
Dirichlet values are eliminated, which keeps every operator symmetric
positive definite).  Loads of P1/P0 data are integrated exactly; pointwise
right-hand sides use a fixed degree-2 simplex rule.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh

__all__ = [
    "NodalFunction",
    "CellwiseFunction",
    "assemble_stiffness",
    "assemble_mass",
    "lump_mass",
    "assemble_load",
    "project_p0",
    "interpolate",
    "l2_norm",
    "h1_seminorm",
    "l2_inner",
    "operators",
    "simplex_quadrature",
]


@dataclass(frozen=True, eq=False)
class NodalFunction:
    """Piecewise linear function vanishing on the boundary.

    ``values`` holds the coefficients at interior vertices in mesh dof order.
    """

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.mesh.n_interior,):
            raise ValueError("coefficient length must equal the interior dof count")

    def full_values(self) -> np.ndarray:
        out = np.zeros(self.mesh.n_vertices)
        out[self.mesh.interior] = self.values
        return out


@dataclass(frozen=True, eq=False)
class CellwiseFunction:
    """Piecewise constant function, one value per cell."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.mesh.n_cells,):
            raise ValueError("coefficient length must equal the cell count")


# barycentric points and weights (weights sum to 1, scaled by |T| on use)
_QUADRATURE = {
    (2, 2): (np.array([[0.5, 0.5, 0.0],
                       [0.0, 0.5, 0.5],
                       [0.5, 0.0, 0.5]]),
             np.full(3, 1.0 / 3.0)),
    (3, 2): (np.array([[0.5854101966249685, 0.1381966011250105,
                        0.1381966011250105, 0.1381966011250105],
                       [0.1381966011250105, 0.5854101966249685,
                        0.1381966011250105, 0.1381966011250105],
                       [0.1381966011250105, 0.1381966011250105,
                        0.5854101966249685, 0.1381966011250105],
                       [0.1381966011250105, 0.1381966011250105,
                        0.1381966011250105, 0.5854101966249685]]),
             np.full(4, 0.25)),
    # Dunavant degree-4 rule, 6 points, all weights positive
    (2, 4): (np.array([[0.108103018168070, 0.445948490915965, 0.445948490915965],
                       [0.445948490915965, 0.108103018168070, 0.445948490915965],
                       [0.445948490915965, 0.445948490915965, 0.108103018168070],
                       [0.816847572980459, 0.091576213509771, 0.091576213509771],
                       [0.091576213509771, 0.816847572980459, 0.091576213509771],
                       [0.091576213509771, 0.091576213509771, 0.816847572980459]]),
             np.array([0.223381589678011, 0.223381589678011, 0.223381589678011,
                       0.109951743655322, 0.109951743655322, 0.109951743655322])),
}


def simplex_quadrature(dim: int, degree: int):
    """Barycentric quadrature rule exact for polynomials up to ``degree``."""
    key = (dim, 2 if degree <= 2 else 4)
    if key not in _QUADRATURE:
        raise ValueError(f"no rule for dim={dim}, degree={degree}")
    return _QUADRATURE[key]


def _gradients(mesh: Mesh) -> np.ndarray:
    """Barycentric gradients, shape (n_cells, dim+1, dim)."""
    v = mesh.vertices[mesh.cells]
    edges = np.swapaxes(v[:, 1:, :] - v[:, :1, :], 1, 2)  # columns = edges
    inv = np.linalg.inv(edges)
    grads = np.empty((mesh.n_cells, mesh.dim + 1, mesh.dim))
    grads[:, 1:, :] = inv          # grad of barycentric i = row i of B^{-1}
    grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)
    return grads


def _assemble(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    """Scatter per-cell (d+1)x(d+1) blocks into the interior-dof matrix."""
    d1 = mesh.dim + 1
    dofs = mesh.dof_index[mesh.cells]                     # (nc, d1)
    rows = np.repeat(dofs, d1, axis=1).ravel()
    cols = np.tile(dofs, (1, d1)).ravel()
    vals = local.reshape(mesh.n_cells, -1).ravel()
    keep = (rows >= 0) & (cols >= 0)
    n = mesh.n_interior
    mat = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])),
                        shape=(n, n)).tocsr()
    return (mat + mat.T) * 0.5                            # exact symmetry


def assemble_stiffness(mesh: Mesh) -> sp.csr_matrix:
    """Stiffness matrix of the Dirichlet Laplacian on interior dofs."""
    grads = _gradients(mesh)
    local = np.einsum("c,cid,cjd->cij", mesh.volumes, grads, grads)
    return _assemble(mesh, local)


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix on interior dofs (exact integration)."""
    d1 = mesh.dim + 1
    ref = (np.ones((d1, d1)) + np.eye(d1)) / (d1 * (d1 + 1))
    local = mesh.volumes[:, None, None] * ref[None, :, :]
    return _assemble(mesh, local)


def lump_mass(M: sp.spmatrix) -> np.ndarray:
    """Row-sum lumping; returns the diagonal as a vector."""
    diag = np.asarray(M.sum(axis=1)).ravel()
    if np.any(diag <= 0):
        raise ValueError("lumped mass has non-positive entries")
    return diag


class Operators(NamedTuple):
    stiffness: sp.csr_matrix
    mass: sp.csr_matrix
    lumped_mass: np.ndarray


_op_cache: "weakref.WeakKeyDictionary[Mesh, Operators]" = weakref.WeakKeyDictionary()


def operators(mesh: Mesh) -> Operators:
    """Assembled (A, M, lumped M) for a mesh, cached per mesh object."""
    ops = _op_cache.get(mesh)
    if ops is None:
        A = assemble_stiffness(mesh)
        M = assemble_mass(mesh)
        ops = Operators(A, M, lump_mass(M))
        _op_cache[mesh] = ops
    return ops


def _quad_points(mesh: Mesh, degree: int):
    lam, w = simplex_quadrature(mesh.dim, degree)
    pts = np.einsum("qk,ckd->cqd", lam, mesh.vertices[mesh.cells])
    return lam, w, pts


def assemble_load(mesh: Mesh, f) -> np.ndarray:
    """Load vector (f, phi_i) over interior dofs.

    P1 and P0 inputs are integrated exactly; callables with a degree-2 rule.
    """
    if isinstance(f, NodalFunction):
        if f.mesh is not mesh:
            raise ValueError("mesh mismatch")
        return operators(mesh).mass @ f.values
    d1 = mesh.dim + 1
    if isinstance(f, CellwiseFunction):
        if f.mesh is not mesh:
            raise ValueError("mesh mismatch")
        contrib = f.values * mesh.volumes / d1
        out = np.zeros(mesh.n_vertices)
        np.add.at(out, mesh.cells.ravel(),
                  np.repeat(contrib, d1))
        return out[mesh.interior]
    lam, w, pts = _quad_points(mesh, degree=2)
    fvals = f(pts.reshape(-1, mesh.dim)).reshape(mesh.n_cells, -1)
    cell_contrib = np.einsum("c,q,cq,qk->ck", mesh.volumes, w, fvals, lam)
    out = np.zeros(mesh.n_vertices)
    np.add.at(out, mesh.cells.ravel(), cell_contrib.ravel())
    return out[mesh.interior]


def project_p0(mesh: Mesh, v) -> CellwiseFunction:
    """L2-orthogonal projection onto piecewise constants (cell means)."""
    if isinstance(v, CellwiseFunction):
        if v.mesh is not mesh:
            raise ValueError("mesh mismatch")
        return CellwiseFunction(mesh, v.values.copy())
    if isinstance(v, NodalFunction):
        if v.mesh is not mesh:
            raise ValueError("mesh mismatch")
        full = v.full_values()
        return CellwiseFunction(mesh, full[mesh.cells].mean(axis=1))
    lam, w, pts = _quad_points(mesh, degree=2)
    fvals = v(pts.reshape(-1, mesh.dim)).reshape(mesh.n_cells, -1)
    return CellwiseFunction(mesh, fvals @ w)


def interpolate(mesh: Mesh, f: Callable) -> NodalFunction:
    """Nodal interpolant of a pointwise function (boundary values dropped)."""
    vals = f(mesh.vertices[mesh.interior])
    return NodalFunction(mesh, np.asarray(vals, dtype=float))


def l2_norm(v) -> float:
    """L2 norm via the Gram matrix (P1) or cell volumes (P0)."""
    if isinstance(v, NodalFunction):
        M = operators(v.mesh).mass
        return float(np.sqrt(max(v.values @ (M @ v.values), 0.0)))
    if isinstance(v, CellwiseFunction):
        return float(np.sqrt(v.mesh.volumes @ (v.values ** 2)))
    raise TypeError("expected a NodalFunction or CellwiseFunction")


def h1_seminorm(v: NodalFunction) -> float:
    """H1 seminorm via the stiffness Gram matrix."""
    A = operators(v.mesh).stiffness
    return float(np.sqrt(max(v.values @ (A @ v.values), 0.0)))


def l2_inner(u, v) -> float:
    """Exact L2 inner product of P1/P0 functions on a shared mesh."""
    if u.mesh is not v.mesh:
        raise ValueError("mesh mismatch")
    if isinstance(u, NodalFunction) and isinstance(v, NodalFunction):
        return float(u.values @ (operators(u.mesh).mass @ v.values))
    if isinstance(u, CellwiseFunction) and isinstance(v, CellwiseFunction):
        return float(u.mesh.volumes @ (u.values * v.values))
    if isinstance(u, CellwiseFunction):
        u, v = v, u
    # P1 against P0: the integral of P1 over a simplex is |T| * vertex mean
    mesh = u.mesh
    means = u.full_values()[mesh.cells].mean(axis=1)
    return float(mesh.volumes @ (means * v.values))
