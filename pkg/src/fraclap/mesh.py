"""Structured simplicial meshes of the unit square and unit cube.

Meshes are conforming, quasi-uniform triangulations built on a regular grid
with ``m`` cells per side.  In 2D every grid square is split into two
triangles along the same (1,1) diagonal; in 3D every grid cube is split into
six tetrahedra sharing the main diagonal (Kuhn subdivision).  Both families
are self-similar under uniform (red) refinement, so ``refine_uniform``
reproduces the structured mesh at twice the resolution and nested-grid
transfer operators can be computed arithmetically.

Vertices are ordered lexicographically by coordinate, and so are the interior
degrees of freedom, which makes all derived quantities deterministic.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Mesh",
    "unit_square_mesh",
    "unit_cube_mesh",
    "refine_uniform",
    "prolongation_matrix",
    "cell_parents",
    "eval_p1",
    "write_mesh",
    "read_mesh",
]

# Kuhn subdivision: tet #p of a grid cube covers the region where the local
# coordinates sorted in decreasing order follow permutation p.
_PERMS_3D = list(itertools.permutations((0, 1, 2)))


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable simplicial mesh of the unit square/cube.

    ``cells_per_side`` is the structured grid resolution ``m``; it is None
    for meshes read back from a text dump whose structure could not be
    recognized (such meshes support assembly and norms but not refinement).
    """

    dim: int
    cells_per_side: int | None
    vertices: np.ndarray        # (n_vertices, dim)
    cells: np.ndarray           # (n_cells, dim + 1), vertex indices
    boundary: np.ndarray        # (n_vertices,) bool
    interior: np.ndarray        # interior vertex indices, lexicographic
    dof_index: np.ndarray       # (n_vertices,) dof number or -1 on boundary
    volumes: np.ndarray         # (n_cells,)
    h: float                    # length of the longest edge
    level: int = 0

    def __post_init__(self):
        for arr in (self.vertices, self.cells, self.boundary, self.interior,
                    self.dof_index, self.volumes):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def n_interior(self) -> int:
        return self.interior.shape[0]

    def __repr__(self):
        return (f"Mesh(dim={self.dim}, m={self.cells_per_side}, "
                f"vertices={self.n_vertices}, cells={self.n_cells}, "
                f"h={self.h:.4g})")


def _grid_vertices(m: int, dim: int) -> np.ndarray:
    """Vertices of the (m+1)^dim lattice, lexicographic by coordinate."""
    axes = [np.arange(m + 1, dtype=float) / m] * dim
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def _finish_mesh(dim: int, m: int, vertices: np.ndarray, cells: np.ndarray,
                 level: int) -> Mesh:
    boundary = np.zeros(vertices.shape[0], dtype=bool)
    for d in range(dim):
        boundary |= np.isclose(vertices[:, d], 0.0)
        boundary |= np.isclose(vertices[:, d], 1.0)
    interior = np.flatnonzero(~boundary)
    dof_index = np.full(vertices.shape[0], -1, dtype=np.int64)
    dof_index[interior] = np.arange(interior.size)
    volumes = _signed_volumes(vertices, cells)
    if np.any(volumes <= 0):
        raise ValueError("mesh has non-positive cell volumes")
    h = float(np.sqrt(dim) / m)
    return Mesh(dim=dim, cells_per_side=m, vertices=vertices, cells=cells,
                boundary=boundary, interior=interior, dof_index=dof_index,
                volumes=volumes, h=h, level=level)


def _signed_volumes(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    edges = vertices[cells[:, 1:]] - vertices[cells[:, :1]]
    dim = vertices.shape[1]
    if dim == 2:
        det = edges[:, 0, 0] * edges[:, 1, 1] - edges[:, 0, 1] * edges[:, 1, 0]
        return det / 2.0
    det = np.linalg.det(edges)
    return det / 6.0


def unit_square_mesh(cells_per_side: int, level: int = 0) -> Mesh:
    """Right-triangle mesh of (0,1)^2, one fixed diagonal per grid square."""
    m = int(cells_per_side)
    if m < 1:
        raise ValueError("cells_per_side must be >= 1")
    vertices = _grid_vertices(m, 2)

    def vid(i, j):
        return i * (m + 1) + j

    i, j = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    i = i.ravel()
    j = j.ravel()
    v00 = vid(i, j)
    v10 = vid(i + 1, j)
    v01 = vid(i, j + 1)
    v11 = vid(i + 1, j + 1)
    # two triangles per square: local xi >= eta first, then xi <= eta
    cells = np.empty((2 * m * m, 3), dtype=np.int64)
    cells[0::2] = np.stack([v00, v10, v11], axis=1)
    cells[1::2] = np.stack([v00, v11, v01], axis=1)
    return _finish_mesh(2, m, vertices, cells, level)


def unit_cube_mesh(cells_per_side: int, level: int = 0) -> Mesh:
    """Kuhn (six tetrahedra per cube) mesh of (0,1)^3."""
    m = int(cells_per_side)
    if m < 1:
        raise ValueError("cells_per_side must be >= 1")
    vertices = _grid_vertices(m, 3)

    strides = np.array([(m + 1) ** 2, m + 1, 1], dtype=np.int64)
    i, j, k = np.meshgrid(*[np.arange(m)] * 3, indexing="ij")
    corner = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)
    n_cubes = corner.shape[0]
    cells = np.empty((6 * n_cubes, 4), dtype=np.int64)
    eye = np.eye(3, dtype=np.int64)
    for p_idx, perm in enumerate(_PERMS_3D):
        path = np.zeros((4, 3), dtype=np.int64)
        for step, axis in enumerate(perm):
            path[step + 1] = path[step] + eye[axis]
        verts = corner[:, None, :] + path[None, :, :]   # (n_cubes, 4, 3)
        tet = verts @ strides
        # odd permutations give negative orientation; swap two vertices
        sign = (-1) ** sum(perm[a] > perm[b]
                           for a in range(3) for b in range(a + 1, 3))
        if sign < 0:
            tet = tet[:, [0, 1, 3, 2]]
        cells[p_idx::6] = tet
    return _finish_mesh(3, m, vertices, cells, level)


def refine_uniform(mesh: Mesh) -> Mesh:
    """Bisect every edge: the structured mesh at twice the resolution.

    Both structured families are self-similar under red refinement, so the
    refined mesh is rebuilt directly at 2m cells per side; nestedness of the
    P1 spaces is exercised by the transfer operators below.
    """
    if mesh.cells_per_side is None:
        raise ValueError("refinement requires a structured mesh")
    maker = unit_square_mesh if mesh.dim == 2 else unit_cube_mesh
    return maker(2 * mesh.cells_per_side, level=mesh.level + 1)


def _int_coords(mesh: Mesh) -> np.ndarray:
    """Vertex coordinates as exact integers on the m-grid."""
    m = mesh.cells_per_side
    q = np.rint(mesh.vertices * m).astype(np.int64)
    return q


def prolongation_matrix(coarse: Mesh, fine: Mesh) -> sp.csr_matrix:
    """P1 interpolation between nested structured meshes (interior dofs).

    Fine vertices sit either on coarse vertices or on midpoints of coarse
    edges: the parity of the integer fine-grid coordinates identifies which,
    and the offending edge always exists because the fixed diagonal (2D) and
    the Kuhn edge directions (3D) span every {0,1}^dim offset.
    """
    if coarse.dim != fine.dim:
        raise ValueError("dimension mismatch")
    mc, mf = coarse.cells_per_side, fine.cells_per_side
    if mc is None or mf is None or mf != 2 * mc:
        raise ValueError("prolongation requires fine = refine(coarse)")

    qf = _int_coords(fine)[fine.interior]        # integer coords on 2m grid
    parity = qf % 2
    strides = np.array([(mc + 1) ** d for d in range(coarse.dim - 1, -1, -1)],
                       dtype=np.int64)

    rows, cols, vals = [], [], []
    is_vertex = ~parity.any(axis=1)
    # coincident coarse vertices
    vherit = (qf[is_vertex] // 2) @ strides
    cdof = coarse.dof_index[vherit]
    rows.append(np.flatnonzero(is_vertex)[cdof >= 0])
    cols.append(cdof[cdof >= 0])
    vals.append(np.ones(rows[-1].size))
    # edge midpoints
    mid = ~is_vertex
    for end_sign in (-1, +1):
        endpoint = (qf[mid] + end_sign * parity[mid]) // 2
        vids = endpoint @ strides
        cdof = coarse.dof_index[vids]
        keep = cdof >= 0
        rows.append(np.flatnonzero(mid)[keep])
        cols.append(cdof[keep])
        vals.append(np.full(keep.sum(), 0.5))

    P = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(fine.n_interior, coarse.n_interior))
    return P.tocsr()


def _locate_cells_int(mesh: Mesh, num: np.ndarray, denom: int) -> np.ndarray:
    """Cells containing points given as exact fractions num/denom."""
    m = mesh.cells_per_side
    t = num * m
    idx = np.clip(t // denom, 0, m - 1)
    loc = t - idx * denom                      # local coords, scaled by denom
    if mesh.dim == 2:
        square = idx[:, 0] * m + idx[:, 1]
        upper = loc[:, 0] < loc[:, 1]
        return 2 * square + upper.astype(np.int64)
    cube = (idx[:, 0] * m + idx[:, 1]) * m + idx[:, 2]
    order = np.argsort(-loc, axis=1, kind="stable")
    code = order[:, 0] * 9 + order[:, 1] * 3 + order[:, 2]
    perm_of_code = np.full(27, -1, dtype=np.int64)
    for p_idx, perm in enumerate(_PERMS_3D):
        perm_of_code[perm[0] * 9 + perm[1] * 3 + perm[2]] = p_idx
    return 6 * cube + perm_of_code[code]


def cell_parents(coarse: Mesh, fine: Mesh) -> np.ndarray:
    """For each fine cell, the coarse cell containing it (nested meshes)."""
    mc, mf = coarse.cells_per_side, fine.cells_per_side
    if mc is None or mf is None or mf % mc != 0:
        raise ValueError("cell_parents requires nested structured meshes")
    qf = _int_coords(fine)
    d1 = fine.dim + 1
    centroid_num = qf[fine.cells].sum(axis=1)     # integers over mf * (d+1)
    return _locate_cells_int(coarse, centroid_num, mf * d1)


def _barycentric(mesh: Mesh, cells: np.ndarray, points: np.ndarray):
    v = mesh.vertices[mesh.cells[cells]]
    edges = np.swapaxes(v[:, 1:, :] - v[:, :1, :], 1, 2)
    rhs = (points - v[:, 0, :])[:, :, None]
    lam_rest = np.linalg.solve(edges, rhs)[:, :, 0]
    lam0 = 1.0 - lam_rest.sum(axis=1)
    return np.concatenate([lam0[:, None], lam_rest], axis=1)


def eval_p1(mesh: Mesh, vertex_values: np.ndarray,
            points: np.ndarray) -> np.ndarray:
    """Evaluate a P1 function (given by all-vertex values) at points."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    m = mesh.cells_per_side
    if m is None:
        raise ValueError("point evaluation requires a structured mesh")
    # emulate the exact integer location on a fine auxiliary denominator
    denom = 2 ** 20
    num = np.rint(points * denom).astype(np.int64)
    cells = _locate_cells_int(mesh, num, denom)
    lam = _barycentric(mesh, cells, points)
    return np.einsum("pk,pk->p", lam, vertex_values[mesh.cells[cells]])


def write_mesh(mesh: Mesh, path) -> None:
    """Dump a mesh as plain text: header, vertex lines, cell lines."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.dim} {mesh.n_vertices} {mesh.n_cells}\n")
        for v in mesh.vertices:
            fh.write(" ".join(f"{x:.17g}" for x in v) + "\n")
        for c in mesh.cells:
            fh.write(" ".join(str(i) for i in c) + "\n")


def read_mesh(path) -> Mesh:
    """Read a mesh dump; recognizes structured meshes by their vertex grid."""
    with open(path) as fh:
        dim, nv, nc = (int(t) for t in fh.readline().split())
        vertices = np.array([[float(t) for t in fh.readline().split()]
                             for _ in range(nv)])
        cells = np.array([[int(t) for t in fh.readline().split()]
                          for _ in range(nc)], dtype=np.int64)
    if vertices.shape != (nv, dim) or cells.shape != (nc, dim + 1):
        raise ValueError("malformed mesh file")
    m = round((nc / (2 if dim == 2 else 6)) ** (1.0 / dim))
    # exact structured layout check: vertex count and lattice positions
    structured = False
    if nc == (2 if dim == 2 else 6) * m ** dim and nv == (m + 1) ** dim:
        lattice = _grid_vertices(m, dim)
        structured = np.allclose(np.sort(vertices.ravel()),
                                 np.sort(lattice.ravel()), atol=1e-12)
    if structured:
        q = np.rint(vertices * m).astype(np.int64)
        strides = np.array([(m + 1) ** d for d in range(dim - 1, -1, -1)])
        if np.array_equal(q @ strides, np.arange(nv)):
            ref = unit_square_mesh(m) if dim == 2 else unit_cube_mesh(m)
            if np.array_equal(ref.cells[np.lexsort(ref.cells.T[::-1])],
                              cells[np.lexsort(cells.T[::-1])]):
                return ref
    boundary = np.zeros(nv, dtype=bool)
    for d in range(dim):
        boundary |= np.isclose(vertices[:, d], vertices[:, d].min())
        boundary |= np.isclose(vertices[:, d], vertices[:, d].max())
    interior = np.flatnonzero(~boundary)
    dof_index = np.full(nv, -1, dtype=np.int64)
    dof_index[interior] = np.arange(interior.size)
    volumes = _signed_volumes(vertices, cells)
    edges = vertices[cells[:, 1:]] - vertices[cells[:, :1]]
    h = float(np.sqrt((edges ** 2).sum(axis=2)).max())
    return Mesh(dim=dim, cells_per_side=None, vertices=vertices, cells=cells,
                boundary=boundary, interior=interior, dof_index=dof_index,
                volumes=np.abs(volumes), h=h, level=0)
