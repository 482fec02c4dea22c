"""Finite-element operators, generalized eigensolver and per-node modal features.

Linear simplex elements only. Quads and prisms are split into simplices with
fixed templates before assembly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import dijkstra

from .mesh import MeshGraph, NodeType

DENSE_LIMIT = 2000

_QUAD_SPLIT = ((0, 1, 2), (0, 2, 3))
_PRISM_SPLIT = ((0, 1, 2, 3), (1, 2, 3, 4), (2, 3, 4, 5))


class AssemblyError(ValueError):
    pass


class EigenSolverError(RuntimeError):
    def __init__(self, message: str, best_residual: float):
        super().__init__(f"{message} (best relative residual {best_residual:.3e})")
        self.best_residual = best_residual


@dataclass(frozen=True)
class Material:
    E: float = 1.0
    nu: float = 0.3
    rho: float = 1.0
    area: float = 1.0  # cross-section for 2-node bar cells

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError(f"Young's modulus must be positive, got {self.E}")
        if not self.rho > 0:
            raise ValueError(f"density must be positive, got {self.rho}")
        if not -1.0 < self.nu < 0.5:
            raise ValueError(f"Poisson ratio must lie in (-1, 0.5), got {self.nu}")


@dataclass
class FeOperators:
    K: sp.csr_matrix
    M: sp.csr_matrix
    dof_map: np.ndarray  # (N, ncomp) -> row index, -1 for eliminated DOFs
    material: Material | None = None

    @property
    def size(self) -> int:
        return self.K.shape[0]

    @property
    def ncomp(self) -> int:
        return self.dof_map.shape[1]


@dataclass
class ModalResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # (ndof, m), M-orthonormal
    dof_map: np.ndarray
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def m(self) -> int:
        return len(self.eigenvalues)

    def nodal_modes(self) -> np.ndarray:
        """Mode shapes per node, shape (N, m, ncomp); eliminated DOFs are zero."""
        n, c = self.dof_map.shape
        out = np.zeros((n, self.m, c))
        mask = self.dof_map >= 0
        for comp in range(c):
            rows = self.dof_map[mask[:, comp], comp]
            out[mask[:, comp], :, comp] = self.eigenvectors[rows]
        return out


def simplices(g: MeshGraph) -> list[tuple[int, tuple[int, ...]]]:
    """(source cell index, simplex) pairs after splitting quads and prisms."""
    out = []
    for ci, cell in enumerate(g.cells):
        if len(cell) == 4 and g.dim == 2:
            out += [(ci, tuple(cell[k] for k in tri)) for tri in _QUAD_SPLIT]
        elif len(cell) == 6:
            out += [(ci, tuple(cell[k] for k in tet)) for tet in _PRISM_SPLIT]
        else:
            out.append((ci, tuple(cell)))
    return out


def simplex_geometry(x: np.ndarray) -> tuple[float, np.ndarray]:
    """Measure and barycentric gradients (rows) of a simplex with vertices ``x``.

    Works for k-simplices embedded in higher dimension via the metric tensor.
    """
    k = x.shape[0] - 1
    jac = (x[1:] - x[0]).T  # (dim, k)
    gram = jac.T @ jac
    det = np.linalg.det(gram)
    if det <= 0:
        return 0.0, np.zeros_like(x)
    vol = math.sqrt(det) / math.factorial(k)
    g_rest = np.linalg.solve(gram, jac.T)  # (k, dim), gradients of lambda_1..k
    grads = np.vstack([-g_rest.sum(axis=0), g_rest])
    return vol, grads


def _free_dofs(n: int, ncomp: int, fixed) -> np.ndarray:
    fixed_mask = np.zeros((n, ncomp), dtype=bool)
    if isinstance(fixed, Mapping):
        for node, comps in fixed.items():
            fixed_mask[int(node), list(comps)] = True
    else:
        for node in fixed:
            fixed_mask[int(node), :] = True
    dof_map = -np.ones((n, ncomp), dtype=np.int64)
    free = ~fixed_mask
    dof_map[free] = np.arange(free.sum())
    return dof_map


def _reduce(rows, cols, vals, dof_map_full: np.ndarray, dof_map: np.ndarray, shape_full: int) -> sp.csr_matrix:
    # accumulate in element order: coo -> csr sums duplicates deterministically
    full = sp.coo_matrix((vals, (rows, cols)), shape=(shape_full, shape_full)).tocsr()
    keep = dof_map.ravel() >= 0
    idx = dof_map_full.ravel()[keep]
    return full[idx][:, idx].tocsr()


def assemble_laplacian(g: MeshGraph, bc: Iterable[int] = ()) -> FeOperators:
    """P1 stiffness (cotangent weights on triangles) and consistent mass matrix."""
    n = g.num_nodes
    dof_map = _free_dofs(n, 1, bc)
    if (dof_map >= 0).sum() == 0:
        raise AssemblyError("every node is constrained; the reduced system is empty")
    rows, cols, kv, mv = [], [], [], []
    for ci, simplex in simplices(g):
        idx = np.asarray(simplex)
        vol, grads = simplex_geometry(g.reference_positions[idx])
        if vol <= 1e-300:
            raise AssemblyError(f"cell {ci} has zero measure")
        k = len(idx) - 1
        ke = vol * grads @ grads.T
        me = vol / ((k + 1) * (k + 2)) * (np.ones((k + 1, k + 1)) + np.eye(k + 1))
        rows.append(np.repeat(idx, k + 1))
        cols.append(np.tile(idx, k + 1))
        kv.append(ke.ravel())
        mv.append(me.ravel())
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    full_map = np.arange(n)[:, None]
    K = _reduce(rows, cols, np.concatenate(kv), full_map, dof_map, n)
    M = _reduce(rows, cols, np.concatenate(mv), full_map, dof_map, n)
    K = ((K + K.T) * 0.5).tocsr()
    M = ((M + M.T) * 0.5).tocsr()
    return FeOperators(K, M, dof_map)


def _plane_strain(mat: Material) -> np.ndarray:
    E, nu = mat.E, mat.nu
    c = E / ((1 + nu) * (1 - 2 * nu))
    return c * np.array([[1 - nu, nu, 0], [nu, 1 - nu, 0], [0, 0, (1 - 2 * nu) / 2]])


def _iso3d(mat: Material) -> np.ndarray:
    E, nu = mat.E, mat.nu
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    d = np.zeros((6, 6))
    d[:3, :3] = lam
    d[np.arange(3), np.arange(3)] += 2 * mu
    d[np.arange(3, 6), np.arange(3, 6)] = mu
    return d


def _strain_matrix(grads: np.ndarray, dim: int) -> np.ndarray:
    nn = grads.shape[0]
    if dim == 2:
        b = np.zeros((3, 2 * nn))
        b[0, 0::2] = grads[:, 0]
        b[1, 1::2] = grads[:, 1]
        b[2, 0::2] = grads[:, 1]
        b[2, 1::2] = grads[:, 0]
        return b
    b = np.zeros((6, 3 * nn))
    b[0, 0::3] = grads[:, 0]
    b[1, 1::3] = grads[:, 1]
    b[2, 2::3] = grads[:, 2]
    b[3, 1::3], b[3, 2::3] = grads[:, 2], grads[:, 1]
    b[4, 0::3], b[4, 2::3] = grads[:, 2], grads[:, 0]
    b[5, 0::3], b[5, 1::3] = grads[:, 1], grads[:, 0]
    return b


def assemble_elasticity(g: MeshGraph, material: Material,
                        bc: Iterable[int] | Mapping[int, Iterable[int]] = ()) -> FeOperators:
    """Linear isotropic elasticity (plane strain in 2D) with a lumped mass matrix.

    ``bc`` is either a set of fully fixed nodes or a mapping node -> fixed
    components. Two-node cells are axial bars with cross-section ``material.area``.
    """
    dim = g.dim
    n = g.num_nodes
    dof_map = _free_dofs(n, dim, bc)
    if (dof_map >= 0).sum() == 0:
        raise AssemblyError("every DOF is constrained; the reduced system is empty")
    D = _plane_strain(material) if dim == 2 else _iso3d(material)
    rows, cols, kv = [], [], []
    mass = np.zeros(n * dim)
    x = g.reference_positions
    for ci, simplex in simplices(g):
        idx = np.asarray(simplex)
        nn = len(idx)
        dofs = (idx[:, None] * dim + np.arange(dim)).ravel()
        if nn == 2:
            d = x[idx[1]] - x[idx[0]]
            length = float(np.linalg.norm(d))
            if length <= 0:
                raise AssemblyError(f"cell {ci} has zero length")
            u = d / length
            blk = np.outer(u, u)
            ke = material.E * material.area / length * np.block([[blk, -blk], [-blk, blk]])
            cell_mass = material.rho * material.area * length
        else:
            if nn != dim + 1:
                raise AssemblyError(f"cell {ci}: {nn}-node simplex unsupported for {dim}D elasticity")
            jac = (x[idx[1:]] - x[idx[0]]).T
            signed = np.linalg.det(jac)
            if signed < 0:
                raise AssemblyError(f"cell {ci} is inverted (negative volume)")
            vol, grads = simplex_geometry(x[idx])
            if vol <= 1e-300:
                raise AssemblyError(f"cell {ci} has zero measure")
            B = _strain_matrix(grads, dim)
            ke = vol * B.T @ D @ B
            cell_mass = material.rho * vol
        rows.append(np.repeat(dofs, len(dofs)))
        cols.append(np.tile(dofs, len(dofs)))
        kv.append(ke.ravel())
        mass[dofs] += cell_mass / nn
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    full_map = np.arange(n * dim).reshape(n, dim)
    K = _reduce(rows, cols, np.concatenate(kv), full_map, dof_map, n * dim)
    K = ((K + K.T) * 0.5).tocsr()
    lumped = mass[full_map[dof_map >= 0]]
    if np.any(lumped <= 0):
        raise AssemblyError("free DOF with zero lumped mass (node not in any cell?)")
    return FeOperators(K, sp.diags(lumped, format="csr"), dof_map, material)


# ---------------------------------------------------------------------------
# eigensolver
# ---------------------------------------------------------------------------

def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    vecs = vecs.copy()
    for k in range(vecs.shape[1]):
        col = vecs[:, k]
        tol = 1e-12 * np.abs(col).max()
        nz = np.flatnonzero(np.abs(col) > tol)
        if len(nz) and col[nz[0]] < 0:
            vecs[:, k] = -col
    return vecs


def relative_residuals(K, M, lam: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    kv = K @ vecs
    r = np.linalg.norm(kv - (M @ vecs) * lam, axis=0)
    # Kphi vanishes for rigid-body modes, so measure those against the operator
    # norm instead; with tol 1e-8 this demands r <= 1e-14 ||K|| ||phi||
    floor = 1e-6 * spla.norm(K, 1) * np.linalg.norm(vecs, axis=0)
    return r / np.maximum(np.linalg.norm(kv, axis=0), floor)


def _rayleigh_ritz(K, M, basis: np.ndarray, m: int):
    kr = basis.T @ (K @ basis)
    mr = basis.T @ (M @ basis)
    lam, y = sla.eigh((kr + kr.T) / 2, (mr + mr.T) / 2)
    return lam[:m], basis @ y[:, :m]


def _refine(K, M, lam, vecs, iters: int = 3):
    """Block inverse iteration about a shift just below the wanted spectrum."""
    m = vecs.shape[1]
    scale = max(abs(lam).max(), 1e-300)
    shift = lam[0] - 1e-3 * scale if lam[0] > 1e-10 * scale else -1e-6 * scale
    lu = spla.splu((K - shift * M).tocsc())
    x = vecs
    for _ in range(iters):
        x = lu.solve(np.asarray(M @ x))
        x, _ = np.linalg.qr(x)
        lam, x = _rayleigh_ritz(K, M, x, m)
    return lam, x


def solve_generalized_eig(ops: FeOperators, m: int, tol: float = 1e-8) -> ModalResult:
    """Smallest ``m`` eigenpairs of K phi = lambda M phi, M-orthonormal, sign-fixed."""
    n = ops.size
    if not 1 <= m <= n:
        raise ValueError(f"mode count must be in 1..{n}, got {m}")
    K, M = ops.K, ops.M
    if n <= DENSE_LIMIT:
        lam, vecs = sla.eigh(K.toarray(), M.toarray(), subset_by_index=[0, m - 1])
    else:
        try:
            lam, vecs = spla.eigsh(K, k=m, M=M, sigma=0.0, which="LM")
        except RuntimeError:
            # singular K (floating body): shift slightly below zero
            s = -1e-8 * spla.norm(K, 1)
            lam, vecs = spla.eigsh(K, k=m, M=M, sigma=s, which="LM")
        order = np.argsort(lam)
        lam, vecs = lam[order], vecs[:, order]
    res = relative_residuals(K, M, lam, vecs)
    best = res.max()
    for _ in range(3):
        if best <= tol:
            break
        lam, vecs = _refine(K, M, lam, vecs)
        res = relative_residuals(K, M, lam, vecs)
        best = min(best, res.max())
    if res.max() > tol:
        raise EigenSolverError("eigensolver did not reach the residual bound", float(best))
    # M-normalise (Rayleigh-Ritz already does; dense eigh too, up to rounding)
    norms = np.sqrt(np.einsum("ij,ij->j", vecs, np.asarray(M @ vecs)))
    vecs = _fix_signs(vecs / norms)
    return ModalResult(np.asarray(lam), vecs, ops.dof_map, relative_residuals(K, M, lam, vecs))


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

@dataclass
class ModalFeatures:
    """Per-node clustering inputs: modal features and obstacle distance."""

    f_md: np.ndarray  # (N, m * ncomp)
    d_obs: np.ndarray  # (N,)
    eigenvalues: np.ndarray
    diameter: float


def mesh_diameter(g: MeshGraph) -> float:
    """Bounding-box diagonal length."""
    x = g.positions
    return float(np.linalg.norm(x.max(axis=0) - x.min(axis=0)))


def obstacle_distance(g: MeshGraph, obstacle_nodes) -> np.ndarray:
    """Graph-geodesic distance (edge lengths) to the nearest obstacle node.

    Uses mesh edges plus any world edges present on ``g``. Unreachable nodes,
    or every node when there are no obstacles, get the mesh diameter.
    """
    obstacle_nodes = np.asarray(sorted(obstacle_nodes), dtype=np.int64)
    diam = mesh_diameter(g)
    n = g.num_nodes
    if len(obstacle_nodes) == 0:
        return np.full(n, diam)
    edges = g.mesh_edges
    if len(g.world_edges):
        edges = np.concatenate([edges, g.world_edges])
    w = np.linalg.norm(g.positions[edges[:, 0]] - g.positions[edges[:, 1]], axis=1)
    w = np.maximum(w, 1e-300)  # csgraph treats explicit zeros as missing edges
    a = sp.csr_matrix((np.concatenate([w, w]),
                       (np.concatenate([edges[:, 0], edges[:, 1]]),
                        np.concatenate([edges[:, 1], edges[:, 0]]))), shape=(n, n))
    d = dijkstra(a, directed=False, indices=obstacle_nodes, min_only=True)
    d[obstacle_nodes] = 0.0
    d[~np.isfinite(d)] = diam
    return d


def modal_features(res: ModalResult | None, g: MeshGraph, obstacle_nodes=None) -> ModalFeatures:
    """Per-mode max-abs-normalised mode shapes plus obstacle features.

    For vector (solid) modes all components of a mode share one scale factor,
    giving m * ncomp columns. ``obstacle_nodes`` defaults to OBSTACLE-typed nodes.
    """
    if obstacle_nodes is None:
        obstacle_nodes = np.flatnonzero(g.node_types == NodeType.OBSTACLE)
    obstacle_nodes = np.asarray(list(obstacle_nodes), dtype=np.int64)
    n = g.num_nodes
    if res is None:
        f_md = np.zeros((n, 0))
        lam = np.zeros(0)
    else:
        modes = res.nodal_modes()  # (N, m, c)
        scale = np.abs(modes).max(axis=(0, 2))
        scale[scale == 0] = 1.0
        f_md = (modes / scale[None, :, None]).reshape(n, -1)
        lam = res.eigenvalues
    return ModalFeatures(f_md, obstacle_distance(g, obstacle_nodes), lam, mesh_diameter(g))


def default_dirichlet_nodes(g: MeshGraph) -> np.ndarray:
    """Wall and obstacle nodes: homogeneous Dirichlet set for the Laplacian path."""
    return np.flatnonzero(np.isin(g.node_types, [NodeType.WALL, NodeType.OBSTACLE]))


def compute_modal_features(g: MeshGraph, m: int = 8, physics: str = "auto",
                           material: Material | None = None) -> tuple[ModalResult, ModalFeatures]:
    """Assemble, solve and featurise in one call.

    ``auto`` picks elasticity for Lagrangian meshes (handle and obstacle nodes
    clamped) and the scalar Laplacian otherwise (wall and obstacle nodes clamped).
    """
    if physics == "auto":
        physics = "elasticity" if g.is_lagrangian else "laplacian"
    if physics == "laplacian":
        ops = assemble_laplacian(g, default_dirichlet_nodes(g))
    elif physics == "elasticity":
        fixed = np.flatnonzero(np.isin(g.node_types, [NodeType.HANDLE, NodeType.OBSTACLE, NodeType.WALL]))
        ops = assemble_elasticity(g, material or Material(), fixed)
    else:
        raise ValueError(f"unknown physics {physics!r}; expected auto, laplacian or elasticity")
    res = solve_generalized_eig(ops, min(m, ops.size))
    return res, modal_features(res, g)
