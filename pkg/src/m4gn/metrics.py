"""Mesh-quality, segmentation-quality and rollout error metrics."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .mesh import MeshGraph, SegmentAssignment

log = logging.getLogger(__name__)

AR_CAP = 1e6
_PRISM_TETS = ((0, 1, 2, 3), (1, 2, 3, 4), (2, 3, 4, 5))
_QUAD_TRIS = ((0, 1, 2), (0, 2, 3))


def _points(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or len(a) == 0:
        raise ValueError("point sets must be non-empty (n, dim) arrays")
    return a


def directed_hausdorff(a, b) -> float:
    a, b = _points(a), _points(b)
    d, _ = cKDTree(b).query(a)
    return float(d.max())


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance (max of both directed distances)."""
    return max(directed_hausdorff(a, b), directed_hausdorff(b, a))


def chamfer(a, b) -> float:
    """Sum of mean squared nearest-neighbour distances in both directions."""
    a, b = _points(a), _points(b)
    dab, _ = cKDTree(b).query(a)
    dba, _ = cKDTree(a).query(b)
    return float(np.mean(dab ** 2) + np.mean(dba ** 2))


# ---------------------------------------------------------------------------
# cell geometry
# ---------------------------------------------------------------------------

def _tri_area(p) -> float:
    u, v = p[1] - p[0], p[2] - p[0]
    if len(u) == 2:
        return 0.5 * abs(u[0] * v[1] - u[1] * v[0])
    return 0.5 * float(np.linalg.norm(np.cross(u, v)))


def _tet_volume(p) -> float:
    return abs(float(np.linalg.det(np.stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]])))) / 6.0


def cell_volume(pos: np.ndarray, cell, dim: int) -> float:
    p = pos[list(cell)]
    n = len(cell)
    if n == 2:
        return float(np.linalg.norm(p[1] - p[0]))
    if n == 3:
        return _tri_area(p)
    if n == 4 and dim == 2:
        return sum(_tri_area(p[list(t)]) for t in _QUAD_TRIS)
    if n == 4:
        return _tet_volume(p)
    if n == 6:
        return sum(_tet_volume(p[list(t)]) for t in _PRISM_TETS)
    raise ValueError(f"unsupported cell size {n}")


def cell_faces(cell, dim: int) -> list[tuple[int, ...]]:
    """(d-1)-faces of a cell as sorted node tuples."""
    c = list(cell)
    n = len(c)
    if n == 2:
        faces = [(c[0],), (c[1],)]
    elif n == 3 and dim == 2:
        faces = [(c[0], c[1]), (c[1], c[2]), (c[0], c[2])]
    elif n == 4 and dim == 2:
        faces = [(c[0], c[1]), (c[1], c[2]), (c[2], c[3]), (c[0], c[3])]
    elif n == 3:  # surface triangles in 3D: edges are the shared facets
        faces = [(c[0], c[1]), (c[1], c[2]), (c[0], c[2])]
    elif n == 4:
        faces = [(c[1], c[2], c[3]), (c[0], c[2], c[3]), (c[0], c[1], c[3]), (c[0], c[1], c[2])]
    elif n == 6:
        faces = [(c[0], c[1], c[2]), (c[3], c[4], c[5]), (c[0], c[1], c[4], c[3]),
                 (c[1], c[2], c[5], c[4]), (c[0], c[2], c[5], c[3])]
    else:
        raise ValueError(f"unsupported cell size {n}")
    return [tuple(sorted(f)) for f in faces]


def cell_neighbors(cells, dim: int) -> list[list[int]]:
    by_face = defaultdict(list)
    for ci, c in enumerate(cells):
        for f in cell_faces(c, dim):
            by_face[f].append(ci)
    nbrs = [set() for _ in cells]
    for owners in by_face.values():
        for a in owners:
            for b in owners:
                if a != b:
                    nbrs[a].add(b)
    return [sorted(s) for s in nbrs]


def mesh_continuity(g: MeshGraph, positions: np.ndarray | None = None) -> float:
    """Mean over cells of max/min volume among face-adjacent neighbour cells."""
    pos = g.positions if positions is None else positions
    vol = np.array([cell_volume(pos, c, g.dim) for c in g.cells])
    nbrs = cell_neighbors(g.cells, g.dim)
    ratios = np.ones(len(vol))
    isolated = 0
    for i, nb in enumerate(nbrs):
        if not nb:
            isolated += 1
            continue
        v = vol[nb]
        vmin = v.min()
        ratios[i] = v.max() / vmin if vmin > 0 else AR_CAP
    if isolated:
        log.info("mesh_continuity: %d cells without face neighbours contribute 1", isolated)
    return float(ratios.mean())


def element_aspect_ratios(pos: np.ndarray, cells, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Aspect ratio per element (quads and prisms split) and a degenerate flag."""
    ars, bad = [], []
    for c in cells:
        c = list(c)
        if len(c) == 4 and dim == 2:
            parts = [[c[k] for k in t] for t in _QUAD_TRIS]
        elif len(c) == 6:
            parts = [[c[k] for k in t] for t in _PRISM_TETS]
        else:
            parts = [c]
        for e in parts:
            p = pos[e]
            lmax = max(np.linalg.norm(p[a] - p[b]) for a in range(len(e)) for b in range(a + 1, len(e)))
            if len(e) == 3:
                area = _tri_area(p)
                ok = area > 1e-14 * max(lmax, 1e-300) ** 2
                ars.append(lmax / (2 * math.sqrt(math.sqrt(3) * area)) if ok else np.nan)
            elif len(e) == 4:
                vol = _tet_volume(p)
                ok = vol > 1e-14 * max(lmax, 1e-300) ** 3
                ars.append(math.sqrt(6) * lmax / vol ** (1 / 3) if ok else np.nan)
            else:
                raise ValueError("aspect ratio needs triangles or tetrahedra")
            bad.append(not ok)
    return np.asarray(ars), np.asarray(bad)


def aspect_ratio_error(g_pred: MeshGraph, g_true: MeshGraph) -> tuple[float, int]:
    """Mean |AR_pred - AR_true| over elements and the number of capped elements."""
    if g_pred.cells != g_true.cells:
        raise ValueError("aspect_ratio_error needs identical cell lists")
    ap, bp = element_aspect_ratios(g_pred.positions, g_pred.cells, g_pred.dim)
    at, bt = element_aspect_ratios(g_true.positions, g_true.cells, g_true.dim)
    flagged = bp | bt
    err = np.where(flagged, AR_CAP, np.abs(ap - at))
    if flagged.any():
        log.warning("aspect_ratio_error: %d degenerate elements capped at %g", int(flagged.sum()), AR_CAP)
    return float(err.mean()), int(flagged.sum())


# ---------------------------------------------------------------------------
# segmentation quality
# ---------------------------------------------------------------------------

def _degrees(g: MeshGraph) -> np.ndarray:
    return np.bincount(g.mesh_edges.ravel(), minlength=g.num_nodes).astype(float)


def conductance(g: MeshGraph, a: SegmentAssignment) -> tuple[np.ndarray, list[int]]:
    """Per-segment cut / min(vol(S), vol(complement)); zero-volume sides give 0 (flagged)."""
    deg = _degrees(g)
    e = g.mesh_edges
    la, lb = a.labels[e[:, 0]], a.labels[e[:, 1]]
    crossing = la != lb
    cut = np.bincount(la[crossing], minlength=a.K) + np.bincount(lb[crossing], minlength=a.K)
    vol = np.bincount(a.labels, weights=deg, minlength=a.K)
    denom = np.minimum(vol, deg.sum() - vol)
    flagged = [int(k) for k in np.flatnonzero(denom == 0)]
    out = np.where(denom > 0, cut / np.where(denom > 0, denom, 1.0), 0.0)
    return out, flagged


def edge_cut_ratio(g: MeshGraph, a: SegmentAssignment) -> float:
    e = g.mesh_edges
    if len(e) == 0:
        raise ValueError("edge_cut_ratio is undefined on an edgeless graph")
    return float(np.mean(a.labels[e[:, 0]] != a.labels[e[:, 1]]))


def silhouette(g: MeshGraph, a: SegmentAssignment, space: str = "positions",
               features: np.ndarray | None = None) -> float:
    """Mean silhouette over nodes; singleton segments score 0."""
    if a.K < 2:
        raise ValueError("silhouette needs at least two segments")
    if space == "positions":
        x = g.positions
    elif space == "features":
        x = g.node_features if features is None else features
    else:
        raise ValueError(f"unknown distance space {space!r}")
    d = cdist(x, x)
    n = len(x)
    onehot = np.zeros((n, a.K))
    onehot[np.arange(n), a.labels] = 1.0
    sizes = onehot.sum(axis=0)
    sums = d @ onehot  # (n, K) summed distance from node to each segment
    own = a.labels
    own_size = sizes[own]
    with np.errstate(divide="ignore", invalid="ignore"):
        a_i = sums[np.arange(n), own] / (own_size - 1)
        mean_other = sums / sizes[None, :]
    mean_other[np.arange(n), own] = np.inf
    mean_other[:, sizes == 0] = np.inf
    b_i = mean_other.min(axis=1)
    s = np.zeros(n)
    ok = own_size > 1
    denom = np.maximum(a_i, b_i)
    valid = ok & (denom > 0)
    s[valid] = (b_i[valid] - a_i[valid]) / denom[valid]
    if (~ok).any():
        log.info("silhouette: %d nodes in singleton segments scored 0", int((~ok).sum()))
    return float(s.mean())


def rollout_rmse(pred, truth, horizon: int | str = "all") -> float:
    """RMS over the first ``horizon`` frames, nodes and components."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if horizon != "all":
        pred, truth = pred[: int(horizon)], truth[: int(horizon)]
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    GF_h: float
    GF_c: float
    MC: float
    MC_true: float
    MC_error: float
    AR_error: float
    AR_flagged: int
    conductance: list
    conductance_mean: float
    conductance_flagged: list
    edge_cut_ratio: float
    silhouette: float
    rmse_1: float
    rmse_50: float
    rmse_all: float
    frames: list = field(default_factory=list)
    units: dict = field(default_factory=lambda: {
        "GF_h": "length", "GF_c": "length^2", "MC": "ratio", "AR_error": "dimensionless",
        "rmse": "output quantity"})

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(pred_positions: np.ndarray, true_positions: np.ndarray, mesh: MeshGraph,
             seg: SegmentAssignment | None, pred_outputs=None, true_outputs=None) -> MetricsReport:
    """Average mesh metrics over predicted frames 1..T and attach rollout errors.

    Positions have shape (T+1, N, dim) with frame 0 the shared initial state.
    Outputs default to positions; pass field arrays for Eulerian runs.
    """
    T = len(pred_positions) - 1
    frames = range(1, T + 1) if T > 0 else range(0, 1)
    gh, gc, mc, mct, are, arf = [], [], [], [], [], 0
    for k in frames:
        p, t = pred_positions[k], true_positions[k]
        gh.append(hausdorff(t, p))
        gc.append(chamfer(t, p))
        if mesh.cells:
            mc.append(mesh_continuity(mesh, p))
            mct.append(mesh_continuity(mesh, t))
            e, f = aspect_ratio_error(mesh.with_positions(p), mesh.with_positions(t))
            are.append(e)
            arf += f
    po = pred_positions if pred_outputs is None else pred_outputs
    to = true_positions if true_outputs is None else true_outputs
    po, to = np.asarray(po)[1:], np.asarray(to)[1:]
    if seg is not None and seg.K >= 2:
        cond, cflag = conductance(mesh, seg)
        sil = silhouette(mesh, seg)
    else:
        cond, cflag = (np.zeros(1), [0]) if seg is not None else (np.zeros(0), [])
        sil = 0.0
    mean = lambda xs: float(np.mean(xs)) if len(xs) else 0.0  # noqa: E731
    return MetricsReport(
        GF_h=mean(gh), GF_c=mean(gc), MC=mean(mc), MC_true=mean(mct),
        MC_error=mean(np.abs(np.asarray(mc) - np.asarray(mct))) if mc else 0.0,
        AR_error=mean(are), AR_flagged=arf,
        conductance=cond.tolist(), conductance_mean=mean(cond), conductance_flagged=cflag,
        edge_cut_ratio=edge_cut_ratio(mesh, seg) if seg is not None else 0.0,
        silhouette=sil,
        rmse_1=rollout_rmse(po, to, 1) if len(po) else 0.0,
        rmse_50=rollout_rmse(po, to, 50) if len(po) else 0.0,
        rmse_all=rollout_rmse(po, to) if len(po) else 0.0,
        frames=[int(frames.start), int(frames.stop - 1)])
