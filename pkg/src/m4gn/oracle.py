"""Naive reference implementations of the metrics, used as a cross-check.

Everything here is written with plain Python loops over pairs, cells and
edges so that it shares no code path with :mod:`m4gn.metrics`.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import Delaunay

from . import metrics
from .mesh import MeshGraph, SegmentAssignment, make_mesh


def _dist(p, q) -> float:
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(p, q)))


def hausdorff(A, B) -> float:
    fwd = max(min(_dist(a, b) for b in B) for a in A)
    bwd = max(min(_dist(b, a) for a in A) for b in B)
    return max(fwd, bwd)


def chamfer(A, B) -> float:
    fwd = sum(min(_dist(a, b) ** 2 for b in B) for a in A) / len(A)
    bwd = sum(min(_dist(b, a) ** 2 for a in A) for b in B) / len(B)
    return fwd + bwd


def _area2(p, q, r) -> float:
    if len(p) == 2:
        return abs((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])) / 2
    u = [q[i] - p[i] for i in range(3)]
    v = [r[i] - p[i] for i in range(3)]
    c = (u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0])
    return math.sqrt(sum(x * x for x in c)) / 2


def _vol3(p, q, r, s) -> float:
    a = [q[i] - p[i] for i in range(3)]
    b = [r[i] - p[i] for i in range(3)]
    c = [s[i] - p[i] for i in range(3)]
    det = (a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
           + a[2] * (b[0] * c[1] - b[1] * c[0]))
    return abs(det) / 6


def _simplex_parts(cell, dim):
    c = list(cell)
    if len(c) == 4 and dim == 2:
        return [[c[0], c[1], c[2]], [c[0], c[2], c[3]]]
    if len(c) == 6:
        return [[c[0], c[1], c[2], c[3]], [c[1], c[2], c[3], c[4]], [c[2], c[3], c[4], c[5]]]
    return [c]


def _volume(pos, cell, dim) -> float:
    total = 0.0
    for part in _simplex_parts(cell, dim):
        pts = [list(pos[i]) for i in part]
        if len(pts) == 2:
            total += _dist(pts[0], pts[1])
        elif len(pts) == 3:
            total += _area2(*pts)
        else:
            total += _vol3(*pts)
    return total


def mesh_continuity(g: MeshGraph, pos=None) -> float:
    pos = g.positions if pos is None else pos
    cells = g.cells
    vols = [_volume(pos, c, g.dim) for c in cells]
    total = 0.0
    for i in range(len(cells)):
        # simplices sharing a facet share exactly ``dim`` nodes
        nb = [vols[j] for j in range(len(cells))
              if j != i and len(set(cells[i]) & set(cells[j])) >= g.dim]
        total += (max(nb) / min(nb)) if nb else 1.0
    return total / len(cells)


def _ar(pos, part) -> float:
    pts = [list(pos[i]) for i in part]
    lmax = max(_dist(pts[a], pts[b]) for a in range(len(pts)) for b in range(a + 1, len(pts)))
    if len(pts) == 3:
        return lmax / (2 * math.sqrt(math.sqrt(3) * _area2(*pts)))
    return math.sqrt(6) * lmax / _vol3(*pts) ** (1 / 3)


def aspect_ratio_error(g_pred: MeshGraph, g_true: MeshGraph) -> float:
    errs = []
    for cell in g_true.cells:
        for part in _simplex_parts(cell, g_true.dim):
            errs.append(abs(_ar(g_pred.positions, part) - _ar(g_true.positions, part)))
    return sum(errs) / len(errs)


def conductance(g: MeshGraph, a: SegmentAssignment) -> list[float]:
    edges = [tuple(e) for e in g.mesh_edges.tolist()]
    deg = [0] * g.num_nodes
    for u, v in edges:
        deg[u] += 1
        deg[v] += 1
    out = []
    for k in range(a.K):
        inside = {i for i in range(g.num_nodes) if a.labels[i] == k}
        cut = sum(1 for u, v in edges if (u in inside) != (v in inside))
        vol_s = sum(deg[i] for i in inside)
        vol_c = sum(deg[i] for i in range(g.num_nodes) if i not in inside)
        m = min(vol_s, vol_c)
        out.append(cut / m if m > 0 else 0.0)
    return out


def edge_cut_ratio(g: MeshGraph, a: SegmentAssignment) -> float:
    edges = g.mesh_edges.tolist()
    return sum(1 for u, v in edges if a.labels[u] != a.labels[v]) / len(edges)


def silhouette(g: MeshGraph, a: SegmentAssignment) -> float:
    pos = g.positions.tolist()
    n = len(pos)
    lab = a.labels.tolist()
    total = 0.0
    for i in range(n):
        own = [j for j in range(n) if lab[j] == lab[i] and j != i]
        if not own:
            continue
        ai = sum(_dist(pos[i], pos[j]) for j in own) / len(own)
        bi = math.inf
        for k in set(lab):
            if k == lab[i]:
                continue
            members = [j for j in range(n) if lab[j] == k]
            bi = min(bi, sum(_dist(pos[i], pos[j]) for j in members) / len(members))
        m = max(ai, bi)
        total += (bi - ai) / m if m > 0 else 0.0
    return total / n


def rollout_rmse(pred, truth, horizon="all") -> float:
    frames = len(pred) if horizon == "all" else int(horizon)
    sq, cnt = 0.0, 0
    for t in range(frames):
        for node_p, node_t in zip(pred[t], truth[t]):
            for x, y in zip(node_p, node_t):
                sq += (x - y) ** 2
                cnt += 1
    return math.sqrt(sq / cnt)


def compare(mesh: MeshGraph, seg: SegmentAssignment, pred_pos, true_pos, pred_out, true_out,
            tol: float = 1e-12) -> dict:
    """Fast vs naive value for every metric on the last frame (all frames for RMSE).

    Returns {name: (fast, naive, ok)}.
    """
    p, t = pred_pos[-1], true_pos[-1]
    gp, gt = mesh.with_positions(p), mesh.with_positions(t)
    pairs = {
        "GF_h": (metrics.hausdorff(t, p), hausdorff(t.tolist(), p.tolist())),
        "GF_c": (metrics.chamfer(t, p), chamfer(t.tolist(), p.tolist())),
        "MC": (metrics.mesh_continuity(gp), mesh_continuity(gp)),
        "AR_error": (metrics.aspect_ratio_error(gp, gt)[0], aspect_ratio_error(gp, gt)),
        "conductance": (metrics.conductance(mesh, seg)[0].tolist(), conductance(mesh, seg)),
        "edge_cut_ratio": (metrics.edge_cut_ratio(mesh, seg), edge_cut_ratio(mesh, seg)),
        "silhouette": (metrics.silhouette(mesh, seg), silhouette(mesh, seg)),
        "rmse_all": (metrics.rollout_rmse(pred_out, true_out), rollout_rmse(pred_out, true_out)),
    }
    out = {}
    for name, (fast, naive) in pairs.items():
        f = fast if isinstance(fast, list) else [fast]
        b = naive if isinstance(naive, list) else [naive]
        ok = len(f) == len(b) and all(abs(x - y) <= tol * max(1.0, abs(y)) for x, y in zip(f, b))
        out[name] = (fast, naive, ok)
    return out


def random_case(rng: np.random.Generator, max_nodes: int = 12, max_K: int = 3, frames: int = 3):
    """Random Delaunay mesh with ≤ max_nodes nodes, a random K-labelling and a perturbed rollout."""
    n = int(rng.integers(4, max_nodes + 1))
    while True:
        pts = rng.random((n, 2))
        try:
            tri = Delaunay(pts)
        except Exception:  # qhull rejects degenerate draws
            continue
        areas = [_area2(pts[a], pts[b], pts[c]) for a, b, c in tri.simplices]
        if min(areas) > 1e-3 and len(set(range(n)) - set(tri.simplices.ravel())) == 0:
            break
    mesh = make_mesh(pts, tri.simplices.tolist())
    K = int(rng.integers(2, max_K + 1))
    labels = np.concatenate([np.arange(K), rng.integers(0, K, n - K)])
    rng.shuffle(labels)
    seg = SegmentAssignment(K, labels)
    true_pos = np.stack([pts + 0.01 * t * rng.standard_normal(pts.shape) for t in range(frames + 1)])
    pred_pos = true_pos + 0.005 * rng.standard_normal(true_pos.shape)
    pred_pos[0] = true_pos[0]
    return mesh, seg, pred_pos, true_pos
