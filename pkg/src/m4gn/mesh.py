"""Mesh-graph data model, edge construction, segment bookkeeping and JSON I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree


class NodeType(IntEnum):
    NORMAL = 0  # fluid or deformable solid interior
    OBSTACLE = 1
    AIRFOIL = 2
    HANDLE = 3
    INFLOW = 4
    OUTFLOW = 5
    WALL = 6


NUM_NODE_TYPES = 9


class MeshFormatError(ValueError):
    """A mesh/segmentation/trajectory file does not follow the JSON schema."""


class MeshValidationError(ValueError):
    """A structurally well-formed mesh violates an invariant."""


# local edge templates, keyed by (dim, cell size)
_PRISM_EDGES = ((0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (0, 3), (1, 4), (2, 5))
_QUAD_EDGES = ((0, 1), (1, 2), (2, 3), (0, 3))


def cell_edge_template(dim: int, size: int) -> tuple[tuple[int, int], ...]:
    if size == 6:
        return _PRISM_EDGES
    if size == 4 and dim == 2:
        return _QUAD_EDGES
    if size in (2, 3, 4):
        return tuple((a, b) for a in range(size) for b in range(a + 1, size))
    raise MeshValidationError(f"unsupported cell with {size} nodes in {dim}D")


def edges_from_cells(cells: Sequence[Sequence[int]], dim: int) -> np.ndarray:
    """Deduplicated 1-skeleton of ``cells`` as an (E, 2) array, i < j, sorted."""
    pairs = []
    for cell in cells:
        for a, b in cell_edge_template(dim, len(cell)):
            i, j = int(cell[a]), int(cell[b])
            if i != j:
                pairs.append((min(i, j), max(i, j)))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(np.asarray(pairs, dtype=np.int64), axis=0)


@dataclass(frozen=True, eq=False)
class MeshGraph:
    """Simulation state on a fixed-connectivity mesh.

    ``positions`` are current world coordinates. ``mesh_positions`` are the
    rest/reference coordinates for Lagrangian meshes; when absent the mesh is
    treated as Eulerian and world and mesh space coincide.
    """

    positions: np.ndarray
    node_types: np.ndarray
    node_features: np.ndarray
    cells: tuple[tuple[int, ...], ...]
    mesh_edges: np.ndarray
    world_edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    mesh_positions: np.ndarray | None = None
    t: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def reference_positions(self) -> np.ndarray:
        return self.positions if self.mesh_positions is None else self.mesh_positions

    @property
    def is_lagrangian(self) -> bool:
        return self.mesh_positions is not None

    def adjacency(self, include_world: bool = False) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency with zero diagonal."""
        edges = self.mesh_edges
        if include_world and len(self.world_edges):
            edges = np.concatenate([edges, self.world_edges])
        n = self.num_nodes
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        a.sum_duplicates()
        a.data[:] = 1.0
        return a

    def neighbors(self) -> list[np.ndarray]:
        a = self.adjacency()
        return [a.indices[a.indptr[i]:a.indptr[i + 1]] for i in range(self.num_nodes)]

    def with_positions(self, positions: np.ndarray, t: int | None = None) -> "MeshGraph":
        return replace(self, positions=np.asarray(positions, dtype=np.float64),
                       t=self.t if t is None else t)

    def with_features(self, features: np.ndarray, t: int | None = None) -> "MeshGraph":
        return replace(self, node_features=np.asarray(features, dtype=np.float64),
                       t=self.t if t is None else t)

    def node_type_onehot(self) -> np.ndarray:
        out = np.zeros((self.num_nodes, NUM_NODE_TYPES))
        out[np.arange(self.num_nodes), self.node_types] = 1.0
        return out


def make_mesh(positions, cells, node_types=None, node_features=None, *,
              mesh_positions=None, t: int = 0, meta: dict | None = None) -> MeshGraph:
    """Build and validate a MeshGraph, deriving mesh edges from cells."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] not in (2, 3):
        raise MeshValidationError(f"positions must be (N, 2|3), got {pos.shape}")
    n = pos.shape[0]
    cells_t = tuple(tuple(int(v) for v in c) for c in cells)
    for ci, c in enumerate(cells_t):
        if any(v < 0 or v >= n for v in c):
            raise MeshValidationError(f"cell {ci} references node outside 0..{n - 1}: {list(c)}")
    types = np.zeros(n, dtype=np.int64) if node_types is None else np.asarray(node_types, dtype=np.int64)
    if types.shape != (n,):
        raise MeshValidationError(f"node_types must have length {n}")
    if types.size and (types.min() < 0 or types.max() >= NUM_NODE_TYPES):
        raise MeshValidationError("node type outside the 9-slot vocabulary")
    feats = np.zeros((n, 0)) if node_features is None else np.asarray(node_features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if feats.shape[0] != n:
        raise MeshValidationError(f"node_features must have {n} rows")
    mpos = None if mesh_positions is None else np.asarray(mesh_positions, dtype=np.float64)
    if mpos is not None and mpos.shape != pos.shape:
        raise MeshValidationError("mesh_positions shape differs from positions")
    return MeshGraph(pos, types, feats, cells_t, edges_from_cells(cells_t, pos.shape[1]),
                     mesh_positions=mpos, t=t, meta=dict(meta or {}))


def build_world_edges(g: MeshGraph, radius: float) -> MeshGraph:
    """Attach proximity edges |x_i - x_j| < radius that are not mesh edges."""
    if radius <= 0:
        raise ValueError("world edge radius must be positive")
    tree = cKDTree(g.positions)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    if len(pairs):
        pairs = np.sort(pairs, axis=1)
        d = np.linalg.norm(g.positions[pairs[:, 0]] - g.positions[pairs[:, 1]], axis=1)
        pairs = pairs[d < radius]  # query_pairs is inclusive
    if len(pairs) and len(g.mesh_edges):
        n = g.num_nodes
        mesh_keys = g.mesh_edges[:, 0] * n + g.mesh_edges[:, 1]
        pairs = pairs[~np.isin(pairs[:, 0] * n + pairs[:, 1], mesh_keys)]
    if len(pairs):
        pairs = np.unique(pairs.astype(np.int64), axis=0)
    else:
        pairs = np.zeros((0, 2), dtype=np.int64)
    return replace(g, world_edges=pairs)


def edge_features(g: MeshGraph, edges: np.ndarray, world_only: bool = False) -> np.ndarray:
    """Relative displacement features for undirected edges (i, j), stored i -> j.

    Rows are [m_ij, |m_ij|] in mesh space, followed by [x_ij, |x_ij|] in world
    space for Lagrangian meshes. ``world_only`` keeps the world-space block.
    """
    i, j = edges[:, 0], edges[:, 1]
    blocks = []
    if not world_only:
        m = g.reference_positions[j] - g.reference_positions[i]
        blocks += [m, np.linalg.norm(m, axis=1, keepdims=True)]
    if world_only or g.is_lagrangian:
        x = g.positions[j] - g.positions[i]
        blocks += [x, np.linalg.norm(x, axis=1, keepdims=True)]
    return np.concatenate(blocks, axis=1)


# ---------------------------------------------------------------------------
# segments
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SegmentAssignment:
    """Node -> segment labels plus the (possibly overlapping) segment node sets."""

    K: int
    labels: np.ndarray
    delta: int = 0
    node_sets: list[np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.K):
            raise MeshValidationError("segment label outside 0..K-1")
        if self.node_sets is None:
            self.node_sets = [np.flatnonzero(self.labels == k) for k in range(self.K)]

    def edge_sets(self, g: MeshGraph) -> list[np.ndarray]:
        out = []
        for nodes in self.node_sets:
            mask = np.zeros(g.num_nodes, dtype=bool)
            mask[nodes] = True
            e = g.mesh_edges
            out.append(e[mask[e[:, 0]] & mask[e[:, 1]]])
        return out

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)


def expand_overlap(g: MeshGraph, a: SegmentAssignment, delta: int) -> SegmentAssignment:
    """Dilate every segment by ``delta`` one-ring rounds over mesh edges."""
    if a.delta != 0:
        raise ValueError("expand_overlap expects a delta=0 assignment")
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if delta == 0:
        return a
    adj = g.adjacency() + sp.identity(g.num_nodes, format="csr")
    sets = []
    for nodes in a.node_sets:
        mask = np.zeros(g.num_nodes)
        mask[nodes] = 1.0
        for _ in range(delta):
            mask = (adj @ mask > 0).astype(float)
        sets.append(np.flatnonzero(mask))
    return SegmentAssignment(a.K, a.labels.copy(), delta, sets, dict(a.meta))


def segment_adjacency(g: MeshGraph, a: SegmentAssignment) -> np.ndarray:
    """K x K matrix of summed node adjacency between segments (P^T A P)."""
    p = sp.csr_matrix((np.ones(g.num_nodes), (np.arange(g.num_nodes), a.labels)),
                      shape=(g.num_nodes, a.K))
    ak = (p.T @ g.adjacency() @ p).toarray()
    return np.rint(ak).astype(np.int64)


# ---------------------------------------------------------------------------
# JSON I/O
# ---------------------------------------------------------------------------

def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise MeshFormatError(f"missing field '{key}' in {where}")
    return obj[key]


def mesh_to_dict(g: MeshGraph) -> dict:
    nodes = []
    for i in range(g.num_nodes):
        node = {"pos": g.positions[i].tolist(), "type": int(g.node_types[i]),
                "feat": g.node_features[i].tolist()}
        if g.mesh_positions is not None:
            node["mesh_pos"] = g.mesh_positions[i].tolist()
        nodes.append(node)
    out = {"dim": g.dim, "nodes": nodes, "cells": [list(c) for c in g.cells],
           "meta": dict(g.meta, t=g.t)}
    if len(g.world_edges):
        out["world_edges"] = g.world_edges.tolist()
    return out


def mesh_from_dict(doc: dict) -> MeshGraph:
    dim = _require(doc, "dim", "mesh")
    if dim not in (2, 3):
        raise MeshFormatError(f"field 'dim' must be 2 or 3, got {dim!r}")
    raw_nodes = _require(doc, "nodes", "mesh")
    cells = _require(doc, "cells", "mesh")
    if not isinstance(raw_nodes, list) or not raw_nodes:
        raise MeshFormatError("field 'nodes' must be a non-empty list")
    pos, types, feats, mpos = [], [], [], []
    for i, node in enumerate(raw_nodes):
        p = _require(node, "pos", f"nodes[{i}]")
        if not isinstance(p, list) or len(p) != dim:
            raise MeshFormatError(f"field 'nodes[{i}].pos' must have {dim} coordinates")
        pos.append(p)
        types.append(node.get("type", 0))
        feats.append(node.get("feat", []))
        if "mesh_pos" in node:
            mpos.append(node["mesh_pos"])
    if mpos and len(mpos) != len(pos):
        raise MeshFormatError("field 'mesh_pos' must be given for all nodes or none")
    if len({len(f) for f in feats}) > 1:
        raise MeshFormatError("field 'feat' has inconsistent lengths across nodes")
    if not isinstance(cells, list) or any(not isinstance(c, list) for c in cells):
        raise MeshFormatError("field 'cells' must be a list of integer lists")
    meta = dict(doc.get("meta", {}))
    t = int(meta.pop("t", 0))
    g = make_mesh(np.asarray(pos, dtype=np.float64), cells, types,
                  np.asarray(feats, dtype=np.float64).reshape(len(pos), -1),
                  mesh_positions=np.asarray(mpos) if mpos else None, t=t, meta=meta)
    if "world_edges" in doc:
        g = replace(g, world_edges=np.asarray(doc["world_edges"], dtype=np.int64).reshape(-1, 2))
    return g


def _read_json(path) -> object:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MeshFormatError(f"{path}: invalid JSON ({exc})") from exc


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_mesh(path) -> MeshGraph:
    return mesh_from_dict(_read_json(path))


def save_mesh(g: MeshGraph, path) -> None:
    write_json(path, mesh_to_dict(g))


def segmentation_to_dict(a: SegmentAssignment) -> dict:
    return {"K": int(a.K), "delta": int(a.delta), "labels": a.labels.tolist()}


def segmentation_from_dict(doc: dict, g: MeshGraph | None = None) -> SegmentAssignment:
    k = _require(doc, "K", "segmentation")
    labels = _require(doc, "labels", "segmentation")
    delta = int(doc.get("delta", 0))
    if g is not None and len(labels) != g.num_nodes:
        raise MeshValidationError(f"segmentation has {len(labels)} labels for {g.num_nodes} nodes")
    a = SegmentAssignment(int(k), np.asarray(labels, dtype=np.int64))
    if delta and g is not None:
        a = expand_overlap(g, a, delta)
    elif delta:
        a.delta = delta  # node sets need the mesh; caller must expand
    return a


def load_segmentation(path, g: MeshGraph | None = None) -> SegmentAssignment:
    return segmentation_from_dict(_read_json(path), g)


def save_segmentation(a: SegmentAssignment, path) -> None:
    write_json(path, segmentation_to_dict(a))


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Trajectory:
    """Frames of one simulation on a fixed-connectivity mesh.

    ``positions`` has shape (T+1, N, dim) and ``features`` (T+1, N, F). The
    template mesh supplies cells, node types and rest positions.
    """

    mesh: MeshGraph
    positions: np.ndarray
    features: np.ndarray
    times: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.times is None:
            self.times = np.arange(len(self.positions))
        if self.positions.shape[:2] != self.features.shape[:2]:
            raise MeshValidationError("positions and features disagree on frames/nodes")
        if self.positions.shape[1] != self.mesh.num_nodes:
            raise MeshValidationError("trajectory node count differs from its mesh")

    def __len__(self) -> int:
        return len(self.positions)

    def frame(self, k: int) -> MeshGraph:
        return replace(self.mesh, positions=self.positions[k], node_features=self.features[k],
                       t=int(self.times[k]), world_edges=np.zeros((0, 2), dtype=np.int64))


def trajectory_to_list(traj: Trajectory) -> list:
    frames = []
    for k in range(len(traj)):
        frames.append({"t": int(traj.times[k]),
                       "nodes": [{"pos": traj.positions[k, i].tolist(),
                                  "feat": traj.features[k, i].tolist()}
                                 for i in range(traj.mesh.num_nodes)]})
    return frames


def trajectory_from_list(frames: list, mesh: MeshGraph) -> Trajectory:
    if not isinstance(frames, list) or not frames:
        raise MeshFormatError("trajectory must be a non-empty array of frames")
    pos, feat, times = [], [], []
    for k, fr in enumerate(frames):
        nodes = _require(fr, "nodes", f"frame[{k}]")
        times.append(int(_require(fr, "t", f"frame[{k}]")))
        if len(nodes) != mesh.num_nodes:
            raise MeshValidationError(f"frame[{k}] has {len(nodes)} nodes, mesh has {mesh.num_nodes}")
        pos.append([_require(n, "pos", f"frame[{k}].nodes") for n in nodes])
        feat.append([n.get("feat", []) for n in nodes])
    return Trajectory(mesh, np.asarray(pos, dtype=np.float64),
                      np.asarray(feat, dtype=np.float64).reshape(len(frames), mesh.num_nodes, -1),
                      np.asarray(times))


def load_trajectory(path, mesh: MeshGraph) -> Trajectory:
    return trajectory_from_list(_read_json(path), mesh)


def save_trajectory(traj: Trajectory, path) -> None:
    write_json(path, trajectory_to_list(traj))


def connected_components(n: int, edges: np.ndarray, nodes: Iterable[int] | None = None) -> list[np.ndarray]:
    """Components of the subgraph induced by ``nodes`` (all nodes by default)."""
    from scipy.sparse.csgraph import connected_components as _cc

    idx = np.arange(n) if nodes is None else np.asarray(sorted(nodes), dtype=np.int64)
    local = -np.ones(n, dtype=np.int64)
    local[idx] = np.arange(len(idx))
    if len(edges):
        keep = (local[edges[:, 0]] >= 0) & (local[edges[:, 1]] >= 0)
        e = local[edges[keep]]
    else:
        e = np.zeros((0, 2), dtype=np.int64)
    m = len(idx)
    a = sp.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(m, m))
    ncomp, lab = _cc(a, directed=False)
    comps = [idx[lab == c] for c in range(ncomp)]
    comps.sort(key=lambda c: c[0])
    return comps
