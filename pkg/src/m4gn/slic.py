"""Superpixel-style refinement of a graph partition with physics-aware features.

Nodes are described by position, an obstacle-distance block and a modal block.
Starting from a multilevel partition, centroids and assignments are updated
alternately, then every segment is made contiguous on the mesh.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .mesh import MeshGraph, SegmentAssignment, connected_components
from .modal import ModalFeatures
from .partition import multilevel_partition

log = logging.getLogger(__name__)

VARIANTS = ("od", "od_l", "od_e", "md", "mdod_l", "mdod_e")


@dataclass
class SlicConfig:
    variant: str = "mdod_e"
    tau: float = 1.0
    S: float = 1.0
    max_iterations: int = 25
    tol: float = 0.005  # stop once fewer than this fraction of nodes relabel
    normalize_obstacle: bool = True

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown SLIC variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.tau > 0:
            raise ValueError("compactness tau must be positive")
        if not self.S > 0:
            raise ValueError("cluster size S must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


def domain_area(positions: np.ndarray) -> float:
    """(x_max - x_min) * (y_max - y_min)."""
    span = positions[:, :2].max(axis=0) - positions[:, :2].min(axis=0)
    return float(span[0] * span[1])


def cluster_size(area: float, K: int) -> float:
    """Average cluster size S with area = K S^2."""
    return math.sqrt(area / K)


def _uses_obstacle(variant: str) -> bool:
    return variant in ("od", "od_l", "od_e", "mdod_l", "mdod_e")


def _uses_modal(variant: str) -> bool:
    return variant in ("md", "mdod_l", "mdod_e")


def _transform(variant: str, d: np.ndarray, eps_d: float) -> np.ndarray:
    if variant.endswith("_e"):
        return np.exp(-d)
    if variant.endswith("_l"):
        clamped = np.maximum(d, eps_d)
        if np.any(d < eps_d):
            log.info("log transform: clamped %d zero obstacle distances to %.3e",
                     int(np.sum(d < eps_d)), eps_d)
        return np.log(clamped)
    return d


def build_feature(variant: str, d_obs: float, f_md=(), eps_d: float = 1e-9) -> np.ndarray:
    """Single-node feature vector for one of the six variants."""
    variant = variant.lower()
    parts = []
    if _uses_obstacle(variant):
        parts.append(_transform(variant, np.atleast_1d(float(d_obs)), eps_d))
    if _uses_modal(variant):
        parts.append(np.asarray(f_md, dtype=float).ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def build_feature_blocks(variant: str, feats: ModalFeatures, normalize_obstacle: bool = True):
    """(obstacle block (N, 0|1), modal block (N, 0|m)) for a variant."""
    variant = variant.lower()
    n = len(feats.d_obs)
    obs = np.zeros((n, 0))
    md = np.zeros((n, 0))
    if _uses_obstacle(variant):
        obs = _transform(variant, feats.d_obs, 1e-9 * feats.diameter)[:, None]
        if normalize_obstacle:
            scale = np.abs(obs).max()
            if scale > 0:
                obs = obs / scale
    if _uses_modal(variant):
        md = feats.f_md
    return obs, md


@dataclass
class Centroid:
    x: np.ndarray
    f_obs: np.ndarray
    f_md: np.ndarray
    count: int
    stale: int = 0  # consecutive iterations without members


def update_centroids(positions, f_obs, f_md, labels, K: int,
                     previous: list[Centroid] | None = None) -> list[Centroid]:
    """Per-segment means; empty segments keep their previous centroid (flagged stale)."""
    counts = np.bincount(labels, minlength=K)
    out = []
    for k in range(K):
        members = np.flatnonzero(labels == k)
        if len(members) == 0:
            if previous is None:
                raise ValueError(f"segment {k} has no members and no previous centroid")
            p = previous[k]
            out.append(Centroid(p.x, p.f_obs, p.f_md, 0, p.stale + 1))
            continue
        out.append(Centroid(positions[members].mean(axis=0), f_obs[members].mean(axis=0),
                            f_md[members].mean(axis=0), int(counts[k])))
    return out


def centroid_distances(positions, f_obs, f_md, centroids: list[Centroid], tau: float) -> np.ndarray:
    """(N, K) distances ||f_obs - c|| + ||f_md - c|| + tau ||x - c||."""
    cx = np.stack([c.x for c in centroids])
    co = np.stack([c.f_obs for c in centroids])
    cm = np.stack([c.f_md for c in centroids])
    d = tau * np.linalg.norm(positions[:, None, :] - cx[None], axis=2)
    if f_obs.shape[1]:
        d = d + np.linalg.norm(f_obs[:, None, :] - co[None], axis=2)
    if f_md.shape[1]:
        d = d + np.linalg.norm(f_md[:, None, :] - cm[None], axis=2)
    return d


def assign_nodes(positions, f_obs, f_md, centroids: list[Centroid], cfg: SlicConfig):
    """Nearest centroid among those within distance S, else the global nearest.

    Returns (labels, distance to assigned centroid, number of fallbacks).
    """
    d = centroid_distances(positions, f_obs, f_md, centroids, cfg.tau)
    gated = np.where(d <= cfg.S, d, np.inf)
    has = np.isfinite(gated).any(axis=1)
    labels = np.where(has, np.argmin(gated, axis=1), np.argmin(d, axis=1))  # argmin -> lowest index on ties
    return labels, d[np.arange(len(labels)), labels], int((~has).sum())


def enforce_connectivity(g: MeshGraph, labels: np.ndarray, K: int | None = None) -> np.ndarray:
    """Merge every non-largest component of a segment into its dominant neighbour segment."""
    labels = np.asarray(labels, dtype=np.int64).copy()
    K = int(labels.max()) + 1 if K is None else K
    nbrs = g.neighbors()
    for _ in range(g.num_nodes):
        changed = False
        for k in range(K):
            members = np.flatnonzero(labels == k)
            if len(members) == 0:
                continue
            comps = connected_components(g.num_nodes, g.mesh_edges, members)
            if len(comps) == 1:
                continue
            comps.sort(key=lambda c: (-len(c), c[0]))
            for comp in comps[1:]:
                inside = set(comp.tolist())
                border = [labels[j] for i in comp for j in nbrs[i] if j not in inside]
                if not border:
                    continue  # isolated mesh component: nothing to merge into
                votes = np.bincount(border, minlength=K)
                labels[comp] = int(np.argmax(votes))
                changed = True
        if not changed:
            break
    return labels


def _bfs_last(g: MeshGraph, nodes: np.ndarray) -> int:
    """Last node reached by BFS inside ``nodes``: a spanning-tree leaf, never a cut vertex."""
    inside = set(nodes.tolist())
    nbrs = g.neighbors()
    start = int(nodes.min())
    seen = {start}
    queue = [start]
    last = start
    while queue:
        v = queue.pop(0)
        last = v
        for u in nbrs[v]:
            u = int(u)
            if u in inside and u not in seen:
                seen.add(u)
                queue.append(u)
    return last


def _fill_empty(g: MeshGraph, labels: np.ndarray, K: int) -> np.ndarray:
    labels = labels.copy()
    for k in range(K):
        if np.any(labels == k):
            continue
        sizes = np.bincount(labels, minlength=K)
        donor = int(np.argmax(sizes))
        labels[_bfs_last(g, np.flatnonzero(labels == donor))] = k
    return labels


def hybrid_segment(g: MeshGraph, feats: ModalFeatures, cfg: SlicConfig, K: int) -> SegmentAssignment:
    """Multilevel seed, alternating centroid/assignment updates, contiguity pass.

    The run log (iterations, relabel fractions, fallback counts, respawns) is
    stored in ``assignment.meta``.
    """
    seed = multilevel_partition(g, K)
    labels = seed.labels.copy()
    run = {"iterations": 0, "relabel_fraction": [], "fallbacks": [], "respawns": 0,
           "seed_edge_cut": seed.meta["edge_cut"]}
    if K == 1:
        a = SegmentAssignment(1, labels)
        a.meta.update(run)
        return a
    x = g.positions
    f_obs, f_md = build_feature_blocks(cfg.variant, feats, cfg.normalize_obstacle)
    centroids = update_centroids(x, f_obs, f_md, labels, K)
    for it in range(cfg.max_iterations):
        new, dist, fallbacks = assign_nodes(x, f_obs, f_md, centroids, cfg)
        frac = float(np.mean(new != labels))
        labels = new
        run["iterations"] = it + 1
        run["relabel_fraction"].append(frac)
        run["fallbacks"].append(fallbacks)
        centroids = update_centroids(x, f_obs, f_md, labels, K, centroids)
        for k, c in enumerate(centroids):
            if c.stale >= 2:
                # respawn at the node farthest from its own centroid
                far = int(np.argmax(dist))
                labels[far] = k
                dist[far] = -np.inf
                centroids[k] = Centroid(x[far].copy(), f_obs[far].copy(), f_md[far].copy(), 1)
                run["respawns"] += 1
        if frac < cfg.tol:
            break
    labels = enforce_connectivity(g, labels, K)
    labels = _fill_empty(g, labels, K)
    labels = enforce_connectivity(g, labels, K)
    a = SegmentAssignment(K, labels)
    a.meta.update(run)
    a.meta["variant"] = cfg.variant
    return a


def default_config(g: MeshGraph, K: int, variant: str = "mdod_e", tau: float = 1.0, **kw) -> SlicConfig:
    """Config with S taken from the bounding-box area."""
    return SlicConfig(variant=variant, tau=tau, S=cluster_size(domain_area(g.positions), K), **kw)


def random_balanced_segmentation(n: int, K: int, seed: int) -> SegmentAssignment:
    """Shuffled round-robin labels: sizes differ by at most one."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % K
    rng.shuffle(labels)
    return SegmentAssignment(K, labels)


def is_contiguous(g: MeshGraph, a: SegmentAssignment) -> bool:
    return all(len(connected_components(g.num_nodes, g.mesh_edges, a.node_sets[k])) <= 1
               for k in range(a.K))


__all__ = ["SlicConfig", "Centroid", "VARIANTS", "build_feature", "build_feature_blocks",
           "update_centroids", "assign_nodes", "enforce_connectivity", "hybrid_segment",
           "domain_area", "cluster_size", "default_config", "random_balanced_segmentation",
           "is_contiguous"]
