"""Multilevel edge-cut partitioning: heavy-edge coarsening, greedy graph-growing
bisection, and boundary refinement during uncoarsening.

Every choice breaks ties by the smaller index, so results are a deterministic
function of the input graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .mesh import MeshGraph, SegmentAssignment, connected_components

BALANCE = 1.1
COARSEN_MIN = 100
KL_LIMIT = 128


class PartitionError(ValueError):
    pass


@dataclass
class WGraph:
    """Undirected graph with integer node weights and float edge weights (CSR)."""

    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    vwgt: np.ndarray

    @classmethod
    def from_edges(cls, n: int, edges, edge_weights=None, vwgt=None) -> "WGraph":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        w = np.ones(len(edges)) if edge_weights is None else np.asarray(edge_weights, dtype=float)
        r = np.concatenate([edges[:, 0], edges[:, 1]])
        c = np.concatenate([edges[:, 1], edges[:, 0]])
        w = np.concatenate([w, w])
        keep = r != c
        r, c, w = r[keep], c[keep], w[keep]
        key = r * n + c
        uniq, inv = np.unique(key, return_inverse=True)
        data = np.bincount(inv, weights=w, minlength=len(uniq))
        rows, cols = uniq // n, uniq % n
        indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=n))]).astype(np.int64)
        vw = np.ones(n, dtype=np.int64) if vwgt is None else np.asarray(vwgt, dtype=np.int64)
        return cls(indptr, cols.astype(np.int64), data.astype(float), vw)

    @classmethod
    def from_mesh(cls, g: MeshGraph) -> "WGraph":
        return cls.from_edges(g.num_nodes, g.mesh_edges)

    @property
    def n(self) -> int:
        return len(self.vwgt)

    def nbrs(self, v: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.indptr[v], self.indptr[v + 1]
        return self.indices[s:e], self.weights[s:e]

    def edge_list(self) -> tuple[np.ndarray, np.ndarray]:
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        keep = rows < self.indices
        return np.stack([rows[keep], self.indices[keep]], axis=1), self.weights[keep]

    @cached_property
    def _matrix(self):
        if self.n <= 256:
            a = np.zeros((self.n, self.n))
            a[np.repeat(np.arange(self.n), np.diff(self.indptr)), self.indices] = self.weights
            return a
        return sp.csr_matrix((self.weights, self.indices, self.indptr), shape=(self.n, self.n))

    def matrix(self):
        """Adjacency as a dense array for small graphs, CSR otherwise."""
        return self._matrix

    def subgraph(self, nodes: np.ndarray) -> "WGraph":
        local = -np.ones(self.n, dtype=np.int64)
        local[nodes] = np.arange(len(nodes))
        e, w = self.edge_list()
        keep = (local[e[:, 0]] >= 0) & (local[e[:, 1]] >= 0)
        return WGraph.from_edges(len(nodes), local[e[keep]], w[keep], self.vwgt[nodes])


def edge_cut(g: WGraph, labels: np.ndarray) -> float:
    e, w = g.edge_list()
    return float(w[labels[e[:, 0]] != labels[e[:, 1]]].sum())


def part_cap(total_weight: int, K: int, eps: float = BALANCE) -> int:
    return max(1, int(math.floor(eps * math.ceil(total_weight / K) + 1e-9)))


@dataclass
class Partition:
    K: int
    labels: np.ndarray
    cut: float
    balance: float  # max part weight / (total / K)

    @classmethod
    def of(cls, g: WGraph, labels: np.ndarray, K: int) -> "Partition":
        pw = np.bincount(labels, weights=g.vwgt, minlength=K)
        return cls(K, labels, edge_cut(g, labels), float(pw.max() / (g.vwgt.sum() / K)))


@dataclass
class CoarseningLevel:
    fine: WGraph
    graph: WGraph  # coarse graph
    cmap: np.ndarray  # fine node -> coarse node


# ---------------------------------------------------------------------------
# coarsening
# ---------------------------------------------------------------------------

def heavy_edge_matching(g: WGraph, max_vwgt: int | None = None) -> np.ndarray:
    """Greedy matching over edges sorted by (-weight, u, v); returns cmap."""
    e, w = g.edge_list()
    order = np.lexsort((e[:, 1], e[:, 0], -w))
    mate = -np.ones(g.n, dtype=np.int64)
    for k in order:
        u, v = e[k]
        if mate[u] >= 0 or mate[v] >= 0:
            continue
        if max_vwgt is not None and g.vwgt[u] + g.vwgt[v] > max_vwgt:
            continue
        mate[u], mate[v] = v, u
    cmap = -np.ones(g.n, dtype=np.int64)
    nc = 0
    for u in range(g.n):
        if cmap[u] >= 0:
            continue
        cmap[u] = nc
        if mate[u] >= 0:
            cmap[mate[u]] = nc
        nc += 1
    return cmap


def contract(g: WGraph, cmap: np.ndarray) -> WGraph:
    nc = int(cmap.max()) + 1
    e, w = g.edge_list()
    ce = cmap[e]
    keep = ce[:, 0] != ce[:, 1]
    vw = np.bincount(cmap, weights=g.vwgt, minlength=nc).astype(np.int64)
    return WGraph.from_edges(nc, np.sort(ce[keep], axis=1), w[keep], vw)


def coarsen(g: WGraph, threshold: int, K: int | None = None) -> list[CoarseningLevel]:
    """Repeated heavy-edge matching until at most max(threshold, 4K) nodes remain."""
    target = threshold if K is None else max(threshold, 4 * K)
    total = int(g.vwgt.sum())
    max_vwgt = max(2, int(math.ceil(1.5 * total / max(target, 1))))
    levels: list[CoarseningLevel] = []
    cur = g
    while cur.n > target:
        cmap = heavy_edge_matching(cur, max_vwgt)
        nc = int(cmap.max()) + 1
        if nc == cur.n:
            break
        coarse = contract(cur, cmap)
        levels.append(CoarseningLevel(cur, coarse, cmap))
        if nc > 0.95 * cur.n:
            break
        cur = coarse
    return levels


# ---------------------------------------------------------------------------
# initial partitioning: recursive graph-growing bisection
# ---------------------------------------------------------------------------

def _grow(g: WGraph, seed: int, target: float) -> np.ndarray:
    side = np.zeros(g.n, dtype=bool)  # True = grown region
    in_w = 0
    # external degree of each node, used for max-gain selection
    deg = np.bincount(np.repeat(np.arange(g.n), np.diff(g.indptr)), weights=g.weights, minlength=g.n)
    conn = np.zeros(g.n)  # weight into region
    v = seed
    while True:
        side[v] = True
        in_w += g.vwgt[v]
        nb, w = g.nbrs(v)
        conn[nb] += w
        if in_w >= target:
            break
        gain = np.where(side, -np.inf, 2 * conn - deg)
        frontier = (~side) & (conn > 0)
        if frontier.any():
            cand = np.where(frontier, gain, -np.inf)
        else:
            cand = np.where(side, -np.inf, 0.0)
            if not np.isfinite(cand).any():
                break
        v = int(np.argmax(cand))
    return side


def fm_bisection(g: WGraph, side: np.ndarray, caps: tuple[int, int], max_passes: int = 10,
                 slack_nodes: int = 1) -> np.ndarray:
    """Fiduccia-Mattheyses passes with rollback to the best balanced prefix.

    ``side`` True means part 0. Within a pass a part may exceed its cap by
    ``slack_nodes`` maximal node weights so that balance-locked exchanges can
    be reached; only prefixes that respect the caps are kept.
    """
    side = side.copy()
    slack = slack_nodes * int(g.vwgt.max()) if g.n else 0
    total = int(g.vwgt.sum())

    def state(wa):
        excess = max(0, wa - caps[0]) + max(0, total - wa - caps[1])
        return excess

    W = g.matrix()
    deg = np.asarray(W.sum(axis=1)).ravel()
    for _ in range(max_passes):
        into_a = np.asarray(W @ side.astype(float)).ravel()
        conn_same = np.where(side, into_a, deg - into_a)
        conn_other = deg - conn_same
        gain = conn_other - conn_same
        wa = int(g.vwgt[side].sum())
        cut = float(conn_other.sum() / 2)
        best = (state(wa), cut)
        best_len = 0
        start = best
        locked = np.zeros(g.n, dtype=bool)
        moves = []
        for _step in range(g.n):
            w_to_a = wa + g.vwgt  # if moved into part 0
            w_to_b = total - wa + g.vwgt
            ok = np.where(side, (wa - g.vwgt > 0) & (w_to_b <= caps[1] + slack),
                          (total - wa - g.vwgt > 0) & (w_to_a <= caps[0] + slack))
            ok &= ~locked
            if not ok.any():
                break
            v = int(np.argmax(np.where(ok, gain, -np.inf)))
            cut -= gain[v]
            wa += -g.vwgt[v] if side[v] else g.vwgt[v]
            side[v] = ~side[v]
            locked[v] = True
            moves.append(v)
            gain[v] = -gain[v]
            nb, w = g.nbrs(v)
            same = side[nb] == side[v]
            gain[nb] += np.where(same, -2 * w, 2 * w)
            cur = (state(wa), cut)
            if cur < best:
                best, best_len = cur, len(moves)
        for v in moves[best_len:]:
            side[v] = ~side[v]
        if not best < start:
            break
    return side


def kl_bisection(g: WGraph, side: np.ndarray, max_passes: int = 10) -> np.ndarray:
    """Kernighan-Lin pair swaps with rollback; part weights change only by
    the weight difference of each swapped pair."""
    side = side.copy()
    n = g.n
    W = g.matrix()
    same_w = g.vwgt[:, None] == g.vwgt[None, :]
    for _ in range(max_passes):
        s = side.astype(float)
        ext = W @ (1 - s) * s + W @ s * (1 - s)
        internal = W.sum(axis=1) - ext
        d = ext - internal
        locked = np.zeros(n, dtype=bool)
        total, best, best_len = 0.0, 0.0, 0
        pairs = []
        for _step in range(min(side.sum(), (~side).sum())):
            a_ok = side & ~locked
            b_ok = ~side & ~locked
            if not a_ok.any() or not b_ok.any():
                break
            gain = d[:, None] + d[None, :] - 2 * W
            gain = np.where(a_ok[:, None] & b_ok[None, :] & same_w, gain, -np.inf)
            k = int(np.argmax(gain))
            a, b = divmod(k, n)
            if not np.isfinite(gain[a, b]):
                break
            total += gain[a, b]
            locked[a] = locked[b] = True
            pairs.append((a, b))
            # a moves to B, b moves to A
            d += 2 * W[a] * np.where(side, 1, -1) + 2 * W[b] * np.where(side, -1, 1)
            if total > best + 1e-12:
                best, best_len = total, len(pairs)
        if best_len == 0:
            break
        for a, b in pairs[:best_len]:
            side[a], side[b] = False, True
    return side


def _bisect(g: WGraph, k_left: int, k_right: int, cap: int) -> np.ndarray:
    total = int(g.vwgt.sum())
    caps = (k_left * cap, k_right * cap)
    target = total * k_left / (k_left + k_right)
    if g.n <= 64:
        seeds = range(g.n)
    else:
        seeds = sorted(set(np.linspace(0, g.n - 1, 16).astype(int).tolist()))
    best_side, best_key = None, None
    tried = set()
    for s in seeds:
        side = _grow(g, int(s), target)
        if side.tobytes() in tried:
            continue
        tried.add(side.tobytes())
        side = fm_bisection(g, side, caps)
        if g.n <= KL_LIMIT:
            side = kl_bisection(g, side)
            side = fm_bisection(g, side, caps, slack_nodes=2)
        wa = int(g.vwgt[side].sum())
        excess = max(0, wa - caps[0]) + max(0, total - wa - caps[1])
        empty = int(wa == 0 or wa == total)
        key = (empty, excess, edge_cut(g, (~side).astype(np.int64)), abs(wa - target))
        if best_key is None or key < best_key:
            best_side, best_key = side, key
    return best_side


def initial_partition(g: WGraph, K: int, eps: float = BALANCE) -> Partition:
    """Recursive greedy graph-growing bisection into ``K`` parts."""
    if K < 1:
        raise PartitionError("K must be >= 1")
    if K > g.n:
        raise PartitionError(f"cannot split {g.n} nodes into {K} non-empty parts")
    cap = max(part_cap(int(g.vwgt.sum()), K, eps), int(g.vwgt.max()))
    labels = np.zeros(g.n, dtype=np.int64)

    def recurse(nodes: np.ndarray, k: int, offset: int):
        if k == 1:
            labels[nodes] = offset
            return
        kl = k // 2
        sub = g.subgraph(nodes)
        side = _bisect(sub, kl, k - kl, cap)
        left, right = nodes[side], nodes[~side]
        if len(left) < kl or len(right) < k - kl:  # keep every part non-empty
            n_left = min(max(kl, round(len(nodes) * kl / k)), len(nodes) - (k - kl))
            left, right = nodes[:n_left], nodes[n_left:]
        recurse(left, kl, offset)
        recurse(right, k - kl, offset + kl)

    recurse(np.arange(g.n), K, 0)
    return Partition.of(g, labels, K)


# ---------------------------------------------------------------------------
# k-way refinement
# ---------------------------------------------------------------------------

def _conn(g: WGraph, labels: np.ndarray, v: int, K: int) -> np.ndarray:
    nb, w = g.nbrs(v)
    return np.bincount(labels[nb], weights=w, minlength=K)


def rebalance(g: WGraph, labels: np.ndarray, K: int, cap: int) -> np.ndarray:
    """Move boundary nodes out of overweight parts with the least cut increase."""
    labels = labels.copy()
    pw = np.bincount(labels, weights=g.vwgt, minlength=K).astype(np.int64)
    for _ in range(g.n):
        over = np.flatnonzero(pw > cap)
        if not len(over):
            break
        a = int(over[0])
        best = None
        for v in np.flatnonzero(labels == a):
            c = _conn(g, labels, v, K)
            for b in np.flatnonzero(c > 0):
                if b == a or pw[b] + g.vwgt[v] > cap:
                    continue
                key = (-(c[b] - c[a]), v, b)
                if best is None or key < best:
                    best = key
        if best is None:
            # no neighbouring room: send the lightest-cost node to the lightest part
            b = int(np.argmin(pw))
            v = int(np.flatnonzero(labels == a)[-1])
        else:
            _, v, b = best
        labels[v] = b
        pw[a] -= g.vwgt[v]
        pw[b] += g.vwgt[v]
    return labels


def refine_fm(level: CoarseningLevel | WGraph, p: Partition, max_passes: int = 10,
              eps: float = BALANCE, cap: int | None = None) -> Partition:
    """Greedy positive-gain boundary moves, then positive-gain boundary swaps.

    Moves that would exceed the part cap or empty a part are rejected, so the
    cut never increases. Swaps exchange two adjacent boundary nodes between
    their parts, which escapes minima where every single move is blocked by
    balance.
    """
    g = level.fine if isinstance(level, CoarseningLevel) else level
    K = p.K
    labels = p.labels.copy()
    if cap is None:
        cap = max(part_cap(int(g.vwgt.sum()), K, eps), int(g.vwgt.max()))
    pw = np.bincount(labels, weights=g.vwgt, minlength=K).astype(np.int64)
    cnt = np.bincount(labels, minlength=K)
    if pw.max() > cap:
        labels = rebalance(g, labels, K, cap)
        pw = np.bincount(labels, weights=g.vwgt, minlength=K).astype(np.int64)
        cnt = np.bincount(labels, minlength=K)
    for _ in range(max_passes):
        moved = 0
        for v in range(g.n):
            a = labels[v]
            c = _conn(g, labels, v, K)
            gains = c - c[a]
            gains[a] = -np.inf
            b = int(np.argmax(gains))
            if gains[b] <= 0 or pw[b] + g.vwgt[v] > cap or cnt[a] <= 1:
                continue
            labels[v] = b
            pw[a] -= g.vwgt[v]
            pw[b] += g.vwgt[v]
            cnt[a] -= 1
            cnt[b] += 1
            moved += 1
        e, w = g.edge_list()
        for k in np.flatnonzero(labels[e[:, 0]] != labels[e[:, 1]]):
            u, v = e[k]
            a, b = labels[u], labels[v]
            if a == b:
                continue
            cu, cv = _conn(g, labels, u, K), _conn(g, labels, v, K)
            gain = (cu[b] - cu[a]) + (cv[a] - cv[b]) - 2 * w[k]
            if gain <= 0:
                continue
            if pw[a] - g.vwgt[u] + g.vwgt[v] > cap or pw[b] - g.vwgt[v] + g.vwgt[u] > cap:
                continue
            labels[u], labels[v] = b, a
            pw[a] += g.vwgt[v] - g.vwgt[u]
            pw[b] += g.vwgt[u] - g.vwgt[v]
            moved += 1
        if moved == 0:
            break
    return Partition.of(g, labels, K)


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Renumber segments in order of their smallest member node index."""
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(labels.max() + 1, dtype=np.int64)
    remap[np.unique(labels)[order]] = np.arange(len(order))
    return remap[labels]


def _partition_connected(g: WGraph, K: int, eps: float, threshold: int) -> np.ndarray:
    if K == 1:
        return np.zeros(g.n, dtype=np.int64)
    levels = coarsen(g, threshold, K)
    coarsest = levels[-1].graph if levels else g
    p = initial_partition(coarsest, K, eps)
    final_cap = part_cap(int(g.vwgt.sum()), K, eps)
    for level in reversed(levels):
        labels = p.labels[level.cmap]
        cap = max(final_cap, int(level.fine.vwgt.max()))
        p = refine_fm(level, Partition.of(level.fine, labels, K), cap=cap)
    p = refine_fm(g, p, cap=final_cap)
    return p.labels


def _allocate(sizes: list[int], K: int) -> list[int]:
    """Largest-remainder split of K parts across components, >= 1 each, <= size."""
    total = sum(sizes)
    raw = [K * s / total for s in sizes]
    alloc = [max(1, min(s, int(math.floor(r)))) for r, s in zip(raw, sizes)]
    while sum(alloc) < K:
        rem = [(raw[i] - alloc[i], -i) for i in range(len(sizes)) if alloc[i] < sizes[i]]
        i = -max(rem)[1]
        alloc[i] += 1
    while sum(alloc) > K:
        rem = [(raw[i] - alloc[i], i) for i in range(len(sizes)) if alloc[i] > 1]
        i = min(rem)[1]
        alloc[i] -= 1
    return alloc


def multilevel_partition(g: MeshGraph | WGraph, K: int, eps: float = BALANCE,
                         threshold: int = COARSEN_MIN) -> SegmentAssignment:
    """Coarsen, bisect recursively, then project and refine level by level.

    Disconnected inputs are split per component, with segment counts
    proportional to component size; when there are more components than
    segments, whole components are packed into the lightest segment.
    """
    wg = WGraph.from_mesh(g) if isinstance(g, MeshGraph) else g
    if K < 1:
        raise PartitionError("K must be >= 1")
    if K > wg.n:
        raise PartitionError(f"K={K} exceeds node count {wg.n}")
    e, _ = wg.edge_list()
    comps = connected_components(wg.n, e)
    labels = np.zeros(wg.n, dtype=np.int64)
    if len(comps) == 1:
        labels = _partition_connected(wg, K, eps, threshold)
    elif len(comps) >= K:
        load = np.zeros(K)
        for comp in sorted(comps, key=lambda c: (-len(c), c[0])):
            k = int(np.argmin(load))
            labels[comp] = k
            load[k] += len(comp)
    else:
        offset = 0
        for comp, kc in zip(comps, _allocate([len(c) for c in comps], K)):
            labels[comp] = offset + _partition_connected(wg.subgraph(comp), kc, eps, threshold)
            offset += kc
    labels = canonical_labels(labels)
    a = SegmentAssignment(K, labels)
    a.meta["edge_cut"] = edge_cut(wg, labels)
    return a
