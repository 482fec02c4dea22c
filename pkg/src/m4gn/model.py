"""Two-level mesh surrogate: local message passing plus attention over mesh segments.

Node and edge encoders feed ``L`` residual message-passing steps. Node latents
are mean-pooled per segment, refined by a pre-norm transformer over segments
and sent back to every node before an MLP decoder predicts the per-step change.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .mesh import (NUM_NODE_TYPES, MeshGraph, NodeType, SegmentAssignment, build_world_edges,
                   edge_features, expand_overlap, segment_adjacency)

DTYPE = torch.float64
KINEMATIC_TYPES = (NodeType.OBSTACLE, NodeType.HANDLE, NodeType.INFLOW, NodeType.WALL)


@dataclass
class ModelConfig:
    d: int = 128
    L: int = 7
    L_S: int = 4
    heads: int = 8
    pe_steps: int = 16
    use_node_pe: bool = True
    use_segment_pe: bool = True
    use_overlap: bool = False
    overlap: int = 1
    noise: float = 0.02
    residual: bool = True
    regime: str = "eulerian"  # or "lagrangian"
    dim: int = 2
    out_dim: int = 1
    world_radius: float | None = None
    output: str = "auto"  # "direct", "additive", or auto: direct (Eulerian) / additive (Lagrangian)
    seed: int = 0

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide width ({self.d})")
        if self.L < 1 or self.L_S < 0:
            raise ValueError("need L >= 1 and L_S >= 0")
        if self.regime not in ("eulerian", "lagrangian"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.output not in ("auto", "direct", "additive"):
            raise ValueError(f"unknown output mode {self.output!r}")

    @property
    def additive(self) -> bool:
        """Whether the decoder output is added to the current state."""
        if self.output == "auto":
            return self.regime == "lagrangian"
        return self.output == "additive"

    @property
    def node_in(self) -> int:
        if self.regime == "eulerian":
            return self.out_dim + NUM_NODE_TYPES
        return 2 * self.dim + NUM_NODE_TYPES  # velocity, prescribed step, node type

    @property
    def edge_in(self) -> int:
        return (self.dim + 1) * (2 if self.regime == "lagrangian" else 1)

    @property
    def world_in(self) -> int:
        return self.dim + 1

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# positional encodings and segment context
# ---------------------------------------------------------------------------

def rwse(adjacency, steps: int) -> np.ndarray:
    """Return probabilities diag((D^-1 A)^k), k = 1..steps; zero rows for isolated entities."""
    a = np.asarray(adjacency.toarray() if hasattr(adjacency, "toarray") else adjacency, dtype=np.float64)
    if np.any(a < 0) or not np.allclose(a, a.T):
        raise ValueError("rwse needs a non-negative symmetric matrix")
    deg = a.sum(axis=1)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    walk = inv[:, None] * a
    out = np.zeros((len(a), steps))
    power = np.eye(len(a))
    for k in range(steps):
        power = power @ walk
        out[:, k] = np.diag(power)
    return out


@dataclass
class SegmentContext:
    """Static per-(mesh, segmentation) tables with segments in canonical order."""

    home: np.ndarray  # (N,) canonical home segment
    sets: list  # node index arrays per canonical segment (overlap-expanded if enabled)
    node_pe: np.ndarray
    seg_pe: np.ndarray

    @property
    def K(self) -> int:
        return len(self.sets)


def prepare_context(g: MeshGraph, seg: SegmentAssignment, cfg: ModelConfig) -> SegmentContext:
    if len(seg.labels) != g.num_nodes:
        raise ValueError("segmentation does not cover the mesh")
    first = np.full(seg.K, g.num_nodes, dtype=np.int64)
    np.minimum.at(first, seg.labels, np.arange(g.num_nodes))
    if np.any(first == g.num_nodes):
        raise ValueError("empty segment in assignment")
    order = np.argsort(first, kind="stable")
    rank = np.empty(seg.K, dtype=np.int64)
    rank[order] = np.arange(seg.K)
    canon = SegmentAssignment(seg.K, rank[seg.labels])
    sets = canon.node_sets
    if cfg.use_overlap and cfg.overlap > 0:
        sets = expand_overlap(g, canon, cfg.overlap).node_sets
    return SegmentContext(canon.labels, [np.asarray(s, dtype=np.int64) for s in sets],
                          rwse(g.adjacency(), cfg.pe_steps),
                          rwse(segment_adjacency(g, canon).astype(np.float64), cfg.pe_steps))


# ---------------------------------------------------------------------------
# network blocks
# ---------------------------------------------------------------------------

class MLP(nn.Module):
    def __init__(self, n_in: int, width: int, n_out: int, layer_norm: bool = True):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(n_in, width), nn.ReLU(), nn.Linear(width, width), nn.ReLU(),
                                 nn.Linear(width, n_out))
        self.norm = nn.LayerNorm(n_out) if layer_norm else None

    def forward(self, x):
        y = self.net(x)
        return self.norm(y) if self.norm is not None else y


class SegmentTransformerLayer(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads, self.dh = heads, d // heads
        self.ln1, self.ln2 = nn.LayerNorm(d), nn.LayerNorm(d)
        self.query = nn.Linear(d, d, bias=False)
        self.key = nn.Linear(d, d, bias=False)
        self.value = nn.Linear(d, d, bias=False)
        self.out = nn.Linear(d, d)
        self.ffn = nn.Sequential(nn.Linear(d, 4 * d), nn.ReLU(), nn.Linear(4 * d, d))

    def forward(self, h, mask):
        K = h.shape[0]
        z = self.ln1(h)
        q = self.query(z).view(K, self.heads, self.dh).transpose(0, 1)
        k = self.key(z).view(K, self.heads, self.dh).transpose(0, 1)
        v = self.value(z).view(K, self.heads, self.dh).transpose(0, 1)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.dh)
        scores = scores.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)  # (H, K, K)
        mixed = (attn @ v).transpose(0, 1).reshape(K, -1)
        h = h + self.out(mixed)
        h = h + self.ffn(self.ln2(h))
        return h, attn


@dataclass
class GraphBatch:
    """Disjoint union of one or more graphs, as float64/int64 tensors."""

    x: torch.Tensor
    node_pe: torch.Tensor
    mesh_send: torch.Tensor
    mesh_recv: torch.Tensor
    mesh_feat: torch.Tensor
    world_send: torch.Tensor
    world_recv: torch.Tensor
    world_feat: torch.Tensor
    pool_node: torch.Tensor  # (P,) member node per (segment, node) pair
    pool_seg: torch.Tensor
    seg_count: torch.Tensor
    seg_pe: torch.Tensor
    seg_graph: torch.Tensor  # graph id per segment
    home: torch.Tensor  # global segment id per node

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]


@dataclass
class ForwardTape:
    node_latents: list = field(default_factory=list)
    mesh_edge_latents: list = field(default_factory=list)
    world_edge_latents: list = field(default_factory=list)
    segment_latents: list = field(default_factory=list)
    attention: list = field(default_factory=list)  # per layer (H, K, K)
    pooled: torch.Tensor | None = None
    decoder_input: torch.Tensor | None = None


def _scatter_sum(values, index, n):
    out = values.new_zeros((n, values.shape[1]))
    return out.index_add_(0, index, values)


class M4GN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        d = cfg.d
        self.node_encoder = MLP(cfg.node_in, d, d)
        self.mesh_edge_encoder = MLP(cfg.edge_in, d, d)
        self.world_edge_encoder = MLP(cfg.world_in, d, d)
        self.node_pe_mlp = MLP(cfg.pe_steps, d, cfg.node_in, layer_norm=False)
        self.edge_updates = nn.ModuleList(MLP(3 * d, d, d) for _ in range(cfg.L))
        self.node_updates = nn.ModuleList(MLP(3 * d, d, d) for _ in range(cfg.L))
        self.segment_mlp = MLP(d, d, d)
        self.segment_pe_mlp = MLP(cfg.pe_steps, d, d)
        self.transformer = nn.ModuleList(SegmentTransformerLayer(d, cfg.heads) for _ in range(cfg.L_S))
        self.decoder = MLP(2 * d, d, cfg.out_dim, layer_norm=False)
        self.to(DTYPE)
        stats = {"node": cfg.node_in, "edge": cfg.edge_in, "world": cfg.world_in, "out": cfg.out_dim}
        for name, width in stats.items():
            self.register_buffer(f"{name}_mean", torch.zeros(width, dtype=DTYPE))
            self.register_buffer(f"{name}_std", torch.ones(width, dtype=DTYPE))

    # -- stages ------------------------------------------------------------
    def encode(self, b: GraphBatch):
        x = (b.x - self.node_mean) / self.node_std
        if self.cfg.use_node_pe:
            x = x + self.node_pe_mlp(b.node_pe)
        h = self.node_encoder(x)
        e = self.mesh_edge_encoder((b.mesh_feat - self.edge_mean) / self.edge_std)
        w = self.world_edge_encoder((b.world_feat - self.world_mean) / self.world_std)
        return h, e, w

    def message_pass(self, h, e, w, b: GraphBatch, tape: ForwardTape | None = None):
        n = b.num_nodes
        res = self.cfg.residual
        for f_e, f_n in zip(self.edge_updates, self.node_updates):
            de = f_e(torch.cat([e, h[b.mesh_send], h[b.mesh_recv]], dim=1))
            dw = f_e(torch.cat([w, h[b.world_send], h[b.world_recv]], dim=1))
            e = e + de if res else de
            w = w + dw if res else dw
            agg_m = _scatter_sum(e, b.mesh_recv, n)
            agg_w = _scatter_sum(w, b.world_recv, n)
            dh = f_n(torch.cat([h, agg_m, agg_w], dim=1))
            h = h + dh if res else dh
            if tape is not None:
                tape.node_latents.append(h)
                tape.mesh_edge_latents.append(e)
                tape.world_edge_latents.append(w)
        return h, e, w

    def segment_encode(self, h, b: GraphBatch, tape: ForwardTape | None = None):
        K = b.seg_count.shape[0]
        pooled = _scatter_sum(h[b.pool_node], b.pool_seg, K) / b.seg_count[:, None]
        hs = self.segment_mlp(pooled)
        if self.cfg.use_segment_pe:
            hs = hs + self.segment_pe_mlp(b.seg_pe)
        if tape is not None:
            tape.pooled = pooled
        return hs

    def segment_transformer(self, hs, seg_graph, tape: ForwardTape | None = None):
        mask = seg_graph[:, None] == seg_graph[None, :]
        for layer in self.transformer:
            hs, attn = layer(hs, mask)
            if tape is not None:
                tape.attention.append(attn)
                tape.segment_latents.append(hs)
        return hs

    def dispatch_decode(self, h, hs, home, tape: ForwardTape | None = None):
        z = torch.cat([h, hs[home]], dim=1)
        if tape is not None:
            tape.decoder_input = z
        return self.decoder(z)

    def forward(self, b: GraphBatch, record: bool = False):
        """Normalised per-node output and the tape of intermediates (or None)."""
        tape = ForwardTape() if record else None
        h, e, w = self.encode(b)
        if tape is not None:
            tape.node_latents.append(h)
            tape.mesh_edge_latents.append(e)
            tape.world_edge_latents.append(w)
        h, e, w = self.message_pass(h, e, w, b, tape)
        hs = self.segment_encode(h, b, tape)
        if tape is not None:
            tape.segment_latents.append(hs)
        hs = self.segment_transformer(hs, b.seg_graph, tape)
        return self.dispatch_decode(h, hs, b.home, tape), tape

    # -- registry ----------------------------------------------------------
    def parameter_registry(self) -> dict:
        return dict(self.named_parameters())

    def set_normalizers(self, stats: dict) -> None:
        for name, (mean, std) in stats.items():
            getattr(self, f"{name}_mean").copy_(torch.as_tensor(mean, dtype=DTYPE))
            getattr(self, f"{name}_std").copy_(torch.as_tensor(std, dtype=DTYPE))


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    """One graph at one step: network inputs, decoder base and target."""

    x: np.ndarray
    mesh_edges: np.ndarray  # directed (2E, 2)
    mesh_feat: np.ndarray
    world_edges: np.ndarray
    world_feat: np.ndarray
    ctx: SegmentContext
    base: np.ndarray  # prediction = base + decoder output (zeros in direct mode)
    target: np.ndarray | None  # next - base, un-normalised
    kinematic: np.ndarray  # bool mask of prescribed nodes


def _directed(edges: np.ndarray) -> np.ndarray:
    if len(edges) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate([edges, edges[:, ::-1]]).astype(np.int64)


def kinematic_mask(g: MeshGraph) -> np.ndarray:
    return np.isin(g.node_types, KINEMATIC_TYPES)


def build_sample(cfg: ModelConfig, mesh: MeshGraph, ctx: SegmentContext, current: np.ndarray,
                 previous: np.ndarray | None = None, nxt: np.ndarray | None = None,
                 noise: np.ndarray | None = None) -> Sample:
    """Assemble inputs for one step.

    Eulerian: ``current`` is the field (N, out_dim). Lagrangian: ``current``
    and ``previous`` are world positions; ``nxt`` supplies the prescribed
    motion of kinematic nodes and, in training, the target. ``noise`` is
    added to the current spatial input of non-kinematic nodes.
    """
    kin = kinematic_mask(mesh)
    cur = np.array(current, dtype=np.float64)
    if noise is not None:
        cur[~kin] += noise[~kin]
    onehot = mesh.node_type_onehot()
    if cfg.regime == "eulerian":
        x = np.concatenate([cur, onehot], axis=1)
        g = mesh
        world = np.zeros((0, 2), dtype=np.int64)
        world_feat = np.zeros((0, cfg.world_in))
    else:
        prev = cur if previous is None else np.asarray(previous, dtype=np.float64)
        step = np.zeros_like(cur)
        if nxt is not None:
            step[kin] = nxt[kin] - cur[kin]
        x = np.concatenate([cur - prev, step, onehot], axis=1)
        g = mesh.with_positions(cur)
        if cfg.world_radius:
            g = build_world_edges(g, cfg.world_radius)
        world = _directed(g.world_edges)
        world_feat = edge_features(g, world, world_only=True) if len(world) else np.zeros((0, cfg.world_in))
    medges = _directed(g.mesh_edges)
    base = cur if cfg.additive else np.zeros_like(cur)
    target = None if nxt is None else np.asarray(nxt, dtype=np.float64) - base
    return Sample(x, medges, edge_features(g, medges), world, world_feat, ctx, base, target, kin)


def collate(samples: list[Sample]) -> GraphBatch:
    """Disjoint union; segments of different graphs never attend to each other."""
    n_off = k_off = 0
    parts = {k: [] for k in ("x", "pe", "ms", "mr", "mf", "ws", "wr", "wf", "pn", "ps",
                             "cnt", "spe", "sg", "home")}
    for gi, s in enumerate(samples):
        n, K = len(s.x), s.ctx.K
        parts["x"].append(s.x)
        parts["pe"].append(s.ctx.node_pe)
        parts["ms"].append(s.mesh_edges[:, 0] + n_off)
        parts["mr"].append(s.mesh_edges[:, 1] + n_off)
        parts["mf"].append(s.mesh_feat)
        parts["ws"].append(s.world_edges[:, 0] + n_off)
        parts["wr"].append(s.world_edges[:, 1] + n_off)
        parts["wf"].append(s.world_feat)
        for k, members in enumerate(s.ctx.sets):
            parts["pn"].append(members + n_off)
            parts["ps"].append(np.full(len(members), k + k_off))
        parts["cnt"].append(np.array([len(m) for m in s.ctx.sets], dtype=np.float64))
        parts["spe"].append(s.ctx.seg_pe)
        parts["sg"].append(np.full(K, gi))
        parts["home"].append(s.ctx.home + k_off)
        n_off += n
        k_off += K
    f = lambda k: torch.as_tensor(np.concatenate(parts[k]), dtype=DTYPE)  # noqa: E731
    i = lambda k: torch.as_tensor(np.concatenate(parts[k]).astype(np.int64))  # noqa: E731
    return GraphBatch(f("x"), f("pe"), i("ms"), i("mr"), f("mf"), i("ws"), i("wr"), f("wf"),
                      i("pn"), i("ps"), f("cnt"), f("spe"), i("sg"), i("home"))


# ---------------------------------------------------------------------------
# prediction, loss
# ---------------------------------------------------------------------------

def predict_change(model: M4GN, samples: list[Sample]) -> list[np.ndarray]:
    """De-normalised decoder output per sample (add ``sample.base`` for the next state)."""
    with torch.no_grad():
        out, _ = model(collate(samples))
        out = out * model.out_std + model.out_mean
    res, off = [], 0
    for s in samples:
        res.append(out[off:off + len(s.x)].numpy().copy())
        off += len(s.x)
    return res


def loss_and_gradients(model: M4GN, batch: GraphBatch, targets: torch.Tensor,
                       weights: torch.Tensor | None = None):
    """Mean squared error on normalised outputs and a name -> gradient registry.

    ``weights`` (per node, 0/1) restricts the mean to selected nodes.
    """
    pred, _ = model(batch)
    if pred.shape != targets.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} differs from target {tuple(targets.shape)}")
    sq = (pred - targets) ** 2
    if weights is None:
        loss = sq.mean()
    else:
        loss = (sq * weights[:, None]).sum() / (weights.sum() * sq.shape[1])
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    reg = {nm: (torch.zeros_like(p) if g is None else g) for nm, p, g in zip(names, params, grads)}
    return loss.detach(), reg


__all__ = ["ModelConfig", "M4GN", "GraphBatch", "ForwardTape", "SegmentContext", "Sample", "rwse",
           "prepare_context", "build_sample", "collate", "predict_change", "loss_and_gradients",
           "kinematic_mask", "KINEMATIC_TYPES", "DTYPE"]
