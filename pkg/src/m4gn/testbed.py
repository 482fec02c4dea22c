"""Synthetic ground-truth generators: heat diffusion on a square and a pushed beam."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mesh import MeshGraph, NodeType, Trajectory, build_world_edges, make_mesh
from .modal import assemble_laplacian


class StabilityError(ValueError):
    """Requested time step violates the integrator's stability bound."""


@dataclass
class TestCase:
    mesh: MeshGraph
    regime: str  # "eulerian" or "lagrangian"
    params: dict
    T: int
    seed: int
    trajectory: Trajectory
    extras: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class


# ---------------------------------------------------------------------------
# diffusion
# ---------------------------------------------------------------------------

def unit_square_mesh(n: int) -> tuple[np.ndarray, list[tuple[int, int, int]], np.ndarray]:
    """(n+1)^2 grid nodes, two right triangles per square, boundary flags."""
    if n < 1:
        raise ValueError("mesh resolution must be positive")
    s = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(s, s, indexing="xy")
    pos = np.stack([xx.ravel(), yy.ravel()], axis=1)
    idx = lambda i, j: j * (n + 1) + i  # noqa: E731
    cells = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            cells += [(a, b, c), (a, c, d)]
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    boundary = ((ii == 0) | (jj == 0) | (ii == n) | (jj == n)).ravel()
    return pos, cells, boundary


def bump_field(pos: np.ndarray, seed: int) -> np.ndarray:
    """One or two non-negative Gaussian bumps, windowed to vanish on the unit-square boundary."""
    rng = np.random.default_rng(seed)
    u = np.zeros(len(pos))
    for _ in range(int(rng.integers(1, 3))):
        c = rng.uniform(0.35, 0.65, size=2)
        w = rng.uniform(0.15, 0.25)  # resolved by n >= 8 meshes
        amp = rng.uniform(0.5, 1.0)
        u += amp * np.exp(-np.sum((pos - c) ** 2, axis=1) / (2 * w * w))
    window = np.sin(np.pi * np.clip(pos[:, 0], 0, 1)) * np.sin(np.pi * np.clip(pos[:, 1], 0, 1))
    return u * window


def diffusion_operators(g: MeshGraph):
    """Lumped mass vector and stiffness matrix over all nodes."""
    ops = assemble_laplacian(g)
    return np.asarray(ops.M.sum(axis=1)).ravel(), ops.K.tocsr()


def max_stable_dt(mass: np.ndarray, K, kappa: float, free: np.ndarray) -> float:
    """Largest step keeping the explicit update monotone (hence stable) on free nodes."""
    diag = K.diagonal()[free]
    return float(np.min(mass[free] / (kappa * diag)))


def integrate_diffusion(u0: np.ndarray, mass, K, kappa: float, dt: float, steps: int,
                        fixed: np.ndarray) -> np.ndarray:
    u = u0.copy()
    u[fixed] = 0.0
    for _ in range(steps):
        u = u - dt * kappa * (K @ u) / mass
        u[fixed] = 0.0
    return u


def gen_diffusion_case(n: int = 16, seed: int = 0, T: int = 50, kappa: float = 1.0,
                       frame_dt: float = 0.002, dt: float | None = None) -> TestCase:
    """Explicit lumped-mass FEM heat diffusion with zero Dirichlet walls."""
    if n < 4:
        raise ValueError(f"diffusion mesh needs n >= 4, got {n}")
    pos, cells, boundary = unit_square_mesh(n)
    types = np.where(boundary, NodeType.WALL, NodeType.NORMAL)
    u0 = bump_field(pos, seed)
    u0[boundary] = 0.0
    g = make_mesh(pos, cells, types, u0[:, None], meta={"case": "diffusion", "n": n})
    mass, K = diffusion_operators(g)
    free = ~boundary
    limit = max_stable_dt(mass, K, kappa, free)
    if dt is None:
        substeps = max(1, math.ceil(frame_dt / limit * (1 + 1e-12)))
        dt = frame_dt / substeps
    else:
        substeps = int(round(frame_dt / dt))
        if substeps < 1 or not math.isclose(substeps * dt, frame_dt, rel_tol=1e-12):
            raise ValueError("frame_dt must be an integer multiple of dt")
    if dt > limit:
        raise StabilityError(f"dt={dt:.3e} exceeds the stability limit {limit:.3e}")
    frames = [u0]
    u = u0
    for _ in range(T):
        u = integrate_diffusion(u, mass, K, kappa, dt, substeps, boundary)
        frames.append(u)
    field_ = np.stack(frames)[:, :, None]
    traj = Trajectory(g, np.broadcast_to(pos, (T + 1,) + pos.shape).copy(), field_)
    params = {"n": n, "kappa": kappa, "frame_dt": frame_dt, "dt": dt, "substeps": substeps}
    return TestCase(g, "eulerian", params, T, seed, traj)


def diffusion_solution(n: int, seed: int, t_end: float, kappa: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """(positions, field at t_end) on an n x n mesh, stepping at the stable limit."""
    pos, cells, boundary = unit_square_mesh(n)
    g = make_mesh(pos, cells, np.where(boundary, NodeType.WALL, NodeType.NORMAL))
    mass, K = diffusion_operators(g)
    limit = max_stable_dt(mass, K, kappa, ~boundary)
    steps = math.ceil(t_end / limit)
    u0 = bump_field(pos, seed)
    return pos, integrate_diffusion(u0, mass, K, kappa, t_end / steps, steps, boundary)


# ---------------------------------------------------------------------------
# beam
# ---------------------------------------------------------------------------

BEAM_ROWS = 3


@dataclass(frozen=True)
class BeamParams:
    spacing: float = 0.1
    stiffness: float = 1000.0
    mass: float = 1.0
    damping: float = 2.0  # viscous rate, 1/time
    radius: float = 0.15  # obstacle disc
    ring: int = 8
    gap: float = 0.01
    world_radius: float = 0.05
    frame_dt: float = 0.02
    substeps: int = 10


def beam_mesh(length_cells: int, p: BeamParams, obstacle_center) -> MeshGraph:
    h = p.spacing
    cols = length_cells + 1
    pos, types, cells = [], [], []
    for c in range(cols):
        for r in range(BEAM_ROWS):
            pos.append((c * h, r * h))
            types.append(NodeType.HANDLE if c == 0 else NodeType.NORMAL)
    nid = lambda c, r: c * BEAM_ROWS + r  # noqa: E731
    for c in range(length_cells):
        for r in range(BEAM_ROWS - 1):
            a, b, cc, d = nid(c, r), nid(c + 1, r), nid(c + 1, r + 1), nid(c, r + 1)
            cells += [(a, b, cc), (a, cc, d)]
    centre = len(pos)
    pos.append(tuple(obstacle_center))
    types.append(NodeType.OBSTACLE)
    for k in range(p.ring):
        ang = -math.pi / 2 + 2 * math.pi * k / p.ring
        pos.append((obstacle_center[0] + p.radius * math.cos(ang),
                    obstacle_center[1] + p.radius * math.sin(ang)))
        types.append(NodeType.OBSTACLE)
    for k in range(p.ring):
        cells.append((centre, centre + 1 + k, centre + 1 + (k + 1) % p.ring))
    pos = np.asarray(pos)
    return make_mesh(pos, cells, np.asarray(types), mesh_positions=pos.copy())


def _springs(g: MeshGraph) -> tuple[np.ndarray, np.ndarray]:
    beam = g.node_types != NodeType.OBSTACLE
    e = g.mesh_edges[beam[g.mesh_edges[:, 0]] & beam[g.mesh_edges[:, 1]]]
    rest = np.linalg.norm(g.reference_positions[e[:, 1]] - g.reference_positions[e[:, 0]], axis=1)
    return e, rest


def spring_forces(x: np.ndarray, springs: np.ndarray, rest: np.ndarray, k: float) -> np.ndarray:
    d = x[springs[:, 1]] - x[springs[:, 0]]
    length = np.linalg.norm(d, axis=1)
    f = (k * (length - rest) / length)[:, None] * d
    out = np.zeros_like(x)
    np.add.at(out, springs[:, 0], f)
    np.add.at(out, springs[:, 1], -f)
    return out


def beam_energy(x: np.ndarray, v: np.ndarray, g: MeshGraph, p: BeamParams) -> float:
    """Kinetic plus spring energy of the beam nodes."""
    springs, rest = _springs(g)
    beam = g.node_types != NodeType.OBSTACLE
    length = np.linalg.norm(x[springs[:, 1]] - x[springs[:, 0]], axis=1)
    return float(0.5 * p.mass * np.sum(v[beam] ** 2) + 0.5 * p.stiffness * np.sum((length - rest) ** 2))


def beam_stable_dt(g: MeshGraph, p: BeamParams) -> float:
    """2 / omega_max with a Gershgorin bound on the spring stiffness."""
    springs, _ = _springs(g)
    deg = np.bincount(springs.ravel(), minlength=g.num_nodes)
    lam = 2.0 * p.stiffness * deg.max() / p.mass
    return 2.0 / math.sqrt(lam)


def obstacle_path(seed: int, T: int, p: BeamParams) -> np.ndarray:
    """(T+1, 2) obstacle centre offsets: a straight push downwards with a seeded drift."""
    rng = np.random.default_rng(seed)
    speed = rng.uniform(0.004, 0.008)
    drift = rng.uniform(-0.002, 0.002)
    steps = np.arange(T + 1)[:, None]
    return steps * np.array([drift, -speed])


def _contact(x, v, free, centre, v_obs, radius):
    d = x - centre
    dist = np.linalg.norm(d, axis=1)
    inside = free & (dist < radius)
    if not inside.any():
        return
    nrm = d[inside] / np.maximum(dist[inside], 1e-300)[:, None]
    x[inside] = centre + radius * nrm
    rel = np.sum((v[inside] - v_obs) * nrm, axis=1)
    v[inside] -= np.minimum(rel, 0.0)[:, None] * nrm


def simulate_beam(g: MeshGraph, p: BeamParams, path: np.ndarray, v0: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Symplectic Euler with substeps; returns positions and velocities per frame."""
    dt = p.frame_dt / p.substeps
    limit = beam_stable_dt(g, p)
    if dt > limit:
        raise StabilityError(f"substep {dt:.3e} exceeds the stability limit {limit:.3e}")
    springs, rest = _springs(g)
    obstacle = g.node_types == NodeType.OBSTACLE
    free = (g.node_types == NodeType.NORMAL)
    x = g.positions.copy()
    v = np.zeros_like(x) if v0 is None else v0.copy()
    v[~free] = 0.0
    x0_obs = g.positions[obstacle].copy()
    centre0 = x0_obs[0]  # first obstacle node is the disc centre
    xs, vs = [x.copy()], [v.copy()]
    decay = math.exp(-p.damping * dt)
    for f in range(len(path) - 1):
        for s in range(p.substeps):
            alpha = (s + 1) / p.substeps
            off = path[f] + alpha * (path[f + 1] - path[f])
            v_obs = (path[f + 1] - path[f]) / p.frame_dt
            a = spring_forces(x, springs, rest, p.stiffness) / p.mass
            v[free] = (v[free] + dt * a[free]) * decay
            x[free] += dt * v[free]
            x[obstacle] = x0_obs + off
            _contact(x, v, free, centre0 + off, v_obs, p.radius)
        xs.append(x.copy())
        vs.append(v.copy())
    return np.stack(xs), np.stack(vs)


def gen_beam_case(length_cells: int = 20, seed: int = 0, T: int = 50,
                  params: BeamParams | None = None, static: bool = False) -> TestCase:
    """Cantilever lattice beam pushed at its free end by a moving rigid disc.

    Trajectory features hold per-node velocity (x_t - x_{t-1}) / frame_dt.
    """
    if length_cells < 8:
        raise ValueError(f"beam needs length_cells >= 8, got {length_cells}")
    p = params or BeamParams()
    rng = np.random.default_rng(seed)
    tip_x = length_cells * p.spacing
    centre = (tip_x + rng.uniform(-0.02, 0.0),
              (BEAM_ROWS - 1) * p.spacing + p.radius + p.gap)
    g = beam_mesh(length_cells, p, centre)
    path = np.zeros((T + 1, 2)) if static else obstacle_path(seed, T, p)
    xs, vs = simulate_beam(g, p, path)
    vel = np.zeros_like(xs)
    vel[1:] = (xs[1:] - xs[:-1]) / p.frame_dt
    g = build_world_edges(g, p.world_radius)
    g = g.with_features(vel[0])
    traj = Trajectory(g, xs, vel)
    params = {"length_cells": length_cells, **p.__dict__}
    return TestCase(g, "lagrangian", params, T, seed, traj,
                    extras={"obstacle_path": path, "velocities": vs})


__all__ = ["TestCase", "StabilityError", "BeamParams", "gen_diffusion_case", "gen_beam_case",
           "unit_square_mesh", "diffusion_solution", "simulate_beam", "beam_energy",
           "beam_mesh", "obstacle_path"]
