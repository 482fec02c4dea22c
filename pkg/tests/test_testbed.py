import numpy as np
import pytest

from m4gn.mesh import NodeType
from m4gn.testbed import (BeamParams, StabilityError, beam_energy, diffusion_solution,
                          gen_beam_case, gen_diffusion_case, simulate_beam, unit_square_mesh)
from m4gn.testbed import diffusion_operators, integrate_diffusion
from m4gn.mesh import make_mesh


def test_diffusion_heat_non_increasing():
    case = gen_diffusion_case(n=12, seed=3, T=30)
    mass, _ = diffusion_operators(case.mesh)
    heat = case.trajectory.features[:, :, 0] @ mass
    assert np.all(np.diff(heat) <= 1e-15)
    assert case.regime == "eulerian"
    assert np.all(case.trajectory.features[:, case.mesh.node_types == NodeType.WALL] == 0)


def test_zero_field_stays_zero():
    pos, cells, boundary = unit_square_mesh(6)
    g = make_mesh(pos, cells)
    mass, K = diffusion_operators(g)
    u = integrate_diffusion(np.zeros(len(pos)), mass, K, 1.0, 1e-4, 50, boundary)
    assert not u.any()


def test_diffusion_converges_under_refinement():
    sols = {n: diffusion_solution(n, seed=0, t_end=0.1) for n in (8, 16, 32, 64)}

    def on_coarse(n):
        # nodes of the n-mesh are every (64/n)-th node of the 64-mesh
        stride = 64 // n
        fine = sols[64][1].reshape(65, 65)[::stride, ::stride].ravel()
        return np.sqrt(np.mean((sols[n][1] - fine) ** 2))

    errs = [on_coarse(n) for n in (8, 16, 32)]
    assert errs[0] > errs[1] > errs[2]


def test_diffusion_unstable_step_rejected():
    with pytest.raises(StabilityError):
        gen_diffusion_case(n=16, T=2, frame_dt=0.002, dt=0.002)
    with pytest.raises(ValueError):
        gen_diffusion_case(n=3)


def test_diffusion_bit_identical():
    a = gen_diffusion_case(n=10, seed=5, T=5)
    b = gen_diffusion_case(n=10, seed=5, T=5)
    assert np.array_equal(a.trajectory.features, b.trajectory.features)


def test_beam_static_case_is_fixpoint():
    case = gen_beam_case(length_cells=10, seed=0, T=20, static=True)
    assert np.array_equal(case.trajectory.positions, np.broadcast_to(
        case.trajectory.positions[0], case.trajectory.positions.shape))


def test_beam_handle_fixed_and_obstacle_touches():
    case = gen_beam_case(length_cells=12, seed=1, T=40)
    x = case.trajectory.positions
    handle = case.mesh.node_types == NodeType.HANDLE
    assert np.array_equal(x[:, handle], np.broadcast_to(x[0, handle], x[:, handle].shape))
    free = case.mesh.node_types == NodeType.NORMAL
    assert np.abs(x[-1, free] - x[0, free]).max() > 1e-3  # the push deforms the beam
    assert case.regime == "lagrangian" and len(case.mesh.world_edges) > 0


def test_beam_energy_non_increasing_in_free_vibration():
    p = BeamParams()
    case = gen_beam_case(length_cells=10, seed=2, T=1, static=True)
    g = case.mesh
    rng = np.random.default_rng(0)
    v0 = 0.05 * rng.standard_normal((g.num_nodes, 2))
    xs, vs = simulate_beam(g, p, np.zeros((41, 2)), v0)
    e = [beam_energy(x, v, g, p) for x, v in zip(xs, vs)]
    assert e[-1] < e[0]
    assert np.all(np.diff(e) <= 1e-12 * e[0])


def test_beam_unstable_and_short_rejected():
    with pytest.raises(StabilityError):
        gen_beam_case(length_cells=10, T=2, params=BeamParams(substeps=1))
    with pytest.raises(ValueError):
        gen_beam_case(length_cells=7)


def test_beam_bit_identical():
    a = gen_beam_case(length_cells=10, seed=4, T=10)
    b = gen_beam_case(length_cells=10, seed=4, T=10)
    assert np.array_equal(a.trajectory.positions, b.trajectory.positions)
    assert np.array_equal(a.trajectory.features, b.trajectory.features)
