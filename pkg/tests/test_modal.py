import math

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import grid_mesh, path_mesh
from m4gn.mesh import NodeType, make_mesh
from m4gn.modal import (AssemblyError, FeOperators, Material, assemble_elasticity,
                        assemble_laplacian, compute_modal_features, mesh_diameter,
                        modal_features, obstacle_distance, relative_residuals,
                        solve_generalized_eig)
from m4gn.testbed import unit_square_mesh


def _interval(n):
    return path_mesh(n + 1, 1.0 / n)


def _ops(K, M):
    K, M = sp.csr_matrix(np.atleast_2d(K)), sp.csr_matrix(np.atleast_2d(M))
    return FeOperators(K, M, np.arange(K.shape[0])[:, None])


def test_interval_first_eigenvalue_near_pi_squared():
    res = solve_generalized_eig(assemble_laplacian(_interval(50), [0, 50]), 1)
    assert abs(res.eigenvalues[0] - math.pi ** 2) / math.pi ** 2 < 0.01


def test_interval_refinement_decreases_toward_continuum():
    lam = [solve_generalized_eig(assemble_laplacian(_interval(n), [0, n]), 1).eigenvalues[0]
           for n in (10, 20, 50)]
    assert lam[0] > lam[1] > lam[2] > math.pi ** 2


def test_single_interior_node():
    ops = assemble_laplacian(path_mesh(3), [0, 2])
    res = solve_generalized_eig(ops, 1)
    assert res.eigenvalues[0] == pytest.approx(ops.K[0, 0] / ops.M[0, 0], rel=1e-12)


def test_unit_square_first_eigenvalue():
    pos, cells, boundary = unit_square_mesh(24)
    ops = assemble_laplacian(make_mesh(pos, cells), np.flatnonzero(boundary))
    lam = solve_generalized_eig(ops, 1).eigenvalues[0]
    assert abs(lam - 2 * math.pi ** 2) / (2 * math.pi ** 2) < 0.02


def test_laplacian_all_constrained_errors():
    with pytest.raises(AssemblyError):
        assemble_laplacian(path_mesh(3), [0, 1, 2])


def test_laplacian_degenerate_cell_named():
    g = make_mesh([[0, 0], [1, 0], [2, 0]], [(0, 1, 2)])
    with pytest.raises(AssemblyError, match="cell 0"):
        assemble_laplacian(g)


def test_scalar_and_two_by_two_systems():
    r = solve_generalized_eig(_ops([[2.0]], [[1.0]]), 1)
    assert r.eigenvalues.tolist() == pytest.approx([2.0]) and r.eigenvectors[0, 0] == pytest.approx(1.0)
    r = solve_generalized_eig(_ops([[2.0, -1.0], [-1.0, 2.0]], np.eye(2)), 2)
    assert r.eigenvalues == pytest.approx([1.0, 3.0], abs=1e-12)


def test_m_orthonormal_and_sign_convention(rng):
    ops = assemble_laplacian(grid_mesh(6, 5, 0.2), [0, 29])
    r = solve_generalized_eig(ops, 5)
    gram = r.eigenvectors.T @ (ops.M @ r.eigenvectors)
    np.testing.assert_allclose(gram, np.eye(5), atol=1e-10)
    for k in range(5):
        v = r.eigenvectors[:, k]
        assert v[np.flatnonzero(np.abs(v) > 1e-12)[0]] > 0
    assert np.all(relative_residuals(ops.K, ops.M, r.eigenvalues, r.eigenvectors) <= 1e-8)


def test_axial_bar():
    E, A, L, rho = 3.0, 2.0, 0.5, 4.0
    g = make_mesh([[0.0, 0.0], [L, 0.0]], [(0, 1)])
    ops = assemble_elasticity(g, Material(E=E, rho=rho, area=A), [0])
    # transverse DOF of a bar has no stiffness, so keep the axial one
    axial = ops.dof_map[1, 0]
    k, m = ops.K[axial, axial], ops.M[axial, axial]
    assert k == pytest.approx(E * A / L)
    assert m == pytest.approx(rho * A * L / 2)


def test_rigid_translation_in_null_space():
    g = grid_mesh(4, 3, 0.3)
    ops = assemble_elasticity(g, Material(), [])
    for comp in range(2):
        u = np.zeros(ops.size)
        u[ops.dof_map[:, comp]] = 1.0
        assert np.abs(ops.K @ u).max() < 1e-12


def test_unconstrained_2d_has_three_zero_modes():
    ops = assemble_elasticity(grid_mesh(5, 4, 0.25), Material(E=10.0, nu=0.3), [])
    lam = solve_generalized_eig(ops, ops.size).eigenvalues
    assert np.sum(np.abs(lam) <= 1e-6 * lam.max()) == 3


def test_unconstrained_3d_has_six_zero_modes():
    pos = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]], float)
    ops = assemble_elasticity(make_mesh(pos, [(0, 1, 2, 3), (1, 2, 3, 4)]), Material(), [])
    lam = solve_generalized_eig(ops, ops.size).eigenvalues
    assert np.sum(np.abs(lam) <= 1e-6 * lam.max()) == 6


def test_doubling_E_doubles_eigenvalues():
    g = grid_mesh(5, 3, 0.2)
    a = solve_generalized_eig(assemble_elasticity(g, Material(E=1.0), [0, 1, 2]), 6)
    b = solve_generalized_eig(assemble_elasticity(g, Material(E=2.0), [0, 1, 2]), 6)
    np.testing.assert_allclose(b.eigenvalues, 2 * a.eigenvalues, rtol=1e-9)
    np.testing.assert_allclose(np.abs(b.eigenvectors), np.abs(a.eigenvectors), atol=1e-8)


@pytest.mark.parametrize("kw", [{"E": 0.0}, {"rho": -1.0}, {"nu": 0.5}, {"nu": -1.0}])
def test_bad_material_rejected(kw):
    with pytest.raises(ValueError):
        Material(**kw)


def test_inverted_element_rejected():
    g = make_mesh([[0, 0], [0, 1], [1, 0]], [(0, 1, 2)])
    with pytest.raises(AssemblyError):
        assemble_elasticity(g, Material(), [])


def test_obstacle_distance_single_hop():
    g = make_mesh([[0.0, 0.0], [0.1, 0.0], [0.3, 0.0]], [(0, 1), (1, 2)])
    d = obstacle_distance(g, [0])
    assert d.tolist() == pytest.approx([0.0, 0.1, 0.3])


def test_no_obstacles_gives_diameter():
    g = grid_mesh(3, 3)
    f = modal_features(None, g, [])
    assert np.all(f.d_obs == mesh_diameter(g))


def test_feature_columns_unit_max_abs():
    g = grid_mesh(6, 6, 0.2)
    types = np.zeros(36, int)
    types[[0, 5, 30, 35]] = NodeType.WALL
    g = make_mesh(g.positions, g.cells, types)
    _, f = compute_modal_features(g, m=4)
    assert np.allclose(np.abs(f.f_md).max(axis=0), 1.0)
    assert np.all(np.isfinite(f.f_md))


def test_eigenvalues_invariant_under_relabeling(rng):
    g = grid_mesh(5, 4, 0.25)
    perm = rng.permutation(20)
    inv = np.argsort(perm)
    gp = make_mesh(g.positions[perm], [tuple(inv[v] for v in c) for c in g.cells])
    a = solve_generalized_eig(assemble_laplacian(g, [0, 19]), 4)
    b = solve_generalized_eig(assemble_laplacian(gp, inv[[0, 19]]), 4)
    np.testing.assert_allclose(a.eigenvalues, b.eigenvalues, rtol=1e-10)
    fa = np.abs(a.nodal_modes()[:, :, 0])
    fb = np.abs(b.nodal_modes()[:, :, 0])
    np.testing.assert_allclose(fa, fb[inv], atol=1e-8)
