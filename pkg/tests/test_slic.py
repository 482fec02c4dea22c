import math

import numpy as np
import pytest

from conftest import grid_mesh, path_mesh
from m4gn.mesh import NodeType, make_mesh
from m4gn.modal import ModalFeatures, compute_modal_features
from m4gn.slic import (VARIANTS, Centroid, SlicConfig, assign_nodes, build_feature,
                       centroid_distances, cluster_size, default_config, domain_area,
                       enforce_connectivity, hybrid_segment, is_contiguous,
                       update_centroids)
from m4gn.testbed import gen_beam_case


def test_build_feature_examples():
    assert build_feature("od_e", 0.0).tolist() == [1.0]
    assert build_feature("od_e", 1.0)[0] == pytest.approx(0.36788, abs=5e-6)
    assert build_feature("mdod_e", 0.0, [0.5]).tolist() == [1.0, 0.5]
    assert build_feature("od", 0.25).tolist() == [0.25]
    assert build_feature("od_l", math.e).tolist() == pytest.approx([1.0])
    assert build_feature("md", 3.0, [0.1, 0.2]).tolist() == [0.1, 0.2]
    assert build_feature("mdod_l", 1.0, [0.5]).tolist() == [0.0, 0.5]


def test_log_variant_clamps_zero_distance():
    assert build_feature("od_l", 0.0, eps_d=1e-9)[0] == pytest.approx(math.log(1e-9))


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        SlicConfig(variant="xyz")
    with pytest.raises(ValueError):
        SlicConfig(tau=0.0)


def test_centroid_is_mean():
    pos = np.array([[0.0, 0.0], [2.0, 0.0]])
    c = update_centroids(pos, np.zeros((2, 0)), np.array([[1.0], [3.0]]), np.array([0, 0]), 1)[0]
    assert c.x.tolist() == [1.0, 0.0] and c.f_md.tolist() == [2.0] and c.count == 2


def test_singleton_centroid_and_permutation(rng):
    pos = rng.random((6, 2))
    md = rng.random((6, 3))
    obs = rng.random((6, 1))
    labels = np.array([0, 1, 1, 1, 1, 1])
    c = update_centroids(pos, obs, md, labels, 2)
    np.testing.assert_array_equal(c[0].x, pos[0])
    perm = rng.permutation(6)
    cp = update_centroids(pos[perm], obs[perm], md[perm], labels[perm], 2)
    np.testing.assert_allclose(cp[1].x, c[1].x, rtol=0, atol=1e-15)


def test_empty_segment_keeps_previous_centroid():
    pos = np.zeros((2, 2))
    prev = [Centroid(np.ones(2), np.zeros(0), np.zeros(0), 1)] * 2
    c = update_centroids(pos, np.zeros((2, 0)), np.zeros((2, 0)), np.array([0, 0]), 2, prev)
    assert c[1].count == 0 and c[1].stale == 1 and c[1].x.tolist() == [1.0, 1.0]


def test_distance_example():
    c = Centroid(np.array([0.3, 0.4]), np.array([0.3]), np.array([0.6]), 1)
    d = centroid_distances(np.zeros((1, 2)), np.array([[0.5]]), np.array([[1.0]]), [c], 1.0)
    assert d[0, 0] == pytest.approx(1.1, abs=1e-15)


def test_coincident_node_assigned_to_its_centroid():
    pos = np.array([[0.0, 0.0], [1.0, 0.0]])
    cs = [Centroid(pos[k], np.zeros(0), np.zeros(0), 1) for k in range(2)]
    labels, dist, _ = assign_nodes(pos, np.zeros((2, 0)), np.zeros((2, 0)), cs, SlicConfig(S=10))
    assert labels.tolist() == [0, 1] and dist.tolist() == [0.0, 0.0]


def test_gate_fallback_and_ties():
    pos = np.array([[0.5, 0.0], [5.0, 0.0]])
    cs = [Centroid(np.array([0.0, 0.0]), np.zeros(0), np.zeros(0), 1),
          Centroid(np.array([1.0, 0.0]), np.zeros(0), np.zeros(0), 1)]
    labels, _, fallbacks = assign_nodes(pos, np.zeros((2, 0)), np.zeros((2, 0)), cs, SlicConfig(S=1.0))
    assert labels.tolist() == [0, 1]  # tie -> smaller index; far node -> global nearest
    assert fallbacks == 1


def test_enforce_connectivity_examples():
    g = path_mesh(4)
    assert enforce_connectivity(g, np.array([0, 0, 1, 1])).tolist() == [0, 0, 1, 1]
    out = enforce_connectivity(g, np.array([0, 1, 1, 0]))
    assert out.tolist() == [0, 1, 1, 1]


def test_enforce_connectivity_postcondition(rng):
    from m4gn.mesh import SegmentAssignment
    g = grid_mesh(8, 8)
    for _ in range(10):
        labels = rng.integers(0, 5, 64)
        out = enforce_connectivity(g, labels, 5)
        present = np.unique(out)
        a = SegmentAssignment(5, out)
        assert is_contiguous(g, a), present


def test_cluster_size_arithmetic():
    assert cluster_size(0.005, 19) == pytest.approx(0.01622, abs=5e-6)
    assert cluster_size(0.005, 19) == math.sqrt(0.005 / 19)
    assert 19 * cluster_size(0.005, 19) ** 2 == pytest.approx(0.005, rel=1e-15)
    assert domain_area(np.array([[0.0, 0.0], [0.5, 0.01], [0.2, 0.005]])) == pytest.approx(0.005)


@pytest.fixture(scope="module")
def beam():
    case = gen_beam_case(length_cells=12, seed=0, T=1)
    _, feats = compute_modal_features(case.mesh, m=4)
    return case.mesh, feats


def test_k1_single_segment(beam):
    g, feats = beam
    a = hybrid_segment(g, feats, default_config(g, 1), 1)
    assert a.K == 1 and not a.labels.any()


@pytest.mark.parametrize("variant", VARIANTS)
def test_variants_contract(beam, variant):
    g, feats = beam
    cfg = default_config(g, 5, variant=variant, tau=0.5)
    a = hybrid_segment(g, feats, cfg, 5)
    b = hybrid_segment(g, feats, cfg, 5)
    assert np.array_equal(a.labels, b.labels)
    assert sorted(set(a.labels.tolist())) == list(range(5))
    assert is_contiguous(g, a)


def test_huge_tau_ignores_feature_terms(beam):
    g, feats = beam
    zero = ModalFeatures(np.zeros_like(feats.f_md), np.zeros_like(feats.d_obs),
                         feats.eigenvalues, feats.diameter)
    cfg = default_config(g, 6, variant="mdod_e", tau=1e6)
    a = hybrid_segment(g, feats, cfg, 6)
    b = hybrid_segment(g, zero, cfg, 6)
    assert np.array_equal(a.labels, b.labels)


def test_spatial_scale_equivariance(beam):
    g, feats = beam
    s = 4.0  # power of two keeps the arithmetic exact
    gs = make_mesh(g.positions * s, g.cells, g.node_types)
    cfg = SlicConfig(variant="mdod_e", tau=0.5, S=0.3)
    cfg_s = SlicConfig(variant="mdod_e", tau=0.5 / s, S=0.3 * s)
    a = hybrid_segment(g, feats, cfg, 6)
    b = hybrid_segment(gs, feats, cfg_s, 6)
    assert np.array_equal(a.labels, b.labels)


def test_run_log_recorded(beam):
    g, feats = beam
    a = hybrid_segment(g, feats, default_config(g, 4), 4)
    assert a.meta["iterations"] == len(a.meta["relabel_fraction"]) >= 1
    assert a.meta["variant"] == "mdod_e"


def test_obstacle_variants_see_obstacle():
    g = grid_mesh(6, 3, 0.1)
    types = np.zeros(18, int)
    types[:3] = NodeType.OBSTACLE
    g = make_mesh(g.positions, g.cells, types)
    _, feats = compute_modal_features(g, m=2)
    assert feats.d_obs[:3].tolist() == [0.0, 0.0, 0.0] and feats.d_obs.max() > 0
