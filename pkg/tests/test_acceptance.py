"""Acceptance suite: one PASS/FAIL line per primary criterion.

Run alone with ``python3 -m pytest tests/test_acceptance.py -v`` (about five
minutes on one core); the lines are printed even while pytest captures output.
"""

import math
import time
from pathlib import Path

import networkx as nx
import numpy as np
import pytest

import invariants as I
from m4gn import oracle
from m4gn.mesh import NodeType, make_mesh
from m4gn.metrics import rollout_rmse
from m4gn.modal import (Material, assemble_elasticity, assemble_laplacian, compute_modal_features,
                        default_dirichlet_nodes, solve_generalized_eig)
from m4gn.model import M4GN, ModelConfig
from m4gn.partition import WGraph, edge_cut, multilevel_partition, part_cap
from m4gn.slic import (VARIANTS, cluster_size, default_config, hybrid_segment, is_contiguous,
                       random_balanced_segmentation)
from m4gn import testbed as tb
from m4gn import train as tr
from pipeline import run_pipeline, snapshot

DATA = Path(__file__).parent / "data" / "connected_graphs_le8.g6"


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def testbed_meshes():
    return {"diffusion": tb.gen_diffusion_case(n=16, seed=0, T=1).mesh,
            "beam": tb.gen_beam_case(length_cells=20, seed=0, T=1).mesh}


def test_metric_oracle_equivalence(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    bad = []
    for i in range(200):
        mesh, seg, pred, true = oracle.random_case(rng, max_nodes=12, max_K=3)
        res = oracle.compare(mesh, seg, pred, true, pred, true, tol=1e-12)
        bad += [(i, k) for k, (*_, ok) in res.items() if not ok]
    dt = time.perf_counter() - t0
    report("metric-oracle equivalence", not bad and dt < 10,
           f"200 cases, {len(bad)} mismatches at 1e-12, {dt:.2f} s (limit 10 s)")


def test_eigensolver_correctness(report, testbed_meshes):
    worst = 0.0
    systems = []
    g = testbed_meshes["diffusion"]
    systems.append(assemble_laplacian(g, default_dirichlet_nodes(g)))
    g = testbed_meshes["beam"]
    fixed = np.flatnonzero(np.isin(g.node_types, [NodeType.HANDLE, NodeType.OBSTACLE]))
    systems.append(assemble_elasticity(g, Material(), fixed))
    small = tb.gen_beam_case(length_cells=8, seed=0, T=1).mesh
    systems.append(assemble_elasticity(small, Material(), [0, 1, 2]))
    coarse = tb.gen_diffusion_case(n=8, T=1).mesh
    systems.append(assemble_laplacian(coarse, default_dirichlet_nodes(coarse)))
    for ops, m in zip(systems, (8, 8, None, None)):
        res = solve_generalized_eig(ops, ops.size if m is None else m)
        worst = max(worst, float(res.residuals.max()))
    n = 50
    line = make_mesh(np.stack([np.arange(n + 1) / n, np.zeros(n + 1)], 1), [(i, i + 1) for i in range(n)])
    lam1 = solve_generalized_eig(assemble_laplacian(line, [0, n]), 1).eigenvalues[0]
    rel = abs(lam1 - math.pi ** 2) / math.pi ** 2
    free = tb.unit_square_mesh(6)
    ops = assemble_elasticity(make_mesh(free[0], free[1]), Material(), [])
    lam = solve_generalized_eig(ops, ops.size).eigenvalues
    zeros = int(np.sum(np.abs(lam) <= 1e-6 * lam.max()))
    ok = worst <= 1e-8 and rel < 0.01 and zeros == 3
    report("eigensolver correctness", ok,
           f"max relative residual {worst:.2e} (<= 1e-8), interval lambda_1 off pi^2 by {100 * rel:.3f}% "
           f"(< 1%), {zeros} zero modes in free 2D elasticity (want 3)")


def _brute_cut(n, edges, cap):
    best = math.inf
    for mask in range(1, 2 ** (n - 1)):
        ones = bin(mask).count("1")
        if max(ones, n - ones) <= cap:
            best = min(best, sum(((mask >> u) & 1) != ((mask >> v) & 1) for u, v in edges))
    return best


def test_partitioner_optimality(report, testbed_meshes):
    graphs = nx.read_graph6(DATA)
    misses = 0
    for G in graphs:
        n = G.number_of_nodes()
        edges = sorted(tuple(sorted(e)) for e in G.edges())
        a = multilevel_partition(WGraph.from_edges(n, edges), 2)
        sizes = a.sizes()
        if a.meta["edge_cut"] != _brute_cut(n, edges, part_cap(n, 2)) or sizes.max() > part_cap(n, 2):
            misses += 1
    beaten = {}
    for name, g in testbed_meshes.items():
        wg = WGraph.from_mesh(g)
        cut = multilevel_partition(g, 6).meta["edge_cut"]
        beaten[name] = sum(cut < edge_cut(wg, random_balanced_segmentation(g.num_nodes, 6, s).labels)
                           for s in range(20))
    ok = misses == 0 and len(graphs) == 12112 and all(v == 20 for v in beaten.values())
    report("partitioner optimality", ok,
           f"{len(graphs) - misses}/{len(graphs)} connected graphs on <= 8 nodes optimal at K=2; "
           f"random baselines beaten: diffusion {beaten['diffusion']}/20, beam {beaten['beam']}/20")


def test_segmentation_contract(report, testbed_meshes):
    failures = []
    K = 6
    for name, g in testbed_meshes.items():
        _, feats = compute_modal_features(g, m=8)
        for variant in VARIANTS:
            cfg = default_config(g, K, variant=variant, tau=1.0)
            a = hybrid_segment(g, feats, cfg, K)
            b = hybrid_segment(g, feats, cfg, K)
            if not np.array_equal(a.labels, b.labels):
                failures.append(f"{name}/{variant} nondeterministic")
            if sorted(set(a.labels.tolist())) != list(range(K)):
                failures.append(f"{name}/{variant} not exactly {K} segments")
            if not is_contiguous(g, a):
                failures.append(f"{name}/{variant} disconnected segment")
    S = cluster_size(0.005, 19)
    arithmetic = S == math.sqrt(0.005 / 19) and round(S, 5) == 0.01622
    report("segmentation contract", not failures and arithmetic,
           f"6 variants x 2 testbeds deterministic/connected/exact-K: "
           f"{'ok' if not failures else failures}; S(0.005, 19) = {S:.5f}")


def test_model_invariants(report):
    perm = I.node_permutation_error()
    relabel = I.segment_relabel_equal()
    attn = I.attention_row_error()
    pool = I.pooling_order_error()
    fd, count, small = I.fd_gradient_error()
    hop, reach = I.receptive_field(L=3, L_S=2, n=21)
    ok = (perm <= 1e-12 and relabel and attn <= 1e-12 and pool <= 1e-12 and fd <= 1e-5
          and hop == 3 and reach == 21)
    report("model invariants", ok,
           f"node permutation {perm:.1e}, segment relabel equal={relabel}, attention rows {attn:.1e}, "
           f"pooling order {pool:.1e}, FD gradient {fd:.1e} over {count} entries "
           f"({small} below the resolvable floor), receptive field {hop} hops / global reach {reach}/21")


def test_diffusion_training(report):
    t0 = time.perf_counter()
    cases = [tb.gen_diffusion_case(n=16, seed=s, T=50) for s in range(22)]
    cfg = ModelConfig(d=32, L=3, L_S=2, heads=4, pe_steps=8, noise=0.02, regime="eulerian", out_dim=1, seed=0)
    seg = multilevel_partition(cases[0].mesh, 6)
    eps = [tr.make_episode(c.trajectory, seg, cfg) for c in cases]
    trn, val = eps[:20], eps[20:]
    model = M4GN(cfg)
    model.set_normalizers(tr.compute_normalizers(cfg, trn))
    before = tr.one_step_rmse(model, val)
    tr.train(model, trn, tr.TrainConfig(steps=2000, lr=1e-3, lr_final=1e-6, seed=0, log_every=0))
    after = tr.one_step_rmse(model, val)
    roll = np.mean([rollout_rmse(tr.rollout(model, ep, 50)[1:], ep.states("eulerian")[1:51]) for ep in val])
    pers = np.mean([rollout_rmse(tr.persistence(ep, "eulerian", 50)[1:], ep.states("eulerian")[1:51])
                    for ep in val])
    dt = time.perf_counter() - t0
    ratio = before / after
    report("scaled-down diffusion training", ratio >= 10 and roll < pers and dt < 900,
           f"1-step RMSE {before:.4f} -> {after:.4f} ({ratio:.1f}x, need 10x); 50-step rollout "
           f"{roll:.4f} vs persistence {pers:.4f}; {dt:.0f} s (limit 900 s)")


def test_segmentation_effect_on_beam(report):
    cases = [tb.gen_beam_case(length_cells=20, seed=s, T=50) for s in range(12)]
    g = cases[0].mesh
    K = 6
    _, feats = compute_modal_features(g, m=8)
    slic = hybrid_segment(g, feats, default_config(g, K, variant="mdod_e", tau=1.0), K)
    wins, rows = 0, []
    for seed in range(3):
        res = {}
        for name, seg in (("slic", slic), ("random", random_balanced_segmentation(g.num_nodes, K, seed))):
            cfg = ModelConfig(d=32, L=3, L_S=2, heads=4, pe_steps=8, noise=0.0, regime="lagrangian",
                              dim=2, out_dim=2, world_radius=cases[0].params["world_radius"], seed=seed)
            eps = [tr.make_episode(c.trajectory, seg, cfg) for c in cases]
            model = M4GN(cfg)
            tr.train(model, eps[:10], tr.TrainConfig(steps=2000, lr=1e-3, seed=seed, log_every=0))
            res[name] = float(np.mean([rollout_rmse(tr.rollout(model, ep)[1:], ep.states("lagrangian")[1:])
                                       for ep in eps[10:]]))
        wins += res["slic"] <= res["random"]
        rows.append(f"seed {seed}: {res['slic']:.4f} vs {res['random']:.4f}")
    report("segmentation effect on beam", wins >= 2,
           f"SLIC-MDOD_e <= random in {wins}/3 seeds (RMSE-all slic vs random: {'; '.join(rows)})")


def test_end_to_end_reproducibility(report, tmp_path):
    codes_a = run_pipeline(tmp_path / "a", subprocess_mode=True)
    codes_b = run_pipeline(tmp_path / "b", subprocess_mode=True)
    a, b = snapshot(tmp_path / "a"), snapshot(tmp_path / "b")
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = codes_a == codes_b == [0] * len(codes_a) and not differ
    report("end-to-end reproducibility", ok,
           f"{len(a)} artifacts from gen/modal/segment/train/rollout/metrics/report in two fresh "
           f"processes, {len(differ)} differ; exit codes {codes_a}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
