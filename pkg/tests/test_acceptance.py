"""Acceptance criteria 1-9, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
PASS/FAIL lines in the terminal summary.
"""
import itertools
import time

import numpy as np
import pytest

from forestamr.bench import RunConfig, run_ball, run_euler
from forestamr.connectivity import build_brick, build_from_mesh
from forestamr.forest import fix_family_splits, from_global, new_uniform, partition
from forestamr.fvsolver import conserved_totals, init_problem, load_config, pressure, timestep
from forestamr.ghost import ghost_exchange
from forestamr.indices import entity_id
from forestamr.quadrant import ROOT_LEN, coordinates_of, num_subentities
from helpers import balance_case, random_case, split, to_leaves
from oracles import (Brick, floor_offsets, family_split_exists, geometric_adjacency_2d, is_balanced, kids,
                     sort_leaves)
from test_fvsolver import smooth_forest, sod_error
from test_ghost import MESH_C, MESH_V, check_layer, random_refinement
from test_indices import refined_brick_forest, physical
from test_meshiter import global_entries

R = ROOT_LEN
BALL_P = (1, 4, 8)


# -- 1 -----------------------------------------------------------------------


@pytest.mark.criterion(1, "balanced marking equals the refine-then-ripple oracle")
def test_c1_balance_oracle():
    rng = np.random.default_rng(20261016)
    start = time.perf_counter()
    mismatches = 0
    for k in range(1000):
        P = (1, 2, 4)[k % 3]
        got, expected, _, brick = balance_case(rng, P, maxlevel=int(rng.integers(1, 6)))
        if got != expected or not is_balanced(got, brick):
            mismatches += 1
    elapsed = time.perf_counter() - start
    print(f"\ncriterion 1: 1000 forests, {mismatches} mismatches, {elapsed:.1f} s")
    assert mismatches == 0
    assert elapsed < 300


# -- 2 and 9 -----------------------------------------------------------------


@pytest.fixture(scope="module")
def ball_runs():
    """Full rotation of the 64x64 brick, f = c + 4, for every rank count."""
    runs = {}
    for P in BALL_P:
        cfg = load_config("ball", coarse=0, fine=4)
        runs[P] = run_ball(RunConfig(cfg, steps=100, ranks=P, measure_monolithic=(P == BALL_P[-1])))
    return runs


@pytest.mark.criterion(2, "sweep bound on the rotating ball")
@pytest.mark.parametrize("P", BALL_P)
def test_c2_sweep_bound(ball_runs, P):
    recs = ball_runs[P].records
    assert len(recs) == 100
    print(f"\ncriterion 2 P={P}: max sweeps {max(r.sweeps_used for r in recs)}, "
          f"fallbacks {sum(r.fell_back for r in recs)}, leaves {min(r.leaves for r in recs)}..{max(r.leaves for r in recs)}")
    assert all(r.sweeps_used <= 3 for r in recs)
    assert not any(r.fell_back for r in recs)


@pytest.mark.criterion(9, "ripple face visits at most half of the monolithic ones")
def test_c9_ripple_vs_monolithic(ball_runs):
    recs = ball_runs[BALL_P[-1]].records
    ratios = [r.face_visits / r.monolithic_visits for r in recs]
    print(f"\ncriterion 9: visit ratio max {max(ratios):.3f}, mean {np.mean(ratios):.3f}")
    assert all(r.monolithic_visits > 0 for r in recs)
    assert max(ratios) <= 0.5


# -- 3 -----------------------------------------------------------------------


@pytest.mark.criterion(3, "partition independence of ball and shock-bubble runs")
def test_c3_ball_partition_independent():
    hist = {}
    for P in (1, 2, 4, 8):
        res = run_ball(RunConfig(load_config("ball", coarse=0, fine=3), steps=50, ranks=P, record_history=True))
        hist[P] = res.history
    assert len(hist[1]) == 50
    for P in (2, 4, 8):
        assert all(np.array_equal(a, b) for a, b in zip(hist[1], hist[P]))


@pytest.mark.criterion(3, "partition independence of ball and shock-bubble runs")
def test_c3_euler_partition_independent():
    hist = {}
    for P in (1, 2, 4, 8):
        res = run_euler(RunConfig(load_config("shock-bubble"), steps=20, ranks=P, record_history=True))
        hist[P] = res.history
    assert len(hist[1]) == 20
    for P in (2, 4, 8):
        for (la, ua), (lb, ub) in zip(hist[1], hist[P]):
            assert np.array_equal(la, lb)
            assert np.all(np.abs(ua - ub) <= 1e-12 * np.abs(ua))


# -- 4 -----------------------------------------------------------------------


@pytest.mark.criterion(4, "partition counts and family scan")
def test_c4_partition_counts():
    for N in range(1, 201):
        conn = build_brick(N, 1)
        base = new_uniform(conn, 0)
        for P in range(1, 17):
            f = from_global(conn, base.ranks[0], P, offsets=[0] * P + [N])
            g, _ = partition(f)
            assert g.offsets.tolist() == floor_offsets(N, P)
            counts = np.diff(g.offsets)
            assert counts.max() - counts.min() <= 1


@pytest.mark.criterion(4, "partition counts and family scan")
def test_c4_family_scan():
    rng = np.random.default_rng(4)
    for k in range(300):
        P = int(rng.integers(2, 17))
        dim = 2 if k % 4 else 3
        brick, conn, leaves, _ = random_case(rng, 1, maxlevel=4 if dim == 2 else 2, dim=dim,
                                             max_trees=9 if dim == 2 else 4, fix=False)
        N = len(leaves)
        cuts = np.sort(rng.integers(0, N + 1, P - 1))
        f = from_global(conn, to_leaves(leaves, dim), P, offsets=[0, *cuts.tolist(), N])
        g, _ = fix_family_splits(f)
        assert not family_split_exists(leaves, g.offsets.tolist(), dim)
        assert g.global_leaves().key_tuples() == leaves


# -- 5 -----------------------------------------------------------------------


@pytest.mark.criterion(5, "ghost layer equals the all-pairs oracle, exchange round-trips")
def test_c5_ghosts():
    rng = np.random.default_rng(5)
    conn_mesh = build_from_mesh(MESH_V, MESH_C)
    for k in range(520):
        P = int(rng.integers(1, 7))
        if k % 5 == 4:
            leaves = random_refinement(rng, [(t, (0, 0), 0) for t in range(3)], 4, 4)
            forest = from_global(conn_mesh, to_leaves(leaves, 2), P)
            pairs = geometric_adjacency_2d(conn_mesh.vertices.tolist(), conn_mesh.tree_to_vertex.tolist(), leaves)
            pairs |= {(b, a) for a, b in pairs}
        else:
            dim = 3 if k % 10 == 3 else 2
            brick, _, leaves, forest = random_case(rng, P, maxlevel=4 if dim == 2 else 2, dim=dim,
                                                   max_trees=9 if dim == 2 else 4, fix=bool(k % 2))
            pairs = {(a, b) for a, b in brick.adjacency(leaves) if a != b}
        layer = check_layer(forest, pairs)
        payload = rng.normal(size=(forest.num_leaves, 2))
        forest.comm.transcript.clear()
        out = ghost_exchange(forest, layer, split(payload, forest.offsets))
        for p in range(P):
            assert np.array_equal(out[p], payload[layer[p].global_index])
        msgs = forest.comm.transcript.pairs("ghost")
        owner = np.searchsorted(forest.offsets, np.arange(forest.num_leaves), side="right") - 1
        rank_pairs = {(int(owner[a]), int(owner[b])) for a, b in pairs if owner[a] != owner[b]}
        assert sorted(msgs) == sorted(rank_pairs)


# -- 6 -----------------------------------------------------------------------


@pytest.mark.criterion(6, "global id examples and collision-free ids")
def test_c6_id_examples():
    f = refined_brick_forest()
    lv = f.ranks[0]
    t3 = [i for i in range(len(lv)) if lv.tree[i] == 3]
    assert entity_id(f, 0, 0, 2, 0) == (0, 0, 2)
    assert entity_id(f, 0, t3[3], 2, 3) == (R, R, 11)
    assert entity_id(f, 0, 0, 2, 3) == (R, R, 2)
    assert entity_id(f, 0, t3[0], 2, 3) == (R // 2, R // 2, 11)


def enumerate_forests(brick, depth):
    """Every forest of the brick whose leaves are at most ``depth`` levels deep."""
    def tree_options(t, c, lvl):
        opts = [[(t, c, lvl)]]
        if lvl < depth:
            subs = [tree_options(t, k, lvl + 1) for k in kids(c, lvl)]
            opts += [sum(combo, []) for combo in itertools.product(*subs)]
        return opts

    per_tree = [tree_options(t, (0,) * brick.d, 0) for t in range(brick.num_trees())]
    for combo in itertools.product(*per_tree):
        yield sort_leaves(sum(combo, []))


@pytest.mark.criterion(6, "global id examples and collision-free ids")
def test_c6_no_collisions_exhaustive():
    cases = [(Brick((1, 1)), 2), (Brick((2, 1)), 2), (Brick((1, 1), (True, True)), 2),
             (Brick((2, 1), (True, False)), 2), (Brick((1, 1, 1)), 1), (Brick((2, 1, 1), (True, False, False)), 1)]
    total = 0
    for brick, depth in cases:
        conn = build_brick(*brick.n, periodic=brick.periodic)
        for leaves in enumerate_forests(brick, depth):
            f = from_global(conn, to_leaves(leaves, brick.d), 1)
            lv = f.ranks[0]
            for c in range(0, brick.d + 1):
                ids = {}
                for i in range(len(lv)):
                    tree, q = lv.quadrant(i)
                    for s in range(num_subentities(brick.d, c)):
                        where = (i,) if c == 0 else physical(brick, tree, coordinates_of(q, c, s))
                        key = entity_id(f, 0, i, c, s)
                        assert ids.setdefault(key, where) == where
                assert len(set(ids.values())) == len(ids)
            total += 1
    print(f"\ncriterion 6: {total} forests enumerated")
    assert total > 300


# -- 7 -----------------------------------------------------------------------


@pytest.mark.criterion(7, "finite-volume sanity")
def test_c7_sod_convergence():
    errors = [sod_error(level) for level in (1, 2, 3)]
    print(f"\ncriterion 7: Sod L1(rho) {errors}")
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] < 0.02


@pytest.mark.criterion(7, "finite-volume sanity")
@pytest.mark.parametrize("P", [1, 3])
def test_c7_conservation_per_step(P):
    cfg, f, bc = smooth_forest(P, np.random.default_rng(7))
    u = init_problem(cfg, f)
    prev = conserved_totals(f, u)
    for _ in range(40):
        u, _ = timestep(f, u, cfg.cfl, bc)
        tot = conserved_totals(f, u)
        for k in (0, -1):
            assert abs(tot[k] - prev[k]) <= 1e-12 * abs(prev[k])
        prev = tot


@pytest.mark.criterion(7, "finite-volume sanity")
def test_c7_shock_bubble_positivity():
    start = time.perf_counter()
    cfg = load_config("shock-bubble", fine=4)
    res = run_euler(RunConfig(cfg, ranks=4))
    u = np.concatenate(res.states)
    elapsed = time.perf_counter() - start
    print(f"\ncriterion 7: shock-bubble {len(res.records)} steps to t={res.records[-1].t:.4f} in {elapsed:.1f} s")
    assert res.records[-1].t == pytest.approx(cfg.end_time, rel=1e-12)
    assert (u[:, 0] > 0).all() and (pressure(u) > 0).all()
    assert elapsed < 600


# -- 8 -----------------------------------------------------------------------


@pytest.mark.criterion(8, "intersection table bound and symmetry")
def test_c8_tables():
    rng = np.random.default_rng(8)
    conn_mesh = build_from_mesh(MESH_V, MESH_C)
    from forestamr.balance import monolithic_balance
    for k in range(200):
        P = int(rng.integers(1, 5))
        if k % 5 == 4:
            leaves = random_refinement(rng, [(t, (0, 0), 0) for t in range(3)], 4, 4)
            forest, _ = monolithic_balance(from_global(conn_mesh, to_leaves(leaves, 2), P))
            dim = 2
        else:
            dim = 3 if k % 10 == 3 else 2
            _, _, _, forest = random_case(rng, P, maxlevel=4 if dim == 2 else 2, dim=dim,
                                          max_trees=9 if dim == 2 else 4)
        entries, tables = global_entries(forest)
        for tb in tables:
            assert (tb.length <= dim * 2 ** dim).all()
        for (i, f), row in entries.items():
            for j, g in row:
                if j >= 0:
                    assert (i, f) in entries[(j, g)]
