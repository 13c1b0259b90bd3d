import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpde import blocks as bl
from cpde.cli import interval_replica
from cpde.graphical import SURVIVED, Params, StructureError, make_eta0
from cpde.topology import build_topology


def _env(top, params, key, zeta0=None):
    env = bl.env_trajectory(top, params, key, zeta0)
    return env, bl.replica_events(top, params, key, env)


# --- n-closed edges -----------------------------------------------------------

def test_closed_environment_is_always_n_closed():
    top = build_topology("cycle", (20,))
    env, _ = _env(top, Params(1.0, 2.0, 0.0, 10.0), 1, np.zeros(20, np.uint8))
    assert bl.n_closed_edges(env, 1.0, 10).all()


def test_open_static_edge_never_n_closed():
    top = build_topology("cycle", (20,))
    env, _ = _env(top, Params(1.0, 0.0, 0.5, 10.0), 1, np.ones(20, np.uint8))
    assert not bl.n_closed_edges(env, 1.0, 10).any()


def test_window_range_errors():
    top = build_topology("cycle", (8,))
    env, _ = _env(top, Params(1.0, 1.0, 0.5, 5.0), 1)
    with pytest.raises(IndexError):
        bl.n_closed_edges(env, 1.0, 6)
    with pytest.raises(bl.DomainError):
        bl.n_closed_edges(env, 0.0, 1)


def test_n_closed_matches_state_scan():
    top = build_topology("cycle", (10,))
    env, _ = _env(top, Params(1.0, 3.0, 0.4, 8.0), 5)
    closed = bl.n_closed_edges(env, 0.5, 16)
    for e in range(10):
        ts = env.times[env.ptr[e]:env.ptr[e + 1]]
        for n in range(16):
            probe = np.concatenate([[n * 0.5], ts[(ts > n * 0.5) & (ts < (n + 1) * 0.5)]])
            assert closed[n, e] == all(env.state_at(e, t) == 0 for t in probe)


# --- interval blocks ------------------------------------------------------------

def _transcribe(closed_row, r0, K):
    """Direct reading of the definitions for one window."""
    N = K * r0
    e = []
    V = []
    for k in range(K):
        cand = [x for x in range(k * r0, (k + 1) * r0) if closed_row[x % N]]
        V.append(int(not cand))
        e.append(cand[0] if cand else (k + 1) * r0 - 1)
    blocks = []
    for k in range(K):
        lo = (e[k - 1] - (N if k == 0 else 0)) + 1
        blocks.append([x % N for x in range(lo, e[k] + 1)])
    return V, e, blocks


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4), st.data())
def test_block_structure_matches_definition(r0, data):
    K = 3
    row = data.draw(st.lists(st.integers(0, 1), min_size=K * r0, max_size=K * r0))
    closed = np.array([row], dtype=np.uint8)
    V, eb, left, size = bl._block_structure(closed, r0, K, K * r0)
    V2, e2, blocks = _transcribe(row, r0, K)
    assert V[0].tolist() == V2 and eb[0].tolist() == e2
    for k in range(K):
        got = [(left[0, k] + i) % (K * r0) for i in range(size[0, k])]
        assert got == blocks[k]
        assert k * r0 in got
        assert 1 <= size[0, k] <= 2 * r0 - 1
    assert sorted(sum(blocks, [])) == list(range(K * r0))


def test_all_closed_gives_single_vertex_blocks():
    r0, K = 4, 3
    closed = np.ones((1, K * r0), np.uint8)
    V, eb, left, size = bl._block_structure(closed, r0, K, K * r0)
    assert V.sum() == 0 and size[0].tolist() == [4, 4, 4]
    assert eb[0].tolist() == [0, 4, 8] and left[0].tolist() == [9, 1, 5]


def test_no_closed_edges_gives_default_blocks():
    r0, K = 4, 3
    V, eb, left, size = bl._block_structure(np.zeros((1, 12), np.uint8), r0, K, 12)
    assert V.all() and size[0].tolist() == [4, 4, 4]
    assert eb[0].tolist() == [3, 7, 11]


def test_grid_invariants_on_simulated_replicas():
    top = build_topology("cycle", (64,))
    for key in range(5):
        env, ev = _env(top, Params(2.0, 0.5, 0.5, 12.0), key)
        g = bl.interval_block_variables(top, env, ev, 8, 3.0, 4)
        for n in range(4):
            assert sorted(np.concatenate([g.block_vertices(k, n) for k in range(8)]).tolist()) == list(range(64))
            for k in range(8):
                assert k * 8 in g.block_vertices(k, n)
                if not g.V[n, k]:
                    assert g.closed[n, k * 8:(k + 1) * 8].any()


def test_interval_blocks_need_a_cycle_multiple():
    top = build_topology("cycle", (30,))
    env, ev = _env(top, Params(1.0, 1.0, 0.5, 4.0), 1)
    with pytest.raises(StructureError):
        bl.interval_block_variables(top, env, ev, 8, 1.0, 2)
    path = build_topology("path", (32,))
    env, ev = _env(path, Params(1.0, 1.0, 0.5, 4.0), 1)
    with pytest.raises(StructureError):
        bl.interval_block_variables(path, env, ev, 8, 1.0, 2)


def _log(rec, inf, N, E):
    """Hand-written event log: rec[x] and inf[e] = list of (t, valid)."""
    rt = [np.array(sorted(rec.get(x, [])), float) for x in range(N)]
    it = [sorted(inf.get(e, [])) for e in range(E)]
    rec_ptr = np.concatenate([[0], np.cumsum([a.size for a in rt])]).astype(np.int64)
    inf_ptr = np.concatenate([[0], np.cumsum([len(a) for a in it])]).astype(np.int64)
    return (rec_ptr, np.concatenate(rt) if N else np.zeros(0), inf_ptr,
            np.array([t for a in it for t, _ in a], float), np.array([v for a in it for _, v in a], np.uint8))


@pytest.mark.parametrize("rec,inf,expect", [
    ({}, {}, True),                                                   # no recoveries
    ({0: [0.5], 1: [0.8], 2: [0.9]}, {}, False),                      # everyone recovers
    ({0: [0.5], 1: [0.8], 2: [0.9]}, {0: [(0.7, 1)]}, True),          # 1 reinfects 0 in time
    ({0: [0.5], 1: [0.8], 2: [0.9]}, {0: [(0.7, 0)]}, False),         # same point, edge closed
    ({0: [0.5], 1: [0.8], 2: [0.9]}, {0: [(0.85, 1)]}, False),        # too late: 1 already healthy
])
def test_block_survival_on_hand_logs(rec, inf, expect):
    rec_ptr, rec_t, inf_ptr, inf_t, inf_v = _log(rec, inf, 3, 2)
    verts = np.arange(3, dtype=np.int64)
    got = bl._restricted_survives(verts, verts[:2].copy(), rec_ptr, rec_t, inf_ptr, inf_t, inf_v, 0.0, 1.0)
    assert got == expect


# --- Z ----------------------------------------------------------------------------

def test_z_trivial_drivers():
    zero = np.zeros((5, 10), np.uint8)
    tr = bl.run_Z(zero, zero, [0], 5)
    assert tr.N_ext == 1 and tr.sizes.tolist() == [1, 0]
    one = np.ones((5, 10), np.uint8)
    tr = bl.run_Z(one, one, [0], 5, ring=False)
    assert tr.N_ext == SURVIVED and tr.sizes[-1] == 10
    with pytest.raises(bl.DomainError):
        bl.run_Z(zero, zero, [0], 0)


@settings(max_examples=150, deadline=None)
@given(st.data())
def test_z_is_monotone_in_drivers(data):
    nw, K = 4, 7
    bits = st.lists(st.integers(0, 1), min_size=nw * K, max_size=nw * K)
    U = np.array(data.draw(bits), np.uint8).reshape(nw, K)
    V = np.array(data.draw(bits), np.uint8).reshape(nw, K)
    z0 = data.draw(st.sets(st.integers(0, K - 1), min_size=1))
    ring = data.draw(st.booleans())
    which = data.draw(st.sampled_from(["U", "V"]))
    n, k = data.draw(st.integers(0, nw - 1)), data.draw(st.integers(0, K - 1))
    U2, V2 = U.copy(), V.copy()
    (U2 if which == "U" else V2)[n, k] = 1
    a = bl.run_Z(U, V, z0, nw, ring)
    b = bl.run_Z(U2, V2, z0, nw, ring)
    for za, zb in zip(a.Z, b.Z):
        assert set(za.tolist()) <= set(zb.tolist())


def test_h_edges_are_justified():
    g = np.random.default_rng(1)
    U = (g.random((3, 6)) < 0.3).astype(np.uint8)
    V = (g.random((3, 6)) < 0.3).astype(np.uint8)
    for a, b, why in bl.h_edges(U, V):
        kind, k, n = why
        assert (U if kind == "U" else V)[n, k] == 1


def test_bernoulli_mode_matches_explicit_drivers():
    eps, m, budget, seed = 0.2, 6, 25, 9
    offset, K = -200, 420
    U, V = bl.bernoulli_drivers(eps, K, budget, seed, offset)
    tr = bl.run_Z(U, V, range(-offset, -offset + m), budget, ring=False)
    n_ext, _ = bl.run_Z_bernoulli(eps, m, budget, seed, 1)
    assert tr.N_ext == n_ext[0]
    assert all(z.size == 0 or (z.min() > 0 and z.max() < K - 1) for z in tr.Z)


def test_bernoulli_z_dies_and_grows_logarithmically():
    means = []
    for m in (10, 100, 1000):
        n_ext, _ = bl.run_Z_bernoulli(0.05, m, 500, 3 + m, 2000)
        assert np.all(n_ext != SURVIVED)
        means.append(n_ext.mean())
    assert means[0] < means[1] < means[2]


def test_z_containment_on_replicas():
    top = build_topology("cycle", (128,))
    pr = Params(2.0, 0.25, 0.5, 24.0)
    for key in range(5):
        _g, tr, bad, empty_bad = interval_replica(top, pr, key, 8, 4.0, 6, make_eta0(top, "all"))
        assert bad == 0 and empty_bad == 0


def test_containment_rejects_mismatched_systems():
    top = build_topology("cycle", (64,))
    env, ev = _env(top, Params(2.0, 0.5, 0.5, 8.0), 1)
    g = bl.interval_block_variables(top, env, ev, 8, 4.0, 2)
    tr = bl.run_Z(g.U, g.V, [0], 2)
    with pytest.raises(StructureError):
        bl.z_containment_check(np.zeros((3, 32), np.uint8), g, tr)


def test_vertex_blocks_and_graph_z():
    top = build_topology("torus2d", (6, 6))
    T, nw = 0.7, 400
    env, ev = _env(top, Params(1.0, 1.0, 0.5, T * nw), 4)
    U, V = bl.vertex_block_variables(top, env, ev, T, nw)
    q = math.exp(-T)
    assert abs(U.mean() - q) < 3 * math.sqrt(q * (1 - q) / U.size)
    env0, ev0 = _env(top, Params(1.0, 1.0, 0.0, 5.0), 4, np.zeros(top.n_edges, np.uint8))
    assert bl.vertex_block_variables(top, env0, ev0, 1.0, 5)[1].sum() == 0
    tr = bl.run_Z_graph(top, np.ones((3, 36), np.uint8), np.zeros((3, 72), np.uint8), [0, 5], 3)
    assert [z.tolist() for z in tr.Z] == [[0, 5]] * 4


# --- delta bounds -------------------------------------------------------------------

@given(st.floats(0.01, 20), st.floats(0.0, 1.0), st.floats(0.01, 20))
def test_delta_ordering(v, p, T):
    d = bl.delta_bound(v, p, T)
    assert 0.0 <= d.delta <= d.delta_prime <= 1.0
    assert abs(d.delta - math.exp(-p * v * T) * d.delta_prime) < 1e-15


def test_delta_values_and_limits():
    d = bl.delta_bound(1, 0.5, 1).delta
    e1, ep = math.exp(-1), math.exp(-0.5)
    assert abs(d - ep * (e1 + 0.5 * (1 - e1) - ep) / (1 - ep)) < 1e-15
    assert abs(d - 0.119324) < 5e-6
    assert abs(bl.delta0(0.5) - bl.delta_bound(1, 0.5, 1).delta) < 1e-15
    x = 3.0
    lim = 1 - (1 - math.exp(-x)) / x
    assert bl.delta_bound(1.0, 0.0, x).delta == pytest.approx(lim, abs=1e-15)
    assert abs(bl.delta_bound(1.0, 1e-9, x).delta - lim) < 1e-8
    assert bl.delta_bound(1.0, 1.0, x).delta == 0.0
    c = bl.edge_chain_conditionals(1, 0.5, 1)
    assert abs(c[0] - 0.3160603) < 1e-7 and c[2] == 1.0
    with pytest.raises(bl.DomainError):
        bl.delta_bound(0.0, 0.5, 1.0)


def test_edge_chain_monte_carlo():
    v, p, T = 2.0, 0.2, 0.5
    z, w = bl.edge_chain_sample(v, p, T, 40000, 2)
    for (k, n), q in zip(bl.edge_chain_frequencies(z, w), bl.edge_chain_conditionals(v, p, T)):
        assert abs(k / n - q) <= 3 * math.sqrt(max(q * (1 - q), 1e-12) / n) + 1e-12


# --- good blocks --------------------------------------------------------------------

def test_block_intervals_overlap_by_half():
    assert bl.block_interval(0, 0).tolist() == [0, 1, 2, 3]
    assert bl.block_interval(1, 1).tolist() == [2, 3, 4, 5]
    for k in range(-3, 4):
        for n in range(4):
            top = set(bl.block_interval(k, n + 1).tolist()) | set(bl.block_interval(k + 1, n + 1).tolist())
            here = bl.block_interval(k, n).tolist()
            left = set(here[:2])
            right = set(here[2:])
            assert left <= set(bl.block_interval(k, n + 1).tolist())
            assert right <= set(bl.block_interval(k + 1, n + 1).tolist())
            assert set(here) <= top


def test_good_block_probabilities_and_structure():
    top = build_topology("cycle", (400,))
    M, p, v, rows = 2.0, 0.9, 4.0, 40
    g = bl.good_block_grid(top, Params(20.0, v, p, rows * M / v), 7, M, 0.05, rows)
    for emp, q in ((g.c1.mean(), bl.prob_c1(M, p)), (g.c2.mean(), bl.prob_c2(M, p))):
        assert abs(emp - q) < 3 * math.sqrt(q * (1 - q) / g.c1.size)
    assert np.array_equal(g.W, g.c1 & g.c2 & g.c3 & g.c4)
    assert not np.any(g.reach & (g.W == 0))
    assert g.independence_pvalue() > 0.01


def test_good_block_domain_errors():
    top = build_topology("cycle", (16,))
    with pytest.raises(bl.DomainError):
        bl.good_block_grid(top, Params(1.0, 4.0, 0.9, 5.0), 1, 2.0, 0.6, 2)
    with pytest.raises(StructureError):
        bl.good_block_grid(build_topology("cycle", (18,)), Params(1.0, 4.0, 0.9, 5.0), 1, 2.0, 0.1, 2)


def test_good_block_propagation_small():
    rep = bl.good_block_propagation(3e4, 4.0, 0.9, 2.0, 0.005, 20, 5)
    assert rep.good == 20 and rep.failures == 0


# --- calibration --------------------------------------------------------------------

def test_calibration_rules():
    r0 = bl.teo1_r0(0.5, 0.05)
    d = bl.delta0(0.5)
    assert (1 - d) ** r0 < 0.05 <= (1 - d) ** (r0 - 1)
    x = np.random.default_rng(0).exponential(1.0, 10000)
    T = bl.teo1_T(x, 0.1)
    q = np.mean(x >= T)
    assert q + 2 * math.sqrt(q * (1 - q) / x.size) < 0.1
    M, T2, p0 = bl.teo2_parameters(1.0, 0.1)
    assert M == 20.0 and bl.delta_bound(1.0, p0, T2).delta >= 0.9
