import math

import numpy as np
import pytest

from cpde import kernels as kn
from cpde.graphical import (SURVIVED, Configuration, ParamError, Params, StructureError, make_eta0, replay,
                            run_engine, simulate_cpde)
from cpde.rng import derive_seed, replica_key, uniform
from cpde.streams import EventStreams, sample_event_streams, sample_initial_environment
from cpde.topology import TopologyError, build_topology, parse_topology, topology_spec


# --- rng and topology -------------------------------------------------------

def test_uniform_is_deterministic_and_in_unit_interval():
    u = [uniform(np.uint64(7), i) for i in range(1000)]
    assert u == [uniform(np.uint64(7), i) for i in range(1000)]
    assert 0.0 <= min(u) and max(u) < 1.0
    assert abs(np.mean(u) - 0.5) < 4 * math.sqrt(1 / 12 / 1000)


def test_replica_keys_differ():
    keys = {int(replica_key(np.uint64(1), r)) for r in range(1000)}
    assert len(keys) == 1000
    assert derive_seed(1, 2) != derive_seed(2, 1)


@pytest.mark.parametrize("spec,deg", [("cycle:10", 2), ("torus2d:4x5", 4)])
def test_transitive_topologies_have_constant_degree(spec, deg):
    t = parse_topology(spec)
    assert t.is_vertex_transitive
    assert {t.degree(x) for x in range(t.n_vertices)} == {deg}
    assert topology_spec(t) == spec


def test_path_endpoints_and_canonical_edges():
    t = build_topology("path", (5,))
    assert t.degree(0) == t.degree(4) == 1 and t.n_edges == 4
    pairs = {tuple(sorted(e)) for e in t.edges.tolist()}
    assert len(pairs) == t.n_edges
    assert not t.is_vertex_transitive


@pytest.mark.parametrize("spec", ["ring:5", "cycle", "torus2d:1x4", "path:0"])
def test_bad_topology_specs(spec):
    with pytest.raises(TopologyError):
        parse_topology(spec)


# --- params and configurations ----------------------------------------------

@pytest.mark.parametrize("kw,field", [(dict(lam=-1), "lambda"), (dict(v=-0.1), "v"), (dict(p=1.5), "p"),
                                      (dict(horizon=0), "horizon")])
def test_params_validation_names_field(kw, field):
    base = dict(lam=1.0, v=1.0, p=0.5, horizon=1.0)
    base.update(kw)
    with pytest.raises(ParamError, match=field):
        Params(**base)


def test_configuration_hex_round_trip():
    g = np.random.default_rng(0)
    eta = g.integers(0, 2, 37).astype(np.uint8)
    zeta = g.integers(0, 2, 41).astype(np.uint8)
    c = Configuration(eta, zeta, 1.5)
    d = Configuration.from_hex(c.to_hex(), 37, 41)
    assert np.array_equal(d.eta, eta) and np.array_equal(d.zeta, zeta) and d.time == 1.5


def test_make_eta0_specs():
    t = build_topology("cycle", (8,))
    assert make_eta0(t, "all").sum() == 8
    assert make_eta0(t, "single:3")[3] == 1
    assert make_eta0(t, "block:3").tolist()[:4] == [1, 1, 1, 0]
    assert make_eta0(t, "list:1,5").nonzero()[0].tolist() == [1, 5]
    with pytest.raises(StructureError):
        make_eta0(t, "single:9")


# --- streams ------------------------------------------------------------------

def test_streams_strictly_increasing_and_rates():
    t = build_topology("cycle", (50,))
    s = sample_event_streams(t, Params(2.0, 3.0, 0.4, 40.0), 11, split_infections=True)
    n_open = n_close = n_inf = n_acc = 0
    for e in range(t.n_edges):
        for arr in (s.open_times(e), s.close_times(e), s.infect_times(e)):
            assert np.all(np.diff(arr) > 0)
            assert arr.size == 0 or (arr[0] >= 0 and arr[-1] <= 40.0)
        n_open += s.open_times(e).size
        n_close += s.close_times(e).size
        n_inf += s.infect_times(e).size
        n_acc += s.accept_times(e).size
        assert np.array_equal(np.union1d(s.accept_times(e), s.reject_times(e)), s.infect_times(e))
    exposure = t.n_edges * 40.0
    for n, rate in ((n_open, 3.0 * 0.4), (n_close, 3.0 * 0.6), (n_inf, 2.0), (n_acc, 2.0 * 0.4)):
        assert abs(n - rate * exposure) < 4 * math.sqrt(rate * exposure)
    tl = s.timeline()
    assert np.all(np.diff(tl["t"]) >= 0)
    assert np.unique(tl["t"]).size == tl.size


def test_static_environment_never_updates():
    t = build_topology("cycle", (10,))
    s = sample_event_streams(t, Params(1.0, 0.0, 0.5, 10.0), 3)
    assert all(s.update_times(e).size == 0 for e in range(t.n_edges))


def test_initial_environment_marginal():
    t = build_topology("cycle", (4000,))
    z = sample_initial_environment(t, 0.3, 5)
    assert abs(z.mean() - 0.3) < 4 * math.sqrt(0.21 / 4000)


# --- engine -------------------------------------------------------------------

def test_pure_death_survival():
    t = build_topology("cycle", (6,))
    b = run_engine(t, Params(0.0, 1.0, 0.5, 1.0), [kn.MODE_VALID], make_eta0(t, "single"), seed=2,
                   replicas=20000)
    k = int(np.sum(b.ext[:, 0] == SURVIVED))
    q = math.exp(-1.0)
    assert abs(k / 20000 - q) < 3 * math.sqrt(q * (1 - q) / 20000)


def test_closed_environment_gives_harmonic_mean():
    t = build_topology("path", (3,))
    b = run_engine(t, Params(2.0, 0.0, 0.0, 100.0), [kn.MODE_VALID], make_eta0(t, "all"), seed=4,
                   replicas=20000, zeta0=np.zeros(2, np.uint8))
    x = b.ext[:, 0]
    assert abs(x.mean() - 11 / 6) < 3 * x.std() / math.sqrt(x.size)


def test_all_open_static_environment_matches_p1():
    t = build_topology("cycle", (12,))
    eta = make_eta0(t, "single")
    a = run_engine(t, Params(2.0, 5.0, 1.0, 5.0), [kn.MODE_VALID], eta, seed=8, replicas=3000)
    b = run_engine(t, Params(2.0, 0.0, 1.0, 5.0), [kn.MODE_VALID], eta, seed=8, replicas=3000)
    assert np.array_equal(a.ext, b.ext)


def test_parallelism_does_not_change_results():
    t = build_topology("cycle", (16,))
    kw = dict(seed=5, replicas=300, chunk_size=64)
    a = run_engine(t, Params(2.0, 1.0, 0.5, 4.0), [kn.MODE_VALID], make_eta0(t, "all"), parallelism=1, **kw)
    b = run_engine(t, Params(2.0, 1.0, 0.5, 4.0), [kn.MODE_VALID], make_eta0(t, "all"), parallelism=2, **kw)
    assert np.array_equal(a.ext, b.ext) and np.array_equal(a.tallies, b.tallies)


def test_simulate_cpde_outcome_fields():
    t = build_topology("cycle", (10,))
    pr = Params(2.0, 1.0, 0.5, 3.0)
    s = EventStreams(t, 2.0, 1.0, 0.5, 3.0, 99)
    z0 = sample_initial_environment(t, 0.5, 99)
    o = simulate_cpde(t, pr, make_eta0(t, "all"), z0, s)
    assert o.survived == (o.extinction_time == SURVIVED)
    assert o.survived == bool(o.final.eta.any())
    c = o.event_counters
    assert c["infections_applied"] + c["infections_blocked"] <= c["infection_points"]
    with pytest.raises(StructureError):
        simulate_cpde(t, pr.replace(horizon=4.0), make_eta0(t, "all"), z0, s)


def test_lazy_engine_matches_full_replay():
    t = build_topology("cycle", (12,))
    pr = Params(2.0, 1.0, 0.5, 6.0)
    from cpde.couplings import beta_rate
    beta = beta_rate(2.0, 1.0, 0.5)
    modes = [kn.MODE_LOWER, kn.MODE_VALID, kn.MODE_ALL, kn.MODE_WEAK, kn.MODE_PWEAK]
    pairs = [(0, 1), (1, 2), (1, 3), (4, 3)]
    st = np.linspace(0, 6, 13)
    eta0 = make_eta0(t, "block:3")
    for key in range(40):
        z0 = sample_initial_environment(t, 0.5, key)
        ref = replay(t, pr, eta0, z0, EventStreams(t, 2.0, 1.0, 0.5, 6.0, key), modes, beta=beta,
                     sample_times=st, pairs=pairs, weak_proc=4)
        for allrel in (True, False):
            b = run_engine(t, pr, modes, eta0, seed=key, direct_key=True, beta=beta, sample_times=st, pairs=pairs,
                           weak_proc=4, all_relevant=allrel, stop_when_extinct=not allrel, snapshots=True)
            assert np.array_equal(b.ext[0], ref["ext"])
            assert np.array_equal(b.samples[0], ref["samples"])
            assert b.violations[0] == ref["violations"]
            if allrel:
                assert np.array_equal(b.tallies[0], ref["tallies"])
                assert np.array_equal(b.eta_snap[0], ref["eta_snap"])
