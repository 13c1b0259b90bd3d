import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpde import estimators as es
from cpde.graphical import SURVIVED, Params
from cpde.rng import derive_seed
from cpde.topology import build_topology

PATH2 = build_topology("path", (2,))


@given(st.integers(0, 200), st.integers(1, 200))
def test_wilson_interval_is_ordered(k, n):
    k = min(k, n)
    lo, hi = es.wilson(k, n)
    assert 0.0 <= lo <= k / n <= hi <= 1.0


def test_wilson_reference_value():
    lo, hi = es.wilson(5, 10)
    assert lo == pytest.approx(0.2365931, abs=1e-6) and hi == pytest.approx(0.7634069, abs=1e-6)


def test_estimate_invariants():
    with pytest.raises(ValueError):
        es.Estimate(0.5, 0.6, 0.7, 10, 0, "binomial")
    with pytest.raises(ValueError):
        es.Estimate(0.5, 0.4, 0.6, 0, 0, "binomial")


def test_survival_ci_coverage_on_pure_death():
    params = Params(0.0, 1.0, 0.5, 1.0)
    truth = math.exp(-1.0)
    hits = sum(es.estimate_survival(PATH2, params, [1, 0], 200, derive_seed(11, i)).overlaps(
        es.Estimate(truth, truth, truth, 1, 0, "exact")) for i in range(100))
    assert hits >= 90


def test_mean_ci_coverage_on_pure_death():
    params = Params(0.0, 1.0, 0.5, 100.0)
    hits = 0
    for i in range(100):
        rep = es.estimate_mean_extinction_time(PATH2, params, [1, 1], 200, 100.0, derive_seed(12, i))
        assert rep.cap_hits == 0
        hits += rep.mean.ci_low <= 1.5 <= rep.mean.ci_high
    assert hits >= 90


def test_median_bootstrap_is_reproducible():
    x = np.random.default_rng(0).exponential(1.0, 500)
    a = es.median_estimate(x, seed=4)
    assert a == es.median_estimate(x, seed=4)
    g = np.random.default_rng(1)
    hits = 0
    for i in range(100):
        b = es.median_estimate(g.exponential(1.0, 300), seed=i)
        hits += b.ci_low <= math.log(2) <= b.ci_high
    assert hits >= 88


def test_capped_summary_flags_unreliable():
    rep = es.summarize_extinction([1.0, SURVIVED, SURVIVED], 10.0, 0)
    assert rep.cap_hits == 2 and rep.unreliable and rep.median.point == 10.0
    with pytest.raises(ValueError):
        es.estimate_mean_extinction_time(PATH2, Params(1.0, 1.0, 0.5, 5.0), [1, 1], 10, 6.0, 0)


def test_pava():
    y = np.array([1.0, 3.0, 2.0, 4.0])
    assert es.pava(y, np.ones(4)).tolist() == [1.0, 2.5, 2.5, 4.0]
    assert es.pava(np.array([3.0, 1.0]), np.array([1.0, 3.0])).tolist() == [1.5, 1.5]


def test_trend_tests():
    x = np.log([10, 100, 1000, 10000])
    up = es.increasing_trend(x, [1.0, 2.0, 3.0, 4.0], [0.1] * 4)
    assert up.increasing and up.slope == pytest.approx(1 / math.log(10))
    down = es.increasing_trend(x, [4.0, 3.0, 2.0, 1.0], [0.1] * 4)
    assert not down.increasing and down.monotone_pvalue < 0.01
    flat = es.increasing_trend(x, [1.0, 1.0, 1.0, 1.0], [0.1] * 4)
    assert not flat.increasing


def test_affine_fit():
    f = es.affine_fit([0, 1, 2, 3], [1, 3, 5, 7])
    assert f.slope == pytest.approx(2) and f.intercept == pytest.approx(1) and f.r2 == pytest.approx(1)


def test_sweep_rows_and_reproducibility():
    top = build_topology("cycle", (8,))
    kw = dict(horizon=2.0, replicas=20, seed=3)
    rows = es.sweep_phase_diagram(top, [0.5, 2.0], [1.0], [0.3, 0.9], **kw)
    assert len(rows) == 4 and all(len(r) == len(es.SWEEP_HEADER) for r in rows)
    assert rows == es.sweep_phase_diagram(top, [0.5, 2.0], [1.0], [0.3, 0.9], **kw)
    imm = es.immunity_rows(rows)
    assert len(imm) == 2 and {r[2] for r in imm} == {2.0}


def test_lambda0_bracket_on_a_small_cycle():
    top = build_topology("cycle", (16,))
    br = es.estimate_lambda0(top, 1.0, 1.0, seed=5, lo=0.5, hi=8.0, horizon=20.0, replicas=200, tol=0.25)
    assert br.ok and br.hi - br.lo <= 0.25
    lo = [h for h in br.history if h["lam"] == br.lo]
    hi = [h for h in br.history if h["lam"] == br.hi]
    assert lo[-1]["survival"] < br.theta <= hi[-1]["survival"]
    with pytest.raises(ValueError):
        es.estimate_lambda0(top, 1.0, 1.0, seed=5, lo=2.0, hi=1.0, horizon=1.0, replicas=10)


def test_tiny_crossover_is_consistent():
    res = es.crossover_experiment(2.0, 0.5, 0.01, [4, 8], replicas=30, cap=50.0, seed=1)
    assert len(res.rows) == 4 and len(res.ratios) == 2
    for s, d in zip(res.static, res.dynamic):
        assert s.times.size == d.times.size == 30
    again = es.crossover_experiment(2.0, 0.5, 0.01, [4, 8], replicas=30, cap=50.0, seed=1)
    assert again.rows == res.rows
