import math
from fractions import Fraction

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.integrate import quad

from cpde import oracle as orc
from cpde.graphical import Params
from cpde.topology import build_topology


def _model(kind, dims, lam, v, p):
    return orc.build_model(build_topology(kind, dims), Params(lam, v, p, 1.0))


def test_generator_matches_independent_recount():
    top = build_topology("path", (3,))
    m = orc.build_model(top, Params(1.3, 0.7, 0.4, 1.0))
    Q = m.Q.tocsr()
    assert np.allclose(np.asarray(Q.sum(axis=1)).ravel(), 0.0, atol=1e-12)
    for s in range(m.n_states):
        want = dict(orc.event_rates(top, 1.3, 0.7, 0.4, s))
        row = Q.getrow(s)
        got = {int(j): float(q) for j, q in zip(row.indices, row.data) if j != s and q != 0.0}
        assert got.keys() == want.keys()
        for j in got:
            assert got[j] == pytest.approx(want[j], rel=1e-14)


def test_pure_death_survival():
    m = _model("path", (2,), 0.0, 1.0, 0.5)
    for t in (0.5, 2.0):
        assert orc.exact_survival_to_horizon(m, [1, 0], t) == pytest.approx(math.exp(-t), abs=1e-12)
        assert orc.exact_survival_to_horizon(m, [1, 1], t) == pytest.approx(1 - (1 - math.exp(-t)) ** 2, abs=1e-12)
    assert orc.exact_survival_to_horizon(m, [1, 1], 0.0) == 1.0


def test_pure_death_mean_is_harmonic():
    for n in (2, 3, 4, 5):
        m = _model("path", (n,), 0.0, 1.0, 0.5)
        assert orc.exact_mean_extinction_time(m, [1] * n) == pytest.approx(sum(1 / k for k in range(1, n + 1)), abs=1e-12)


def test_initial_distribution():
    m = _model("path", (3,), 1.0, 1.0, 0.25)
    pi = m.initial([1, 0, 1])
    assert pi.sum() == pytest.approx(1.0)
    eta, zeta = m.decode(int(np.argmax(pi)))
    assert eta == [1, 0, 1] and zeta == [0, 0]
    assert pi.max() == pytest.approx(0.75 ** 2)
    assert m.initial([1, 1, 1], [1, 0])[m.encode([1, 1, 1], [1, 0])] == 1.0
    s = m.encode([0, 1, 1], [1, 0])
    assert m.decode(s) == ([0, 1, 1], [1, 0])


def test_integrated_survival_equals_mean():
    m = _model("path", (3,), 1.5, 1.0, 0.5)
    mean = orc.exact_mean_extinction_time(m, [1, 1, 1])
    f = lambda t: orc.exact_survival_to_horizon(m, [1, 1, 1], t)
    tail = 80.0
    val, _ = quad(f, 0, tail, limit=200, epsabs=1e-9)
    assert f(tail) < 1e-9
    assert abs(val - mean) < 1e-4


def test_two_path_mean_by_hand():
    # lambda = 1, v = 1, p = 1/2; reduced states (both, open), (both, closed),
    # (one, open), (one, closed); backward equations solved in exact arithmetic
    h = Fraction(1, 2)
    A = [[Fraction(5, 2), -h, -2, 0],
         [-h, Fraction(5, 2), 0, -2],
         [-1, 0, Fraction(5, 2), -h],
         [0, 0, -h, Fraction(3, 2)]]
    b = [Fraction(1)] * 4
    n = 4
    for i in range(n):
        piv = A[i][i]
        for j in range(i + 1, n):
            f = A[j][i] / piv
            A[j] = [a - f * c for a, c in zip(A[j], A[i])]
            b[j] -= f * b[i]
    x = [Fraction(0)] * n
    for i in reversed(range(n)):
        x[i] = (b[i] - sum(A[i][j] * x[j] for j in range(i + 1, n))) / A[i][i]
    m = _model("path", (2,), 1.0, 1.0, 0.5)
    assert orc.exact_mean_extinction_time(m, [1, 1], [1]) == pytest.approx(float(x[0]), abs=1e-12)
    assert orc.exact_mean_extinction_time(m, [1, 1]) == pytest.approx(float((x[0] + x[1]) / 2), abs=1e-12)


def test_fixture_constants_reproduce():
    fx = orc.load_fixture()
    got = orc.reference_instances()
    assert fx.keys() == got.keys()
    for k, (value, tol) in fx.items():
        assert abs(got[k] - value) <= tol


def test_state_space_limit():
    with pytest.raises(orc.SizeError):
        _model("cycle", (11,), 1.0, 1.0, 0.5)


def test_transient_rejects_negative_time():
    m = _model("path", (2,), 1.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        orc.transient(m, m.initial([1, 1]), -1.0)


# --- Z one-step law --------------------------------------------------------

def test_z_law_degenerate_drivers():
    z0 = orc.exact_Z_one_step(0.0, 3)
    assert z0.law[0] == 1.0 and z0.law[1:].sum() == 0.0
    z1 = orc.exact_Z_one_step(1.0, 3)
    assert z1.law[-1] == 1.0


@pytest.mark.parametrize("eps", [0.05, 0.2, 0.5])
def test_z_law_enumeration_agrees_with_factorized_sum(eps):
    a = orc.exact_Z_one_step(eps, 4, method="enumerate")
    b = orc.exact_Z_one_step(eps, 4, method="factorized")
    assert np.max(np.abs(a.law - b.law)) < 1e-12
    assert a.law.sum() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("eps", [0.05, 0.2])
def test_z_law_closed_form(eps):
    r = orc.exact_Z_one_step(eps, 40, method="factorized")
    K = 20
    assert np.max(np.abs(r.law[:K] - orc.closed_form_z1_law(eps, K - 1))) < 1e-12
    assert r.law[1] == 0.0 and r.law[2] == 0.0
    assert r.law[0] == pytest.approx((1 - eps) ** 3)


def test_z_law_size_limit():
    with pytest.raises(orc.SizeError):
        orc.exact_Z_one_step(0.1, 7, method="enumerate")
