"""Closed-form rates and pathwise coupling harnesses.

* ``beta_rate`` / ``lambda_hat``: the lower and upper comparison rates.
* ``simulate_sandwich``: rate-beta contact process <= CPDE <= rate-lambda
  contact process on shared streams.
* ``simulate_weak_processes``: the CPDE, its weakly valid relaxation and the
  p-weakly valid process, with the tau_k / N_p / M_n bookkeeping.
* ``rescale_coupling_check``: a time-rescaled CPDE inside a faster one.
"""

import math
from collections import deque
from dataclasses import dataclass
from functools import total_ordering

import numpy as np
from numba import njit
from scipy import stats

from . import kernels as kn
from . import rng
from .graphical import InvariantViolation, Params, run_engine
from .rng import KIND_INFECTION, KIND_UPDATE
from .streams import stream_points


class DomainError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


@total_ordering
class _Infinity:
    """Tagged 'no finite value' result; compares above every number."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "INFINITY"

    def __float__(self):
        return math.inf

    def __eq__(self, other):
        return other is self

    def __lt__(self, other):
        return False

    def __hash__(self):
        return hash("INFINITY")


INFINITY = _Infinity()


def _check_rates(lam, v, p):
    if lam < 0 or v < 0:
        raise DomainError(f"rates must be >= 0, got lambda={lam}, v={v}")
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"p must lie in [0, 1], got {p}")


def beta_rate(lam: float, v: float, p: float) -> float:
    """Smaller root of b^2 - (lam + v) b + lam v p = 0."""
    _check_rates(lam, v, p)
    if lam * v == 0.0:
        return 0.0
    if p == 1.0:
        return min(lam, v)
    disc = (v + lam) ** 2 - 4.0 * lam * v * p
    # product-of-roots form avoids cancellation when lam v p is small
    return 2.0 * lam * v * p / (lam + v + math.sqrt(disc))


def lambda_hat(lam_bar: float, v: float, p: float):
    """Upper comparison rate, or INFINITY when v p <= lam_bar."""
    if lam_bar <= 0:
        raise DomainError(f"lambda_bar must be > 0, got {lam_bar}")
    _check_rates(0.0, v, p)
    if v * p > lam_bar:
        return lam_bar * (v - lam_bar) / (v * p - lam_bar)
    return INFINITY


def m_n_bound(lam: float, v: float, n: int, ball_size: int) -> float:
    if not v > 16.0 * lam ** 2 * n ** 2:
        raise PreconditionError(f"needs v > 16 lambda^2 n^2 = {16.0 * lam ** 2 * n ** 2}, got v={v}")
    sv = math.sqrt(v)
    return ball_size * (lam * sv / (lam + v) + 4.0 * (math.e / 4.0) ** sv)


def expected_unfresh_infections(lam: float, v: float, t: float) -> float:
    """Mean number of infection points at an unfresh edge during [0, t].

    Events on one edge form a rate (lam + v) stream, each an infection with
    probability a = lam / (lam + v); a point counts when it is an infection
    and no update happened since the previous infection (or since time 0).
    """
    if lam + v == 0.0:
        return 0.0
    a = lam / (lam + v)
    L = (lam + v) * t
    first = -math.expm1(-L)
    return a * first + a * a * (L - first)


# ---------------------------------------------------------------------------
# sandwich

@dataclass
class SandwichOutcome:
    sample_times: np.ndarray
    lower: np.ndarray          # (R, S) infected counts
    middle: np.ndarray
    upper: np.ndarray
    violations: np.ndarray     # (R,)
    ext: np.ndarray            # (R, 3)
    beta: float
    valid_points: np.ndarray   # (R,) valid infection points over all edges
    accepted_points: np.ndarray
    exposure: np.ndarray       # (R,) edge-time observed, n_edges * t_end
    accepts: tuple             # (replica, edge, time) of the rate-beta points
    horizon: float
    n_edges: int

    def valid_rate(self):
        """Pooled valid points per edge per unit time, with its standard error."""
        rate = self.valid_points.sum() / self.exposure.sum()
        per = self.valid_points / self.exposure
        se = per.std(ddof=1) / math.sqrt(per.size) if per.size > 1 else math.nan
        return rate, se

    def accepted_gaps(self, cut: float):
        """Gaps following each accepted point (and time 0) that starts by
        ``horizon - cut``; returns (gaps <= cut, number of gaps > cut).

        Restricting the starts removes the censoring at the horizon: every
        such gap is either fully observed below ``cut`` or known to exceed it.
        """
        r, e, t = self.accepts
        R = self.violations.shape[0]
        E = self.n_edges
        order = np.lexsort((t, e, r))
        r, e, t = r[order], e[order], t[order]
        short = []
        long_ = 0
        j = 0
        for rr in range(R):
            for ee in range(E):
                pts = []
                while j < t.size and r[j] == rr and e[j] == ee:
                    pts.append(t[j])
                    j += 1
                starts = [0.0] + pts
                nxt = pts + [math.inf]
                for s0, s1 in zip(starts, nxt):
                    if s0 > self.horizon - cut:
                        break
                    if s1 - s0 <= cut:
                        short.append(s1 - s0)
                    else:
                        long_ += 1
        return np.asarray(short), long_

    def poisson_ks(self, cut: float = None):
        """Exp(beta) check of the accepted streams: KS of the gaps below
        ``cut`` against the truncated exponential law, and the two-sided
        binomial p-value of the fraction of gaps above ``cut``."""
        cut = self.horizon / 2 if cut is None else cut
        short, n_long = self.accepted_gaps(cut)
        mass = -math.expm1(-self.beta * cut)
        ks = stats.kstest(short, lambda x: -np.expm1(-self.beta * np.asarray(x)) / mass)
        n = short.size + n_long
        tail = stats.binomtest(n_long, n, math.exp(-self.beta * cut)).pvalue
        return ks.pvalue, tail


def simulate_sandwich(topology, params: Params, eta0, zeta0=None, *, seed: int, replicas: int = 1,
                      sample_times=None, parallelism: int = 1, fault: str = None) -> SandwichOutcome:
    """Lower (thinned, rate beta), middle (CPDE) and upper (all infection
    points) processes on shared streams.  ``fault="thin_upper"`` replaces the
    upper process by a second thinned copy; it exists only so tests can check
    that broken containment is detected."""
    beta = beta_rate(params.lam, params.v, params.p)
    upper = kn.MODE_ALL
    if fault == "thin_upper":
        upper = kn.MODE_LOWER
    elif fault is not None:
        raise ValueError(f"unknown fault {fault!r}")
    st = np.linspace(0.0, params.horizon, 21) if sample_times is None else np.asarray(sample_times, float)
    b = run_engine(topology, params, [kn.MODE_LOWER, kn.MODE_VALID, upper], eta0,
                   seed=seed, replicas=replicas, zeta0=zeta0, beta=beta, sample_times=st,
                   pairs=[(0, 1), (1, 2)], all_relevant=True, stop_when_extinct=False,
                   record_accept=True, parallelism=parallelism)
    if b.errors.any():
        bad = int(np.flatnonzero(b.errors)[0])
        raise InvariantViolation(f"thinning probability left [0, 1] in replica {bad}")
    return SandwichOutcome(st, b.samples[:, :, 0], b.samples[:, :, 1], b.samples[:, :, 2],
                           b.violations, b.ext, beta, b.tallies[:, kn.T_VALID],
                           b.tallies[:, kn.T_ACCEPT], topology.n_edges * b.t_end, b.accepts,
                           float(params.horizon), topology.n_edges)


# ---------------------------------------------------------------------------
# weak processes

@dataclass
class FreshnessTrace:
    """F just before each infection point of one edge."""
    infect_times: np.ndarray
    fresh_before: np.ndarray
    prev_kind: np.ndarray      # kind of the previous event on the edge (0 = none)


def freshness_trace(streams, e: int) -> FreshnessTrace:
    """F is 0 at time 0, set to 1 by updates and to 0 by infection points."""
    ti = streams.infect_times(e)
    tu = streams.update_times(e)
    times = np.concatenate([tu, ti])
    kinds = np.concatenate([np.full(tu.size, KIND_UPDATE), np.full(ti.size, KIND_INFECTION)])
    order = np.lexsort((kinds, times))
    f = 0
    prev = 0
    fresh, pk = [], []
    for j in order:
        if kinds[j] == KIND_INFECTION:
            fresh.append(f)
            pk.append(prev)
            f = 0
        else:
            f = 1
        prev = kinds[j]
    return FreshnessTrace(ti, np.asarray(fresh, dtype=np.uint8), np.asarray(pk, dtype=np.int64))


@njit(cache=True)
def _unfresh_infections(rkey, edge_ids, lam, v, t_end):
    total = 0
    for e in edge_ids:
        ti, _m, _b = stream_points(rng.stream_key(rkey, KIND_INFECTION, e), lam, t_end)
        tu, _m2, _b2 = stream_points(rng.stream_key(rkey, KIND_UPDATE, e), v, t_end)
        j = 0
        last_inf = 0.0
        for i in range(ti.shape[0]):
            t = ti[i]
            fresh = False
            while j < tu.shape[0] and tu[j] <= t:
                if tu[j] > last_inf:
                    fresh = True
                j += 1
            if not fresh:
                total += 1
            last_inf = t
    return total


@njit(cache=True)
def _m_n_batch(seed, r0, r1, edge_ids, lam, v, t_end):
    out = np.zeros(r1 - r0, dtype=np.int64)
    for i in range(r1 - r0):
        out[i] = _unfresh_infections(rng.replica_key(seed, r0 + i), edge_ids, lam, v, t_end)
    return out


def ball(topology, center: int, radius: int):
    """Vertices within graph distance ``radius`` of ``center`` and the edges
    with both endpoints among them."""
    dist = {center: 0}
    q = deque([center])
    while q:
        x = q.popleft()
        if dist[x] == radius:
            continue
        for y in topology.neighbors(x):
            if y not in dist:
                dist[y] = dist[x] + 1
                q.append(y)
    verts = np.array(sorted(dist), dtype=np.int64)
    inside = np.zeros(topology.n_vertices, dtype=bool)
    inside[verts] = True
    edges = np.flatnonzero(inside[topology.edges[:, 0]] & inside[topology.edges[:, 1]])
    return verts, edges


@dataclass
class WeakCouplingStats:
    tau_list: list      # per replica: increasing tau_k
    x_list: list        # per replica: the x_k
    N_p: np.ndarray
    N_bar_p: np.ndarray
    M_n: np.ndarray
    n: int
    ball_size: int


@dataclass
class WeakOutcome:
    sample_times: np.ndarray
    eta: np.ndarray         # (R, S) counts of the CPDE
    eta_w: np.ndarray
    eta_p: np.ndarray
    violations: np.ndarray
    ext: np.ndarray         # (R, 3)
    tallies: np.ndarray     # (R, kernels.N_TALLY)
    stats: WeakCouplingStats

    def pweak_fraction(self):
        """Pooled fraction of p-weakly valid infection points and its SE."""
        n = self.tallies[:, kn.T_INF].sum()
        k = self.tallies[:, kn.T_PWEAK].sum()
        f = k / n
        return f, math.sqrt(f * (1 - f) / n)


def simulate_weak_processes(topology, params: Params, eta0, zeta0=None, *, seed: int,
                            replicas: int = 1, n_box: int = 2, center: int = 0,
                            sample_times=None, all_relevant: bool = True,
                            parallelism: int = 1) -> WeakOutcome:
    """Processes 0, 1, 2 are the CPDE, the weakly valid and the p-weakly
    valid process.  tau_k are taken with the p-weak states just before the
    event.  M_n counts infection points at unfresh edges of the ball of
    radius ``n_box`` around ``center`` during [0, n_box], whether or not an
    endpoint is infected."""
    st = np.linspace(0.0, params.horizon, 21) if sample_times is None else np.asarray(sample_times, float)
    b = run_engine(topology, params, [kn.MODE_VALID, kn.MODE_WEAK, kn.MODE_PWEAK], eta0,
                   seed=seed, replicas=replicas, zeta0=zeta0, sample_times=st,
                   pairs=[(0, 1), (2, 1)], weak_proc=2, all_relevant=all_relevant,
                   stop_when_extinct=not all_relevant, record_tau=True, parallelism=parallelism)
    verts, edges = ball(topology, center, n_box)
    m_n = _m_n_batch(np.uint64(seed), 0, replicas, edges, float(params.lam), float(params.v),
                     float(min(n_box, params.horizon)))
    rr, tt, xx = b.taus
    tau_list = [[] for _ in range(replicas)]
    x_list = [[] for _ in range(replicas)]
    for r, t, x in zip(rr.tolist(), tt.tolist(), xx.tolist()):
        tau_list[r].append(t)
        x_list[r].append(x)
    ws = WeakCouplingStats(tau_list, x_list, b.tallies[:, kn.T_NP], b.tallies[:, kn.T_NBARP],
                           m_n, n_box, int(verts.size))
    return WeakOutcome(st, b.samples[:, :, 0], b.samples[:, :, 1], b.samples[:, :, 2],
                       b.violations, b.ext, b.tallies, ws)


# ---------------------------------------------------------------------------
# time rescaling

@dataclass
class RescaleReport:
    violations: np.ndarray      # (R,) A_t not inside B_t
    ext_a: np.ndarray
    ext_b: np.ndarray
    order_failures: int         # replicas with ext_a > ext_b

    @property
    def ok(self):
        return int(self.violations.sum()) == 0 and self.order_failures == 0


def rescale_coupling_check(topology, lam: float, v: float, v_prime: float, p: float, eta0,
                           zeta0=None, *, horizon: float, seed: int, replicas: int = 1,
                           parallelism: int = 1) -> RescaleReport:
    """A: CPDE(lam, v, p) sped up by v'/v (recoveries at rate v'/v).
    B: the same streams with recoveries thinned to rate 1, i.e.
    CPDE(lam v'/v, v', p).  Checks A_t inside B_t."""
    if not v > 0:
        raise DomainError(f"v must be > 0, got {v}")
    if not v_prime > v:
        raise DomainError(f"v_prime must exceed v, got v={v}, v_prime={v_prime}")
    c = v_prime / v
    params = Params(lam * c, v_prime, p, horizon)
    b = run_engine(topology, params, [kn.MODE_VALID, kn.MODE_VALID], eta0, seed=seed,
                   replicas=replicas, zeta0=zeta0, rec_rate=c, keeps=[1.0, 1.0 / c],
                   pairs=[(0, 1)], stop_when_extinct=True, parallelism=parallelism)
    ea, eb = b.ext[:, 0], b.ext[:, 1]
    return RescaleReport(b.violations, ea, eb, int(np.sum(ea > eb)))


def coupling_rows(seed: int, violations, weak: WeakOutcome = None):
    """CSV rows: replica seed, violations, N_p, N_bar_p, M_n and tallies."""
    rows = []
    for r in range(len(violations)):
        row = {"replica_seed": int(rng.replica_key(np.uint64(seed), r)), "violations": int(violations[r])}
        if weak is not None:
            t = weak.tallies[r]
            row.update(N_p=int(weak.stats.N_p[r]), N_bar_p=int(weak.stats.N_bar_p[r]),
                       M_n=int(weak.stats.M_n[r]), infections=int(t[kn.T_INF]),
                       valid=int(t[kn.T_VALID]), weak=int(t[kn.T_WEAK]), pweak=int(t[kn.T_PWEAK]))
        rows.append(row)
    return rows
