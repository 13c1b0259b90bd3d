"""Monte Carlo estimators: survival, extinction-time statistics, bisection
brackets for lambda_0, phase-diagram sweeps, the static versus slow-dynamics
crossover, and the small statistics toolkit they share (score intervals,
bootstrap medians, isotonic and affine trend checks).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import kernels as kn
from .graphical import SURVIVED, Params, make_eta0, run_engine
from .rng import derive_seed
from .topology import build_topology, topology_spec

Z95 = 1.959963984540054


@dataclass(frozen=True)
class Estimate:
    point: float
    ci_low: float
    ci_high: float
    replicas: int
    seed: int
    method: str   # "binomial", "mean", "median", "ratio"

    def __post_init__(self):
        if self.replicas < 1:
            raise ValueError("an estimate needs at least one replica")
        if not self.ci_low <= self.point <= self.ci_high:
            raise ValueError(f"CI [{self.ci_low}, {self.ci_high}] does not contain {self.point}")

    @property
    def se(self):
        return (self.ci_high - self.ci_low) / (2 * Z95)

    def overlaps(self, other: "Estimate") -> bool:
        return self.ci_low <= other.ci_high and other.ci_low <= self.ci_high


def wilson(k: int, n: int, z: float = Z95):
    """Score interval for a binomial proportion."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ph = k / n
    den = 1 + z * z / n
    mid = (ph + z * z / (2 * n)) / den
    half = z * math.sqrt(ph * (1 - ph) / n + z * z / (4 * n * n)) / den
    return min(ph, max(0.0, mid - half)), max(ph, min(1.0, mid + half))


def proportion(k: int, n: int, seed: int = 0) -> Estimate:
    lo, hi = wilson(k, n)
    return Estimate(k / n, lo, hi, n, seed, "binomial")


def mean_estimate(x, seed: int = 0) -> Estimate:
    x = np.asarray(x, dtype=float)
    m = float(x.mean())
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return Estimate(m, m - Z95 * se, m + Z95 * se, x.size, seed, "mean")


def median_estimate(x, seed: int = 0, resamples: int = 1000) -> Estimate:
    """Sample median with a percentile bootstrap CI (resampling driven by
    ``seed``)."""
    x = np.asarray(x, dtype=float)
    med = float(np.median(x))
    g = np.random.default_rng(derive_seed(seed, 0xB007))
    boot = np.median(x[g.integers(0, x.size, size=(resamples, x.size))], axis=1)
    lo, hi = np.quantile(boot, [0.025, 0.975])
    return Estimate(med, float(min(lo, med)), float(max(hi, med)), x.size, seed, "median")


def ratio_of_medians(a, b, seed: int = 0, resamples: int = 1000) -> Estimate:
    """median(a) / median(b) with a bootstrap CI (independent resampling)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    r = float(np.median(a) / np.median(b))
    g = np.random.default_rng(derive_seed(seed, 0xA710))
    ra = np.median(a[g.integers(0, a.size, size=(resamples, a.size))], axis=1)
    rb = np.median(b[g.integers(0, b.size, size=(resamples, b.size))], axis=1)
    lo, hi = np.quantile(ra / rb, [0.025, 0.975])
    return Estimate(r, float(min(lo, r)), float(max(hi, r)), min(a.size, b.size), seed, "ratio")


# ---------------------------------------------------------------------------
# trend checks

def pava(y, w):
    """Weighted least-squares non-decreasing fit (pool adjacent violators)."""
    vals, wts, cnt = [], [], []
    for yi, wi in zip(map(float, y), map(float, w)):
        vals.append(yi)
        wts.append(wi)
        cnt.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            w2 = wts[-2] + wts[-1]
            v2 = (vals[-2] * wts[-2] + vals[-1] * wts[-1]) / w2
            c2 = cnt[-2] + cnt[-1]
            vals[-2:] = [v2]
            wts[-2:] = [w2]
            cnt[-2:] = [c2]
    return np.repeat(vals, cnt)


def monotone_pvalue(y, se, seed: int = 0, sims: int = 20000) -> float:
    """p-value of H0 "the means are non-decreasing" given estimates ``y`` with
    standard errors ``se``.  Statistic: weighted squared distance to the
    isotonic fit; null distribution simulated at the isotonic fit (the least
    favourable point would be a constant; the fit is the usual plug-in)."""
    y = np.asarray(y, dtype=float)
    se = np.maximum(np.asarray(se, dtype=float), 1e-12)
    w = 1.0 / se ** 2
    fit = pava(y, w)
    stat = float(np.sum(w * (y - fit) ** 2))
    if stat == 0.0:
        return 1.0
    g = np.random.default_rng(derive_seed(seed, 0x150))
    # the chi-bar-square null is stochastically largest at a constant mean
    mu = np.full_like(y, np.sum(w * y) / np.sum(w))
    ys = mu + se * g.standard_normal((sims, y.size))
    null = np.array([np.sum(w * (s - pava(s, w)) ** 2) for s in ys])
    return float((1 + np.sum(null >= stat)) / (sims + 1))


@dataclass
class TrendReport:
    slope: float
    slope_pvalue: float      # one-sided, H1: slope > 0
    monotone_pvalue: float   # H0: non-decreasing
    increasing: bool


def increasing_trend(x, y, se, alpha: float = 0.05, seed: int = 0) -> TrendReport:
    """Positive weighted-least-squares slope at level ``alpha`` and no
    significant departure from a non-decreasing sequence."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    se = np.maximum(np.asarray(se, dtype=float), 1e-12)
    w = 1.0 / se ** 2
    xm = np.sum(w * x) / np.sum(w)
    ym = np.sum(w * y) / np.sum(w)
    sxx = np.sum(w * (x - xm) ** 2)
    slope = float(np.sum(w * (x - xm) * (y - ym)) / sxx)
    sslope = math.sqrt(1.0 / sxx)
    pv = float(stats.norm.sf(slope / sslope))
    mp = monotone_pvalue(y, se, seed)
    return TrendReport(slope, pv, mp, pv < alpha and mp >= alpha)


@dataclass
class AffineFit:
    slope: float
    intercept: float
    r2: float


def affine_fit(x, y) -> AffineFit:
    r = stats.linregress(np.asarray(x, float), np.asarray(y, float))
    return AffineFit(float(r.slope), float(r.intercept), float(r.rvalue ** 2))


# ---------------------------------------------------------------------------
# survival and extinction times

def extinction_times(topology, params: Params, eta0, replicas: int, seed: int, zeta0=None,
                     parallelism: int = 1) -> np.ndarray:
    """Extinction time per replica, SURVIVED when alive at the horizon."""
    eta = make_eta0(topology, eta0) if isinstance(eta0, str) else np.asarray(eta0, np.uint8)
    b = run_engine(topology, params, [kn.MODE_VALID], eta, seed=seed, replicas=replicas, zeta0=zeta0,
                   parallelism=parallelism)
    if b.errors.any():
        raise RuntimeError("engine reported an internal error")
    return b.ext[:, 0].copy()


def estimate_survival(topology, params: Params, eta0, replicas: int, seed: int, zeta0=None,
                      parallelism: int = 1) -> Estimate:
    """P(eta_horizon != 0) with a 95% score interval."""
    ext = extinction_times(topology, params, eta0, replicas, seed, zeta0, parallelism)
    return proportion(int(np.sum(ext == SURVIVED)), replicas, seed)


@dataclass
class ExtinctionReport:
    mean: Estimate      # of min(tau, cap)
    median: Estimate    # of min(tau, cap)
    cap: float
    cap_hits: int
    unreliable: bool    # more than half of the replicas hit the cap
    times: np.ndarray = field(repr=False)


def summarize_extinction(times, cap: float, seed: int) -> ExtinctionReport:
    times = np.asarray(times, dtype=float)
    hits = int(np.sum(times == SURVIVED))
    capped = np.where(times == SURVIVED, cap, times)
    return ExtinctionReport(mean_estimate(capped, seed), median_estimate(capped, seed), float(cap), hits,
                            hits > times.size / 2, capped)


def estimate_mean_extinction_time(topology, params: Params, eta0, replicas: int, cap: float, seed: int,
                                  zeta0=None, parallelism: int = 1) -> ExtinctionReport:
    """Mean and median of min(tau, cap); the run horizon is the cap."""
    if cap > params.horizon:
        raise ValueError(f"cap {cap} exceeds the horizon {params.horizon}")
    ext = extinction_times(topology, params.replace(horizon=cap), eta0, replicas, seed, zeta0, parallelism)
    return summarize_extinction(ext, cap, seed)


# ---------------------------------------------------------------------------
# lambda_0 brackets

@dataclass
class Lambda0Bracket:
    lo: float
    hi: float
    theta: float
    horizon: float
    replicas: int
    history: list        # dicts: lam, survival, ci_low, ci_high, seed, replicas, attempt
    ok: bool
    message: str = ""

    def contains(self, x: float, slack: float = 0.0) -> bool:
        return self.lo - slack <= x <= self.hi + slack


def _nonmonotone(history, attempt):
    pts = sorted((h["lam"], h["ci_low"], h["ci_high"]) for h in history if h["attempt"] == attempt)
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            if pts[j][0] > pts[i][0] and pts[j][2] < pts[i][1]:
                return True
    return False


def estimate_lambda0(topology, v: float, p: float, *, seed: int, lo: float, hi: float, horizon: float,
                     replicas: int, tol: float = 0.05, theta: float = 0.02, eta0="all", max_retries: int = 2,
                     parallelism: int = 1) -> Lambda0Bracket:
    """Bisect lambda on the finite-horizon criterion survival >= theta.

    Endpoints are checked first and widened (lo halved, hi doubled) when on
    the wrong side.  A history that is non-monotone beyond the score
    intervals triggers a widened retry with fresh seeds; after
    ``max_retries`` the bracket is returned with ``ok=False``.
    """
    if not 0 < theta < 1:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    if not 0 <= lo < hi:
        raise ValueError(f"need 0 <= lo < hi, got lo={lo}, hi={hi}")
    history = []
    step = [0]

    def above(lam, attempt):
        s = derive_seed(seed, attempt, step[0])
        step[0] += 1
        est = estimate_survival(topology, Params(lam, v, p, horizon), eta0, replicas, s, parallelism=parallelism)
        history.append({"lam": lam, "survival": est.point, "ci_low": est.ci_low, "ci_high": est.ci_high,
                        "seed": s, "replicas": replicas, "attempt": attempt})
        return est.point >= theta

    a, b = float(lo), float(hi)
    msg = ""
    for attempt in range(max_retries + 1):
        widen = 0
        while above(a, attempt) and widen < 8:
            a /= 2
            widen += 1
        while not above(b, attempt) and widen < 16:
            b *= 2
            widen += 1
        if widen >= 16:
            msg = "could not place the endpoints on both sides of the threshold"
            break
        while b - a > tol:
            m = 0.5 * (a + b)
            if above(m, attempt):
                b = m
            else:
                a = m
        if not _nonmonotone(history, attempt):
            return Lambda0Bracket(a, b, theta, horizon, replicas, history, True, msg)
        msg = f"non-monotone survival on attempt {attempt}"
        a, b = a / 2, b * 2
    return Lambda0Bracket(a, b, theta, horizon, replicas, history, False, msg)


# ---------------------------------------------------------------------------
# sweeps

SWEEP_HEADER = ("topology", "kind", "n", "lambda", "v", "p", "horizon", "eta0_spec", "replicas", "seed",
                "survival", "ci_low", "ci_high", "mean_tau", "se_tau", "median_tau", "cap_hits")


def sweep_cell(topology, params: Params, eta0_spec, replicas: int, seed: int, parallelism: int = 1):
    ext = extinction_times(topology, params, eta0_spec, replicas, seed, parallelism=parallelism)
    surv = proportion(int(np.sum(ext == SURVIVED)), replicas, seed)
    rep = summarize_extinction(ext, params.horizon, seed)
    return (topology_spec(topology), topology.kind, topology.n_vertices, params.lam, params.v, params.p,
            params.horizon, eta0_spec, replicas, seed, surv.point, surv.ci_low, surv.ci_high, rep.mean.point,
            rep.mean.se, rep.median.point, rep.cap_hits)


def sweep_phase_diagram(topology, lams, vs, ps, *, horizon: float, replicas: int, seed: int, eta0_spec="all",
                        parallelism: int = 1):
    """One row per (v, p, lambda) cell, in that nesting order.  Cell seeds
    depend only on the master seed and the cell's grid indices."""
    rows = []
    for iv, v in enumerate(vs):
        for ip, p in enumerate(ps):
            for il, lam in enumerate(lams):
                s = derive_seed(seed, iv, ip, il)
                rows.append(sweep_cell(topology, Params(lam, v, p, horizon), eta0_spec, replicas, s, parallelism))
    return rows


IMMUNITY_HEADER = ("v", "p", "lambda_max", "survival", "ci_high", "immune_evidence")


def immunity_rows(rows, theta: float = 0.02):
    """Per (v, p): finite-horizon evidence of immunity, i.e. the survival CI
    at the largest lambda of the grid lies below ``theta``."""
    best = {}
    for r in rows:
        key = (r[4], r[5])
        if key not in best or r[3] > best[key][3]:
            best[key] = r
    return [(v, p, r[3], r[10], r[12], int(r[12] < theta)) for (v, p), r in best.items()]


# ---------------------------------------------------------------------------
# static versus slow environment

CROSSOVER_HEADER = ("n", "v", "replicas", "seed", "cap", "median_tau", "median_lo", "median_hi", "mean_tau",
                    "se_tau", "cap_hits", "truncated")


@dataclass
class CrossoverResult:
    sizes: list
    static: list       # ExtinctionReport per size (v = 0)
    dynamic: list      # ExtinctionReport per size (v = v_small)
    ratios: list       # Estimate of median ratio per size
    trend: TrendReport
    fit: AffineFit     # dynamic median vs log n
    rows: list


def crossover_experiment(lam: float, p: float, v_small: float, sizes, *, replicas: int, cap: float, seed: int,
                         ring_factor: int = 1, static_cap: float = None,
                         parallelism: int = 1) -> CrossoverResult:
    """Medians of tau for a block of n infected sites on a cycle of length
    ``ring_factor * n``, in a static Bernoulli(p) environment and at speed
    ``v_small``.  Both arms use the same replica keys; capped runs count as
    the arm's cap and are flagged.  ``static_cap`` (default ``cap``) lets the
    static arm, whose times grow much faster in n, stop earlier."""
    caps = (cap if static_cap is None else static_cap, cap)
    static, dynamic, ratios, rows = [], [], [], []
    for i, n in enumerate(sizes):
        top = build_topology("cycle", (ring_factor * n,))
        eta = make_eta0(top, f"block:{n}")
        s = derive_seed(seed, i)
        arms = []
        for v, c in zip((0.0, v_small), caps):
            ext = extinction_times(top, Params(lam, v, p, c), eta, replicas, s, parallelism=parallelism)
            rep = summarize_extinction(ext, c, s)
            arms.append(rep)
            rows.append((n, v, replicas, s, c, rep.median.point, rep.median.ci_low, rep.median.ci_high,
                         rep.mean.point, rep.mean.se, rep.cap_hits, int(rep.unreliable)))
        static.append(arms[0])
        dynamic.append(arms[1])
        ratios.append(ratio_of_medians(arms[0].times, arms[1].times, s))
    r = np.array([x.point for x in ratios])
    se = np.array([x.se for x in ratios])
    trend = increasing_trend(np.log(sizes), r, se, seed=seed)
    fit = affine_fit(np.log(sizes), [d.median.point for d in dynamic])
    return CrossoverResult(list(sizes), static, dynamic, ratios, trend, fit, rows)
