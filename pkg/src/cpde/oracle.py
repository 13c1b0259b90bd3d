"""Exact computations on tiny instances: the (eta, zeta) chain as a sparse
generator, transient survival by uniformization, mean absorption time by a
linear solve, and the exact one-step law of Z under Bernoulli drivers.

State encoding: bit x (x < N) is eta(x), bit N + e is zeta(e).
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from numba import njit
from scipy.sparse.linalg import spsolve
from scipy.stats import poisson

from .graphical import Params

MAX_BITS = 20
TAIL_CUT = 1e-12


class SizeError(ValueError):
    pass


class OracleError(RuntimeError):
    pass


@dataclass
class CTMCModel:
    topology: object
    lam: float
    v: float
    p: float
    Q: sp.csr_matrix      # generator, rows sum to 0
    outflow: np.ndarray   # total event rate of each state (including no-op free events)

    @property
    def n_vertices(self):
        return self.topology.n_vertices

    @property
    def n_states(self):
        return self.Q.shape[0]

    def encode(self, eta, zeta) -> int:
        N = self.n_vertices
        s = 0
        for x, b in enumerate(eta):
            s |= int(bool(b)) << x
        for e, b in enumerate(zeta):
            s |= int(bool(b)) << (N + e)
        return s

    def decode(self, s: int):
        N, E = self.n_vertices, self.topology.n_edges
        return ([(s >> x) & 1 for x in range(N)], [(s >> (N + e)) & 1 for e in range(E)])

    def extinct_mask(self) -> np.ndarray:
        return (np.arange(self.n_states) & ((1 << self.n_vertices) - 1)) == 0

    def initial(self, eta0, zeta0=None) -> np.ndarray:
        """Point mass at (eta0, zeta0), or eta0 with a stationary Bernoulli(p)
        environment when ``zeta0`` is None."""
        N, E = self.n_vertices, self.topology.n_edges
        pi = np.zeros(self.n_states)
        if zeta0 is not None:
            pi[self.encode(eta0, zeta0)] = 1.0
            return pi
        base = self.encode(eta0, [0] * E)
        for z in range(1 << E):
            k = bin(z).count("1")
            pi[base | (z << N)] = self.p ** k * (1.0 - self.p) ** (E - k)
        return pi


def event_rates(topology, lam, v, p, s):
    """Independent recount of the transitions of state ``s`` from the rate
    table: list of (successor, rate)."""
    N = topology.n_vertices
    out = []
    for x in range(N):
        if (s >> x) & 1:
            out.append((s & ~(1 << x), 1.0))
    for x in range(N):
        if not (s >> x) & 1:
            k = 0
            for e in topology.incident_edges(x):
                a, b = topology.edges[e]
                y = b if a == x else a
                if (s >> (N + e)) & 1 and (s >> y) & 1:
                    k += 1
            if k and lam > 0:
                out.append((s | (1 << x), lam * k))
    for e in range(topology.n_edges):
        if (s >> (N + e)) & 1:
            if v * (1 - p) > 0:
                out.append((s & ~(1 << (N + e)), v * (1 - p)))
        elif v * p > 0:
            out.append((s | (1 << (N + e)), v * p))
    return out


def build_model(topology, params: Params) -> CTMCModel:
    N, E = topology.n_vertices, topology.n_edges
    bits = N + E
    if bits > MAX_BITS:
        raise SizeError(f"{bits} state bits exceed the limit of {MAX_BITS}")
    lam, v, p = float(params.lam), float(params.v), float(params.p)
    S = np.arange(1 << bits, dtype=np.int64)
    rows, cols, vals = [], [], []

    def add(mask, target, rate):
        idx = S[mask]
        rows.append(idx)
        cols.append(target[mask])
        vals.append(np.broadcast_to(rate, idx.shape)[...] if np.ndim(rate) == 0 else rate[mask])

    for x in range(N):
        inf = ((S >> x) & 1) == 1
        add(inf, S & ~(1 << x), np.float64(1.0))
    if lam > 0:
        for x in range(N):
            k = np.zeros(S.shape, dtype=np.int64)
            for e in topology.incident_edges(x):
                a, b = topology.edges[e]
                y = b if a == x else a
                k += ((S >> (N + int(e))) & 1) * ((S >> int(y)) & 1)
            healthy = ((S >> x) & 1) == 0
            add(healthy & (k > 0), S | (1 << x), lam * k.astype(float))
    for e in range(E):
        bit = 1 << (N + e)
        op = (S & bit) != 0
        if v * (1 - p) > 0:
            add(op, S & ~bit, np.float64(v * (1 - p)))
        if v * p > 0:
            add(~op, S | bit, np.float64(v * p))
    r = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    c = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    q = np.concatenate([np.asarray(a, float) for a in vals]) if vals else np.zeros(0)
    n = 1 << bits
    out = np.bincount(r, weights=q, minlength=n)
    off = sp.csr_matrix((q, (r, c)), shape=(n, n))
    Q = (off - sp.diags(out)).tocsr()
    return CTMCModel(topology, lam, v, p, Q, out)


def transient(model: CTMCModel, pi0: np.ndarray, t: float) -> np.ndarray:
    """Distribution at time t by uniformization, Poisson tail cut at 1e-12."""
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    q = float(model.outflow.max()) if model.outflow.size else 0.0
    if t == 0 or q == 0:
        return pi0.copy()
    P = (sp.identity(model.n_states, format="csr") + model.Q / q).T.tocsr()
    mu = q * t
    kmax = int(poisson.isf(TAIL_CUT, mu)) + 1
    w = poisson.pmf(np.arange(kmax + 1), mu)
    acc = np.zeros_like(pi0)
    cur = pi0.copy()
    for k in range(kmax + 1):
        acc += w[k] * cur
        cur = P @ cur
    return acc


def exact_survival_to_horizon(model: CTMCModel, eta0, t: float, zeta0=None) -> float:
    pi = transient(model, model.initial(eta0, zeta0), t)
    return float(pi[~model.extinct_mask()].sum())


def absorption_times(model: CTMCModel) -> np.ndarray:
    """Expected time to reach eta = 0 from every state."""
    ext = model.extinct_mask()
    live = np.flatnonzero(~ext)
    A = model.Q[live][:, live].tocsc()
    m = spsolve(A, -np.ones(live.size))
    if not np.all(np.isfinite(m)):
        raise OracleError("absorption system is singular")
    res = A @ m + 1.0
    if np.max(np.abs(res)) > 1e-8 * max(1.0, np.max(np.abs(m))):
        raise OracleError("absorption solve did not converge")
    out = np.zeros(model.n_states)
    out[live] = m
    return out


def exact_mean_extinction_time(model: CTMCModel, eta0, zeta0=None) -> float:
    return float(model.initial(eta0, zeta0) @ absorption_times(model))


# ---------------------------------------------------------------------------
# one step of Z from Z_0 = {0} with Bernoulli drivers

@njit(cache=True)
def _z1_size(ubits, vbits, R):
    # nodes -R..R (index i = k + R), V index i is the pair {i-R, i-R+1}
    m = 2 * R + 1
    lo = R
    hi = R
    while lo > 0 and (vbits >> (lo - 1)) & 1:
        lo -= 1
    while hi < m - 1 and (vbits >> hi) & 1:
        hi += 1
    mark = np.zeros(m + 2, dtype=np.uint8)
    for i in range(lo, hi + 1):
        act = (ubits >> i) & 1
        if i < m - 1 and (vbits >> i) & 1:
            act = 1
        if i > 0 and (vbits >> (i - 1)) & 1:
            act = 1
        if act:
            mark[i] = 1
            mark[i + 1] = 1
            mark[i + 2] = 1
    return int(mark.sum())


@njit(cache=True)
def _enumerate_z1(R, eps):
    m = 2 * R + 1
    nv = m - 1
    law = np.zeros(m + 3)
    for ub in range(1 << m):
        ku = 0
        for i in range(m):
            ku += (ub >> i) & 1
        pu = eps ** ku * (1 - eps) ** (m - ku)
        if pu == 0.0:
            continue
        for vb in range(1 << nv):
            kv = 0
            for i in range(nv):
                kv += (vb >> i) & 1
            pv = eps ** kv * (1 - eps) ** (nv - kv)
            if pv == 0.0:
                continue
            law[_z1_size(ub, vb, R)] += pu * pv
    return law


def _factorized_z1(R, eps):
    """Exact law of |Z_1| by summing over the run of V = 1 pairs through 0:
    a pairs to the left, b to the right; drivers elsewhere do not matter
    except U_0 when a = b = 0."""
    law = np.zeros(2 * R + 4)

    def run_law(j):
        # P(exactly j consecutive ones before a zero or the window edge)
        return eps ** j * ((1 - eps) if j < R else 1.0)

    for a in range(R + 1):
        for b in range(R + 1):
            w = run_law(a) * run_law(b)
            if a + b == 0:
                law[3] += w * eps
                law[0] += w * (1 - eps)
            else:
                law[a + b + 3] += w
    return law


def closed_form_z1_law(eps: float, kmax: int) -> np.ndarray:
    """P(|Z_1| = k) from the interval count: (k-2) eps^{k-3} (1-eps)^2 for
    k >= 4, plus eps (1-eps)^2 at k = 3 and (1-eps)^3 at k = 0."""
    law = np.zeros(kmax + 1)
    law[0] = (1 - eps) ** 3
    if kmax >= 3:
        law[3] = eps * (1 - eps) ** 2
    for k in range(4, kmax + 1):
        law[k] = (k - 2) * eps ** (k - 3) * (1 - eps) ** 2
    return law


@dataclass
class ZStepLaw:
    eps: float
    R: int
    law: np.ndarray         # exact law of |Z_1| with drivers outside {-R..R} set to 0
    closed_form: np.ndarray  # interval-count law on the same support
    tv: float               # total variation distance (closed-form mass beyond the support included)
    method: str


def exact_Z_one_step(eps: float, R: int, method: str = "auto") -> ZStepLaw:
    """Law of |Z_1| given Z_0 = {0} under i.i.d. Bernoulli(eps) drivers on
    the window {-R..R}.  ``enumerate`` visits every driver assignment (4R+1
    bits, at most 25); ``factorized`` sums over the independent coordinates."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    if R < 1:
        raise ValueError(f"R must be >= 1, got {R}")
    bits = 4 * R + 1
    if method == "auto":
        method = "enumerate" if bits <= 21 else "factorized"
    if method == "enumerate":
        if bits > 25:
            raise SizeError(f"{bits} driver bits are too many to enumerate")
        law = _enumerate_z1(int(R), float(eps))
    elif method == "factorized":
        law = _factorized_z1(int(R), float(eps))
    else:
        raise ValueError(f"unknown method {method!r}")
    kmax = law.size - 1
    closed = closed_form_z1_law(eps, kmax)
    tv = 0.5 * (np.abs(law - closed).sum() + max(0.0, 1.0 - closed.sum()))
    return ZStepLaw(float(eps), int(R), law, closed, float(tv), method)


# ---------------------------------------------------------------------------
# frozen regression constants

FIXTURE = Path(__file__).with_name("oracle_constants.txt")


def load_fixture(path=FIXTURE) -> dict:
    """``instance_id value tolerance`` rows; '#' starts a comment."""
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            name, val, tol = line.split()
            out[name] = (float(val), float(tol))
    return out


def reference_instances():
    """The instances behind the fixture file, recomputed from scratch."""
    from .topology import build_topology
    p3 = build_model(build_topology("path", (3,)), Params(1.5, 1.0, 0.5, 5.0))
    p2 = build_model(build_topology("path", (2,)), Params(1.0, 1.0, 0.5, 1.0))
    return {
        "path3_survival_T5": exact_survival_to_horizon(p3, [1, 1, 1], 5.0),
        "path2_mean_ext_open": exact_mean_extinction_time(p2, [1, 1], [1]),
        "path2_mean_ext_stationary": exact_mean_extinction_time(p2, [1, 1]),
    }
