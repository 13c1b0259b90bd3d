"""Renormalization blocks: n-closed barriers, interval and vertex block
variables, the H graph and its Z process, the delta bounds for one edge, and
the good-block grid used for the comparison with oriented percolation.

Time windows are half-open, ``[nT, (n+1)T)``; an event exactly at ``nT``
belongs to window ``n``.
"""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import rng
from .graphical import SURVIVED, Params, StructureError
from .rng import KIND_AUX, KIND_INFECTION, KIND_RECOVERY, KIND_UPDATE
from .streams import materialize_kind, stationary_zeta


class DomainError(ValueError):
    pass


# ---------------------------------------------------------------------------
# stream data of one replica

def _csr(ids, n):
    counts = np.bincount(ids, minlength=n)
    ptr = np.zeros(n + 1, dtype=np.int64)
    ptr[1:] = np.cumsum(counts)
    return ptr


@dataclass
class EnvTrajectory:
    """Edge states: ``zeta0`` plus, per edge, update times and new states."""
    zeta0: np.ndarray
    ptr: np.ndarray
    times: np.ndarray
    states: np.ndarray
    horizon: float

    def state_at(self, e: int, t: float) -> int:
        lo, hi = self.ptr[e], self.ptr[e + 1]
        j = np.searchsorted(self.times[lo:hi], t, side="right")
        return int(self.zeta0[e]) if j == 0 else int(self.states[lo + j - 1])


@dataclass
class ReplicaEvents:
    """Recovery points per vertex and infection points per edge (with the
    edge state at each infection point)."""
    rec_ptr: np.ndarray
    rec_t: np.ndarray
    rec_coin: np.ndarray
    inf_ptr: np.ndarray
    inf_t: np.ndarray
    inf_valid: np.ndarray
    horizon: float


def env_trajectory(topology, params: Params, key: int, zeta0=None) -> EnvTrajectory:
    """Environment of replica ``key`` on [0, horizon]; stationary start unless
    ``zeta0`` is given."""
    k = np.uint64(key)
    z = stationary_zeta(k, topology.n_edges, float(params.p)) if zeta0 is None else np.asarray(zeta0, np.uint8)
    t, m, _b, ids = materialize_kind(k, KIND_UPDATE, topology.n_edges, float(params.v), float(params.horizon))
    states = (m < params.p).astype(np.uint8)
    return EnvTrajectory(z, _csr(ids, topology.n_edges), t, states, float(params.horizon))


@njit(cache=True)
def _valid_flags(inf_ptr, inf_t, env_ptr, env_t, env_s, zeta0):
    out = np.zeros(inf_t.shape[0], dtype=np.uint8)
    E = zeta0.shape[0]
    for e in range(E):
        j = env_ptr[e]
        s = zeta0[e]
        for i in range(inf_ptr[e], inf_ptr[e + 1]):
            t = inf_t[i]
            while j < env_ptr[e + 1] and env_t[j] <= t:
                s = env_s[j]
                j += 1
            out[i] = s
    return out


def replica_events(topology, params: Params, key: int, env: EnvTrajectory) -> ReplicaEvents:
    k = np.uint64(key)
    h = float(params.horizon)
    rt, _rm, rb, rid = materialize_kind(k, KIND_RECOVERY, topology.n_vertices, 1.0, h)
    it, _im, _ib, iid = materialize_kind(k, KIND_INFECTION, topology.n_edges, float(params.lam), h)
    iptr = _csr(iid, topology.n_edges)
    valid = _valid_flags(iptr, it, env.ptr, env.times, env.states, env.zeta0)
    return ReplicaEvents(_csr(rid, topology.n_vertices), rt, rb, iptr, it, valid, h)


# ---------------------------------------------------------------------------
# n-closed edges

@njit(cache=True)
def _closed_windows(ptr, times, states, zeta0, T, nw):
    E = zeta0.shape[0]
    out = np.zeros((nw, E), dtype=np.uint8)
    for e in range(E):
        j = ptr[e]
        s = zeta0[e]
        for n in range(nw):
            a = n * T
            b = (n + 1) * T
            while j < ptr[e + 1] and times[j] <= a:
                s = states[j]
                j += 1
            closed = s == 0
            jj = j
            while jj < ptr[e + 1] and times[jj] < b:
                if states[jj] == 1:
                    closed = False
                    break
                jj += 1
            out[n, e] = 1 if closed else 0
    return out


def n_closed_edges(env: EnvTrajectory, T: float, n_windows: int = None) -> np.ndarray:
    """(n_windows, E) indicator: edge closed throughout [nT, (n+1)T)."""
    if T <= 0:
        raise DomainError(f"T must be > 0, got {T}")
    if n_windows is None:
        n_windows = int(env.horizon // T)
    if n_windows * T > env.horizon * (1 + 1e-12):
        raise IndexError(f"windows up to {n_windows * T} exceed the trajectory horizon {env.horizon}")
    return _closed_windows(env.ptr, env.times, env.states, env.zeta0, float(T), int(n_windows))


# ---------------------------------------------------------------------------
# interval blocks (teo1)

@dataclass
class IntervalBlockGrid:
    r0: int
    T: float
    n_vertices: int
    closed: np.ndarray   # (nw, E)
    V: np.ndarray        # (nw, K): V[n, k] refers to the pair {k, k+1}
    e: np.ndarray        # (nw, K) leftmost n-closed edge, or the default edge
    left: np.ndarray     # (nw, K) first vertex of B_{k,n} (mod n_vertices)
    size: np.ndarray     # (nw, K) number of vertices of B_{k,n}
    U: np.ndarray        # (nw, K)

    @property
    def n_blocks(self):
        return self.V.shape[1]

    def block_vertices(self, k: int, n: int) -> np.ndarray:
        return (self.left[n, k] + np.arange(self.size[n, k])) % self.n_vertices

    def block_of(self, n: int) -> np.ndarray:
        """Vertex -> block index in window n."""
        out = np.full(self.n_vertices, -1, dtype=np.int64)
        for k in range(self.n_blocks):
            out[self.block_vertices(k, n)] = k
        return out


@njit(cache=True)
def _block_structure(closed, r0, K, N):
    nw = closed.shape[0]
    V = np.zeros((nw, K), dtype=np.uint8)
    eb = np.zeros((nw, K), dtype=np.int64)
    for n in range(nw):
        for k in range(K):
            first = -1
            for x in range(k * r0, (k + 1) * r0):
                if closed[n, x % N]:
                    first = x
                    break
            if first < 0:
                V[n, k] = 1
                eb[n, k] = (k + 1) * r0 - 1
            else:
                eb[n, k] = first
    left = np.zeros((nw, K), dtype=np.int64)
    size = np.zeros((nw, K), dtype=np.int64)
    for n in range(nw):
        for k in range(K):
            prev = eb[n, k - 1] - (K * r0 if k == 0 else 0)
            left[n, k] = (prev + 1) % N
            size[n, k] = eb[n, k] - prev
    return V, eb, left, size


@njit(cache=True)
def _restricted_survives(verts, edges_in, rec_ptr, rec_t, inf_ptr, inf_t, inf_valid, t0, t1):
    """Contact process on a vertex list with the given internal edges (edge i
    joins verts[i] and verts[i+1]), all infected at t0, valid infections only.
    Returns True if still alive just before t1."""
    m = verts.shape[0]
    nev = 0
    for i in range(m):
        x = verts[i]
        lo = rec_ptr[x] + np.searchsorted(rec_t[rec_ptr[x]:rec_ptr[x + 1]], t0)
        hi = rec_ptr[x] + np.searchsorted(rec_t[rec_ptr[x]:rec_ptr[x + 1]], t1)
        nev += hi - lo
    for i in range(edges_in.shape[0]):
        e = edges_in[i]
        lo = inf_ptr[e] + np.searchsorted(inf_t[inf_ptr[e]:inf_ptr[e + 1]], t0)
        hi = inf_ptr[e] + np.searchsorted(inf_t[inf_ptr[e]:inf_ptr[e + 1]], t1)
        nev += hi - lo
    et = np.empty(nev)
    ek = np.empty(nev, dtype=np.int64)  # >= 0: recovery at local vertex; < 0: infection at local edge -(i+1)
    c = 0
    for i in range(m):
        x = verts[i]
        lo = rec_ptr[x] + np.searchsorted(rec_t[rec_ptr[x]:rec_ptr[x + 1]], t0)
        hi = rec_ptr[x] + np.searchsorted(rec_t[rec_ptr[x]:rec_ptr[x + 1]], t1)
        for j in range(lo, hi):
            et[c] = rec_t[j]
            ek[c] = i
            c += 1
    for i in range(edges_in.shape[0]):
        e = edges_in[i]
        lo = inf_ptr[e] + np.searchsorted(inf_t[inf_ptr[e]:inf_ptr[e + 1]], t0)
        hi = inf_ptr[e] + np.searchsorted(inf_t[inf_ptr[e]:inf_ptr[e + 1]], t1)
        for j in range(lo, hi):
            if inf_valid[j]:
                et[c] = inf_t[j]
                ek[c] = -(i + 1)
                c += 1
    order = np.argsort(et[:c], kind="mergesort")
    alive = np.ones(m, dtype=np.uint8)
    cnt = m
    for o in order:
        k = ek[o]
        if k >= 0:
            if alive[k]:
                alive[k] = 0
                cnt -= 1
                if cnt == 0:
                    return False
        else:
            i = -k - 1
            if alive[i] != alive[i + 1]:
                alive[i] = 1
                alive[i + 1] = 1
                cnt += 1
    return cnt > 0


@njit(cache=True)
def _interval_U(left, size, N, T, rec_ptr, rec_t, inf_ptr, inf_t, inf_valid):
    nw, K = left.shape
    U = np.zeros((nw, K), dtype=np.uint8)
    for n in range(nw):
        for k in range(K):
            m = size[n, k]
            verts = np.empty(m, dtype=np.int64)
            for i in range(m):
                verts[i] = (left[n, k] + i) % N
            edges_in = verts[:m - 1].copy()  # edge x joins x and x+1 on a cycle
            if _restricted_survives(verts, edges_in, rec_ptr, rec_t, inf_ptr, inf_t, inf_valid,
                                    n * T, (n + 1) * T):
                U[n, k] = 1
    return U


def interval_block_variables(topology, env: EnvTrajectory, events: ReplicaEvents, r0: int, T: float,
                             n_windows: int) -> IntervalBlockGrid:
    """V, e, B and U for blocks of width r0 on a cycle of length K r0."""
    if topology.kind != "cycle":
        raise StructureError("interval blocks are built on cycle topologies")
    if r0 < 1:
        raise DomainError(f"r0 must be >= 1, got {r0}")
    N = topology.n_vertices
    if N % r0 or N // r0 < 2:
        raise StructureError(f"cycle length {N} must be a multiple of r0={r0} with at least two blocks")
    K = N // r0
    closed = n_closed_edges(env, T, n_windows)
    V, eb, left, size = _block_structure(closed, int(r0), K, N)
    U = _interval_U(left, size, N, float(T), events.rec_ptr, events.rec_t, events.inf_ptr,
                    events.inf_t, events.inf_valid)
    return IntervalBlockGrid(int(r0), float(T), N, closed, V, eb % N, left, size, U)


# ---------------------------------------------------------------------------
# H graph and Z

@dataclass
class HGraphTrace:
    Z: list              # Z_n as sorted integer arrays, n = 0..len-1
    N_ext: float         # first n with Z_n empty, or SURVIVED
    budget: int

    @property
    def sizes(self):
        return np.array([z.size for z in self.Z], dtype=np.int64)


def _up_active(U, V, n, k, K, ring):
    if U[n, k]:
        return True
    if V[n, k] and (ring or k + 1 < K):
        return True
    km = k - 1
    if km < 0:
        if not ring:
            return False
        km += K
    return bool(V[n, km])


def h_edges(U, V, ring=True):
    """All H edges with the variable justifying each: ((k, n), (k2, n2), why)."""
    nw, K = U.shape
    out = []
    for n in range(nw):
        for k in range(K):
            if ring or k + 1 < K:
                if V[n, k]:
                    out.append(((k, n), ((k + 1) % K, n), ("V", k, n)))
            why = ("U", k, n) if U[n, k] else (("V", k, n) if V[n, k] and (ring or k + 1 < K) else
                                               (("V", (k - 1) % K, n) if (ring or k > 0) and V[n, (k - 1) % K] else None))
            if why is not None:
                for d in (-1, 0, 1):
                    k2 = k + d
                    if ring:
                        k2 %= K
                    elif not 0 <= k2 < K:
                        continue
                    out.append(((k, n), (k2, n + 1), why))
    return out


def run_Z(U, V, Z0, window_budget: int = None, ring: bool = True) -> HGraphTrace:
    """Z on explicit drivers: U[n, k], V[n, k] (pair {k, k+1}), blocks on a
    ring of length K (or a segment when ``ring`` is False).

    Z_{n+1} is obtained by closing Z_n under level-n V edges and stepping up
    from every node that has U = 1 or an adjacent V = 1.
    """
    U = np.asarray(U, dtype=np.uint8)
    V = np.asarray(V, dtype=np.uint8)
    nw, K = U.shape
    budget = nw if window_budget is None else int(window_budget)
    if budget <= 0:
        raise DomainError(f"window budget must be positive, got {budget}")
    if budget > nw:
        raise DomainError(f"budget {budget} exceeds the {nw} windows of drivers")
    cur = np.zeros(K, dtype=bool)
    cur[np.asarray(list(Z0), dtype=np.int64) % K if ring else np.asarray(list(Z0), dtype=np.int64)] = True
    Zs = [np.flatnonzero(cur)]
    if not cur.any():
        return HGraphTrace(Zs, 0, budget)
    for n in range(budget):
        # horizontal closure along V edges of level n
        closed = cur.copy()
        changed = True
        while changed:
            changed = False
            for k in range(K):
                k2 = k + 1
                if k2 == K:
                    if not ring:
                        continue
                    k2 = 0
                if V[n, k] and closed[k] != closed[k2]:
                    closed[k] = closed[k2] = True
                    changed = True
        nxt = np.zeros(K, dtype=bool)
        for k in np.flatnonzero(closed):
            if _up_active(U, V, n, k, K, ring):
                for d in (-1, 0, 1):
                    k2 = k + d
                    if ring:
                        nxt[k2 % K] = True
                    elif 0 <= k2 < K:
                        nxt[k2] = True
        cur = nxt
        Zs.append(np.flatnonzero(cur))
        if not cur.any():
            return HGraphTrace(Zs, n + 1, budget)
    return HGraphTrace(Zs, SURVIVED, budget)


@njit(cache=True)
def _bern(key, n, k, eps):
    # driver value for block k (any integer) at level n
    return rng.uniform(rng.window_key(key, n), np.uint64(k + (1 << 62))) < eps


@njit(cache=True)
def _z_bernoulli_run(ukey, vkey, eps, z0_size, budget):
    """Z on the integers with i.i.d. Bernoulli(eps) drivers, Z_0 = {0..m-1}.

    Returns (N_ext or -1 if alive at the budget, max |Z_n|)."""
    cur = np.arange(z0_size, dtype=np.int64)
    peak = z0_size
    for n in range(budget):
        m = cur.shape[0]
        if m == 0:
            return n, peak
        # closure: extend every maximal run along V edges
        lo_list = []
        hi_list = []
        i = 0
        while i < m:
            lo = cur[i]
            hi = cur[i]
            while _bern(vkey, n, lo - 1, eps):
                lo -= 1
            while True:
                while i < m and cur[i] <= hi:
                    i += 1
                if _bern(vkey, n, hi, eps):
                    hi += 1
                else:
                    break
            lo_list.append(lo)
            hi_list.append(hi)
        # up step from active nodes
        nxt = []
        for r in range(len(lo_list)):
            for k in range(lo_list[r], hi_list[r] + 1):
                act = _bern(ukey, n, k, eps) or _bern(vkey, n, k, eps) or _bern(vkey, n, k - 1, eps)
                if act:
                    for d in range(-1, 2):
                        nxt.append(k + d)
        if len(nxt) == 0:
            return n + 1, peak
        arr = np.array(nxt, dtype=np.int64)
        arr = np.unique(arr)
        cur = arr
        if cur.shape[0] > peak:
            peak = cur.shape[0]
    return -1, peak


@njit(cache=True)
def _z_bernoulli_batch(seed, z0_size, eps, budget, runs):
    out = np.empty(runs, dtype=np.int64)
    peak = np.empty(runs, dtype=np.int64)
    for r in range(runs):
        key = rng.replica_key(seed, r)
        ukey = rng.stream_key(key, KIND_AUX, 0)
        vkey = rng.stream_key(key, KIND_AUX, 1)
        out[r], peak[r] = _z_bernoulli_run(ukey, vkey, eps, z0_size, budget)
    return out, peak


def run_Z_bernoulli(eps: float, z0_size: int, window_budget: int, seed: int, runs: int):
    """N_ext for ``runs`` independent Z processes on the integers with
    Bernoulli(eps) U and V drivers and Z_0 = {0, .., z0_size-1}.  Runs still
    alive at the budget report ``SURVIVED``."""
    if window_budget <= 0:
        raise DomainError(f"window budget must be positive, got {window_budget}")
    if not 0.0 <= eps <= 1.0:
        raise DomainError(f"eps must lie in [0, 1], got {eps}")
    n_ext, peak = _z_bernoulli_batch(np.uint64(seed), int(z0_size), float(eps), int(window_budget), int(runs))
    out = n_ext.astype(float)
    out[n_ext < 0] = SURVIVED
    return out, peak


def bernoulli_drivers(eps, K, n_windows, seed, offset=0):
    """The same Bernoulli drivers as ``run_Z_bernoulli`` (run 0) on blocks
    ``offset .. offset+K-1``, as explicit (U, V) arrays."""
    key = np.uint64(rng.replica_key(np.uint64(seed), 0))
    ukey = np.uint64(rng.stream_key(key, KIND_AUX, 0))
    vkey = np.uint64(rng.stream_key(key, KIND_AUX, 1))
    U = np.zeros((n_windows, K), dtype=np.uint8)
    V = np.zeros((n_windows, K), dtype=np.uint8)
    for n in range(n_windows):
        for k in range(K):
            U[n, k] = _bern(ukey, n, k + offset, eps)
            V[n, k] = _bern(vkey, n, k + offset, eps)
    return U, V


def z_containment_check(eta_at, grid: IntervalBlockGrid, trace: HGraphTrace):
    """Count (k, n) with an infected vertex of B_{k,n} at nT but k not in Z_n.

    ``eta_at[n]`` is the infection configuration at time nT.  Also returns
    the number of levels where Z_n is empty while eta_{nT} is not.
    """
    eta_at = np.asarray(eta_at)
    if eta_at.shape[1] != grid.n_vertices:
        raise StructureError("configuration and block grid come from different systems")
    levels = min(eta_at.shape[0], len(trace.Z), grid.V.shape[0])
    bad = 0
    empty_bad = 0
    for n in range(levels):
        blk = grid.block_of(n)
        inz = np.zeros(grid.n_blocks, dtype=bool)
        inz[trace.Z[n]] = True
        infected_blocks = np.unique(blk[eta_at[n] == 1])
        bad += int(np.sum(~inz[infected_blocks]))
        if trace.Z[n].size == 0 and eta_at[n].any():
            empty_bad += 1
    return bad, empty_bad


# ---------------------------------------------------------------------------
# vertex blocks (teo2)

@njit(cache=True)
def _no_recovery_windows(rec_ptr, rec_t, N, T, nw):
    U = np.ones((nw, N), dtype=np.uint8)
    for x in range(N):
        for j in range(rec_ptr[x], rec_ptr[x + 1]):
            n = int(rec_t[j] // T)
            if n < nw:
                U[n, x] = 0
    return U


def vertex_block_variables(topology, env: EnvTrajectory, events: ReplicaEvents, T: float, n_windows: int):
    """U[n, x] = no recovery at x in window n; V[n, e] = e open at some time
    in window n."""
    V = 1 - n_closed_edges(env, T, n_windows)
    U = _no_recovery_windows(events.rec_ptr, events.rec_t, topology.n_vertices, float(T), int(n_windows))
    return U, V.astype(np.uint8)


def run_Z_graph(topology, U, V, Z0, window_budget: int = None) -> HGraphTrace:
    """Vertex-level Z: horizontal moves along edges with V = 1, then up from
    x to x when U[n, x] = 1 or some incident edge has V = 1."""
    nw, N = U.shape
    budget = nw if window_budget is None else int(window_budget)
    if budget <= 0:
        raise DomainError(f"window budget must be positive, got {budget}")
    cur = np.zeros(N, dtype=bool)
    cur[list(Z0)] = True
    Zs = [np.flatnonzero(cur)]
    if not cur.any():
        return HGraphTrace(Zs, 0, budget)
    a, b = topology.edges[:, 0], topology.edges[:, 1]
    for n in range(budget):
        closed = cur.copy()
        openv = V[n].astype(bool)
        while True:
            new = closed.copy()
            new[a[openv & closed[b]]] = True
            new[b[openv & closed[a]]] = True
            if np.array_equal(new, closed):
                break
            closed = new
        active = U[n].astype(bool).copy()
        active[a[openv]] = True
        active[b[openv]] = True
        cur = closed & active
        Zs.append(np.flatnonzero(cur))
        if not cur.any():
            return HGraphTrace(Zs, n + 1, budget)
    return HGraphTrace(Zs, SURVIVED, budget)


# ---------------------------------------------------------------------------
# delta bounds for a single edge

@dataclass(frozen=True)
class DeltaBounds:
    delta: float
    delta_prime: float
    delta0: float


def _delta_prime(x, p):
    if p <= 0.0:
        return 1.0 - (-math.expm1(-x)) / x
    return 1.0 - p * (-math.expm1(-x)) / (-math.expm1(-p * x))


def _check_vpT(v, p, T):
    if not v > 0 or not T > 0:
        raise DomainError(f"v and T must be > 0, got v={v}, T={T}")
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"p must lie in [0, 1], got {p}")


def delta0(p: float) -> float:
    return math.exp(-p) * _delta_prime(1.0, p)


def delta_bound(v: float, p: float, T: float) -> DeltaBounds:
    """Lower bound on P(edge closed through a window | past windows).

    delta' = 1 - p (1 - e^{-vT}) / (1 - e^{-pvT}) is the closed form written
    without the cancellation of the textbook expression; at p = 0 it is the
    limit 1 - (1 - e^{-vT}) / (vT).
    """
    _check_vpT(v, p, T)
    x = v * T
    dp = _delta_prime(x, p)
    return DeltaBounds(math.exp(-p * x) * dp, dp, delta0(p))


def edge_chain_conditionals(v: float, p: float, T: float):
    """P(zeta_T = 0 | zeta_0 = 1), P(zeta_T = 0 | zeta_0 = 0, w_0 = 1) and
    P(zeta_T = 0 | zeta_0 = 0, w_0 = 0), w_0 = edge open somewhere in [0, T)."""
    _check_vpT(v, p, T)
    x = v * T
    return (1.0 - p) * (-math.expm1(-x)), _delta_prime(x, p), 1.0


@njit(cache=True)
def _edge_chain(key, v, p, T, nw):
    """State at each nT (n = 0..nw) and w_n for n < nw of one stationary edge."""
    t, m, _b, _ids = materialize_kind(key, KIND_UPDATE, 1, v, nw * T)
    z = np.zeros(nw + 1, dtype=np.uint8)
    w = np.zeros(nw, dtype=np.uint8)
    s = 1 if rng.uniform(rng.stream_key(key, 4, 0), 0) < p else 0
    j = 0
    for n in range(nw):
        a = n * T
        while j < t.shape[0] and t[j] <= a:
            s = 1 if m[j] < p else 0
            j += 1
        z[n] = s
        seen = s == 1
        while j < t.shape[0] and t[j] < (n + 1) * T:
            s = 1 if m[j] < p else 0
            if s == 1:
                seen = True
            j += 1
        w[n] = 1 if seen else 0
    while j < t.shape[0] and t[j] <= nw * T:
        s = 1 if m[j] < p else 0
        j += 1
    z[nw] = s
    return z, w


def edge_chain_sample(v: float, p: float, T: float, n_windows: int, seed: int):
    """Window statistics of one long stationary edge trajectory."""
    _check_vpT(v, p, T)
    return _edge_chain(np.uint64(rng.derive_seed(seed, 11)), float(v), float(p), float(T), int(n_windows))


def edge_chain_frequencies(z, w):
    """Empirical counterparts of ``edge_chain_conditionals``: for each case a
    pair (hits, trials) for zeta_{nT} = 0 given (zeta_{(n-1)T}, w_{n-1})."""
    prev_z, prev_w, now0 = z[:-2], w[:-1], z[1:-1] == 0
    cases = [(prev_z == 1), (prev_z == 0) & (prev_w == 1), (prev_z == 0) & (prev_w == 0)]
    return [(int(np.sum(now0 & c)), int(np.sum(c))) for c in cases]


# ---------------------------------------------------------------------------
# good blocks (teo3)

def block_interval(k: int, n: int):
    """Vertices 4k-2n .. 4k-2n+3 of block (k, n)."""
    return np.arange(4 * k - 2 * n, 4 * k - 2 * n + 4)


@dataclass
class GoodBlockGrid:
    M: float
    T: float
    gap_delta: float
    c1: np.ndarray     # (rows, K)
    c2: np.ndarray
    c3: np.ndarray
    c4: np.ndarray
    W: np.ndarray
    reach: np.ndarray  # (rows, K) reachable from (0, 0) through good blocks

    def independence_pvalue(self):
        """Chi-square test of W on horizontally adjacent blocks (disjoint
        interiors) against independence."""
        from scipy.stats import chi2_contingency
        a = self.W[:, :-1].ravel()
        b = self.W[:, 1:].ravel()
        tab = np.zeros((2, 2))
        np.add.at(tab, (a, b), 1)
        if (tab.sum(axis=0) == 0).any() or (tab.sum(axis=1) == 0).any():
            return 1.0
        return float(chi2_contingency(tab, correction=False)[1])


@njit(cache=True)
def _good_blocks(N, K, rows, T, gd, upd_ptr, upd_t, upd_s, rec_ptr, rec_t, inf_ptr, inf_t, n_sub, sub_len):
    c1 = np.zeros((rows, K), dtype=np.uint8)
    c2 = np.zeros((rows, K), dtype=np.uint8)
    c3 = np.zeros((rows, K), dtype=np.uint8)
    c4 = np.zeros((rows, K), dtype=np.uint8)
    hit = np.zeros(n_sub, dtype=np.uint8)
    for n in range(rows):
        t0 = n * T
        t1 = (n + 1) * T
        for k in range(K):
            base = 4 * k - 2 * n
            ok1 = True
            ok2 = True
            ok4 = True
            times = [t0, t1]
            for i in range(4):
                x = (base + i) % N
                for j in range(rec_ptr[x], rec_ptr[x + 1]):
                    if t0 <= rec_t[j] < t1:
                        times.append(rec_t[j])
            for i in range(3):
                e = (base + i) % N
                has_open = False
                for j in range(upd_ptr[e], upd_ptr[e + 1]):
                    tt = upd_t[j]
                    if t0 <= tt < t1:
                        times.append(tt)
                        if upd_s[j] == 1:
                            has_open = True
                        else:
                            ok2 = False
                if not has_open:
                    ok1 = False
                if ok4:
                    hit[:] = 0
                    for j in range(inf_ptr[e], inf_ptr[e + 1]):
                        tt = inf_t[j]
                        if t0 <= tt <= t1:
                            # closed subwindows [t0 + l s, t0 + (l+1) s]
                            u = (tt - t0) / sub_len
                            l = int(u)
                            if l < n_sub:
                                hit[l] = 1
                            if l >= 1 and u == l:
                                hit[l - 1] = 1
                    for l in range(n_sub):
                        if hit[l] == 0:
                            ok4 = False
                            break
            arr = np.sort(np.array(times))
            ok3 = True
            for j in range(arr.shape[0] - 1):
                if arr[j + 1] - arr[j] <= gd:
                    ok3 = False
                    break
            c1[n, k] = ok1
            c2[n, k] = ok2
            c3[n, k] = ok3
            c4[n, k] = ok4
    return c1, c2, c3, c4


def _oriented_reach(W):
    rows, K = W.shape
    reach = np.zeros_like(W, dtype=bool)
    reach[0, 0] = bool(W[0, 0])
    for n in range(rows - 1):
        for k in np.flatnonzero(reach[n]):
            for k2 in (k, (k + 1) % K):
                if W[n + 1, k2]:
                    reach[n + 1, k2] = True
    return reach


def good_block_grid(topology, params: Params, key: int, M: float, gap_delta: float, rows: int,
                    zeta0=None, env: EnvTrajectory = None, events: ReplicaEvents = None) -> GoodBlockGrid:
    """Conditions c1..c4 on the blocks (k, n), k = 0..N/4-1, n < rows, with
    T = M / v.  c4 uses ceil(6 / gap_delta) closed subwindows of length
    T gap_delta / 6, the last one clipped at the window end."""
    if topology.kind != "cycle" or topology.n_vertices % 4:
        raise StructureError("good blocks need a cycle whose length is a multiple of 4")
    if not params.v > 0 or not M > 0:
        raise DomainError(f"need v > 0 and M > 0, got v={params.v}, M={M}")
    T = M / params.v
    if not 0 < gap_delta < T:
        raise DomainError(f"gap_delta must lie in (0, T={T}), got {gap_delta}")
    if rows * T > params.horizon * (1 + 1e-12):
        raise DomainError(f"{rows} rows of length {T} exceed the horizon {params.horizon}")
    if env is None:
        env = env_trajectory(topology, params, key, zeta0)
    if events is None:
        events = replica_events(topology, params, key, env)
    n_sub = math.ceil(6.0 / gap_delta - 1e-12)
    sub_len = T * gap_delta / 6.0
    N = topology.n_vertices
    c1, c2, c3, c4 = _good_blocks(N, N // 4, int(rows), float(T), float(gap_delta), env.ptr, env.times,
                                  env.states, events.rec_ptr, events.rec_t, events.inf_ptr, events.inf_t,
                                  int(n_sub), float(sub_len))
    W = c1 & c2 & c3 & c4
    return GoodBlockGrid(float(M), T, float(gap_delta), c1, c2, c3, c4, W, _oriented_reach(W))


def prob_c1(M: float, p: float) -> float:
    return (-math.expm1(-M * p)) ** 3


def prob_c2(M: float, p: float) -> float:
    return math.exp(-3.0 * (1.0 - p) * M)


# ---------------------------------------------------------------------------
# calibration

def teo1_r0(p: float, eps: float) -> int:
    """Smallest r0 with (1 - delta0(p))^r0 < eps."""
    d = delta0(p)
    if not 0 < d < 1:
        raise DomainError(f"delta0({p}) = {d} gives no finite r0")
    r = max(1, math.ceil(math.log(eps) / math.log1p(-d)))
    while (1 - d) ** r >= eps:
        r += 1
    return r


def teo1_T(ext_times: np.ndarray, eps: float) -> float:
    """Smallest T with P(tau >= T) + 2 sigma < eps from sampled extinction
    times (binomial sigma of the tail estimate)."""
    t = np.sort(np.asarray(ext_times, dtype=float))
    n = t.size
    for i in range(n):
        q = (n - i) / n  # fraction with tau >= t[i]
        q_after = (n - i - 1) / n
        if q_after + 2 * math.sqrt(q_after * (1 - q_after) / n) < eps:
            return float(t[i]) if i + 1 >= n else float(np.nextafter(t[i], np.inf))
    return math.inf


def teo2_parameters(v: float, eps: float, p_tol: float = 1e-12):
    """M = 2 max(1/eps, v log(1/eps)) and the largest p (by bisection) with
    delta(v, p, M / v) >= 1 - eps."""
    if not 0 < eps < 1 or not v > 0:
        raise DomainError(f"need v > 0 and eps in (0, 1), got v={v}, eps={eps}")
    M = 2.0 * max(1.0 / eps, v * math.log(1.0 / eps))
    T = M / v

    def ok(p):
        return delta_bound(v, p, T).delta >= 1.0 - eps

    if not ok(0.0):
        raise DomainError("no p satisfies the window bound")
    lo, hi = 0.0, 1.0
    while hi - lo > p_tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return M, T, lo


@dataclass
class PropagationReport:
    attempts: int
    good: int          # replicas with W_{0,0} = 1
    failures: int      # of those, replicas with a healthy site or closed interior edge of I_{0,0} at T
    c4_misses: int     # candidates passing c1..c3 but not c4


def good_block_propagation(lam: float, v: float, p: float, M: float, gap_delta: float, target: int,
                           seed: int, max_attempts: int = 10**6, n_vertices: int = 8) -> PropagationReport:
    """Seed an open edge of I_{0,0} with both endpoints infected (the edge
    cycles through the three interior edges) and, on replicas with
    W_{0,0} = 1, check that all of I_{0,0} is infected and all its interior
    edges are open at time T = M / v.

    c1..c3 do not involve infection points, so they are screened on the
    update and recovery streams alone before c4 is evaluated.
    """
    from . import kernels as kn
    from .graphical import run_engine
    from .topology import build_topology

    top = build_topology("cycle", (n_vertices,))
    T = M / v
    full = Params(lam, v, p, T)
    screen = Params(1e-9, v, p, T)
    good = failures = misses = attempts = 0
    while good < target and attempts < max_attempts:
        key = int(rng.replica_key(np.uint64(seed), attempts))
        e0 = attempts % 3
        attempts += 1
        z0 = stationary_zeta(np.uint64(key), top.n_edges, float(p))
        z0[e0] = 1
        env = env_trajectory(top, full, key, z0)
        ev = replica_events(top, screen, key, env)
        g = good_block_grid(top, screen, key, M, gap_delta, 1, env=env, events=ev)
        if not (g.c1[0, 0] and g.c2[0, 0] and g.c3[0, 0]):
            continue
        g = good_block_grid(top, full, key, M, gap_delta, 1, env=env)
        if not g.W[0, 0]:
            misses += 1
            continue
        good += 1
        eta0 = np.zeros(n_vertices, dtype=np.uint8)
        eta0[[e0, e0 + 1]] = 1
        b = run_engine(top, full, [kn.MODE_VALID], eta0, seed=key, direct_key=True, zeta0=z0,
                       sample_times=np.array([T]), snapshots=True, stop_when_extinct=False)
        if not (b.eta_snap[0, -1, :4].all() and b.zeta_snap[0, -1, :3].all()):
            failures += 1
    return PropagationReport(attempts, good, failures, misses)


# ---------------------------------------------------------------------------
# CSV rows

BLOCK_GRID_HEADER = ("k", "n", "V", "U", "block_left", "block_right")
GOOD_BLOCK_HEADER = ("k", "n", "c1", "c2", "c3", "c4", "W")
Z_TRACE_HEADER = ("n", "Z_size")


def block_grid_rows(grid: IntervalBlockGrid):
    nw, K = grid.V.shape
    for n in range(nw):
        for k in range(K):
            left = int(grid.left[n, k])
            yield (k, n, int(grid.V[n, k]), int(grid.U[n, k]), left,
                   int((left + grid.size[n, k] - 1) % grid.n_vertices))


def good_block_rows(g: GoodBlockGrid):
    rows, K = g.W.shape
    for n in range(rows):
        for k in range(K):
            yield (k, n, int(g.c1[n, k]), int(g.c2[n, k]), int(g.c3[n, k]), int(g.c4[n, k]), int(g.W[n, k]))


def z_trace_rows(trace: HGraphTrace):
    for n, z in enumerate(trace.Z):
        yield (n, int(z.size))
