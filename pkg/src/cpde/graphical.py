"""Simulation front-end: parameters, outcomes, the lazy engine driver and
an eager stream-replay reference engine.

Both engines consume the same keyed streams and are interchangeable: the
replay engine walks the full merged timeline literally (every update, every
recovery, every infection point) and is kept deliberately simple; the lazy
engine in ``kernels.py`` is the production path.  Tests check they agree
exactly on shared keys.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels as kn
from .rng import KIND_INFECTION, KIND_RECOVERY, KIND_UPDATE
from .streams import EventStreams, sample_initial_environment

SURVIVED = math.inf  # extinction-time sentinel for runs alive at the horizon


class ParamError(ValueError):
    pass


class StructureError(ValueError):
    pass


class InvariantViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class Params:
    lam: float
    v: float
    p: float
    horizon: float

    def __post_init__(self):
        for name in ("lam", "v", "p", "horizon"):
            val = getattr(self, name)
            if not isinstance(val, (int, float, np.floating, np.integer)) or not math.isfinite(val):
                raise ParamError(f"{_pub(name)} must be a finite number, got {val!r}")
        if self.lam < 0:
            raise ParamError(f"lambda must be >= 0, got {self.lam}")
        if self.v < 0:
            raise ParamError(f"v must be >= 0, got {self.v}")
        if not 0.0 <= self.p <= 1.0:
            raise ParamError(f"p must lie in [0, 1], got {self.p}")
        if self.horizon <= 0:
            raise ParamError(f"horizon must be > 0, got {self.horizon}")

    def replace(self, **kw):
        d = dict(lam=self.lam, v=self.v, p=self.p, horizon=self.horizon)
        d.update(kw)
        return Params(**d)


def _pub(name):
    return "lambda" if name == "lam" else name


def _hex(bits) -> str:
    """Bit-vector as hex: bit i of the vector is bit (i % 8) of byte i // 8."""
    return np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="little").tobytes().hex()


def _unhex(s: str, n: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(bytes.fromhex(s), dtype=np.uint8), bitorder="little")[:n]


@dataclass
class Configuration:
    eta: np.ndarray
    zeta: np.ndarray
    time: float = 0.0

    def to_hex(self) -> str:
        return f"{self.time!r} {_hex(self.eta)} {_hex(self.zeta)}"

    @classmethod
    def from_hex(cls, line: str, n_vertices: int, n_edges: int) -> "Configuration":
        t, eh, zh = line.split()
        return cls(_unhex(eh, n_vertices), _unhex(zh, n_edges), float(t))


@dataclass
class SimOutcome:
    extinction_time: float
    survived: bool
    sample_times: np.ndarray
    infected_trace: np.ndarray
    event_counters: dict
    final: Configuration


def edge_marginal(zeta0_e: int, v: float, p: float, t: float) -> float:
    """P(edge open at t | its state at 0) for the two-state edge chain."""
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    q = math.exp(-v * t)
    return zeta0_e * q + p * (1.0 - q)


def make_eta0(topology, spec) -> np.ndarray:
    """Initial infection set from a spec string or an explicit vertex list.

    ``all``, ``none``, ``single`` (vertex 0), ``single:x``, ``block:n``
    (vertices 0..n-1) or ``list:1,5,9``.
    """
    N = topology.n_vertices
    eta = np.zeros(N, dtype=np.uint8)
    if not isinstance(spec, str):
        idx = np.asarray(list(spec), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= N):
            raise StructureError(f"initial vertices outside 0..{N - 1}")
        eta[idx] = 1
        return eta
    head, _, tail = spec.partition(":")
    if head == "all":
        eta[:] = 1
    elif head == "none":
        pass
    elif head == "single":
        x = int(tail) if tail else 0
        if not 0 <= x < N:
            raise StructureError(f"vertex {x} outside 0..{N - 1}")
        eta[x] = 1
    elif head == "block":
        n = int(tail)
        if not 1 <= n <= N:
            raise StructureError(f"block size {n} outside 1..{N}")
        eta[:n] = 1
    elif head == "list":
        return make_eta0(topology, [int(s) for s in tail.split(",") if s.strip()])
    else:
        raise StructureError(f"unknown eta0 spec {spec!r}")
    return eta


# ---------------------------------------------------------------------------
# lazy engine driver

@dataclass
class Batch:
    """Per-replica output of the lazy engine (replica index on axis 0)."""
    ext: np.ndarray           # (R, K) extinction times, inf if alive at horizon
    final_count: np.ndarray   # (R, K)
    samples: np.ndarray       # (R, S, K) infected counts at the sample times
    tallies: np.ndarray       # (R, kernels.N_TALLY)
    ptallies: np.ndarray      # (R, K, kernels.N_PTALLY)
    violations: np.ndarray    # (R,) containment failures over the pairs
    t_end: np.ndarray         # (R,) time the run stopped
    errors: np.ndarray        # (R,) nonzero if a thinning probability left [0, 1]
    eta_snap: np.ndarray
    zeta_snap: np.ndarray
    taus: tuple = field(default=())      # (replica, time, vertex)
    accepts: tuple = field(default=())   # (replica, edge, time)


def _as_eta(topology, eta0, K):
    eta0 = np.asarray(eta0, dtype=np.uint8)
    if eta0.ndim == 1:
        eta0 = np.repeat(eta0[None, :], K, axis=0)
    if eta0.shape != (K, topology.n_vertices):
        raise StructureError(f"eta0 shape {eta0.shape} does not match {K} processes on "
                             f"{topology.n_vertices} vertices")
    return np.ascontiguousarray(eta0)


def _chunk(args):
    return kn.run_batch(*args)


def run_engine(topology, params: Params, modes, eta0, *, seed: int, replicas: int = 1,
               zeta0=None, direct_key: bool = False, keeps=None, rec_rate: float = 1.0,
               beta: float = 0.0, sample_times=(), pairs=(), weak_proc: int = -1,
               all_relevant: bool = False, stop_when_extinct: bool = True, snap_proc: int = 0,
               snapshots: bool = False, record_tau: bool = False, record_accept: bool = False,
               parallelism: int = 1, chunk_size: int = 4096) -> Batch:
    """Run ``replicas`` independent replicas of K coupled processes.

    ``zeta0=None`` draws a stationary environment per replica from its key.
    Replica ``r`` depends only on ``(seed, r)``; the chunking and the number
    of worker processes never change the output.
    """
    modes = np.asarray(modes, dtype=np.int64)
    K = modes.shape[0]
    if kn.MODE_LOWER in modes:
        all_relevant = True  # the thinning state needs every valid point
    keeps = np.ones(K) if keeps is None else np.asarray(keeps, dtype=np.float64)
    eta0 = _as_eta(topology, eta0, K)
    stationary = zeta0 is None
    z = np.zeros(topology.n_edges, dtype=np.uint8) if stationary else np.asarray(zeta0, dtype=np.uint8)
    if z.shape != (topology.n_edges,):
        raise StructureError(f"zeta0 has shape {z.shape}, expected ({topology.n_edges},)")
    st = np.asarray(sample_times, dtype=np.float64).reshape(-1)
    if st.size and np.any(np.diff(st) < 0):
        raise StructureError("sample times must be non-decreasing")
    pa = np.asarray([a for a, _ in pairs], dtype=np.int64)
    pb = np.asarray([b for _, b in pairs], dtype=np.int64)
    common = (topology.edges, topology.inc_ptr, topology.inc_edges, float(params.lam),
              float(params.v), float(params.p), float(rec_rate), float(beta), modes, keeps,
              eta0, np.ascontiguousarray(z), bool(stationary), float(params.horizon), st, pa, pb,
              int(weak_proc), bool(all_relevant), bool(stop_when_extinct), int(snap_proc),
              bool(snapshots), bool(record_tau), bool(record_accept))
    bounds = [(r, min(r + chunk_size, replicas)) for r in range(0, replicas, chunk_size)]
    jobs = [(np.uint64(seed), bool(direct_key), r0, r1) + common for r0, r1 in bounds]
    if parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as ex:
            parts = list(ex.map(_chunk, jobs))
    else:
        parts = [_chunk(j) for j in jobs]
    cat = [np.concatenate([pt[i] for pt in parts]) for i in range(10)]
    taus = tuple(np.concatenate([pt[10][i] for pt in parts]) for i in range(3))
    accs = tuple(np.concatenate([pt[11][i] for pt in parts]) for i in range(3))
    return Batch(*cat, taus=taus, accepts=accs)


def _default_samples(horizon):
    return np.linspace(0.0, horizon, 101)


def simulate_cpde(topology, params: Params, eta0, zeta0, streams: EventStreams,
                  sample_times=None) -> SimOutcome:
    """One CPDE run driven by ``streams`` (valid infections only)."""
    if streams.topology.n_vertices != topology.n_vertices or streams.topology.n_edges != topology.n_edges:
        raise StructureError("streams were generated for a different topology")
    if streams.horizon != params.horizon:
        raise StructureError(f"streams cover [0, {streams.horizon}], params ask for {params.horizon}")
    if (streams.lam, streams.v, streams.p) != (params.lam, params.v, params.p):
        raise StructureError("streams were generated with different rates")
    st = _default_samples(params.horizon) if sample_times is None else np.asarray(sample_times, float)
    st_all = np.append(st, params.horizon)
    b = run_engine(topology, params, [kn.MODE_VALID], make_eta0(topology, eta0) if isinstance(eta0, str) else eta0,
                   seed=streams.key, direct_key=True, zeta0=zeta0, rec_rate=streams.recovery_rate,
                   sample_times=st_all, snapshots=True, stop_when_extinct=False)
    tau = float(b.ext[0, 0])
    tl = b.tallies[0]
    pt = b.ptallies[0, 0]
    counters = {
        "infection_points": int(tl[kn.T_INF]),
        "valid_points": int(tl[kn.T_VALID]),
        "infections_applied": int(pt[kn.P_INF_APPLIED]),
        "infections_blocked": int(pt[kn.P_INF_BLOCKED]),
        "recovery_points": int(tl[kn.T_REC]),
        "recoveries_applied": int(pt[kn.P_REC_APPLIED]),
    }
    final = Configuration(b.eta_snap[0, -1].copy(), b.zeta_snap[0, -1].copy(), float(params.horizon))
    return SimOutcome(tau, tau == SURVIVED, st, b.samples[0, :-1, 0].copy(), counters, final)


# ---------------------------------------------------------------------------
# eager replay reference engine

_KIND_NAME = {KIND_UPDATE: "update", KIND_RECOVERY: "recover", KIND_INFECTION: "infect"}


def replay(topology, params: Params, eta0, zeta0, streams: EventStreams, modes=(kn.MODE_VALID,),
           keeps=None, beta: float = 0.0, stationary: bool = True, sample_times=(), pairs=(), weak_proc: int = -1,
           log: bool = False) -> dict:
    """Replay the full merged timeline of ``streams`` event by event.

    Mirrors ``run_engine`` with ``all_relevant=True`` and
    ``stop_when_extinct=False``: every point up to the horizon is visited,
    freshness is tracked eagerly (set at updates, cleared at infection
    points) and the environment is stored explicitly.  With ``log`` each
    state-changing event is written as one line
    ``time kind id eta_hex[:eta_hex...] zeta_hex``.  ``stationary`` says
    whether ``zeta0`` was drawn from the product measure; it sets the prior
    open probability used by the rate-beta thinning.
    """
    modes = list(modes)
    K = len(modes)
    keeps = [1.0] * K if keeps is None else list(keeps)
    eta = _as_eta(topology, eta0, K).copy()
    zeta = np.asarray(zeta0, dtype=np.uint8).copy()
    N, E = topology.n_vertices, topology.n_edges
    lam, v, p = params.lam, params.v, params.p
    fresh = np.zeros(E, dtype=bool)
    acc_any = np.zeros(E, dtype=bool)
    acc_last = np.zeros(E)
    gap = v - beta
    pi_star = (v * p - beta) / gap if gap > 0 else 0.0
    cnt = eta.sum(axis=1).astype(np.int64)
    ext = np.where(cnt == 0, 0.0, np.inf)
    tallies = np.zeros(kn.N_TALLY, dtype=np.int64)
    ptallies = np.zeros((K, kn.N_PTALLY), dtype=np.int64)
    viol = sum(int(np.sum(eta[a] > eta[b])) for a, b in pairs)
    st = np.asarray(sample_times, dtype=float)
    samples = np.zeros((st.size, K), dtype=np.int64)
    eta_snap = np.zeros((st.size, N), dtype=np.uint8)
    zeta_snap = np.zeros((st.size, E), dtype=np.uint8)
    taus, accepts, lines = [], [], []
    si = 0

    def emit(upto, inclusive):
        nonlocal si
        while si < st.size and (st[si] < upto or (inclusive and st[si] <= upto)):
            samples[si] = cnt
            eta_snap[si] = eta[0]
            zeta_snap[si] = zeta
            si += 1

    for ev in streams.timeline():
        t, kind, i, mark, coin = float(ev["t"]), int(ev["kind"]), int(ev["id"]), ev["mark"], ev["coin"]
        emit(t, False)
        changed = []
        if kind == KIND_UPDATE:
            new = 1 if mark < p else 0
            if zeta[i] != new:
                changed.append(i)
            zeta[i] = new
            fresh[i] = True
        elif kind == KIND_RECOVERY:
            if eta[:, i].any():
                tallies[kn.T_REC] += 1
            for k in range(K):
                if eta[k, i]:
                    if coin < keeps[k]:
                        eta[k, i] = 0
                        cnt[k] -= 1
                        ptallies[k, kn.P_REC_APPLIED] += 1
                        changed.append(i)
                        if cnt[k] == 0:
                            ext[k] = t
                    else:
                        ptallies[k, kn.P_REC_SKIPPED] += 1
        else:
            a, b = topology.edges[i]
            valid = bool(zeta[i])
            f = bool(fresh[i])
            weak = (not f) or valid
            pweak = (f and valid) or ((not f) and mark < p)
            accept = False
            if valid and beta > 0:
                s, pi0 = (t - acc_last[i], 1.0) if acc_any[i] else (t, p if stationary else float(zeta0[i]))
                pi = pi_star + (pi0 - pi_star) * math.exp(-gap * s) if gap > 0 else pi0
                ratio = beta / (lam * pi)
                if ratio > 1 + 1e-9:
                    raise InvariantViolation(f"thinning probability {ratio} > 1 at t={t}")
                if coin < ratio:
                    accept = True
                    acc_any[i] = True
                    acc_last[i] = t
                    tallies[kn.T_ACCEPT] += 1
                    accepts.append((i, t))
            tallies[kn.T_INF] += 1
            tallies[kn.T_VALID] += valid
            tallies[kn.T_WEAK] += weak
            tallies[kn.T_PWEAK] += pweak
            tallies[kn.T_FRESH] += f
            if weak_proc >= 0 and eta[weak_proc, a] != eta[weak_proc, b]:
                if not pweak:
                    tallies[kn.T_NBARP] += 1
                if (not f) and mark >= p:
                    tallies[kn.T_NP] += 1
                    taus.append((t, int(a if eta[weak_proc, a] == 0 else b)))
            pre = eta[:, [a, b]].copy()
            for k in range(K):
                if pre[k, 0] == pre[k, 1]:
                    continue
                ok = {kn.MODE_ALL: True, kn.MODE_VALID: valid, kn.MODE_WEAK: weak,
                      kn.MODE_PWEAK: pweak, kn.MODE_LOWER: accept}[modes[k]]
                if ok:
                    tgt = b if pre[k, 0] else a
                    eta[k, tgt] = 1
                    cnt[k] += 1
                    ptallies[k, kn.P_INF_APPLIED] += 1
                    changed.append(int(tgt))
                else:
                    ptallies[k, kn.P_INF_BLOCKED] += 1
            fresh[i] = False
        if kind != KIND_UPDATE:
            for x in set(changed):
                viol += sum(int(eta[qa, x] > eta[qb, x]) for qa, qb in pairs)
        if log and changed:
            lines.append(f"{t!r} {_KIND_NAME[kind]} {i} " + ":".join(_hex(eta[k]) for k in range(K))
                         + f" {_hex(zeta)}")
    emit(params.horizon, True)
    return {"ext": ext, "final_count": cnt, "samples": samples, "tallies": tallies,
            "ptallies": ptallies, "violations": viol, "eta_snap": eta_snap, "zeta_snap": zeta_snap,
            "taus": taus, "accepts": accepts, "log": lines, "eta": eta, "zeta": zeta}
