"""Lazy event-driven engine for several coupled processes on shared streams.

Only entities that can change some infection state are scheduled: recovery
clocks of infected vertices and infection clocks of edges with an infected
endpoint (in any of the coupled processes).  Environment updates are never
scheduled; an edge's state is reconstructed on demand at the instants where
it matters by scanning its update stream backwards from the query time.  All
streams come from ``streams.py``, so the output is a deterministic function of
the replica key and agrees exactly with a full replay of the same streams.

Entity ids: vertex ``x`` -> ``x`` (recovery clock), edge ``e`` -> ``N + e``
(infection clock).  Heap order is (time, id), i.e. recoveries before
infections at equal times; updates at the same instant are always applied
first because environment queries are inclusive.
"""

import math

import numpy as np
from numba import njit, types
from numba.typed import List

from . import rng
from .rng import KIND_INFECTION, KIND_RECOVERY, KIND_UPDATE
from .streams import last_point_in, next_point, point_in_window, stationary_zeta, window_length

# infection rules of a process
MODE_ALL = 0      # every infection point (upper contact process)
MODE_VALID = 1    # only with the edge open (the CPDE itself)
MODE_WEAK = 2     # unfresh edge, or open edge
MODE_PWEAK = 3    # fresh and open, or unfresh and accept-marked
MODE_LOWER = 4    # thinned valid points forming a rate-beta stream

# global tallies (columns of the ``tallies`` output)
T_INF = 0         # infection points processed
T_VALID = 1
T_WEAK = 2
T_PWEAK = 3
T_REC = 4         # recovery points processed
T_ACCEPT = 5      # points kept by the lower thinning
T_NP = 6
T_NBARP = 7
T_FRESH = 8       # processed infection points at fresh edges
N_TALLY = 9

# per-process tallies
P_INF_APPLIED = 0
P_INF_BLOCKED = 1
P_REC_APPLIED = 2
P_REC_SKIPPED = 3
N_PTALLY = 4

UNKNOWN = -2.0


@njit(cache=True)
def _less(ta, ia, tb, ib):
    return ta < tb or (ta == tb and ia < ib)


@njit(cache=True)
def _sift_up(heap, ht, pos, i):
    hid = heap[i]
    t = ht[hid]
    while i > 0:
        j = (i - 1) >> 1
        pj = heap[j]
        if _less(t, hid, ht[pj], pj):
            heap[i] = pj
            pos[pj] = i
            i = j
        else:
            break
    heap[i] = hid
    pos[hid] = i


@njit(cache=True)
def _sift_down(heap, ht, pos, i, size):
    hid = heap[i]
    t = ht[hid]
    while True:
        l = 2 * i + 1
        if l >= size:
            break
        c = l
        r = l + 1
        if r < size and _less(ht[heap[r]], heap[r], ht[heap[l]], heap[l]):
            c = r
        pc = heap[c]
        if _less(ht[pc], pc, t, hid):
            heap[i] = pc
            pos[pc] = i
            i = c
        else:
            break
    heap[i] = hid
    pos[hid] = i


@njit(cache=True)
def _push(heap, ht, pos, size, hid):
    heap[size] = hid
    pos[hid] = size
    _sift_up(heap, ht, pos, size)
    return size + 1


@njit(cache=True)
def _pop(heap, ht, pos, size):
    top = heap[0]
    size -= 1
    if size > 0:
        heap[0] = heap[size]
        pos[heap[0]] = 0
        _sift_down(heap, ht, pos, 0, size)
    pos[top] = -1
    return top, size


@njit(cache=True)
def _advance(skeys, rates, Ws, cw, cc, ct, cp, nt, nm, nb, hid):
    """Consume the pending point of ``hid`` and load the next one."""
    cp[hid] = nt[hid]
    w, c, t, m, b = next_point(skeys[hid], rates[hid], Ws[hid], cw[hid], cc[hid], ct[hid])
    cw[hid] = w
    cc[hid] = c
    ct[hid] = t
    nt[hid] = t
    nm[hid] = m
    nb[hid] = b


@njit(cache=True)
def _jump(skeys, rates, Ws, cw, cc, ct, cp, nt, nm, nb, hid, t0):
    """Position the cursor of ``hid`` on its first point strictly after t0."""
    W = Ws[hid]
    w = int(t0 // W)
    wk = rng.window_key(skeys[hid], w)
    c = 0
    t = 0.0
    prev = UNKNOWN
    while True:
        ok, c2, t2, m, b = point_in_window(wk, rates[hid], W, w, c, t)
        if not ok:
            w, c2, t2, m, b = next_point(skeys[hid], rates[hid], W, w + 1, 0, 0.0)
            break
        if t2 > t0:
            break
        prev = t2
        c = c2
        t = t2
    cw[hid] = w
    cc[hid] = c2
    ct[hid] = t2
    nt[hid] = t2
    nm[hid] = m
    nb[hid] = b
    cp[hid] = prev


@njit(cache=True)
def _env_query(ukeys, v, Wv, p, eq_t, eq_s, eq_lu, e, t):
    if v > 0.0 and t > eq_t[e]:
        found, tu, m, _b = last_point_in(ukeys[e], v, Wv, eq_t[e], t, True)
        if found:
            eq_s[e] = 1 if m < p else 0
            eq_lu[e] = tu
        eq_t[e] = t
    return eq_s[e]


@njit(cache=True)
def _vertex_relevant(eta, K, x):
    for k in range(K):
        if eta[k, x]:
            return True
    return False


@njit(cache=True)
def run_replica(r, rkey, edges, inc_ptr, inc_edges, lam, v, p, rec_rate, beta,
                modes, keeps, eta0, zeta0, pi_init, horizon, sample_times,
                pair_a, pair_b, weak_proc, all_relevant, stop_when_extinct,
                snap_proc, want_snaps, record_tau, record_accept,
                ext, final_cnt, samp, tallies, ptallies, viol, t_end, err,
                eta_snap, zeta_snap, tau_r, tau_t, tau_x, acc_r, acc_e, acc_t):
    N = inc_ptr.shape[0] - 1
    E = edges.shape[0]
    K = modes.shape[0]
    S = sample_times.shape[0]
    NE = N + E

    skeys = np.empty(NE, dtype=np.uint64)
    rates = np.empty(NE)
    Ws = np.empty(NE)
    for x in range(N):
        skeys[x] = rng.stream_key(rkey, KIND_RECOVERY, x)
        rates[x] = rec_rate
        Ws[x] = window_length(rec_rate)
    ukeys = np.empty(E, dtype=np.uint64)
    for e in range(E):
        skeys[N + e] = rng.stream_key(rkey, KIND_INFECTION, e)
        rates[N + e] = lam
        Ws[N + e] = window_length(lam)
        ukeys[e] = rng.stream_key(rkey, KIND_UPDATE, e)
    Wv = window_length(v) if v > 0.0 else 1.0

    cw = np.full(NE, -1, dtype=np.int64)
    cc = np.zeros(NE, dtype=np.int64)
    ct = np.zeros(NE)
    cp = np.full(NE, UNKNOWN)
    nt = np.zeros(NE)
    nm = np.zeros(NE)
    nb = np.zeros(NE)
    heap = np.empty(NE, dtype=np.int64)
    pos = np.full(NE, -1, dtype=np.int64)
    size = 0

    eq_t = np.zeros(E)
    eq_s = zeta0.copy()
    eq_lu = np.full(E, -1.0)
    acc_any = np.zeros(E, dtype=np.uint8)
    acc_last = np.zeros(E)

    eta = eta0.copy()
    cnt = np.zeros(K, dtype=np.int64)
    for k in range(K):
        ext[r, k] = np.inf
        for x in range(N):
            cnt[k] += eta[k, x]
        if cnt[k] == 0:
            ext[r, k] = 0.0
    P = pair_a.shape[0]
    nviol = 0
    for q in range(P):
        for x in range(N):
            if eta[pair_a[q], x] > eta[pair_b[q], x]:
                nviol += 1

    pi_star = 0.0
    gap = v - beta
    if gap > 0.0:
        pi_star = (v * p - beta) / gap

    # initial schedule
    for x in range(N):
        if _vertex_relevant(eta, K, x) and rec_rate > 0.0:
            _jump(skeys, rates, Ws, cw, cc, ct, cp, nt, nm, nb, x, 0.0)
            size = _push(heap, nt, pos, size, x)
    if lam > 0.0:
        for e in range(E):
            a = edges[e, 0]
            b = edges[e, 1]
            if all_relevant or _vertex_relevant(eta, K, a) or _vertex_relevant(eta, K, b):
                _jump(skeys, rates, Ws, cw, cc, ct, cp, nt, nm, nb, N + e, 0.0)
                cp[N + e] = 0.0 if cp[N + e] == UNKNOWN else cp[N + e]
                size = _push(heap, nt, pos, size, N + e)

    si = 0
    alive = 0
    for k in range(K):
        if cnt[k] > 0:
            alive += 1
    t_stop = horizon
    touched = np.empty(2, dtype=np.int64)
    pre_x = np.zeros(K, dtype=np.uint8)
    pre_y = np.zeros(K, dtype=np.uint8)

    while size > 0:
        if alive == 0 and stop_when_extinct:
            break
        t = nt[heap[0]]
        if t > horizon:
            break
        while si < S and sample_times[si] < t:
            _emit_sample(r, si, sample_times[si], eta, cnt, K, E, snap_proc, want_snaps, samp,
                         eta_snap, zeta_snap, ukeys, v, Wv, p, eq_t, eq_s, eq_lu)
            si += 1
        hid, size = _pop(heap, nt, pos, size)
        pos[hid] = -2  # in flight
        ntouch = 0
        if hid < N:
            x = hid
            tallies[r, T_REC] += 1
            coin = nb[x]
            for k in range(K):
                if eta[k, x]:
                    if coin < keeps[k]:
                        eta[k, x] = 0
                        cnt[k] -= 1
                        ptallies[r, k, P_REC_APPLIED] += 1
                        if cnt[k] == 0:
                            ext[r, k] = t
                            alive -= 1
                    else:
                        ptallies[r, k, P_REC_SKIPPED] += 1
            touched[0] = x
            ntouch = 1
        else:
            e = hid - N
            a = edges[e, 0]
            b = edges[e, 1]
            relevant = _vertex_relevant(eta, K, a) or _vertex_relevant(eta, K, b)
            if all_relevant or relevant:
                m = nm[hid]
                coin = nb[hid]
                valid = _env_query(ukeys, v, Wv, p, eq_t, eq_s, eq_lu, e, t) == 1
                prev = cp[hid]
                if prev == UNKNOWN:
                    found, tp, _m, _b = last_point_in(skeys[hid], lam, Ws[hid], -1.0, t, False)
                    prev = tp if found else 0.0
                fresh = eq_lu[e] > prev
                weak = (not fresh) or valid
                pweak = (fresh and valid) or ((not fresh) and m < p)
                accept = False
                if valid and beta > 0.0:
                    if acc_any[e]:
                        s = t - acc_last[e]
                        pi0 = 1.0
                    else:
                        s = t
                        pi0 = pi_init[e]
                    if gap > 0.0:
                        pi = pi_star + (pi0 - pi_star) * math.exp(-gap * s)
                    else:
                        pi = pi0
                    ratio = beta / (lam * pi)
                    if ratio > 1.0 + 1e-9:
                        err[r] = 1
                        t_stop = t
                        break
                    if coin < ratio:
                        accept = True
                        acc_any[e] = 1
                        acc_last[e] = t
                        tallies[r, T_ACCEPT] += 1
                        if record_accept:
                            acc_r.append(r)
                            acc_e.append(e)
                            acc_t.append(t)
                tallies[r, T_INF] += 1
                if valid:
                    tallies[r, T_VALID] += 1
                if weak:
                    tallies[r, T_WEAK] += 1
                if pweak:
                    tallies[r, T_PWEAK] += 1
                if fresh:
                    tallies[r, T_FRESH] += 1
                if weak_proc >= 0 and eta[weak_proc, a] != eta[weak_proc, b]:
                    if not pweak:
                        tallies[r, T_NBARP] += 1
                    if (not fresh) and m >= p:
                        tallies[r, T_NP] += 1
                        if record_tau:
                            tau_r.append(r)
                            tau_t.append(t)
                            tau_x.append(a if eta[weak_proc, a] == 0 else b)
                for k in range(K):
                    pre_x[k] = eta[k, a]
                    pre_y[k] = eta[k, b]
                for k in range(K):
                    if pre_x[k] == pre_y[k]:
                        continue
                    md = modes[k]
                    if md == MODE_ALL:
                        ok = True
                    elif md == MODE_VALID:
                        ok = valid
                    elif md == MODE_WEAK:
                        ok = weak
                    elif md == MODE_PWEAK:
                        ok = pweak
                    else:
                        ok = accept
                    if ok:
                        tgt = b if pre_x[k] else a
                        if cnt[k] == 0:
                            alive += 1
                        eta[k, tgt] = 1
                        cnt[k] += 1
                        ptallies[r, k, P_INF_APPLIED] += 1
                        touched[ntouch] = tgt
                        ntouch += 1
                    else:
                        ptallies[r, k, P_INF_BLOCKED] += 1
                # dedupe the (at most two) touched vertices
                if ntouch == 2 and touched[0] == touched[1]:
                    ntouch = 1
        # containment at vertices that changed
        for i in range(ntouch):
            x = touched[i]
            for q in range(P):
                if eta[pair_a[q], x] > eta[pair_b[q], x]:
                    nviol += 1
        # consume the point and reschedule
        _advance(skeys, rates, Ws, cw, cc, ct, cp, nt, nm, nb, hid)
        pos[hid] = -1
        if hid < N:
            if _vertex_relevant(eta, K, hid):
                size = _push(heap, nt, pos, size, hid)
        else:
            e = hid - N
            if all_relevant or _vertex_relevant(eta, K, edges[e, 0]) or _vertex_relevant(eta, K, edges[e, 1]):
                size = _push(heap, nt, pos, size, hid)
        # newly infected vertices switch on their clocks
        for i in range(ntouch):
            x = touched[i]
            if pos[x] == -1 and rec_rate > 0.0 and _vertex_relevant(eta, K, x):
                if cw[x] >= 0 and nt[x] > t:
                    pass
                else:
                    _jump(skeys, rates, Ws, cw, cc, ct, cp, nt, nm, nb, x, t)
                size = _push(heap, nt, pos, size, x)
            if lam > 0.0 and not all_relevant:
                for j in range(inc_ptr[x], inc_ptr[x + 1]):
                    hid2 = N + inc_edges[j]
                    if pos[hid2] == -1:
                        if not (cw[hid2] >= 0 and nt[hid2] > t):
                            _jump(skeys, rates, Ws, cw, cc, ct, cp, nt, nm, nb, hid2, t)
                        size = _push(heap, nt, pos, size, hid2)

    if err[r] == 0:
        if alive == 0 and stop_when_extinct:
            t_stop = 0.0
            for k in range(K):
                if ext[r, k] > t_stop:
                    t_stop = ext[r, k]
        while si < S:
            if sample_times[si] > horizon:
                break
            _emit_sample(r, si, sample_times[si], eta, cnt, K, E, snap_proc, want_snaps, samp,
                         eta_snap, zeta_snap, ukeys, v, Wv, p, eq_t, eq_s, eq_lu)
            si += 1
    for k in range(K):
        final_cnt[r, k] = cnt[k]
    viol[r] = nviol
    t_end[r] = t_stop


@njit(cache=True)
def _emit_sample(r, si, s, eta, cnt, K, E, snap_proc, want_snaps, samp, eta_snap, zeta_snap,
                 ukeys, v, Wv, p, eq_t, eq_s, eq_lu):
    for k in range(K):
        samp[r, si, k] = cnt[k]
    if want_snaps:
        N = eta.shape[1]
        for x in range(N):
            eta_snap[r, si, x] = eta[snap_proc, x]
        for e in range(E):
            zeta_snap[r, si, e] = _env_query(ukeys, v, Wv, p, eq_t, eq_s, eq_lu, e, s)


@njit(cache=True)
def run_batch(seed, direct_key, r0, r1, edges, inc_ptr, inc_edges, lam, v, p, rec_rate, beta,
              modes, keeps, eta0, zeta0, stationary, horizon, sample_times,
              pair_a, pair_b, weak_proc, all_relevant, stop_when_extinct,
              snap_proc, want_snaps, record_tau, record_accept):
    """Replicas ``r0 .. r1-1`` of one configuration; replica ``r`` uses key
    ``replica_key(seed, r)`` so results do not depend on how work is split.
    With ``direct_key`` the seed itself is the (single) replica key."""
    R = r1 - r0
    N = inc_ptr.shape[0] - 1
    E = edges.shape[0]
    K = modes.shape[0]
    S = sample_times.shape[0]
    ext = np.empty((R, K))
    final_cnt = np.zeros((R, K), dtype=np.int64)
    samp = np.zeros((R, S, K), dtype=np.int64)
    tallies = np.zeros((R, N_TALLY), dtype=np.int64)
    ptallies = np.zeros((R, K, N_PTALLY), dtype=np.int64)
    viol = np.zeros(R, dtype=np.int64)
    t_end = np.zeros(R)
    err = np.zeros(R, dtype=np.int8)
    if want_snaps:
        eta_snap = np.zeros((R, S, N), dtype=np.uint8)
        zeta_snap = np.zeros((R, S, E), dtype=np.uint8)
    else:
        eta_snap = np.zeros((R, 0, 0), dtype=np.uint8)
        zeta_snap = np.zeros((R, 0, 0), dtype=np.uint8)
    tau_r = List.empty_list(types.int64)
    tau_t = List.empty_list(types.float64)
    tau_x = List.empty_list(types.int64)
    acc_r = List.empty_list(types.int64)
    acc_e = List.empty_list(types.int64)
    acc_t = List.empty_list(types.float64)
    zeros_env = zeta0.copy()
    for i in range(R):
        if direct_key:
            rkey = np.uint64(seed)
        else:
            rkey = rng.replica_key(seed, r0 + i)
        if stationary:
            z = stationary_zeta(rkey, E, p)
        else:
            z = zeros_env
        pi_init = np.empty(E)
        for e in range(E):
            pi_init[e] = p if stationary else z[e]
        run_replica(i, rkey, edges, inc_ptr, inc_edges, lam, v, p, rec_rate, beta,
                    modes, keeps, eta0, z, pi_init, horizon, sample_times,
                    pair_a, pair_b, weak_proc, all_relevant, stop_when_extinct,
                    snap_proc, want_snaps, record_tau, record_accept,
                    ext, final_cnt, samp, tallies, ptallies, viol, t_end, err,
                    eta_snap, zeta_snap, tau_r, tau_t, tau_x, acc_r, acc_e, acc_t)
    taus = (np.asarray(tau_r) + r0, np.asarray(tau_t), np.asarray(tau_x))
    accs = (np.asarray(acc_r) + r0, np.asarray(acc_e), np.asarray(acc_t))
    return ext, final_cnt, samp, tallies, ptallies, viol, t_end, err, eta_snap, zeta_snap, taus, accs
