"""Keyed Poisson event streams for the graphical representation.

Each entity owns one marked Poisson stream:

* vertex ``x``: recoveries at rate 1 (or an overridden rate for the
  time-rescaling coupling);
* edge ``e``: infection attempts at rate ``lam``;
* edge ``e``: environment updates at rate ``v``.

Every point carries two independent uniform marks ``(mark, coin)``.  An
update is an opening iff ``mark < p`` and a closing otherwise, so the
opening and closing streams are independent Poisson streams with rates
``v p`` and ``v (1 - p)``.  An infection point belongs to the accept stream
iff ``mark < p``, which splits it into independent rate ``lam p`` and
``lam (1 - p)`` streams.  ``coin`` drives thinnings (lower coupling,
recovery thinning).

Time is cut into fixed windows of length ``window_length(rate)``; the points
of window ``w`` are a deterministic function of ``(stream key, w)``, so any
window can be regenerated without touching the others.
"""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import rng
from .rng import KIND_ENV0, KIND_INFECTION, KIND_RECOVERY, KIND_UPDATE

WINDOW_BASE = 8.0


@njit(cache=True)
def window_length(rate):
    # at most ~8 expected points and at most 8 time units per window
    return WINDOW_BASE / max(rate, 1.0)


@njit(cache=True)
def point_in_window(wk, rate, W, w, c, t):
    """Next point of window ``w`` after cursor ``(c, t)``, if any.

    Returns ``(ok, c, t, mark, coin)``; ``ok`` is False once the window is
    exhausted.
    """
    if c == 0:
        t = w * W
    u = rng.uniform(wk, c)
    t = t - math.log1p(-u) / rate
    if t < (w + 1) * W:
        return True, c + 3, t, rng.uniform(wk, c + 1), rng.uniform(wk, c + 2)
    return False, c, t, 0.0, 0.0


@njit(cache=True)
def next_point(skey, rate, W, w, c, t):
    """Advance a cursor to its next point.

    A cursor is ``(w, c, t)``: window index, counter inside the window and
    time of the last generated point (``c == 0`` means "at window start").
    Returns the new cursor plus the point's marks.
    """
    while True:
        ok, c2, t2, m, b = point_in_window(rng.window_key(skey, w), rate, W, w, c, t)
        if ok:
            return w, c2, t2, m, b
        w += 1
        c = 0
        t = 0.0


@njit(cache=True)
def last_point_in(skey, rate, W, t_lo, t_hi, inclusive):
    """Latest point with ``t_lo < t <= t_hi`` (``< t_hi`` if not inclusive).

    Scans windows backwards from the one holding ``t_hi``.  Returns
    ``(found, t, mark, coin)``.
    """
    if rate <= 0.0 or t_hi <= t_lo:
        return False, -1.0, 0.0, 0.0
    w_hi = int(t_hi // W)
    w_lo = max(int(t_lo // W), 0) if t_lo >= 0.0 else 0
    w = w_hi
    while w >= w_lo:
        found = False
        bt = -1.0
        bm = 0.0
        bb = 0.0
        wk = rng.window_key(skey, w)
        c = 0
        t = 0.0
        while True:
            ok, c, t, m, b = point_in_window(wk, rate, W, w, c, t)
            if not ok:
                break
            if t > t_hi or (not inclusive and t == t_hi):
                break
            if t > t_lo:
                found = True
                bt = t
                bm = m
                bb = b
        if found:
            return True, bt, bm, bb
        w -= 1
    return False, -1.0, 0.0, 0.0


@njit(cache=True)
def stream_points(skey, rate, t_end):
    """All points of a stream in ``[0, t_end]`` as (times, marks, coins)."""
    ts = []
    ms = []
    bs = []
    if rate > 0.0:
        W = window_length(rate)
        w = 0
        while w * W <= t_end:
            wk = rng.window_key(skey, w)
            c, t = 0, 0.0
            while True:
                ok, c, t, m, b = point_in_window(wk, rate, W, w, c, t)
                if not ok or t > t_end:
                    break
                ts.append(t)
                ms.append(m)
                bs.append(b)
            w += 1
    n = len(ts)
    out_t = np.empty(n)
    out_m = np.empty(n)
    out_b = np.empty(n)
    for i in range(n):
        out_t[i] = ts[i]
        out_m[i] = ms[i]
        out_b[i] = bs[i]
    return out_t, out_m, out_b


@njit(cache=True)
def stationary_zeta(rkey, n_edges, p):
    z = np.zeros(n_edges, dtype=np.uint8)
    for e in range(n_edges):
        if rng.uniform(rng.stream_key(rkey, KIND_ENV0, e), 0) < p:
            z[e] = 1
    return z


@njit(cache=True)
def materialize_kind(rkey, kind, n_entities, rate, t_end):
    """Concatenated points of one stream kind over all entities."""
    all_t = []
    all_m = []
    all_b = []
    all_id = []
    for i in range(n_entities):
        ts, ms, bs = stream_points(rng.stream_key(rkey, kind, i), rate, t_end)
        for j in range(ts.shape[0]):
            all_t.append(ts[j])
            all_m.append(ms[j])
            all_b.append(bs[j])
            all_id.append(i)
    n = len(all_t)
    out_t = np.empty(n)
    out_m = np.empty(n)
    out_b = np.empty(n)
    out_id = np.empty(n, dtype=np.int64)
    for j in range(n):
        out_t[j] = all_t[j]
        out_m[j] = all_m[j]
        out_b[j] = all_b[j]
        out_id[j] = all_id[j]
    return out_t, out_m, out_b, out_id


def sample_initial_environment(topology, p: float, rng_key: int) -> np.ndarray:
    """I.i.d. Bernoulli(p) edge states, deterministic given the key."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    return stationary_zeta(np.uint64(rng_key), topology.n_edges, float(p))


TIMELINE_DTYPE = np.dtype([("t", "f8"), ("kind", "i8"), ("id", "i8"), ("mark", "f8"), ("coin", "f8")])


@dataclass(frozen=True)
class EventStreams:
    """The random input of one replica: keyed streams over ``[0, horizon]``.

    Nothing is stored; every accessor regenerates the requested stream from
    ``key``.  ``recovery_rate`` differs from 1 only inside the time-rescaling
    coupling.  With ``split_infections`` the accept/reject split of the
    infection points is exposed (it is always present in the marks).
    """

    topology: object
    lam: float
    v: float
    p: float
    horizon: float
    key: int
    split_infections: bool = False
    recovery_rate: float = 1.0

    def _points(self, kind, entity, rate):
        skey = np.uint64(rng.stream_key(np.uint64(self.key), kind, entity))
        return stream_points(skey, float(rate), float(self.horizon))

    def recovery_points(self, x):
        return self._points(KIND_RECOVERY, x, self.recovery_rate)

    def infection_points(self, e):
        return self._points(KIND_INFECTION, e, self.lam)

    def update_points(self, e):
        return self._points(KIND_UPDATE, e, self.v)

    def recover_times(self, x):
        return self.recovery_points(x)[0]

    def infect_times(self, e):
        return self.infection_points(e)[0]

    def update_times(self, e):
        return self.update_points(e)[0]

    def open_times(self, e):
        t, m, _ = self.update_points(e)
        return t[m < self.p]

    def close_times(self, e):
        t, m, _ = self.update_points(e)
        return t[m >= self.p]

    def accept_times(self, e):
        if not self.split_infections:
            raise ValueError("streams were generated without the accept/reject split")
        t, m, _ = self.infection_points(e)
        return t[m < self.p]

    def reject_times(self, e):
        if not self.split_infections:
            raise ValueError("streams were generated without the accept/reject split")
        t, m, _ = self.infection_points(e)
        return t[m >= self.p]

    def timeline(self) -> np.ndarray:
        """Every point of every stream, merged and sorted with the tie-break
        (time, kind, id) where updates < recoveries < infections."""
        key = np.uint64(self.key)
        h = float(self.horizon)
        topo = self.topology
        parts = []
        for kind, n, rate in (
            (KIND_UPDATE, topo.n_edges, self.v),
            (KIND_RECOVERY, topo.n_vertices, self.recovery_rate),
            (KIND_INFECTION, topo.n_edges, self.lam),
        ):
            t, m, b, ids = materialize_kind(key, kind, n, float(rate), h)
            arr = np.empty(t.shape[0], dtype=TIMELINE_DTYPE)
            arr["t"] = t
            arr["kind"] = kind
            arr["id"] = ids
            arr["mark"] = m
            arr["coin"] = b
            parts.append(arr)
        tl = np.concatenate(parts)
        order = np.lexsort((tl["id"], tl["kind"], tl["t"]))
        return tl[order]


def sample_event_streams(topology, params, rng_key: int, split_infections: bool = False,
                         recovery_rate: float = 1.0) -> EventStreams:
    return EventStreams(topology, float(params.lam), float(params.v), float(params.p),
                        float(params.horizon), int(rng_key), bool(split_infections),
                        float(recovery_rate))
