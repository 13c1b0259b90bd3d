"""Counter-based keyed random numbers.

Every random quantity in a replica is a pure function of a 64-bit key and a
counter, so any stream can be regenerated on demand, in any order, by any
process that shares the key.  Keys are derived by hashing
``(master seed, replica index, entity kind, entity id, window index)``.

The mixer is the splitmix64 finalizer applied to ``key + counter * golden``,
which is the construction used by splitmix64 itself.
"""

import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_S6 = np.uint64(6)
_S2 = np.uint64(2)
_INV53 = 1.0 / 9007199254740992.0

# entity kinds; the numeric order is also the tie-break order for
# simultaneous events (updates < recoveries < infections)
KIND_UPDATE = 1
KIND_RECOVERY = 2
KIND_INFECTION = 3
KIND_ENV0 = 4
KIND_REPLICA = 5
KIND_AUX = 6


@njit(cache=True)
def mix64(z):
    z = np.uint64(z)
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True)
def combine(h, x):
    h = np.uint64(h)
    x = np.uint64(x)
    return mix64(h ^ (x + GOLDEN + (h << _S6) + (h >> _S2)))


@njit(cache=True)
def uniform(key, counter):
    """Uniform draw in [0, 1) at position ``counter`` of stream ``key``."""
    z = mix64(np.uint64(key) + (np.uint64(counter) + np.uint64(1)) * GOLDEN)
    return np.float64(z >> _S11) * _INV53


@njit(cache=True)
def replica_key(seed, replica):
    return combine(combine(mix64(np.uint64(seed)), np.uint64(KIND_REPLICA)), np.uint64(replica))


@njit(cache=True)
def stream_key(rkey, kind, entity):
    return combine(combine(np.uint64(rkey), np.uint64(kind)), np.uint64(entity))


@njit(cache=True)
def window_key(skey, window):
    return combine(np.uint64(skey), np.uint64(window))


def derive_seed(seed: int, *labels: int) -> int:
    """Deterministic sub-seed for a chain of integer labels (pure Python)."""
    key = int(mix64(np.uint64(seed)))
    for lab in labels:
        key = int(combine(np.uint64(key), np.uint64(lab)))
    return key & 0x7FFFFFFFFFFFFFFF
