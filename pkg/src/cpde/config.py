"""Run configuration: INI-style files with one section per subcommand,
overridable from the command line.  Every key is typed and range-checked
before anything runs; unknown keys and sections are rejected.

Grammar::

    [subcommand]
    key = value          ; lists are comma separated: lambdas = 1, 2, 4
"""

import configparser
import math
from dataclasses import dataclass

from .topology import TopologyError, parse_topology

REQUIRED = object()


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    kind: str                 # float, int, str, floats, ints, choice, topology, eta0
    default: object = REQUIRED
    lo: float = -math.inf
    hi: float = math.inf
    lo_open: bool = False
    choices: tuple = ()
    help: str = ""

    def legal(self) -> str:
        if self.kind == "choice":
            return "one of " + ", ".join(self.choices)
        if self.kind == "topology":
            return "path:N, cycle:N or torus2d:RxC"
        if self.kind == "eta0":
            return "all, none, single[:x], block:n or list:a,b,..."
        if self.kind == "str":
            return "a string"
        lo = "(" if self.lo_open else "["
        hi = "inf)" if self.hi == math.inf else f"{self.hi:g}]"
        return f"{lo}{self.lo:g}, {hi}" + (" (comma-separated list)" if self.kind in ("floats", "ints") else "")


def _num(name, key, s, cast):
    try:
        x = cast(s)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {s!r}; legal range {key.legal()}") from None
    if isinstance(x, float) and math.isnan(x):
        raise ConfigError(f"{name}: got nan; legal range {key.legal()}")
    if x < key.lo or (key.lo_open and x == key.lo) or x > key.hi:
        raise ConfigError(f"{name}: value {s} outside the legal range {key.legal()}")
    return x


def convert(name: str, key: Key, raw):
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    if key.kind == "float":
        return _num(name, key, s, float)
    if key.kind == "int":
        return _num(name, key, s, int)
    if key.kind in ("floats", "ints"):
        cast = float if key.kind == "floats" else int
        parts = [t for t in s.split(",") if t.strip()]
        if not parts:
            raise ConfigError(f"{name}: empty list; legal range {key.legal()}")
        return tuple(_num(name, key, t.strip(), cast) for t in parts)
    if key.kind == "choice":
        if s not in key.choices:
            raise ConfigError(f"{name}: value {s!r} is not {key.legal()}")
        return s
    if key.kind == "topology":
        try:
            parse_topology(s)
        except TopologyError as exc:
            raise ConfigError(f"{name}: {exc}; legal values {key.legal()}") from None
        return s
    return s


def _fmt(x):
    if isinstance(x, tuple):
        return ", ".join(_fmt(t) for t in x)
    if isinstance(x, float):
        return repr(x)
    return str(x)


# ---------------------------------------------------------------------------
# schema

P01 = dict(lo=0.0, hi=1.0)
POS = dict(lo=0.0, lo_open=True)
NONNEG = dict(lo=0.0)

COMMON = {
    "seed": Key("int", 0, lo=0, hi=2 ** 63 - 1, help="master seed"),
    "replicas": Key("int", 1000, lo=1, help="number of replicas"),
    "parallelism": Key("int", 0, lo=0, help="worker processes (0: all cores)"),
    "out": Key("str", "out", help="output directory"),
}

MODEL = {
    "topology": Key("topology", help="graph"),
    "lambda": Key("float", help="infection rate", **NONNEG),
    "v": Key("float", help="environment speed", **NONNEG),
    "p": Key("float", help="open-edge density", **P01),
    "horizon": Key("float", help="simulated time", **POS),
    "eta0": Key("eta0", "all", help="initial infection"),
}

SCHEMA = {
    "simulate": {**MODEL},
    "sweep": {
        "topology": MODEL["topology"],
        "lambdas": Key("floats", help="infection rates", **NONNEG),
        "vs": Key("floats", help="environment speeds", **NONNEG),
        "ps": Key("floats", help="open-edge densities", **P01),
        "horizon": MODEL["horizon"],
        "eta0": MODEL["eta0"],
        "theta": Key("float", 0.02, lo=0.0, hi=1.0, lo_open=True, help="immunity threshold"),
    },
    "lambda0": {
        "topology": MODEL["topology"],
        "v": MODEL["v"],
        "p": MODEL["p"],
        "lo": Key("float", help="initial lower end", **NONNEG),
        "hi": Key("float", help="initial upper end", **POS),
        "horizon": MODEL["horizon"],
        "eta0": Key("eta0", "single"),
        "tol": Key("float", 0.05, help="bracket width", **POS),
        "theta": Key("float", 0.02, lo=0.0, hi=1.0, lo_open=True, help="survival threshold"),
        "max_retries": Key("int", 2, lo=0),
    },
    "crossover": {
        "lambda": MODEL["lambda"],
        "p": MODEL["p"],
        "v_small": Key("float", help="slow environment speed", **POS),
        "sizes": Key("ints", lo=1, help="initial block sizes"),
        "cap": Key("float", help="time cap", **POS),
        "ring_factor": Key("int", 1, lo=1, help="cycle length / block size"),
        "static_cap": Key("float", 0.0, **NONNEG, help="time cap of the static arm (0: same as cap)"),
    },
    "blocks": {
        "mode": Key("choice", "interval", choices=("interval", "vertex", "good", "bernoulli")),
        "topology": Key("topology", "cycle:256"),
        "lambda": Key("float", 2.0, **NONNEG),
        "v": Key("float", 0.25, **POS),
        "p": Key("float", 0.5, **P01),
        "eta0": MODEL["eta0"],
        "r0": Key("int", 8, lo=1),
        "T": Key("float", 4.0, **POS),
        "windows": Key("int", 8, lo=1),
        "M": Key("float", 2.0, **POS),
        "gap_delta": Key("float", 0.05, **POS),
        "eps": Key("float", 0.05, **P01),
        "z0_sizes": Key("ints", (10, 100), lo=1),
        "budget": Key("int", 1000, lo=1),
    },
    "couplings": {
        **MODEL,
        "kind": Key("choice", "sandwich", choices=("sandwich", "weak", "rescale")),
        "v_prime": Key("float", 0.0, **NONNEG, help="second speed for the rescaling coupling"),
        "n_box": Key("int", 2, lo=1),
        "fault": Key("choice", "none", choices=("none", "thin_upper"), help="test fixture"),
    },
    "oracle-check": {
        "instances": Key("str", "all", help="comma-separated instance ids or all"),
        "sigmas": Key("float", 3.0, **POS),
    },
    "calibrate": {
        "mode": Key("choice", "interval", choices=("interval", "vertex")),
        "lambda": Key("float", 2.0, **NONNEG),
        "v": Key("float", 1.0, **POS),
        "p": Key("float", 0.5, **P01),
        "eps": Key("float", 0.1, lo=0.0, hi=1.0, lo_open=True),
        "horizon": Key("float", 1000.0, **POS),
    },
}

SWEEP_CLASS = ("sweep", "lambda0", "crossover")


def keys_for(sub: str) -> dict:
    return {**SCHEMA[sub], **COMMON}


@dataclass
class RunConfig:
    subcommand: str
    values: dict

    def __getitem__(self, k):
        return self.values[k]

    def echo(self):
        """``key = value`` lines in a fixed order, defaults filled in."""
        return [f"{k} = {_fmt(self.values[k])}" for k in sorted(self.values)]

    def to_ini(self) -> str:
        return f"[{self.subcommand}]\n" + "\n".join(self.echo()) + "\n"


def parse_config(sub: str, text: str = None, overrides: dict = None) -> RunConfig:
    """Resolve the section ``sub`` of ``text`` plus ``overrides`` (already
    split into key -> raw string); raise ConfigError on any problem."""
    if sub not in SCHEMA:
        raise ConfigError(f"unknown subcommand {sub!r}")
    keys = keys_for(sub)
    raw = {}
    if text:
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"unknown section [{sec}]")
        if cp.has_section(sub):
            raw.update(cp[sub])
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    for k in raw:
        if k not in keys:
            raise ConfigError(f"unknown key {k!r} for {sub}; known keys: {', '.join(sorted(keys))}")
    if sub in SWEEP_CLASS and "seed" not in raw:
        raise ConfigError(f"seed: required for {sub} runs")
    out = {}
    for k, key in keys.items():
        if k in raw:
            out[k] = convert(k, key, raw[k])
        elif key.default is REQUIRED:
            raise ConfigError(f"{k}: missing required value; legal range {key.legal()}")
        else:
            out[k] = key.default
    return RunConfig(sub, out)
