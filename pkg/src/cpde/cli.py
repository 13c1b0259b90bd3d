"""Command-line front end.

    python3 -m cpde <subcommand> [--config FILE] [--seed N] [--replicas N]
                                 [--out DIR] [--parallelism N] [--<key> VALUE ...]

Exit codes: 0 ok, 2 configuration error, 3 invariant violation, 4 oracle
mismatch.
"""

import argparse
import csv
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import blocks as bl
from . import couplings as cp
from . import estimators as est
from . import kernels as kn
from . import oracle as orc
from .config import SCHEMA, ConfigError, keys_for, parse_config
from .graphical import SURVIVED, InvariantViolation, ParamError, Params, StructureError, make_eta0, run_engine
from .rng import derive_seed, replica_key
from .topology import TopologyError, parse_topology

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_ORACLE = 0, 2, 3, 4


class OracleMismatch(RuntimeError):
    pass


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return "inf" if x == math.inf else repr(x)
    return x


class Sink:
    """Collects every output table and writes them in a fixed order."""

    def __init__(self, out: Path):
        self.out = out
        self.tables = {}
        self.notes = []

    def table(self, name, header, rows):
        self.tables[name] = (tuple(header), [tuple(_cell(c) for c in r) for r in rows])

    def note(self, line):
        self.notes.append(line)
        print(line)

    def flush(self):
        self.out.mkdir(parents=True, exist_ok=True)
        for name, (header, rows) in self.tables.items():
            with open(self.out / f"{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(rows)


def _params(c):
    return Params(c["lambda"], c["v"], c["p"], c["horizon"])


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(c, sink, par):
    top = parse_topology(c["topology"])
    eta = make_eta0(top, c["eta0"])
    ext = est.extinction_times(top, _params(c), eta, c["replicas"], c["seed"], parallelism=par)
    surv = est.proportion(int(np.sum(ext == SURVIVED)), c["replicas"], c["seed"])
    rep = est.summarize_extinction(ext, c["horizon"], c["seed"])
    sink.table("results", est.SWEEP_HEADER, [(
        c["topology"], top.kind, top.n_vertices, c["lambda"], c["v"], c["p"], c["horizon"], c["eta0"],
        c["replicas"], c["seed"], surv.point, surv.ci_low, surv.ci_high, rep.mean.point, rep.mean.se,
        rep.median.point, rep.cap_hits)])
    sink.table("replicas", ("replica", "replica_seed", "extinction_time", "survived"),
               [(r, int(replica_key(np.uint64(c["seed"]), r)), ext[r], int(ext[r] == SURVIVED))
                for r in range(c["replicas"])])
    sink.note(f"survival {surv.point:.4f} [{surv.ci_low:.4f}, {surv.ci_high:.4f}]")
    return EXIT_OK


def cmd_sweep(c, sink, par):
    top = parse_topology(c["topology"])
    rows = est.sweep_phase_diagram(top, c["lambdas"], c["vs"], c["ps"], horizon=c["horizon"],
                                   replicas=c["replicas"], seed=c["seed"], eta0_spec=c["eta0"], parallelism=par)
    sink.table("sweep", est.SWEEP_HEADER, rows)
    sink.table("immunity", est.IMMUNITY_HEADER, est.immunity_rows(rows, c["theta"]))
    sink.note(f"cells {len(rows)}")
    return EXIT_OK


def cmd_lambda0(c, sink, par):
    top = parse_topology(c["topology"])
    b = est.estimate_lambda0(top, c["v"], c["p"], seed=c["seed"], lo=c["lo"], hi=c["hi"], horizon=c["horizon"],
                             replicas=c["replicas"], tol=c["tol"], theta=c["theta"], eta0=c["eta0"],
                             max_retries=c["max_retries"], parallelism=par)
    keys = ("attempt", "lam", "survival", "ci_low", "ci_high", "seed", "replicas")
    sink.table("lambda0_history", keys, [tuple(h[k] for k in keys) for h in b.history])
    sink.table("lambda0", ("topology", "v", "p", "lo", "hi", "theta", "horizon", "replicas", "ok", "message"),
               [(c["topology"], c["v"], c["p"], b.lo, b.hi, b.theta, b.horizon, b.replicas, int(b.ok), b.message)])
    sink.note(f"bracket [{b.lo:.4f}, {b.hi:.4f}] ok={b.ok} {b.message}")
    return EXIT_OK


def cmd_crossover(c, sink, par):
    r = est.crossover_experiment(c["lambda"], c["p"], c["v_small"], list(c["sizes"]), replicas=c["replicas"],
                                 cap=c["cap"], seed=c["seed"], ring_factor=c["ring_factor"],
                                 static_cap=c["static_cap"] or None, parallelism=par)
    sink.table("crossover", est.CROSSOVER_HEADER, r.rows)
    sink.table("crossover_ratio", ("n", "ratio", "ci_low", "ci_high", "static_capped", "dynamic_capped"),
               [(n, q.point, q.ci_low, q.ci_high, s.cap_hits, d.cap_hits)
                for n, q, s, d in zip(r.sizes, r.ratios, r.static, r.dynamic)])
    sink.note(f"ratio trend increasing={r.trend.increasing} slope_p={r.trend.slope_pvalue:.3g} "
              f"monotone_p={r.trend.monotone_pvalue:.3g}; dynamic fit R2={r.fit.r2:.3f}")
    for n, s_, d in zip(r.sizes, r.static, r.dynamic):
        if s_.unreliable or d.unreliable:
            sink.note(f"n={n}: more than half of an arm hit its cap; the median ratio is censored")
    return EXIT_OK


def interval_replica(top, params, key, r0, T, windows, eta0):
    """Block grid, Z trace and containment counts for one replica."""
    env = bl.env_trajectory(top, params, key)
    ev = bl.replica_events(top, params, key, env)
    grid = bl.interval_block_variables(top, env, ev, r0, T, windows)
    b = run_engine(top, params, [kn.MODE_VALID], eta0, seed=key, direct_key=True,
                   sample_times=np.arange(windows + 1) * T, snapshots=True, stop_when_extinct=False)
    eta_at = b.eta_snap[0]
    blk = grid.block_of(0)
    z0 = np.unique(blk[eta_at[0] == 1])
    trace = bl.run_Z(grid.U, grid.V, z0, windows)
    bad, empty_bad = bl.z_containment_check(eta_at, grid, trace)
    return grid, trace, bad, empty_bad


def vertex_replica(top, params, key, T, windows, eta0):
    env = bl.env_trajectory(top, params, key)
    ev = bl.replica_events(top, params, key, env)
    U, V = bl.vertex_block_variables(top, env, ev, T, windows)
    b = run_engine(top, params, [kn.MODE_VALID], eta0, seed=key, direct_key=True,
                   sample_times=np.arange(windows + 1) * T, snapshots=True, stop_when_extinct=False)
    eta_at = b.eta_snap[0]
    trace = bl.run_Z_graph(top, U, V, np.flatnonzero(eta_at[0]), windows)
    bad = empty_bad = 0
    for n, z in enumerate(trace.Z):
        inz = np.zeros(top.n_vertices, dtype=bool)
        inz[z] = True
        bad += int(np.sum((eta_at[n] == 1) & ~inz))
        empty_bad += int(z.size == 0 and eta_at[n].any())
    return (U, V), trace, bad, empty_bad


def cmd_blocks(c, sink, par):
    mode = c["mode"]
    if mode == "bernoulli":
        rows = []
        for i, m in enumerate(c["z0_sizes"]):
            s = derive_seed(c["seed"], i)
            n_ext, peak = bl.run_Z_bernoulli(c["eps"], m, c["budget"], s, c["replicas"])
            alive = int(np.sum(n_ext == SURVIVED))
            fin = n_ext[n_ext != SURVIVED]
            e = est.mean_estimate(fin, s) if fin.size > 1 else None
            rows.append((m, c["eps"], c["replicas"], s, c["budget"], alive,
                         e.point if e else math.nan, e.se if e else math.nan, int(peak.max())))
        sink.table("zdies", ("z0_size", "eps", "runs", "seed", "budget", "survived", "mean_N_ext", "se_N_ext",
                             "max_Z"), rows)
        if len(rows) >= 2:
            f = est.affine_fit(np.log([r[0] for r in rows]), [r[6] for r in rows])
            sink.note(f"E(N_ext) ~ {f.intercept:.3f} + {f.slope:.3f} log|Z0|, R2 = {f.r2:.4f}")
        return EXIT_OK
    top = parse_topology(c["topology"])
    params = Params(c["lambda"], c["v"], c["p"], 1.0)
    if mode == "good":
        T = c["M"] / c["v"]
        g = bl.good_block_grid(top, params.replace(horizon=c["windows"] * T), c["seed"], c["M"], c["gap_delta"],
                               c["windows"])
        sink.table("good_blocks", bl.GOOD_BLOCK_HEADER, bl.good_block_rows(g))
        sink.note(f"P(c1) {g.c1.mean():.4f} (closed form {bl.prob_c1(c['M'], c['p']):.4f}), "
                  f"P(c2) {g.c2.mean():.4f} (closed form {bl.prob_c2(c['M'], c['p']):.4f}), "
                  f"good {g.W.mean():.4f}, reached {int(g.reach.sum())}")
        return EXIT_OK
    T, windows = c["T"], c["windows"]
    params = params.replace(horizon=windows * T)
    eta0 = make_eta0(top, c["eta0"])
    rows = []
    for r in range(c["replicas"]):
        key = int(replica_key(np.uint64(c["seed"]), r))
        if mode == "interval":
            grid, trace, bad, empty_bad = interval_replica(top, params, key, c["r0"], T, windows, eta0)
            if r == 0:
                sink.table("block_grid", bl.BLOCK_GRID_HEADER, bl.block_grid_rows(grid))
        else:
            _uv, trace, bad, empty_bad = vertex_replica(top, params, key, T, windows, eta0)
        if r == 0:
            sink.table("z_trace", bl.Z_TRACE_HEADER, bl.z_trace_rows(trace))
        rows.append((r, key, bad, empty_bad, trace.N_ext))
    sink.table("containment", ("replica", "replica_seed", "violations", "empty_violations", "N_ext"), rows)
    total = sum(x[2] + x[3] for x in rows)
    sink.note(f"containment violations {total} over {len(rows)} replicas")
    if total:
        raise InvariantViolation(f"{total} containment violations")
    return EXIT_OK


def cmd_couplings(c, sink, par):
    top = parse_topology(c["topology"])
    eta = make_eta0(top, c["eta0"])
    kind = c["kind"]
    fault = None if c["fault"] == "none" else c["fault"]
    if kind == "sandwich":
        o = cp.simulate_sandwich(top, _params(c), eta, seed=c["seed"], replicas=c["replicas"], parallelism=par,
                                 fault=fault)
        rows = cp.coupling_rows(c["seed"], o.violations)
        rate, se = o.valid_rate()
        sink.note(f"valid rate {rate:.5f} +- {se:.5f}, beta {o.beta:.5f}")
        viol = int(o.violations.sum())
    elif kind == "weak":
        o = cp.simulate_weak_processes(top, _params(c), eta, seed=c["seed"], replicas=c["replicas"],
                                       n_box=c["n_box"], parallelism=par)
        rows = cp.coupling_rows(c["seed"], o.violations, o)
        sink.note(f"p-weak fraction {o.pweak_fraction()[0]:.5f}, mean N_p {o.stats.N_p.mean():.4f}")
        viol = int(o.violations.sum())
    else:
        rep = cp.rescale_coupling_check(top, c["lambda"], c["v"], c["v_prime"], c["p"], eta, horizon=c["horizon"],
                                        seed=c["seed"], replicas=c["replicas"], parallelism=par)
        rows = cp.coupling_rows(c["seed"], rep.violations)
        viol = int(rep.violations.sum()) + rep.order_failures
    header = tuple(rows[0].keys()) if rows else ("replica_seed", "violations")
    sink.table("couplings", header, [tuple(r[k] for k in header) for r in rows])
    sink.note(f"containment violations {viol}")
    if viol:
        raise InvariantViolation(f"{viol} containment violations in the {kind} coupling")
    return EXIT_OK


def _oracle_instances():
    from .topology import build_topology
    p3 = build_topology("path", (3,))
    p2 = build_topology("path", (2,))
    return {
        "path3_survival_T5": (p3, Params(1.5, 1.0, 0.5, 5.0), [1, 1, 1], None, "survival"),
        "path2_mean_ext_open": (p2, Params(1.0, 1.0, 0.5, 200.0), [1, 1], [1], "mean"),
        "path2_mean_ext_stationary": (p2, Params(1.0, 1.0, 0.5, 200.0), [1, 1], None, "mean"),
    }


def cmd_oracle_check(c, sink, par):
    fixture = orc.load_fixture()
    inst = _oracle_instances()
    names = list(inst) if c["instances"] == "all" else [s.strip() for s in c["instances"].split(",")]
    rows = []
    bad = []
    for i, name in enumerate(names):
        if name not in inst:
            raise ConfigError(f"instances: unknown instance {name!r}; known: {', '.join(inst)}")
        top, params, eta, zeta, what = inst[name]
        model = orc.build_model(top, params)
        s = derive_seed(c["seed"], i)
        z = None if zeta is None else np.asarray(zeta, np.uint8)
        if what == "survival":
            exact = orc.exact_survival_to_horizon(model, eta, params.horizon, zeta)
            e = est.estimate_survival(top, params, np.asarray(eta, np.uint8), c["replicas"], s, z, par)
            sd = math.sqrt(exact * (1 - exact) / c["replicas"])
        else:
            exact = orc.exact_mean_extinction_time(model, eta, zeta)
            times = est.extinction_times(top, params, np.asarray(eta, np.uint8), c["replicas"], s, z, par)
            if np.any(times == SURVIVED):
                raise InvariantViolation(f"{name}: replica alive at the horizon {params.horizon}")
            e = est.mean_estimate(times, s)
            sd = e.se
        ref, tol = fixture[name]
        zscore = (e.point - exact) / sd if sd > 0 else 0.0
        ok = abs(exact - ref) <= tol and abs(zscore) <= c["sigmas"]
        rows.append((name, exact, tol, e.point, sd, zscore, int(ok)))
        if not ok:
            bad.append(name)
    sink.table("oracle", ("instance", "value", "tolerance", "monte_carlo", "sigma", "z", "ok"), rows)
    sink.note(f"oracle instances checked {len(rows)}, mismatches {len(bad)}")
    if bad:
        raise OracleMismatch(", ".join(bad))
    return EXIT_OK


def cmd_calibrate(c, sink, par):
    if c["mode"] == "vertex":
        M, T, p0 = bl.teo2_parameters(c["v"], c["eps"])
        sink.table("calibration", ("mode", "v", "eps", "M", "T", "p0", "delta"),
                   [("vertex", c["v"], c["eps"], M, T, p0, bl.delta_bound(c["v"], p0, T).delta)])
        sink.note(f"M {M:g}, T {T:g}, p0 {p0:.6g}")
        return EXIT_OK
    from .topology import build_topology
    r0 = bl.teo1_r0(c["p"], c["eps"])
    top = build_topology("path", (2 * r0 + 1,))
    ext = est.extinction_times(top, Params(c["lambda"], 0.0, 1.0, c["horizon"]), "all", c["replicas"], c["seed"],
                               zeta0=np.ones(top.n_edges, np.uint8), parallelism=par)
    T = bl.teo1_T(ext, c["eps"])
    sink.table("calibration", ("mode", "lambda", "p", "eps", "delta0", "r0", "T", "replicas", "capped"),
               [("interval", c["lambda"], c["p"], c["eps"], bl.delta0(c["p"]), r0, T, c["replicas"],
                 int(np.sum(ext == SURVIVED)))])
    sink.note(f"r0 {r0}, T {T:g}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate, "sweep": cmd_sweep, "lambda0": cmd_lambda0, "crossover": cmd_crossover,
    "blocks": cmd_blocks, "couplings": cmd_couplings, "oracle-check": cmd_oracle_check,
    "calibrate": cmd_calibrate,
}


# ---------------------------------------------------------------------------
# entry point

def build_parser():
    ap = argparse.ArgumentParser(prog="cpde", description="Contact process with dynamic edges: simulation "
                                 "and verification toolkit.")
    ap.add_argument("--version", action="version", version=__version__)
    subs = ap.add_subparsers(dest="subcommand", required=True)
    for name in SCHEMA:
        sp = subs.add_parser(name)
        sp.add_argument("--config", help="INI file with a [%s] section" % name)
        for k, key in keys_for(name).items():
            flags = [f"--{k}"] + ([f"--{k.replace('_', '-')}"] if "_" in k else [])
            sp.add_argument(*flags, dest=f"key_{k}", default=None, metavar=key.kind.upper(),
                            help=f"{key.help} ({key.legal()})".strip())
    return ap


def run(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    sub = args.subcommand
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("key_") and v is not None}
    try:
        text = Path(args.config).read_text() if args.config else None
        cfg = parse_config(sub, text, overrides)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    par = cfg["parallelism"] or os.cpu_count() or 1
    sink = Sink(Path(cfg["out"]))
    t0 = time.perf_counter()
    status, report = EXIT_OK, ""
    try:
        status = COMMANDS[sub](cfg.values, sink, par)
    except (ConfigError, ParamError, StructureError, TopologyError, cp.DomainError, bl.DomainError,
            cp.PreconditionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        status, report = EXIT_INVARIANT, f"invariant violation: {exc}"
    except OracleMismatch as exc:
        status, report = EXIT_ORACLE, f"oracle mismatch: {exc}"
    wall = time.perf_counter() - t0
    sink.flush()
    manifest = [f"# cpde {__version__} run manifest", f"subcommand = {sub}", f"seed = {cfg['seed']}",
                f"parallelism = {par}", f"wall_time_s = {wall:.3f}", f"exit_status = {status}"]
    manifest += [f"output = {n}.csv" for n in sink.tables]
    manifest += [f"note = {n}" for n in sink.notes]
    if report:
        manifest.append(f"report = {report}")
        print(report, file=sys.stderr)
    manifest += ["", cfg.to_ini()]
    (sink.out / "manifest.txt").write_text("\n".join(manifest))
    return status


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
