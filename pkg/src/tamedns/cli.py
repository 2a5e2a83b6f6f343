"""Command-line experiment driver.

Every subcommand reads a YAML :class:`RunConfig`, runs one experiment and
writes ``<name>.csv``, ``<name>.manifest.json`` and ``<name>.summary.txt``
into the output directory. Exit status: 0 all checks pass, 1 an experiment
check failed, 2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .averaging import (
    AveragingError,
    ExperimentReport,
    SweepPlan,
    averaging_sweep,
    build_averaged,
    freeze_rate,
)
from .coefficients import (
    ModulusOfContinuity,
    check_linear_growth,
    check_modulus,
    empirical_average_eta,
    empirical_average_f,
    empirical_average_g,
    field_corpus,
    pair_corpus,
    taylor_green_field,
    verify_weak_monotonicity,
)
from .config import EXPERIMENTS, ConfigError, RunConfig, load_config
from .integrator import (
    BlowUpError,
    ensemble_paths,
    moment_estimator,
    run_ensemble,
    simulate,
    uniqueness_probe,
)
from .operators import validate_noise_bound


class MixedConfigError(ValueError):
    pass


def _versions() -> dict:
    return {
        "tamedns": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


# ---------------------------------------------------------------------------
# experiments


def run_simulate(cfg: RunConfig, threads: int = 1) -> list[ExperimentReport]:
    grid = cfg.grid_obj()
    cs = cfg.coefficients(grid)
    u0 = cfg.initial_field(grid)
    solver = cfg.solver_config()
    p = cfg.experiment.params
    paths = ensemble_paths(cfg.seed, solver.dt, solver.T, cs.J, int(p["n_paths"]))

    def one(path):
        try:
            return simulate(u0, cs, solver, path)
        except BlowUpError as exc:
            return exc

    results = run_ensemble(one, paths, threads)
    trajs = [r for r in results if not isinstance(r, BlowUpError)]
    rows = []
    for i, r in enumerate(results):
        tr = r.trajectory if isinstance(r, BlowUpError) else r
        if tr is None:
            continue
        ih2, iug = tr.int_h2_sq, tr.int_ugu
        for k, t in enumerate(tr.times):
            rows.append([i, k, float(t), float(tr.h0[k]), float(tr.h1[k]), float(tr.h2[k]),
                         float(ih2[k]), float(iug[k])])
    traj_rep = ExperimentReport(
        "simulate", ["path", "step", "time", "h0", "h1", "h2", "int_h2_sq", "int_ugu"], rows,
        cfg.config_hash, manifest={"seed": cfg.seed, "streams": list(range(len(paths)))},
    )
    traj_rep.checks["no_blowup"] = len(trajs) == len(results)
    reports = [traj_rep]
    if trajs:
        est = moment_estimator(trajs, float(p["p"]))
        mom = ExperimentReport(
            "simulate_moments",
            ["p", "n_paths", "sup_moment", "sup_moment_se", "dissipation", "dissipation_se"],
            [[est.p, est.n_paths, est.sup_moment, est.sup_moment_se, est.dissipation, est.dissipation_se]],
            cfg.config_hash, manifest={"seed": cfg.seed},
        )
        mom.checks["finite"] = bool(np.isfinite(est.sup_moment) and np.isfinite(est.dissipation))
        reports.append(mom)
    return reports


def run_probe(cfg: RunConfig, threads: int = 1) -> list[ExperimentReport]:
    grid = cfg.grid_obj()
    cs = cfg.coefficients(grid)
    ua = cfg.initial_field(grid)
    p = cfg.experiment.params
    ub = ua + taylor_green_field(grid, float(p["separation"]))
    solver = cfg.solver_config()
    paths = ensemble_paths(cfg.seed, solver.dt, solver.T, cs.J, int(p["n_paths"]))
    res = uniqueness_probe(ua, ub, cs, solver, paths, float(p["beta"]), [float(d) for d in p["deltas"]],
                           m=int(p["m"]), threads=threads)
    A = ModulusOfContinuity.by_name(p["modulus"]) if p["modulus"] else cs.modulus
    _, C, slack = res.gamma_check(A)
    rows = [[d, s, se, n, sl] for d, s, se, n, sl in
            zip(res.deltas, res.sup_dist_sq, res.sup_dist_sq_se, res.stopped, slack)]
    rep = ExperimentReport(
        "probe_uniqueness", ["delta", "sup_dist_sq", "sup_dist_sq_se", "stopped", "gamma_slack"], rows,
        cfg.config_hash, manifest={"seed": cfg.seed, "modulus": A.name, "fitted_c": 1.0, "fitted_C": C},
    )
    vals = np.array(res.sup_dist_sq)
    rep.checks["strictly_decreasing"] = bool(np.all(np.diff(vals) < 0))
    rep.checks["gamma_bound"] = bool(min(slack) >= -1e-9)
    rep.notes.append(f"Gamma check with {A.name} modulus: c=1, fitted C={C:.6g}")
    return [rep]


def run_sweep(cfg: RunConfig, threads: int = 1) -> list[ExperimentReport]:
    grid = cfg.grid_obj()
    cs = cfg.coefficients(grid)
    u0_star = cfg.initial_field(grid)
    p = cfg.experiment.params
    u0_eps = u0_star + taylor_green_field(grid, float(p["initial_offset"])) if p["initial_offset"] else u0_star
    plan = SweepPlan(
        tuple(float(e) for e in p["epsilons"]), cfg.solver.T, cfg.solver.dt, int(p["n_paths"]),
        m=int(p["m"]), d=p["d"], seed=cfg.seed, record_stride=int(p["record_stride"]),
    )
    return [averaging_sweep(plan, cs, u0_eps, cfg.profile(), u0_star, threads, cfg.config_hash)]


def run_freeze(cfg: RunConfig, threads: int = 1) -> list[ExperimentReport]:
    grid = cfg.grid_obj()
    cs = cfg.coefficients(grid)
    u0 = cfg.initial_field(grid)
    p = cfg.experiment.params
    solver = cfg.solver_config()
    paths = ensemble_paths(cfg.seed, solver.dt, solver.T, cs.J, int(p["n_paths"]))
    res = freeze_rate(u0, cs, solver, paths, [float(d) for d in p["ds"]], m=int(p["m"]), threads=threads)
    rep = res.report(cfg.config_hash, float(p["min_exponent"]))
    rep.manifest["seed"] = cfg.seed
    return [rep]


def run_average(cfg: RunConfig, threads: int = 1) -> list[ExperimentReport]:
    grid = cfg.grid_obj()
    cs = cfg.coefficients(grid)
    avg = build_averaged(cs, grid, windows=tuple(float(w) for w in cfg.experiment.params["windows"]),
                         strict=False)
    rows = [
        ["eta1", avg.provenance["eta1"], avg.eta1_star],
        ["eta2", avg.provenance["eta2"], avg.eta2_star],
        ["f", avg.provenance["f"], float("nan")],
        ["g", avg.provenance["g"], float("nan")],
        ["K", avg.provenance["K"], float("nan")],
    ]
    rep = ExperimentReport("average_coeffs", ["member", "provenance", "value"], rows, cfg.config_hash)
    rep.checks["all_convergent"] = not any("non-convergent" in v for v in avg.provenance.values())
    return [rep]


def validate_assumptions(cfg: RunConfig) -> ExperimentReport:
    """Every coefficient validator on the configured family, with margins."""
    grid = cfg.grid_obj()
    cs = cfg.coefficients(grid)
    p = cfg.experiment.params
    rng = np.random.default_rng([cfg.seed % 2**64, 0xA55E27])
    times = np.linspace(0.0, 2 * np.pi, 5)
    rows = []

    def add(name, passed, value, bound, detail=""):
        rows.append([name, bool(passed), float(value), float(bound), detail])

    corpus = field_corpus(grid, rng, int(p["corpus_size"]))
    for m in (0, 1):
        r = check_linear_growth(cs, corpus, m, times)
        add(f"linear growth m={m}", r.passed, r.max_ratio, 1.0, r.summary())
    for m in (0, 1):
        pairs = pair_corpus(grid, rng, cs.zeta, int(p["pair_count"]), m)
        r = verify_weak_monotonicity(cs.f, cs.modulus, cs.c_monotone, cs.zeta, pairs, "monotone", m, times,
                                     f"f local monotonicity m={m}")
        add(r.label, r.passed, r.max_ratio, cs.c_monotone, r.summary())
        r = verify_weak_monotonicity(cs.f, cs.modulus, cs.c_monotone, cs.zeta, pairs, "lipschitz", m, times,
                                     f"f modulus bound m={m}")
        add(r.label, r.passed, r.max_ratio, cs.c_monotone, r.summary())
        r = verify_weak_monotonicity(cs.g_columns, cs.modulus, cs.c_monotone, cs.zeta, pairs, "lipschitz", m,
                                     times, f"g modulus bound m={m}")
        add(r.label, r.passed, r.max_ratio, cs.c_monotone, r.summary())
    mod = check_modulus(cs.modulus)
    add(f"Osgood divergence of modulus {cs.modulus.name}", mod.passed, mod.reciprocal_integrals[-1], 0.0,
        f"int_delta^1 dr/A for delta=1e-2..1e-10: {[round(v, 4) for v in mod.reciprocal_integrals]}")
    nb = validate_noise_bound(cs.transport, cfg.taming.nu, float(p["p"]), float(p["noise_eps"]))
    add("transport noise bound", nb.passed, nb.sup_K_sq, nb.bound, nb.summary())

    windows = (10.0, 40.0, 160.0)
    for name, eta, star in (("eta1", cs.eta1, cs.eta1_star), ("eta2", cs.eta2, cs.eta2_star)):
        rates = [empirical_average_eta(eta, 0.0, T, star)[1] for T in windows]
        ok = rates[-1] <= rates[0] and all(b <= a + 1e-12 for a, b in zip(rates, rates[1:]))
        add(f"{name} averaging rate", ok, rates[-1], rates[0], f"rates over T={windows}: {rates}")
    a1, a2, a3, a4 = cs.bounds
    add("eta bounds", 0 < a1 <= a2 and 0 < a3 <= a4, a1, a3, f"a=({a1}, {a2}, {a3}, {a4})")
    probe = taylor_green_field(grid)
    f_rates = [empirical_average_f(cs.f, probe, 0.0, T, cs.f_star, cs.M)[1] for T in windows]
    add("f averaging rate", f_rates[-1] <= f_rates[0] + 1e-12, f_rates[-1], f_rates[0],
        f"rates over T={windows}: {f_rates}")
    g_ref = (lambda u: _pad(cs.g_star(u), cs.J, grid)) if cs.g_star is not None else None
    g_rates = [empirical_average_g(cs.g_columns, probe, 0.0, T, g_ref, cs.M)[1] for T in windows]
    g_ok = cs.g_average_converges and (g_rates[-1] <= 1e-12 or g_rates[-1] < g_rates[0])
    add("g square-mean averaging rate", g_ok, g_rates[-1], g_rates[0], f"rates over T={windows}: {g_rates}")
    add("K time-independent", cs.transport.is_time_independent, 0.0, 0.0,
        "oscillating K does not average in the square-mean sense")
    try:
        avg = build_averaged(cs, grid)
        f_star = _TimeFree(avg.f_star)
        g_star = _TimeFree(lambda u: _pad(avg.g_star(u), cs.J, grid))
        for m in (0, 1):
            pairs = pair_corpus(grid, rng, cs.zeta, int(p["pair_count"]), m)
            for fn, kind, lab in ((f_star, "monotone", "f*"), (f_star, "lipschitz", "f*"),
                                  (g_star, "lipschitz", "g*")):
                r = verify_weak_monotonicity(fn, cs.modulus, cs.c_monotone, cs.zeta, pairs, kind, m, (0.0,),
                                             f"averaged {lab} {kind} m={m}")
                add(r.label, r.passed, r.max_ratio, cs.c_monotone, r.summary())
    except AveragingError as exc:
        add("averaged coefficients", False, 0.0, 0.0, str(exc))
    add("a4 <= 2 a3", cs.averaging_compatible, a4, 2 * a3, "needed for H^0 averaging")

    rep = ExperimentReport("validate_assumptions", ["check", "passed", "value", "bound", "detail"], rows,
                           cfg.config_hash, manifest={"family": cs.name, "seed": cfg.seed})
    rep.checks["all_assumptions"] = all(r[1] for r in rows)
    rep.notes.append(nb.summary())
    return rep


def _pad(cols, J, grid):
    from .field import DivFreeField

    cols = list(cols)
    return cols + [DivFreeField.zeros(grid)] * (J - len(cols))


class _TimeFree:
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, t, u):
        return self.fn(u)


RUNNERS = {
    "simulate": run_simulate,
    "probe-uniqueness": run_probe,
    "averaging-sweep": run_sweep,
    "freeze-rate": run_freeze,
    "average-coeffs": run_average,
    "validate-assumptions": lambda cfg, threads=1: [validate_assumptions(cfg)],
}


def run(cfg: RunConfig, out_dir=None, threads: int = 1, echo=print) -> int:
    """Execute the configured experiment and write its artifacts; returns the exit status."""
    out = Path(out_dir or os.environ.get("TAMEDNS_OUT") or cfg.out or "runs")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        reports = RUNNERS[cfg.experiment.kind](cfg, threads=threads)
    except (ConfigError, AveragingError) as exc:
        echo(f"error: {exc}")
        return 2
    wall = time.perf_counter() - t0
    (out / "config.yaml").write_text(cfg.to_yaml())
    for rep in reports:
        rep.manifest.setdefault("seed", cfg.seed)
        rep.manifest["versions"] = _versions()
        rep.manifest["threads"] = threads
        rep.write(out, wall_time=wall)
        echo(rep.summary())
    return 0 if all(r.passed for r in reports) else 1


def aggregate_csv(texts: list[str]) -> str:
    """Concatenate report CSVs that share a header and a single config hash."""
    header, rows, hashes = None, [], set()
    for text in texts:
        reader = list(csv.reader(io.StringIO(text)))
        if not reader:
            continue
        h, body = reader[0], reader[1:]
        if header is None:
            header = h
        elif h != header:
            raise MixedConfigError(f"header mismatch: {h} vs {header}")
        j = h.index("config_hash")
        hashes.update(r[j] for r in body)
        rows.extend(body)
    if len(hashes) > 1:
        raise MixedConfigError(f"refusing to aggregate rows from {len(hashes)} different configs")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tamedns", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override the master seed (u64)")
        sp.add_argument("--threads", type=int, default=1, help="thread budget for path ensembles")
        sp.add_argument("--out", default=None, help="output directory")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed", f"expected an unsigned 64-bit integer, got {args.seed}")
        if args.threads < 1:
            raise ConfigError("--threads", f"must be >= 1, got {args.threads}")
        cfg = load_config(args.config, args.seed)
        if cfg.experiment.kind != args.command:
            raise ConfigError("experiment.kind",
                              f"config describes {cfg.experiment.kind!r} but subcommand is {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return run(cfg, args.out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
