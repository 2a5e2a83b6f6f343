"""Khasminskii-type averaging experiments.

Piecewise freezing of trajectories, the freeze-error rate in the block length,
construction of the time-averaged coefficient set and the epsilon sweep that
compares oscillatory and averaged solutions on shared noise paths.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import integrate

from .coefficients import (
    AveragedSet,
    CoefficientSet,
    LinearDrift,
    Oscillation,
    OsgoodDrift,
    empirical_average_eta,
    empirical_average_f,
    empirical_average_g,
    oscillate,
    taylor_green_field,
    window_mean,
)
from .field import VOL_FACTOR, DivFreeField, TorusGrid
from .integrator import (
    SolverConfig,
    Trajectory,
    WienerPath,
    jackknife_stderr,
    run_ensemble,
    simulate,
    simulate_pair,
)
from .operators import TamingProfile, convection, taming_term


class AveragingError(ValueError):
    """Averaged system cannot be built, or the sweep hypotheses fail."""


# ---------------------------------------------------------------------------
# freezing


@dataclass(frozen=True)
class FreezeSchedule:
    """Blocks [nd, (n+1)d) of length d <= 1."""

    d: float
    t0: float = 0.0

    def __post_init__(self):
        if not 0 < self.d <= 1:
            raise ValueError(f"block length d must lie in (0, 1], got {self.d}")

    def block_index(self, t):
        return np.floor((np.asarray(t, dtype=float) - self.t0) / self.d + 1e-9).astype(int)

    def block_start(self, t):
        return self.t0 + self.block_index(t) * self.d

    def n_blocks(self, T: float) -> int:
        return int(np.ceil(T / self.d - 1e-9))


def _block_map(times: np.ndarray, schedule: FreezeSchedule) -> np.ndarray:
    """Index of the mesh point at the start of the block containing each mesh time."""
    times = np.asarray(times, dtype=float)
    starts = schedule.block_start(times)
    idx = np.searchsorted(times, starts - 1e-9 * max(schedule.d, 1.0))
    if np.any(np.abs(times[idx] - starts) > 1e-9 * max(1.0, np.max(np.abs(times)))):
        raise ValueError(f"block length {schedule.d} is not a multiple of the recording mesh")
    return idx


def freeze_values(times: np.ndarray, values: np.ndarray, schedule: FreezeSchedule) -> np.ndarray:
    """Piecewise-constant surrogate of samples ``values[i]`` taken at ``times[i]``."""
    return np.asarray(values)[_block_map(times, schedule)]


def freeze(traj: Trajectory, schedule: FreezeSchedule) -> Trajectory:
    """Trajectory whose value on [nd, (n+1)d) is the value at nd."""
    rec = _block_map(traj.record_times, schedule)
    fields = [traj.fields[i] for i in rec]
    if len(traj.times) == len(traj.record_times):
        steps = rec
    else:
        steps = _block_map(traj.times, schedule)
    return replace(
        traj,
        h0=traj.h0[steps],
        h1=traj.h1[steps],
        h2=traj.h2[steps],
        ugu=traj.ugu[steps],
        fields=fields,
    )


def _block_integral(times: np.ndarray, y: np.ndarray) -> float:
    if len(times) < 2:
        return 0.0
    if len(times) >= 3:
        return float(integrate.simpson(y, x=times))
    return float(integrate.trapezoid(y, x=times))


def freeze_error_path(traj: Trajectory, schedule: FreezeSchedule, m: int = 1) -> float:
    """int ||u(s) - u_bar(s)||^2_{H^m} ds over the recorded horizon for one path.

    Integrated block by block (Simpson on the recording mesh), with u_bar held
    at the block's starting value up to and including the right endpoint.
    """
    if m not in (0, 1):
        raise ValueError("freeze_error uses m = 0 or 1")
    times = np.asarray(traj.record_times, dtype=float)
    idx = _block_map(times, schedule)
    w = traj.fields[0].grid.weights(m)
    coeffs = np.stack([f.coeffs for f in traj.fields])
    total = 0.0
    for start in np.unique(idx):
        block = np.flatnonzero(idx == start)
        end = block[-1] + 1
        sel = np.append(block, end) if end < len(times) else block
        diff = coeffs[sel] - coeffs[start]
        y = VOL_FACTOR * np.sum(w * np.abs(diff) ** 2, axis=(1, 2, 3, 4))
        total += _block_integral(times[sel], y)
    return total


def freeze_error(trajectories, schedule: FreezeSchedule, m: int = 1) -> float:
    """Ensemble mean of ``freeze_error_path``."""
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    return float(np.mean([freeze_error_path(tr, schedule, m) for tr in trajectories]))


def fit_loglog(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of log y against log x (non-positive y dropped)."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0)
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)[0])


# ---------------------------------------------------------------------------
# averaged coefficients


def _time_independent(member) -> bool:
    return bool(getattr(member, "is_time_independent", False) or getattr(member, "is_constant", False))


class _EmpiricalMean:
    """u -> (1/T) int_0^T fn(s, u) ds by adaptive vector quadrature (slow, exact enough)."""

    def __init__(self, fn, T: float):
        self.fn, self.T = fn, T

    def __call__(self, u: DivFreeField) -> DivFreeField:
        return empirical_average_f(self.fn, u, 0.0, self.T)[0]


class _EmpiricalColumns:
    def __init__(self, fn, T: float):
        self.fn, self.T = fn, T

    def __call__(self, u: DivFreeField):
        return empirical_average_g(self.fn, u, 0.0, self.T)[0]


def _decreasing(rates: Sequence[float], floor: float = 1e-12) -> bool:
    r = np.asarray(rates)
    if np.all(r <= floor):
        return True
    return bool(np.all(np.diff(r) <= floor) and r[-1] < r[0])


def build_averaged(
    cs: CoefficientSet,
    grid: TorusGrid | None = None,
    windows: Sequence[float] = (10.0, 40.0, 160.0),
    strict: bool = True,
) -> AveragedSet:
    """Time averages of every member, analytic when declared and empirical otherwise.

    Empirical averages are accepted only when the oracle rate decreases along
    ``windows``. Diffusion and transport coefficients must average in the
    square-mean sense; an oscillating g or K does not, and ``strict`` refuses it.
    """
    prov: dict[str, str] = {}
    rates: dict[str, list[float]] = {}

    def eta_avg(name, eta, star):
        if star is not None:
            prov[name] = "analytic"
            return float(star)
        if _time_independent(eta):
            prov[name] = "constant"
            return float(eta(0.0))
        rs = [empirical_average_eta(eta, 0.0, T)[1] for T in windows]
        rates[name] = rs
        if not _decreasing(rs):
            raise AveragingError(f"{name}: averaging rate not decreasing over windows {list(windows)}: {rs}")
        prov[name] = "empirical"
        return window_mean(eta, 0.0, 100.0 * windows[-1])

    e1 = eta_avg("eta1", cs.eta1, cs.eta1_star)
    e2 = eta_avg("eta2", cs.eta2, cs.eta2_star)

    probe = None
    if grid is not None:
        probe = taylor_green_field(grid)

    if cs.f_star is not None:
        f_star, prov["f"] = cs.f_star, "analytic"
    elif _time_independent(cs.f):
        f_star, prov["f"] = (lambda u, f=cs.f: f(0.0, u)), "constant"
    else:
        if probe is None:
            raise AveragingError("f has no declared average; pass a grid for the empirical oracle")
        rs = [empirical_average_f(cs.f, probe, 0.0, T, M=cs.M)[1] for T in windows]
        rates["f"] = rs
        if not _decreasing(rs):
            raise AveragingError(f"f: averaging rate not decreasing over windows {list(windows)}: {rs}")
        f_star, prov["f"] = _EmpiricalMean(cs.f, windows[-1]), "empirical"

    g_converges = cs.g_average_converges and _time_independent(cs.g)
    if cs.g_star is not None:
        g_star, prov["g"] = cs.g_star, "analytic"
    elif _time_independent(cs.g):
        g_star, prov["g"] = (lambda u, g=cs.g: list(g(0.0, u))), "constant"
    else:
        if probe is None:
            raise AveragingError("g has no declared average; pass a grid for the empirical oracle")
        rs = [empirical_average_g(cs.g, probe, 0.0, T, M=cs.M)[1] for T in windows]
        rates["g"] = rs
        g_converges = _decreasing(rs)
        g_star, prov["g"] = _EmpiricalColumns(cs.g, windows[-1]), "empirical"
    if not g_converges:
        msg = "g: time-dependent diffusion does not average in the square-mean sense"
        if strict:
            raise AveragingError(msg)
        prov["g"] += " (non-convergent)"

    K_star = cs.transport.time_averaged()
    prov["K"] = "constant" if cs.transport.is_time_independent else "analytic"
    if not cs.transport.is_time_independent:
        msg = "K: oscillating transport noise does not average in the square-mean sense"
        if strict:
            raise AveragingError(msg)
        prov["K"] += " (non-convergent)"
    return AveragedSet(e1, e2, f_star, g_star, K_star, prov, rates)


# ---------------------------------------------------------------------------
# reports


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


@dataclass
class ExperimentReport:
    """Rows of one experiment, a config hash stamped on each row, and a manifest."""

    name: str
    columns: list[str]
    rows: list[list]
    config_hash: str = ""
    checks: dict[str, bool] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def column(self, name: str) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([r[j] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns + ["config_hash"])
        for r in self.rows:
            w.writerow([_fmt(v) for v in r] + [self.config_hash])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{self.name} [{self.config_hash[:12]}]"]
        lines.append("  " + "  ".join(self.columns))
        shown = self.rows if len(self.rows) <= 24 else self.rows[:10] + [None] + self.rows[-10:]
        for r in shown:
            if r is None:
                lines.append(f"  ... ({len(self.rows) - 20} rows omitted)")
                continue
            lines.append("  " + "  ".join("%.6g" % v if isinstance(v, float) else str(v) for v in r))
        for k, v in self.checks.items():
            lines.append(f"  check {k}: {'pass' if v else 'FAIL'}")
        lines.extend("  " + n for n in self.notes)
        return "\n".join(lines)

    def write(self, out_dir, wall_time: float | None = None) -> dict:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{self.name}.csv"
        csv_path.write_text(self.to_csv())
        manifest = dict(self.manifest)
        manifest.update(
            experiment=self.name,
            config_hash=self.config_hash,
            checks={k: bool(v) for k, v in self.checks.items()},
            passed=self.passed,
            csv=csv_path.name,
        )
        if wall_time is not None:
            manifest["wall_time_s"] = wall_time
        (out / f"{self.name}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        (out / f"{self.name}.summary.txt").write_text(self.summary() + "\n")
        return manifest


def monotone_within(err: Sequence[float], se: Sequence[float], k: float = 2.0) -> bool:
    """err[i+1] <= err[i] + k * sqrt(se[i]^2 + se[i+1]^2) along the ladder."""
    err, se = np.asarray(err), np.asarray(se)
    slack = k * np.sqrt(se[:-1] ** 2 + se[1:] ** 2)
    return bool(np.all(err[1:] <= err[:-1] + slack))


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepPlan:
    """Epsilon ladder and run parameters of an averaging sweep.

    ``d`` is the block length used for the Khasminskii diagnostics: ``"sqrt"``
    gives d = epsilon^(1/2), a number fixes it.
    """

    epsilons: tuple[float, ...]
    T: float
    dt: float
    n_paths: int
    m: int = 0
    d: str | float = "sqrt"
    seed: int = 0
    record_stride: int = 1

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        object.__setattr__(self, "epsilons", eps)
        if not eps or any(e <= 0 for e in eps):
            raise ValueError("epsilon ladder must be non-empty and positive")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError(f"epsilon ladder must be strictly decreasing, got {eps}")
        if self.m not in (0, 1):
            raise ValueError("norm level m must be 0 or 1")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if not (self.d == "sqrt" or (isinstance(self.d, (int, float)) and 0 < self.d <= 1)):
            raise ValueError(f"d must be 'sqrt' or a number in (0, 1], got {self.d!r}")

    def block_length(self, epsilon: float) -> float:
        return min(float(np.sqrt(epsilon)), 1.0) if self.d == "sqrt" else float(self.d)


def check_sweep_hypotheses(plan: SweepPlan, cs: CoefficientSet) -> None:
    if plan.m == 0 and not cs.averaging_compatible:
        a1, a2, a3, a4 = cs.bounds
        raise AveragingError(f"H^0 averaging needs a4 <= 2 a3; got a3={a3}, a4={a4}")
    if plan.m == 1:
        ones = all(
            _time_independent(eta) and float(eta(0.0)) == 1.0 for eta in (cs.eta1, cs.eta2)
        )
        if not ones or not cs.transport.is_zero:
            raise AveragingError("H^1 averaging needs eta1 = eta2 = 1 and K = 0")


def averaging_sweep(
    plan: SweepPlan,
    cs: CoefficientSet,
    u0_eps: DivFreeField,
    profile: TamingProfile,
    u0_star: DivFreeField | None = None,
    threads: int = 1,
    config_hash: str = "",
    averaged: AveragedSet | None = None,
) -> ExperimentReport:
    """err(epsilon) = E sup_t ||u^eps - u*||^2_{H^m} on shared noise paths.

    The same path streams are used for every epsilon. The sup is taken over
    the recording mesh, so it approximates the continuous sup from below.
    """
    check_sweep_hypotheses(plan, cs)
    grid = u0_eps.grid
    u0_star = u0_eps if u0_star is None else u0_star
    avg = averaged if averaged is not None else build_averaged(cs, grid)
    cs_star = avg.as_coefficients(cs)
    cfg = SolverConfig(dt=plan.dt, T=plan.T, profile=profile, record_stride=10**9)
    paths = [WienerPath(plan.seed, plan.dt, plan.T, cs.J, stream=i) for i in range(plan.n_paths)]
    s = plan.record_stride

    rows, errs, ses = [], [], []
    excluded_total = 0
    for eps in plan.epsilons:
        cs_eps = oscillate(cs, eps)

        def one(path, cs_eps=cs_eps):
            run = simulate_pair(u0_eps, u0_star, cs_eps, cs_star, cfg, path)
            if run.diverged:
                return None
            return float(np.max(run.dist_sq[plan.m][::s]))

        vals = run_ensemble(one, paths, threads)
        good = [v for v in vals if v is not None]
        excluded = len(vals) - len(good)
        excluded_total += excluded
        mean = float(np.mean(good)) if good else float("nan")
        se = jackknife_stderr(good)
        errs.append(mean)
        ses.append(se)
        rows.append([eps, plan.block_length(eps), len(good), mean, se, excluded])

    rate = fit_loglog(plan.epsilons, errs)
    for r in rows:
        r.append(rate)
    n_total = plan.n_paths * len(plan.epsilons)
    report = ExperimentReport(
        name="averaging_sweep" if plan.m == 0 else "averaging_sweep_h1",
        columns=["epsilon", "d", "n_paths", "err_mean", "err_stderr", "excluded", "fitted_rate"],
        rows=rows,
        config_hash=config_hash,
        manifest={"seed": plan.seed, "streams": list(range(plan.n_paths)), "m": plan.m,
                  "averaged_provenance": avg.provenance},
    )
    report.checks["monotone_within_2se"] = monotone_within(errs, ses)
    report.checks["smallest_below_quarter_largest"] = bool(errs[-1] <= 0.25 * errs[0]) if len(errs) > 1 else True
    report.checks["exclusions_below_1pct"] = bool(excluded_total < 0.01 * n_total)
    report.notes.append("err uses the sup over the recording mesh (a lower estimate of the continuous sup)")
    return report


@dataclass
class FreezeRateResult:
    ds: list[float]
    err_mean: list[float]
    err_stderr: list[float]
    exponent: float
    m: int

    def report(self, config_hash: str = "", min_exponent: float = 0.4) -> ExperimentReport:
        rows = [[d, e, s, self.exponent] for d, e, s in zip(self.ds, self.err_mean, self.err_stderr)]
        rep = ExperimentReport("freeze_rate", ["d", "err_mean", "err_stderr", "fitted_exponent"],
                               rows, config_hash, manifest={"m": self.m})
        rep.checks[f"exponent_at_least_{min_exponent:g}"] = bool(self.exponent >= min_exponent)
        return rep


def freeze_rate(
    u0: DivFreeField,
    cs: CoefficientSet,
    config: SolverConfig,
    paths: Sequence[WienerPath | None],
    ds: Sequence[float],
    m: int = 1,
    threads: int = 1,
) -> FreezeRateResult:
    """Freeze error against block length d, one simulation per path reused for every d."""
    cfg = replace(config, record_stride=1)
    trajs = run_ensemble(lambda p: simulate(u0, cs, cfg, p), list(paths), threads)
    means, ses = [], []
    for d in ds:
        sched = FreezeSchedule(d)
        vals = [freeze_error_path(tr, sched, m) for tr in trajs]
        means.append(float(np.mean(vals)))
        ses.append(jackknife_stderr(vals))
    return FreezeRateResult(list(ds), means, ses, fit_loglog(ds, means), m)


# ---------------------------------------------------------------------------
# Khasminskii block terms


def _grad_norm(u: DivFreeField) -> float:
    return float(np.sqrt(VOL_FACTOR * np.sum(u.grid.k2 * np.abs(u.coeffs) ** 2)))


def _f_rate(f, u: DivFreeField, T: float) -> float:
    """Envelope of (1/T)|| int_t^{t+T} (f(s,u) - f*(u)) ds || for the built-in drifts."""
    if isinstance(f, LinearDrift):
        out = (2 * abs(f.beta) / (abs(f.omega) * T) if f.beta else 0.0) * u.norm(0)
        if f.forcing_field is not None:
            out += f.forcing.rate(T) * f.forcing_field.norm(0)
        return out
    if isinstance(f, OsgoodDrift):
        out = f.strength.rate(T) * f.h(f.shell_part(u)).norm(0)
        if f.forcing_field is not None:
            out += f.forcing.rate(T) * f.forcing_field.norm(0)
        return out
    return float("nan")


def _eta_rate(eta, T: float) -> float:
    if isinstance(eta, Oscillation):
        return eta.rate(T)
    return empirical_average_eta(eta, 0.0, T)[1]


def _scalar_block(fn, a, b) -> float:
    return float(integrate.quad(fn, a, b, epsabs=1e-14, epsrel=1e-12, limit=400)[0])


@dataclass
class BlockDiagnostic:
    d: float
    epsilon: float
    columns: list[str]
    rows: list[list[float]]

    def column(self, name: str) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([r[j] for r in self.rows])

    def max_ratio(self, term: str) -> float:
        """max over blocks of term / envelope (0 when every term vanishes)."""
        t, e = self.column(f"{term}_term"), self.column(f"{term}_envelope")
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(t == 0, 0.0, t / e)
        return float(np.nanmax(r)) if r.size else 0.0


def khasminskii_block_diagnostic(
    traj_star: Trajectory,
    cs: CoefficientSet,
    d: float,
    epsilon: float,
    profile: TamingProfile,
    averaged: AveragedSet | None = None,
) -> BlockDiagnostic:
    """Per-block oscillation terms along an averaged trajectory and their envelopes.

    For block [nd, (n+1)d) with u = u*(nd):
      eta1 term  |int (eta1(s/eps) - eta1*) ds| * ||grad u||, envelope d R1(d/eps) ||grad u||
      eta2 term  |int (eta2(s/eps) - eta2*) ds| * ||S2 u||,   envelope d R2(d/eps) ||S2 u||
      f term     ||int (f(s/eps, u) - f*(u)) ds||,            envelope d R_f(d/eps; u)
    with S2 u the projected convection plus taming.
    """
    sched = FreezeSchedule(d)
    avg = averaged if averaged is not None else build_averaged(cs, traj_star.fields[0].grid)
    times = np.asarray(traj_star.record_times)
    T = float(times[-1] - times[0])
    n_blocks = sched.n_blocks(T)
    starts = times[0] + d * np.arange(n_blocks)
    e1, e2 = avg.eta1_star, avg.eta2_star
    cs_eps = oscillate(cs, epsilon)
    slow = d / epsilon
    R1, R2 = _eta_rate(cs.eta1, slow), _eta_rate(cs.eta2, slow)
    rows = []
    for n, a in enumerate(starts):
        i = int(np.argmin(np.abs(times - a)))
        if abs(times[i] - a) > 1e-9:
            raise ValueError(f"block start {a} is not on the recording mesh")
        u = traj_star.fields[i]
        b = a + d
        gu = _grad_norm(u)
        s2 = (convection(u) + taming_term(u, profile)).norm(0)
        i1 = abs(_scalar_block(lambda s: float(cs_eps.eta1(s)) - e1, a, b))
        i2 = abs(_scalar_block(lambda s: float(cs_eps.eta2(s)) - e2, a, b))
        fs = avg.f_star(u)
        if _time_independent(cs.f):
            fterm = 0.0
        else:
            vec = integrate.quad_vec(
                lambda s: np.concatenate([(cs_eps.f(s, u) - fs).coeffs.real.ravel(),
                                          (cs_eps.f(s, u) - fs).coeffs.imag.ravel()]),
                a, b, epsabs=1e-14, epsrel=1e-10,
            )[0]
            half = vec.size // 2
            c = (vec[:half] + 1j * vec[half:]).reshape(u.coeffs.shape)
            fterm = DivFreeField(u.grid, c).norm(0)
        rows.append([n, a, i1 * gu, d * R1 * gu, i2 * s2, d * R2 * s2, fterm, d * _f_rate(cs.f, u, slow)])
    cols = ["block", "t_start", "eta1_term", "eta1_envelope", "eta2_term", "eta2_envelope",
            "f_term", "f_envelope"]
    return BlockDiagnostic(d, epsilon, cols, rows)
