"""Semi-implicit Euler-Maruyama integration of the truncated tamed system.

The state lives on the two-thirds band of the grid (the Galerkin truncation);
noise enters through a truncated Wiener process with ``J`` scalar components,
drawn counter-based so any increment can be regenerated from (seed, stream, step).
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .coefficients import CoefficientSet, ModulusOfContinuity, osgood_control
from .field import VOL_FACTOR, DivFreeField, TorusGrid, project_coeffs
from .operators import (
    TamingProfile,
    convection_from_physical,
    physical_state,
    taming_from_physical,
    transport_from_physical,
    u_grad_u_sq,
)

SCHEMES = ("semi-implicit", "explicit-tamed")


class BlowUpError(RuntimeError):
    """Non-finite state; carries the step index and the trajectory up to that step."""

    def __init__(self, step: int, trajectory: Trajectory | None = None):
        super().__init__(f"non-finite state produced at step {step}")
        self.step = step
        self.trajectory = trajectory


class MeshMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class WienerPath:
    """Increments of a J-dimensional Brownian motion on a uniform mesh.

    Base increments live on a mesh of width ``base_dt``; a path with ``stride``
    s reports sums of s consecutive base increments, so coarse and fine paths
    built from one (seed, stream) are coupled exactly.
    """

    seed: int
    base_dt: float
    T: float
    J: int
    stream: int = 0
    stride: int = 1

    def __post_init__(self):
        if not (self.base_dt > 0 and self.T > 0):
            raise ValueError("dt and T must be positive")
        if self.J < 0 or self.stride < 1:
            raise ValueError("J must be >= 0 and stride >= 1")

    @property
    def dt(self) -> float:
        return self.base_dt * self.stride

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def coarsen(self, factor: int) -> WienerPath:
        return replace(self, stride=self.stride * int(factor))

    def for_stream(self, stream: int) -> WienerPath:
        return replace(self, stream=int(stream))

    def base_increment(self, n: int) -> np.ndarray:
        return _philox_normals(self.seed, self.stream, n, self.J) * np.sqrt(self.base_dt)

    def increment(self, n: int) -> np.ndarray:
        if self.stride == 1:
            return self.base_increment(n)
        out = np.zeros(self.J)
        for i in range(n * self.stride, (n + 1) * self.stride):
            out += self.base_increment(i)
        return out

    def increments(self) -> np.ndarray:
        return np.array([self.increment(n) for n in range(self.n_steps)]).reshape(self.n_steps, self.J)


@lru_cache(maxsize=65536)
def _philox_cached(seed: int, stream: int, n: int, J: int) -> tuple:
    key = np.array([seed % 2**64, stream % 2**64], dtype=np.uint64)
    counter = np.array([0, n, 0, 0], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key, counter=counter))
    return tuple(gen.standard_normal(J))


def _philox_normals(seed, stream, n, J) -> np.ndarray:
    return np.array(_philox_cached(int(seed), int(stream), int(n), int(J)), dtype=float)


# ---------------------------------------------------------------------------
# configuration and records


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    T: float
    profile: TamingProfile
    scheme: str = "semi-implicit"
    M_cut: float | None = None
    R: float = np.inf
    record_stride: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if not self.R > 0:
            raise ValueError(f"stopping radius R must be positive, got {self.R}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")
        if self.M_cut is not None and not self.M_cut > 0:
            raise ValueError("M_cut must be positive when given")
        ratio = self.T / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(ratio, 1.0):
            raise ValueError(f"T={self.T} is not a whole number of steps of dt={self.dt}")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass
class Trajectory:
    """Per-step norms of one run plus strided field snapshots.

    ``h0``, ``h1``, ``h2`` are norms (not squared). ``ugu`` holds
    || |u| |grad u| ||^2_{H^0}. Index i corresponds to time ``times[i]``.
    """

    times: np.ndarray
    h0: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    ugu: np.ndarray
    record_times: np.ndarray
    fields: list
    dt: float
    diverged: bool = False
    blowup_step: int | None = None

    @property
    def int_h2_sq(self) -> np.ndarray:
        """Cumulative int_0^t ||u||_{H^2}^2 ds (left Riemann sums on the step mesh)."""
        return np.concatenate([[0.0], np.cumsum(self.dt * self.h2[:-1] ** 2)])

    @property
    def int_ugu(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.dt * self.ugu[:-1])])

    def final(self) -> DivFreeField:
        return self.fields[-1]

    def to_csv(self, config_hash: str = "") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config_hash", "step", "time", "h0", "h1", "h2", "int_h2_sq", "int_ugu"])
        ih2, iug = self.int_h2_sq, self.int_ugu
        for i, t in enumerate(self.times):
            w.writerow([config_hash, i] + [repr(float(x)) for x in
                        (t, self.h0[i], self.h1[i], self.h2[i], ih2[i], iug[i])])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# stepping


def _cutoff(x: float) -> float:
    """1 on [0, 1], 0 on [2, inf), C^1 smoothstep in between."""
    if x <= 1.0:
        return 1.0
    if x >= 2.0:
        return 0.0
    s = x - 1.0
    return 1.0 - s * s * (3.0 - 2.0 * s)


class _Stepper:
    """Evaluates one step on raw coefficient arrays, reusing physical-space work."""

    def __init__(self, grid: TorusGrid, coeffs: CoefficientSet, config: SolverConfig):
        self.grid, self.cs, self.cfg = grid, coeffs, config
        self.mask = grid.dealias_mask
        self.w1 = grid.weights(1)
        self.w2 = grid.weights(2)
        self._K_static = None
        if coeffs.transport.is_time_independent and not coeffs.transport.is_zero:
            self._K_static = coeffs.transport.physical(grid, 0.0)

    def transport_physical(self, t):
        tr = self.cs.transport
        if tr.is_zero:
            return None
        return self._K_static if self._K_static is not None else tr.physical(self.grid, t)

    def norms(self, c: np.ndarray) -> tuple[float, float, float]:
        a = np.abs(c) ** 2
        s0 = np.sum(a)
        s1 = np.sum(self.w1 * a)
        s2 = np.sum(self.w2 * a)
        return tuple(float(np.sqrt(VOL_FACTOR * s)) for s in (s0, s1, s2))

    def advance(self, c: np.ndarray, t: float, dt: float, dW: np.ndarray, keep: bool = False):
        """Return (next coefficients, || |u||grad u| ||^2 of the current state).

        Nonlinear terms are projected once, together with the update. With
        ``keep`` the unprojected convection and taming arrays are left in
        ``self.parts``.
        """
        g, cs, cfg = self.grid, self.cs, self.cfg
        up, grad = physical_state(g, c)
        ugu = u_grad_u_sq(g, up, grad)
        e1, e2 = float(cs.eta1(t)), float(cs.eta2(t))
        u = DivFreeField(g, c)
        conv = convection_from_physical(g, up, grad, project=False)
        tame = taming_from_physical(g, up, cfg.profile, project=False)
        if keep:
            self.parts = {"convection": conv, "taming": tame}
        explicit = -e2 * (conv + tame)
        if not getattr(cs.f, "is_zero", False):
            explicit = explicit + cs.f(t, u).coeffs
        noise = None
        if cs.J and len(dW):
            cols = np.stack([col.coeffs for col in cs.g_columns(t, u)])
            K = self.transport_physical(t)
            if K is not None:
                cols = cols + transport_from_physical(g, K, grad, project=False)
            noise = np.tensordot(np.asarray(dW, dtype=float), cols, axes=(0, 0))
        if cfg.M_cut is not None:
            chi = _cutoff(self.norms(c)[1] / cfg.M_cut)
            explicit = chi * explicit
            if noise is not None:
                noise = chi * noise
        rhs = c + dt * explicit
        if noise is not None:
            rhs = rhs + noise
        if cfg.scheme == "semi-implicit":
            new = rhs / (1.0 + dt * e1 * g.k2)
        else:
            new = rhs - dt * e1 * g.k2 * c
        new = project_coeffs(g, new * self.mask)
        return new, ugu

    def diagnostics(self, c: np.ndarray) -> float:
        up, grad = physical_state(self.grid, c)
        return u_grad_u_sq(self.grid, up, grad)


def step(
    u: DivFreeField,
    t: float,
    dt: float,
    dW: Sequence[float],
    coeffs: CoefficientSet,
    config: SolverConfig,
    step_index: int = 0,
) -> DivFreeField:
    """One semi-implicit (or explicit-tamed) Euler-Maruyama step."""
    dW = np.asarray(dW, dtype=float)
    if dW.shape != (coeffs.J,):
        raise ValueError(f"dW must have length J={coeffs.J}, got shape {dW.shape}")
    new, _ = _Stepper(u.grid, coeffs, config).advance(u.coeffs, t, dt, dW)
    if not np.all(np.isfinite(new)):
        raise BlowUpError(step_index)
    return DivFreeField(u.grid, new)


def _check_path(path: WienerPath | None, coeffs: CoefficientSet, config: SolverConfig):
    if path is None:
        if coeffs.J:
            raise ValueError("a WienerPath is required when the noise has J > 0 columns")
        return
    if path.J != coeffs.J:
        raise ValueError(f"path has J={path.J}, coefficients expect J={coeffs.J}")
    if not np.isclose(path.dt, config.dt, rtol=1e-12, atol=0):
        raise MeshMismatchError(f"path dt={path.dt} differs from solver dt={config.dt}")
    if path.n_steps < config.n_steps:
        raise MeshMismatchError(f"path horizon {path.T} shorter than T={config.T}")


def _dW(path: WienerPath | None, n: int, J: int) -> np.ndarray:
    return path.increment(n) if path is not None else np.zeros(J)


def simulate(
    u0: DivFreeField,
    coeffs: CoefficientSet,
    config: SolverConfig,
    path: WienerPath | None = None,
    t0: float = 0.0,
    observer: Callable | None = None,
) -> Trajectory:
    """Iterate ``step`` over [t0, t0 + T]; deterministic given (u0, config, path).

    ``observer(i, t, u, parts)`` is called before every step with the current
    state and the unprojected convection/taming arrays evaluated at it.
    """
    _check_path(path, coeffs, config)
    grid = u0.grid
    st = _Stepper(grid, coeffs, config)
    n = config.n_steps
    c = project_coeffs(grid, u0.coeffs * grid.dealias_mask)
    times = t0 + config.dt * np.arange(n + 1)
    h = np.zeros((3, n + 1))
    ugu = np.zeros(n + 1)
    rec_t, rec_f = [times[0]], [DivFreeField(grid, c)]
    h[:, 0] = st.norms(c)

    def partial(upto):
        return Trajectory(times[: upto + 1], h[0, : upto + 1], h[1, : upto + 1], h[2, : upto + 1],
                          ugu[: upto + 1], np.array(rec_t), rec_f, config.dt, True, upto + 1)

    for i in range(n):
        c_new, ugu[i] = st.advance(c, times[i], config.dt, _dW(path, i, coeffs.J), observer is not None)
        if observer is not None:
            observer(i, times[i], DivFreeField(grid, c), st.parts)
        norms = st.norms(c_new) if np.all(np.isfinite(c_new)) else (np.inf,) * 3
        if not np.all(np.isfinite(norms)):
            raise BlowUpError(i, partial(i))
        c = c_new
        h[:, i + 1] = norms
        if (i + 1) % config.record_stride == 0 or i + 1 == n:
            rec_t.append(times[i + 1])
            rec_f.append(DivFreeField(grid, c))
    ugu[n] = st.diagnostics(c)
    return Trajectory(times, h[0], h[1], h[2], ugu, np.array(rec_t), rec_f, config.dt)


@dataclass
class CoupledRun:
    """Lock-step run of two systems on one noise path."""

    times: np.ndarray
    dist_sq: dict[int, np.ndarray]
    h1_a: np.ndarray
    h1_b: np.ndarray
    final_a: DivFreeField
    final_b: DivFreeField
    diverged: bool = False

    def sup_dist_sq(self, m: int = 0, upto: int | None = None) -> float:
        d = self.dist_sq[m]
        return float(np.max(d[: (len(d) if upto is None else upto + 1)]))


def simulate_pair(
    ua: DivFreeField,
    ub: DivFreeField,
    coeffs_a: CoefficientSet,
    coeffs_b: CoefficientSet,
    config: SolverConfig,
    path: WienerPath | None = None,
    t0: float = 0.0,
) -> CoupledRun:
    """Advance two systems with identical increments, tracking H^0 and H^1 distances."""
    _check_path(path, coeffs_a, config)
    _check_path(path, coeffs_b, config)
    grid = ua.grid
    sa, sb = _Stepper(grid, coeffs_a, config), _Stepper(grid, coeffs_b, config)
    n = config.n_steps
    ca = project_coeffs(grid, ua.coeffs * grid.dealias_mask)
    cb = project_coeffs(grid, ub.coeffs * grid.dealias_mask)
    times = t0 + config.dt * np.arange(n + 1)
    d0, d1 = np.zeros(n + 1), np.zeros(n + 1)
    h1a, h1b = np.zeros(n + 1), np.zeros(n + 1)

    def record(i):
        a = np.abs(ca - cb) ** 2
        d0[i] = VOL_FACTOR * np.sum(a)
        d1[i] = VOL_FACTOR * np.sum(sa.w1 * a)
        h1a[i] = sa.norms(ca)[1]
        h1b[i] = sb.norms(cb)[1]

    record(0)
    for i in range(n):
        dW = _dW(path, i, coeffs_a.J)
        ca, _ = sa.advance(ca, times[i], config.dt, dW)
        cb, _ = sb.advance(cb, times[i], config.dt, dW)
        if not (np.all(np.isfinite(ca)) and np.all(np.isfinite(cb))):
            return CoupledRun(times[: i + 1], {0: d0[: i + 1], 1: d1[: i + 1]}, h1a[: i + 1],
                              h1b[: i + 1], DivFreeField(grid, ca), DivFreeField(grid, cb), True)
        record(i + 1)
    return CoupledRun(times, {0: d0, 1: d1}, h1a, h1b, DivFreeField(grid, ca), DivFreeField(grid, cb))


def explicit_stability_dt(
    u: DivFreeField, coeffs: CoefficientSet, profile: TamingProfile, safety: float = 0.5
) -> float:
    """Step-size bound for the explicit-tamed scheme from the stiffest linearised rates.

    Uses the largest retained |k|^2 times sup eta1, plus sup eta2 times
    (Psi_N(sup|u|^2) + 2 sup|u|^2 Psi_N'(sup|u|^2)), plus the advective rate
    sup|u| k_max.
    """
    from .field import sup_norm
    from .operators import psi, psi_prime

    g = u.grid
    kmax2 = float(np.max(g.k2[g.dealias_mask]))
    a1, a2, a3, a4 = coeffs.bounds
    umax = sup_norm(u)
    z = umax**2
    tame = float(psi(profile, z) + 2 * z * psi_prime(profile, z))
    rate = a2 * kmax2 + a4 * (tame + umax * np.sqrt(kmax2))
    return safety * 2.0 / rate


# ---------------------------------------------------------------------------
# stopping times


def first_exceedance(values: np.ndarray, threshold: float) -> int | None:
    idx = np.flatnonzero(np.asarray(values) > threshold)
    return int(idx[0]) if idx.size else None


def tau_R(traj: Trajectory, R: float) -> float | None:
    """First mesh time with ||u||_{H^1} > R."""
    i = first_exceedance(traj.h1, R)
    return None if i is None else float(traj.times[i])


def tau_beta(traj_a: Trajectory, traj_b: Trajectory, beta: float, m: int = 1) -> float | None:
    """First recorded time with ||u_a - u_b||_{H^m} > beta."""
    if m not in (0, 1):
        raise ValueError("tau_beta uses m = 0 or 1")
    ta, tb = np.asarray(traj_a.record_times), np.asarray(traj_b.record_times)
    if ta.shape != tb.shape or not np.allclose(ta, tb, rtol=0, atol=1e-12):
        raise MeshMismatchError("trajectories are recorded on different meshes")
    dist = np.array([(a - b).norm(m) for a, b in zip(traj_a.fields, traj_b.fields)])
    i = first_exceedance(dist, beta)
    return None if i is None else float(ta[i])


# ---------------------------------------------------------------------------
# ensembles and estimators


def run_ensemble(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """Map ``fn`` over ``items`` preserving order (deterministic reduction)."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def jackknife_stderr(values: Sequence[float], stat: Callable = np.mean) -> float:
    v = np.asarray(values, dtype=float)
    n = v.size
    if n < 2:
        return 0.0
    loo = np.array([stat(np.delete(v, i)) for i in range(n)])
    return float(np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))


@dataclass
class MomentEstimate:
    p: float
    n_paths: int
    sup_moment: float
    sup_moment_se: float
    dissipation: float
    dissipation_se: float


def moment_estimator(trajectories: Sequence[Trajectory], p: float = 1.0) -> MomentEstimate:
    """Monte Carlo E sup_t ||u||_{H^1}^{2p} and E int ||u||_{H^1}^{2p-2}(||u||_{H^2}^2 + || |u||grad u| ||^2)."""
    if not trajectories:
        raise ValueError("moment_estimator needs a non-empty ensemble")
    sups, diss = [], []
    for tr in trajectories:
        sups.append(float(np.max(tr.h1 ** (2 * p))))
        integrand = tr.h1 ** (2 * p - 2) * (tr.h2**2 + tr.ugu)
        diss.append(float(np.sum(tr.dt * integrand[:-1])))
    return MomentEstimate(
        p, len(trajectories), float(np.mean(sups)), jackknife_stderr(sups),
        float(np.mean(diss)), jackknife_stderr(diss),
    )


@dataclass
class ProbeResult:
    deltas: list[float]
    sup_dist_sq: list[float]
    sup_dist_sq_se: list[float]
    stopped: list[int]
    n_paths: int
    m: int
    T: float

    def gamma_check(
        self, A: ModulusOfContinuity, c: float = 1.0, fit_on: Sequence[int] = (0,), iota: float = 1e-300
    ):
        """Check Gamma(measured) <= Gamma(c delta^2) + C T on the ladder.

        C is the smallest constant satisfying the rungs listed in ``fit_on``
        (by default the first, largest delta); every rung is then tested with
        it. Returns (c, C, per-rung slack = Gamma(c d^2) + C T - Gamma(meas)).
        """
        rungs = [(d, s) for d, s in zip(self.deltas, self.sup_dist_sq) if d > 0 and s > 0]
        if not rungs:
            raise ValueError("no rung with positive delta and distance")
        iota = min(iota, min(min(s, c * d * d) for d, s in rungs) / 10)
        lhs = [osgood_control(A, iota, s) for d, s in rungs]
        base = [osgood_control(A, iota, c * d * d) for d, s in rungs]
        C = max(max((lhs[i] - base[i]) / self.T for i in fit_on), 0.0)
        slack = [b + C * self.T - l for l, b in zip(lhs, base)]
        return c, C, slack


def uniqueness_probe(
    u0_a: DivFreeField,
    u0_b: DivFreeField,
    coeffs: CoefficientSet,
    config: SolverConfig,
    paths: Sequence[WienerPath | None],
    beta: float,
    deltas: Sequence[float],
    m: int = 0,
    threads: int = 1,
) -> ProbeResult:
    """E sup_{t <= T ^ tau_R ^ tau_beta} ||u_a - u_b||^2_{H^m} over a ladder of initial distances.

    The second initial condition along the ladder is u0_a + delta * e with e the
    unit (H^m) direction of u0_b - u0_a. Both systems share each noise path.
    """
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    diff = u0_b - u0_a
    nd = diff.norm(m)
    if nd == 0:
        raise ValueError("u0_a and u0_b coincide; no perturbation direction")
    direction = diff * (1.0 / nd)
    means, ses, stopped = [], [], []
    for delta in deltas:
        if delta >= beta:
            raise ValueError(f"initial distance {delta} must be below beta={beta}")
        ub = u0_a + direction * delta

        def one(path, ub=ub):
            run = simulate_pair(u0_a, ub, coeffs, coeffs, config, path)
            dist = np.sqrt(run.dist_sq[m])
            stops = [first_exceedance(np.maximum(run.h1_a, run.h1_b), config.R),
                     first_exceedance(dist, beta)]
            stops = [s for s in stops if s is not None]
            upto = min(stops) if stops else None
            return run.sup_dist_sq(m, upto), upto is not None or run.diverged

        res = run_ensemble(one, list(paths), threads)
        vals = [r[0] for r in res]
        means.append(float(np.mean(vals)))
        ses.append(jackknife_stderr(vals))
        stopped.append(int(sum(r[1] for r in res)))
    return ProbeResult(list(deltas), means, ses, stopped, len(paths), m, config.T)


@dataclass
class SelfConvergence:
    dts: list[float]
    rms_error: list[float]
    order: float


def strong_self_convergence(
    u0: DivFreeField,
    coeffs: CoefficientSet,
    config: SolverConfig,
    base_paths: Sequence[WienerPath],
    levels: int = 3,
    threads: int = 1,
) -> SelfConvergence:
    """RMS over paths of ||u_dt(T) - u_{dt/2}(T)||_{H^0} for dt = base*2^l, l = 1..levels.

    ``base_paths`` are the finest-mesh paths; coarser levels are exact coarsenings.
    """
    base_dt = base_paths[0].dt
    finals = {}
    for lev in range(levels + 1):
        factor = 2**lev
        cfg = replace(config, dt=base_dt * factor, record_stride=10**9)
        finals[lev] = run_ensemble(
            lambda p, cfg=cfg, factor=factor: simulate(u0, coeffs, cfg, p.coarsen(factor)).final(),
            list(base_paths), threads,
        )
    dts, errs = [], []
    for lev in range(1, levels + 1):
        e = [(a - b).norm(0) ** 2 for a, b in zip(finals[lev], finals[lev - 1])]
        dts.append(base_dt * 2**lev)
        errs.append(float(np.sqrt(np.mean(e))))
    order = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
    return SelfConvergence(dts, errs, order)


def ensemble_paths(seed: int, dt: float, T: float, J: int, n_paths: int) -> list[WienerPath]:
    return [WienerPath(seed, dt, T, J, stream=i) for i in range(n_paths)]
