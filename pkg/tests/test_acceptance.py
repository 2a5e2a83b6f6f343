"""Acceptance gate: ten criteria at their stated sizes, tolerances and time limits.

Each test prints one ``[ACCEPTANCE] n ... PASS/FAIL`` line. Run alone with
``pytest tests/test_acceptance.py -v -s`` (about five minutes on one core).
"""

import csv
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from tamedns.cli import run
from tamedns.coefficients import builtin_family
from tamedns.config import load_config
from tamedns.field import VOL_FACTOR, DivFreeField, TorusGrid, leray_project, random_field
from tamedns.integrator import SolverConfig, ensemble_paths, moment_estimator, simulate
from tamedns.operators import (
    TamingProfile,
    TransportMode,
    TransportNoiseSpec,
    convection,
    psi,
    psi_prime,
    stokes,
    taming_term,
    transport_noise_apply,
)

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def verdict(capsys):
    def emit(n, title, ok, elapsed, limit, detail=""):
        ok = bool(ok) and elapsed < limit
        with capsys.disabled():
            print(f"\n[ACCEPTANCE] {n:2d} {title}: {'PASS' if ok else 'FAIL'} "
                  f"({elapsed:.1f} s / limit {limit:.0f} s) {detail}")
        assert ok, f"criterion {n} failed: {detail} ({elapsed:.1f} s, limit {limit} s)"

    return emit


def l2(c):
    return np.sqrt(np.sum(np.abs(c) ** 2))


def h0_inner(a, b):
    return float(VOL_FACTOR * np.real(np.sum(a * np.conj(b))))


def read_csv(path):
    rows = list(csv.DictReader(open(path)))
    return rows, {k: np.array([float(r[k]) for r in rows]) for k in rows[0] if k != "config_hash"}


_demo_runs = {}


def demo(tmp_root, stem):
    """Run a shipped config once per session through the CLI runner."""
    if stem not in _demo_runs:
        out = tmp_root / "first" / stem
        t0 = time.perf_counter()
        code = run(load_config(CONFIGS / f"{stem}.yaml"), out, echo=lambda s: None)
        _demo_runs[stem] = (out, time.perf_counter() - t0, code)
    return _demo_runs[stem]


@pytest.fixture(scope="session")
def demo_root(tmp_path_factory):
    return tmp_path_factory.mktemp("demos")


# 1 -------------------------------------------------------------------------


def test_structural_invariants(verdict):
    g = TorusGrid(16)
    rng = np.random.default_rng(101)
    prof = TamingProfile(1.0, 1.0)
    spec = TransportNoiseSpec(2, (TransportMode(0, (0, 0, 0), (0.1, -0.2, 0.05)),
                                  TransportMode(1, (1, 0, 1), (0, 0.3, 0), "sin", 1.0, 0.5, 2.0)))
    worst = {"idem": 0.0, "adj": 0.0, "div": 0.0, "skew": 0.0}
    t0 = time.perf_counter()
    for i in range(1000):
        amp = 10 ** rng.uniform(-2, 2)
        a = amp * (rng.standard_normal((3,) + g.shape) + 1j * rng.standard_normal((3,) + g.shape))
        b = rng.standard_normal((3,) + g.shape) + 1j * rng.standard_normal((3,) + g.shape)
        pa, pb = leray_project(a, g).coeffs, leray_project(b, g).coeffs
        worst["idem"] = max(worst["idem"], l2(leray_project(pa, g).coeffs - pa) / l2(pa))
        lhs, rhs = np.sum(pa * np.conj(b)), np.sum(a * np.conj(pb))
        worst["adj"] = max(worst["adj"], abs(lhs - rhs) / (l2(a) * l2(b)))

        u = random_field(g, rng, amplitude=amp)
        conv = convection(u)
        outs = [DivFreeField(g, pa), stokes(u), conv, taming_term(u, prof)] + transport_noise_apply(spec, 0.1 * i, u)
        for o in outs:
            n = o.norm(0)
            if n > 0:
                worst["div"] = max(worst["div"], o.divergence_defect() / n)
        grad = np.sqrt(u.norm(1) ** 2 - u.norm(0) ** 2)
        worst["skew"] = max(worst["skew"], abs(h0_inner(conv.coeffs, u.coeffs)) / (u.norm(0) ** 2 * grad))
    elapsed = time.perf_counter() - t0
    ok = worst["idem"] <= 1e-13 and worst["adj"] <= 1e-13 and worst["div"] <= 1e-12 and worst["skew"] <= 1e-10
    verdict(1, "structural invariants (1000 fields, 16^3)", ok, elapsed, 30,
            " ".join(f"{k}={v:.1e}" for k, v in worst.items()))


# 2 -------------------------------------------------------------------------


def test_taming_function(verdict):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst_val, worst_fd, bound_ok = 0.0, 0.0, True
    h = 1e-3
    for N, nu in [(1.0, 1.0), (10.0, 0.5), (0.3, 2.0)]:
        p = TamingProfile(N, nu)
        z = np.concatenate([rng.uniform(0, 3 * (N + 1), 10**4 - 4), [0.0, N, N + 0.5, N + 1]])
        s = np.clip(z - N, 0, 1)
        exact = np.where(z <= N, 0.0, np.where(z >= N + 1, (z - N) / nu, (6 * s**3 - 8 * s**4 + 3 * s**5) / nu))
        worst_val = max(worst_val, np.max(np.abs(psi(p, z) - exact) / np.maximum(1.0, np.abs(exact))))
        d = psi_prime(p, z)
        bound_ok &= bool(np.all(d >= 0) and np.all(d <= 2 / min(nu, 1.0)))
        # fourth-order central differences on stencils that stay on one smooth piece
        smooth = (np.abs(z - N) > 2 * h) & (np.abs(z - N - 1) > 2 * h) & (z > 2 * h)
        zs = z[smooth]
        fd = (psi(p, zs - 2 * h) - 8 * psi(p, zs - h) + 8 * psi(p, zs + h) - psi(p, zs + 2 * h)) / (12 * h)
        worst_fd = max(worst_fd, np.max(np.abs(fd - d[smooth])))
    elapsed = time.perf_counter() - t0
    ok = worst_val <= 1e-14 and bound_ok and worst_fd <= 1e-8
    verdict(2, "taming function (3 x 10^4 samples)", ok, elapsed, 5,
            f"values={worst_val:.1e} fd={worst_fd:.1e} bound={'ok' if bound_ok else 'violated'}")


# 3 -------------------------------------------------------------------------


def test_oracle_equivalence(verdict):
    g = TorusGrid(8)
    rng = np.random.default_rng(303)
    t = 0.37
    spec = TransportNoiseSpec(3, (
        TransportMode(0, (0, 0, 0), (0.2, 0.1, -0.3)),
        TransportMode(1, (1, 0, 0), (0, 0.2, 0.1), "cos", mean=1.0, amp=0.5, omega=3.0),
        TransportMode(1, (0, 2, -1), (0.3, 0, 0), "sin"),
        TransportMode(2, (1, 1, 1), (1, -1, 0), "sin", mean=0.5, amp=0.2),
    ))
    K = oracles.transport_mode_coefficients(
        [(m.column, m.k, m.direction, m.kind, m.amplitude(t)) for m in spec.modes], spec.n_columns)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(20):
        u = random_field(g, rng, amplitude=10 ** rng.uniform(-1, 1))
        ref = oracles.convolution_convection(u.coeffs, 8)
        worst = max(worst, np.max(np.abs(convection(u).coeffs - ref)) / np.max(np.abs(ref)))
        refs = oracles.convolution_transport(K, u.coeffs, 8)
        for out, r in zip(transport_noise_apply(spec, t, u), refs):
            worst = max(worst, np.max(np.abs(out.coeffs - r)) / np.max(np.abs(r)))
    elapsed = time.perf_counter() - t0
    verdict(3, "oracle equivalence (20 fields, 8^3)", worst <= 1e-10, elapsed, 120, f"max rel={worst:.1e}")


# 4 -------------------------------------------------------------------------


def test_energy_dissipation(verdict):
    g = TorusGrid(16)
    cs = builtin_family("zero", g, {"J": 0})
    prof = TamingProfile(1.0, 1.0)
    cfg = SolverConfig(dt=1e-3, T=2.0, profile=prof, record_stride=10**9)
    rng = np.random.default_rng(404)
    worst_increase, min_taming, active = -np.inf, np.inf, 0
    t0 = time.perf_counter()
    for _ in range(20):
        u0 = random_field(g, rng, amplitude=rng.uniform(5, 40))
        tam = []

        def watch(i, t, u, parts):
            tam.append(h0_inner(parts["taming"], u.coeffs))

        tr = simulate(u0, cs, cfg, observer=watch)
        assert tr.h0.size == 2001
        worst_increase = max(worst_increase, float(np.max(np.diff(tr.h0))))
        min_taming = min(min_taming, min(tam))
        active += sum(v > 0 for v in tam)
    elapsed = time.perf_counter() - t0
    ok = worst_increase <= 0 and min_taming >= 0 and active > 0
    verdict(4, "energy dissipation (20 ICs, 16^3, 2000 steps)", ok, elapsed, 120,
            f"max dH0={worst_increase:.1e} min<taming,u>={min_taming:.1e} active steps={active}")


# 5 -------------------------------------------------------------------------


def test_moment_bound_stability(verdict):
    g = TorusGrid(8)
    cs = builtin_family("linear", g, {
        "J": 2, "forcing": 1.0, "sigma": 0.5, "g_lambda": 0.5, "g_additive": 0.5,
        "transport": [{"column": 1, "k": [0, 0, 1], "direction": [0.05, 0, 0]}],
    })
    # small initial data, so the sup is reached late in the run rather than at t = 0
    u0 = random_field(g, np.random.default_rng(505), amplitude=0.2)
    prof = TamingProfile(1.0, 1.0)
    fine = ensemble_paths(505, 0.005, 1.0, 2, 32)
    t0 = time.perf_counter()
    est, t_sup = {}, {}
    for dt, factor in ((0.01, 2), (0.005, 1)):
        cfg = SolverConfig(dt=dt, T=1.0, profile=prof, record_stride=10**9)
        trs = [simulate(u0, cs, cfg, p.coarsen(factor)) for p in fine]
        est[dt] = moment_estimator(trs, p=1.0).sup_moment
        t_sup[dt] = float(np.mean([tr.times[np.argmax(tr.h1)] for tr in trs]))
    elapsed = time.perf_counter() - t0
    rel = abs(est[0.01] - est[0.005]) / est[0.005]
    verdict(5, "moment bound stable under dt halving (32 paths)", rel < 0.1 and min(t_sup.values()) > 0, elapsed,
            600, f"E sup ||u||^2_H1: {est[0.01]:.6g} vs {est[0.005]:.6g} (rel {rel:.3f}, "
            f"mean argmax t={t_sup[0.005]:.2f})")


# 6 -------------------------------------------------------------------------


def test_uniqueness_contraction(verdict, demo_root):
    out, elapsed, code = demo(demo_root, "probe_uniqueness")
    rows, col = read_csv(out / "probe_uniqueness.csv")
    dist = col["sup_dist_sq"]
    ok = code == 0 and bool(np.all(np.diff(dist) < 0)) and bool(np.all(col["gamma_slack"] >= -1e-9))
    verdict(6, "uniqueness contraction (Osgood, delta ladder)", ok, elapsed, 900,
            f"sup dist^2={np.array2string(dist, precision=3)} min slack={col['gamma_slack'].min():.2e}")


# 7 -------------------------------------------------------------------------


def test_freeze_rate(verdict, demo_root):
    out, elapsed, code = demo(demo_root, "freeze_rate")
    rows, col = read_csv(out / "freeze_rate.csv")
    assert list(col["d"]) == [2.0**-2, 2.0**-4, 2.0**-6]
    exponent = col["fitted_exponent"][0]
    verdict(7, "freeze rate exponent (16 paths)", code == 0 and exponent >= 0.4, elapsed, 600,
            f"exponent={exponent:.3f}")


# 8, 9 ----------------------------------------------------------------------


def _sweep_ok(col):
    err, se = col["err_mean"], col["err_stderr"]
    mono = bool(np.all(err[1:] <= err[:-1] + 2 * np.sqrt(se[1:] ** 2 + se[:-1] ** 2)))
    quarter = bool(err[-1] <= 0.25 * err[0])
    excl = col["excluded"].sum() < 0.01 * col["n_paths"].sum()
    return mono, quarter, excl


def test_averaging_convergence_h0(verdict, demo_root):
    out, elapsed, code = demo(demo_root, "averaging_sweep")
    rows, col = read_csv(out / "averaging_sweep.csv")
    assert list(col["epsilon"]) == [0.5, 0.1, 0.02] and np.allclose(col["d"], np.sqrt(col["epsilon"]))
    assert np.all(col["n_paths"] + col["excluded"] == 16)
    mono, quarter, excl = _sweep_ok(col)
    verdict(8, "H0 averaging sweep", code == 0 and mono and quarter and excl, elapsed, 1200,
            f"err={np.array2string(col['err_mean'], precision=3)}")


def test_averaging_convergence_h1(verdict, demo_root):
    cfg = load_config(CONFIGS / "averaging_sweep_h1.yaml")
    base = load_config(CONFIGS / "averaging_sweep.yaml")
    # same sweep as criterion 8 with eta = 1 and K = 0
    p, q = dict(cfg.family.params), dict(base.family.params)
    for key in ("eta1", "eta2", "transport"):
        q.pop(key)
    assert p == q and cfg.experiment.params["epsilons"] == base.experiment.params["epsilons"]
    out, elapsed, code = demo(demo_root, "averaging_sweep_h1")
    rows, col = read_csv(out / "averaging_sweep_h1.csv")
    mono, quarter, excl = _sweep_ok(col)
    strict = bool(np.all(np.diff(col["err_mean"]) < 0))
    verdict(9, "H1 averaging sweep", code == 0 and strict and mono and excl, elapsed, 1200,
            f"err={np.array2string(col['err_mean'], precision=3)}")


# 10 ------------------------------------------------------------------------


def test_reproducibility(verdict, demo_root):
    stems = sorted(p.stem for p in CONFIGS.glob("*.yaml"))
    for stem in stems:
        demo(demo_root, stem)
    t0 = time.perf_counter()
    mismatched = []
    for stem in stems:
        first = _demo_runs[stem][0]
        again = demo_root / "second" / stem
        run(load_config(CONFIGS / f"{stem}.yaml"), again, echo=lambda s: None)
        for f in sorted(first.glob("*.csv")):
            if f.read_bytes() != (again / f.name).read_bytes():
                mismatched.append(f"{stem}/{f.name}")
    elapsed = time.perf_counter() - t0
    verdict(10, f"byte-identical CSV on re-run ({len(stems)} configs)", not mismatched, elapsed, 3600,
            f"mismatched={mismatched}" if mismatched else "")
