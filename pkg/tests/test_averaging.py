import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tamedns.averaging import (
    AveragingError,
    ExperimentReport,
    FreezeSchedule,
    SweepPlan,
    averaging_sweep,
    build_averaged,
    check_sweep_hypotheses,
    fit_loglog,
    freeze,
    freeze_error,
    freeze_rate,
    freeze_values,
    khasminskii_block_diagnostic,
    monotone_within,
)
from tamedns.coefficients import CoefficientSet, LinearDrift, ZeroDiffusion, builtin_family, taylor_green_field
from tamedns.field import TorusGrid, random_field, single_mode
from tamedns.integrator import SolverConfig, Trajectory, WienerPath, simulate
from tamedns.operators import TamingProfile, TransportNoiseSpec

PROFILE = TamingProfile(1.0, 1.0)


@pytest.fixture(scope="module")
def grid():
    return TorusGrid(8)


def decaying_mode(grid, lam, T, h):
    """Trajectory u(t) = exp(-lam t) e on a mesh of width h, with ||e||_{H^0} = 1."""
    e = single_mode(grid, (1, 0, 0), (0, 1, 0))
    e = e * (1.0 / e.norm(0))
    t = np.arange(int(round(T / h)) + 1) * h
    fields = [e * np.exp(-lam * s) for s in t]
    n = np.exp(-lam * t)
    return Trajectory(t, n, n, n, np.zeros_like(t), t, fields, h)


def freeze_error_exact(lam, d, T):
    total = 0.0
    for n in range(int(round(T / d))):
        a = np.exp(-lam * n * d)
        total += a * a * ((1 - np.exp(-2 * lam * d)) / (2 * lam) - 2 * (1 - np.exp(-lam * d)) / lam + d)
    return total


# freezing -----------------------------------------------------------------


def test_freeze_constant_trajectory_unchanged(grid):
    tr = decaying_mode(grid, 0.0, 1.0, 1 / 16)
    fr = freeze(tr, FreezeSchedule(0.25))
    assert all(np.array_equal(a.coeffs, b.coeffs) for a, b in zip(fr.fields, tr.fields))
    assert freeze_error(tr, FreezeSchedule(0.25), m=0) == 0.0


def test_freeze_long_block_holds_initial_value(grid):
    tr = decaying_mode(grid, 1.0, 0.5, 1 / 16)
    fr = freeze(tr, FreezeSchedule(1.0))
    assert all(np.array_equal(f.coeffs, tr.fields[0].coeffs) for f in fr.fields)
    assert np.all(fr.h0 == tr.h0[0])


def test_freeze_staircase_and_idempotence(grid):
    t = np.linspace(0, 1, 17)
    sched = FreezeSchedule(0.25)
    stair = freeze_values(t, t, sched)
    assert np.count_nonzero(np.diff(stair)) == 4
    assert np.array_equal(np.unique(stair), [0, 0.25, 0.5, 0.75, 1.0])
    assert np.array_equal(freeze_values(t, stair, sched), stair)
    tr = decaying_mode(grid, 1.0, 1.0, 1 / 16)
    once = freeze(tr, sched)
    twice = freeze(once, sched)
    assert all(np.array_equal(a.coeffs, b.coeffs) for a, b in zip(once.fields, twice.fields))


def test_freeze_rejects_off_mesh_blocks(grid):
    tr = decaying_mode(grid, 1.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        freeze(tr, FreezeSchedule(0.25))
    with pytest.raises(ValueError):
        FreezeSchedule(1.5)


@pytest.mark.parametrize("lam,d", [(1.0, 0.25), (3.0, 0.0625), (0.5, 0.5)])
def test_freeze_error_matches_closed_form(grid, lam, d):
    T = 1.0
    tr = decaying_mode(grid, lam, T, 2.0**-10)
    assert freeze_error(tr, FreezeSchedule(d), m=0) == pytest.approx(freeze_error_exact(lam, d, T), abs=1e-8)
    # single mode |k|^2 = 1, so the H^1 error doubles
    assert freeze_error(tr, FreezeSchedule(d), m=1) == pytest.approx(2 * freeze_error_exact(lam, d, T), abs=2e-8)


def test_freeze_rate_of_smooth_path_is_two(grid):
    cs = builtin_family("zero", grid, {"J": 0})
    u0 = taylor_green_field(grid, 0.5)
    cfg = SolverConfig(dt=2.0**-8, T=1.0, profile=PROFILE)
    res = freeze_rate(u0, cs, cfg, [None], [2.0**-2, 2.0**-4, 2.0**-6], m=1)
    # deterministic smooth path: error ~ d^2
    assert res.exponent == pytest.approx(2.0, abs=0.15)
    assert res.report().passed


def test_freeze_rate_noise_dominated(grid):
    # strong additive noise: the O(d) Brownian part dominates and the exponent drops toward 1
    cs = builtin_family("linear", grid, {"J": 2, "sigma": 1.0, "g_additive": 1.0})
    u0 = random_field(grid, np.random.default_rng(9))
    dt = 2.0**-8
    cfg = SolverConfig(dt=dt, T=1.0, profile=PROFILE)
    paths = [WienerPath(5, dt, 1.0, 2, stream=i) for i in range(8)]
    res = freeze_rate(u0, cs, cfg, paths, [2.0**-2, 2.0**-4, 2.0**-6], m=1)
    assert 0.5 <= res.exponent <= 1.5


def test_fit_loglog_and_monotone_within():
    assert fit_loglog([1, 2, 4], [3, 12, 48]) == pytest.approx(2.0)
    assert np.isnan(fit_loglog([1, 2], [0, 1]))
    assert monotone_within([1.0, 1.05, 0.5], [0.1, 0.1, 0.1])
    assert not monotone_within([1.0, 2.0], [0.1, 0.1])


# averaged coefficients ----------------------------------------------------


def test_build_averaged_analytic(grid):
    cs = builtin_family("linear", grid, {"eta1": {"mean": 1.0, "amp": 0.5}, "beta": 1.0})
    avg = build_averaged(cs, grid)
    assert avg.eta1_star == 1.0 and avg.provenance["eta1"] == "analytic"
    u = taylor_green_field(grid)
    assert np.allclose(avg.f_star(u).coeffs, (u * -0.5).coeffs)
    star = avg.as_coefficients(cs)
    assert star.is_time_independent


def test_build_averaged_empirical_eta(grid):
    base = builtin_family("zero", grid, {"J": 0})
    cs = CoefficientSet(lambda t: 1.0 + 0.5 * np.sin(t), base.eta2, base.f, base.g, base.transport,
                        (0.5, 1.5, 1.0, 1.0))
    avg = build_averaged(cs, grid)
    assert avg.provenance["eta1"] == "empirical"
    assert avg.eta1_star == pytest.approx(1.0, abs=1e-4)
    assert avg.rates["eta1"][-1] < avg.rates["eta1"][0]


def test_build_averaged_empirical_f(grid):
    base = builtin_family("zero", grid, {"J": 0})
    drift = LinearDrift(0.0, 1.0, 1.0)
    drift_callable = lambda t, u: drift(t, u)  # hide the analytic average
    cs = CoefficientSet(base.eta1, base.eta2, drift_callable, ZeroDiffusion(0), TransportNoiseSpec.zero(0),
                        (1, 1, 1, 1))
    avg = build_averaged(cs, grid, windows=(10.0, 40.0))
    assert avg.provenance["f"] == "empirical"
    u = taylor_green_field(grid)
    assert avg.f_star(u).norm(0) <= 2 * u.norm(0) / 40.0 + 1e-12


def test_build_averaged_refuses_oscillating_noise(grid):
    cs = builtin_family("linear", grid, {"sigma": {"mean": 0.3, "amp": 0.2}, "g_lambda": 1.0})
    with pytest.raises(AveragingError):
        build_averaged(cs, grid)
    assert build_averaged(cs, grid, strict=False).provenance["g"].endswith("(non-convergent)")
    osc_K = builtin_family("linear", grid, {"J": 1, "transport": [
        {"column": 0, "k": [0, 1, 0], "direction": [0.05, 0, 0], "mean": 1.0, "amp": 0.5}]})
    with pytest.raises(AveragingError):
        build_averaged(osc_K, grid)


# sweeps -------------------------------------------------------------------


def test_sweep_hypotheses(grid):
    wide = builtin_family("linear", grid, {"eta2": {"mean": 1.0, "amp": 0.6}})
    with pytest.raises(AveragingError):
        check_sweep_hypotheses(SweepPlan((0.1,), 0.1, 0.01, 1, m=0), wide)
    osc = builtin_family("linear", grid, {"eta1": {"mean": 1.0, "amp": 0.2}})
    with pytest.raises(AveragingError):
        check_sweep_hypotheses(SweepPlan((0.1,), 0.1, 0.01, 1, m=1), osc)
    K = builtin_family("linear", grid, {"J": 1, "transport": [{"column": 0, "k": [0, 0, 0],
                                                             "direction": [0.05, 0, 0]}]})
    with pytest.raises(AveragingError):
        check_sweep_hypotheses(SweepPlan((0.1,), 0.1, 0.01, 1, m=1), K)
    check_sweep_hypotheses(SweepPlan((0.1,), 0.1, 0.01, 1, m=1), builtin_family("linear", grid))
    with pytest.raises(ValueError):
        SweepPlan((0.1, 0.5), 0.1, 0.01, 1)


def test_sweep_with_epsilon_free_coefficients_is_zero(grid):
    cs = builtin_family("linear", grid, {"sigma": 0.3, "g_lambda": 0.5})
    u0 = random_field(grid, np.random.default_rng(0), amplitude=0.5)
    rep = averaging_sweep(SweepPlan((0.5, 0.1), 0.2, 0.01, 3), cs, u0, PROFILE, config_hash="h")
    assert np.all(rep.column("err_mean") <= 1e-24)
    assert all(r[-1] == "h" for r in csv_rows(rep))


def csv_rows(rep):
    return [line.split(",") for line in rep.to_csv().strip().splitlines()[1:]]


def test_sweep_initial_data_ladder(grid):
    cs = builtin_family("linear", grid, {"sigma": 0.3, "g_lambda": 0.5})
    u0 = random_field(grid, np.random.default_rng(1), amplitude=0.5)
    e = taylor_green_field(grid)
    e = e * (1.0 / e.norm(0))
    errs = []
    for delta in (1e-2, 1e-3):
        rep = averaging_sweep(SweepPlan((0.1,), 0.2, 0.01, 2), cs, u0 + e * delta, PROFILE, u0_star=u0)
        errs.append(rep.column("err_mean")[0])
    # dissipative and contracting: the sup sits at t = 0
    assert errs[0] == pytest.approx(1e-4, rel=1e-6)
    assert errs[1] == pytest.approx(1e-6, rel=1e-6)


def test_report_outputs(tmp_path):
    rep = ExperimentReport("demo", ["a", "b"], [[0.1, 1], [1 / 3, 2]], "abc", {"ok": True})
    text = rep.to_csv()
    assert text.splitlines()[0] == "a,b,config_hash"
    assert "0.33333333333333331" in text
    written = rep.write(tmp_path, wall_time=1.5)
    assert (tmp_path / "demo.csv").read_text() == text
    assert rep.passed and "ok" in rep.summary()
    assert written


# block diagnostic ---------------------------------------------------------


def test_block_diagnostic_constant_coefficients(grid):
    cs = builtin_family("linear", grid, {"J": 0})
    u0 = random_field(grid, np.random.default_rng(2), amplitude=0.5)
    tr = simulate(u0, cs, SolverConfig(dt=0.01, T=0.4, profile=PROFILE, record_stride=1))
    diag = khasminskii_block_diagnostic(tr, cs, 0.1, 0.01, PROFILE)
    for term in ("eta1", "eta2", "f"):
        assert np.all(diag.column(f"{term}_term") == 0) or diag.max_ratio(term) == 0
        assert diag.max_ratio(term) == 0


def test_block_diagnostic_sine_within_envelope(grid):
    cs = builtin_family("linear", grid, {"J": 0, "eta1": {"mean": 1.0, "amp": 0.5},
                                         "eta2": {"mean": 1.0, "amp": 0.3}, "beta": 0.5})
    avg = build_averaged(cs, grid)
    star = avg.as_coefficients(cs)
    u0 = random_field(grid, np.random.default_rng(3), amplitude=0.5)
    tr = simulate(u0, star, SolverConfig(dt=0.01, T=0.5, profile=PROFILE))
    for eps in (0.01, 0.003):
        diag = khasminskii_block_diagnostic(tr, cs, 0.1, eps, PROFILE, averaged=avg)
        for term in ("eta1", "eta2", "f"):
            assert diag.max_ratio(term) <= 1.0 + 1e-9


@settings(max_examples=20, deadline=None)
@given(k=st.integers(0, 6), n=st.integers(1, 40))
def test_freeze_values_piecewise_constant(k, n):
    d = 2.0**-k
    h = d / 4
    t = np.arange(n + 1) * h
    vals = np.sin(t)
    fr = freeze_values(t, vals, FreezeSchedule(d))
    starts = np.floor(t / d + 1e-9) * d
    assert np.allclose(fr, np.sin(starts), rtol=0, atol=1e-15)
