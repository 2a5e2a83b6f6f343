"""Coefficient families (eta1, eta2, f, g, K), their time averages and assumption checks."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .field import DivFreeField, TorusGrid, inner_product, single_mode, sobolev_norm_sq
from .operators import TransportNoiseSpec


class QuadratureError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# moduli of continuity


def _log_modulus(r):
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = np.where(r > 0, r * (1.0 - np.log(np.where(r > 0, np.minimum(r, 1.0), 1.0))), 0.0)
    # constant continuation past r = 1 keeps A concave and nondecreasing
    return np.where(r < 1.0, inner, 1.0)


def _linear_modulus(r):
    return np.asarray(r, dtype=float) * 1.0


@dataclass(frozen=True)
class ModulusOfContinuity:
    """Concave nondecreasing A with A(0) = 0; ``osgood`` flags a divergent int dr/A(r)."""

    fn: Callable
    name: str
    concave: bool = True
    increasing: bool = True
    osgood: bool = True

    def __call__(self, r):
        out = self.fn(r)
        return float(out) if np.ndim(out) == 0 else out

    @classmethod
    def linear(cls) -> ModulusOfContinuity:
        return cls(_linear_modulus, "r")

    @classmethod
    def log(cls) -> ModulusOfContinuity:
        return cls(_log_modulus, "r(1-ln r)")

    @classmethod
    def by_name(cls, name: str) -> ModulusOfContinuity:
        table = {"linear": cls.linear, "r": cls.linear, "log": cls.log, "r(1-ln r)": cls.log}
        try:
            return table[name]()
        except KeyError:
            raise ValueError(f"unknown modulus {name!r}; choose from {sorted(table)}") from None


def reciprocal_integral(A: ModulusOfContinuity, delta: float, upper: float = 1.0) -> float:
    """int_delta^upper dr / A(r), computed in the variable x = ln r."""
    val, _ = integrate.quad(
        lambda x: np.exp(x) / A(np.exp(x)), np.log(delta), np.log(upper), epsabs=0, epsrel=1e-11,
        limit=200,
    )
    return val


@dataclass
class ModulusReport:
    zero_at_origin: bool
    nondecreasing: bool
    concave: bool
    osgood_divergent: bool
    reciprocal_integrals: list[float]

    @property
    def passed(self) -> bool:
        return self.zero_at_origin and self.nondecreasing and self.concave and self.osgood_divergent


def check_modulus(A: ModulusOfContinuity, n_mesh: int = 2001) -> ModulusReport:
    """Sampled invariants of A and the Osgood divergence test.

    Divergence is judged on int_delta^1 dr/A over delta = 1e-2 ... 1e-10: every
    increment must be positive and the last one at least 5% of the first. A
    convergent integral such as A(r) = sqrt(r) has geometrically vanishing
    increments and fails.
    """
    r = np.linspace(0.0, 1.0, n_mesh, endpoint=False)
    a = np.asarray(A(r), dtype=float)
    d2 = a[2:] - 2 * a[1:-1] + a[:-2]
    deltas = [10.0**-e for e in range(2, 12, 2)]
    ints = [reciprocal_integral(A, dlt) for dlt in deltas]
    incr = np.diff(ints)
    return ModulusReport(
        zero_at_origin=abs(float(A(0.0))) == 0.0,
        nondecreasing=bool(np.all(np.diff(a) >= -1e-14)),
        concave=bool(np.all(d2 <= 1e-12)),
        osgood_divergent=bool(np.all(incr > 0) and incr[-1] >= 0.05 * incr[0]),
        reciprocal_integrals=ints,
    )


def osgood_control(A: ModulusOfContinuity, iota: float, t: float) -> float:
    """Gamma(t) = int_iota^t ds / (A(s) + s)."""
    if not iota > 0:
        raise ValueError(f"lower limit iota must be positive, got {iota}")
    if not t > 0:
        raise ValueError(f"argument t must be positive, got {t}")
    if t == iota:
        return 0.0
    val, err = integrate.quad(
        lambda x: np.exp(x) / (A(np.exp(x)) + np.exp(x)),
        np.log(iota), np.log(t), epsabs=0, epsrel=1e-12, limit=400,
    )
    return val


# ---------------------------------------------------------------------------
# time profiles


@dataclass(frozen=True)
class Oscillation:
    """t -> mean + amp * sin(omega * t + phase)."""

    mean: float = 1.0
    amp: float = 0.0
    omega: float = 1.0
    phase: float = 0.0

    def __call__(self, t):
        return self.mean + self.amp * np.sin(self.omega * t + self.phase)

    @property
    def lower(self) -> float:
        return self.mean - abs(self.amp)

    @property
    def upper(self) -> float:
        return self.mean + abs(self.amp)

    def average(self) -> float:
        return self.mean

    def rate(self, T: float) -> float:
        """Sharp envelope of (1/T)|int_t^{t+T} (value - mean)| over all t."""
        if self.amp == 0:
            return 0.0
        return 2.0 * abs(self.amp) / (abs(self.omega) * T)

    def rescaled(self, epsilon: float) -> Oscillation:
        return replace(self, omega=self.omega / epsilon)

    @property
    def is_constant(self) -> bool:
        return self.amp == 0


class _Rescaled:
    """Generic t -> fn(t / epsilon) wrapper for user-supplied callables."""

    def __init__(self, fn, epsilon):
        self.fn, self.epsilon = fn, epsilon

    def __call__(self, t, *args):
        return self.fn(t / self.epsilon, *args)


def _rescale(fn, epsilon):
    if hasattr(fn, "rescaled"):
        return fn.rescaled(epsilon)
    return _Rescaled(fn, epsilon)


# ---------------------------------------------------------------------------
# built-in drift / diffusion families


def _shell_modes(grid: TorusGrid, k2max: int = 1) -> np.ndarray:
    return (grid.k2 > 0) & (grid.k2 <= k2max)


def taylor_green_field(grid: TorusGrid, amplitude: float = 1.0) -> DivFreeField:
    """Divergence-free field on the unit shell: (sin x2, sin x3, sin x1) scaled to unit H^0 norm."""
    u = (
        single_mode(grid, (0, 1, 0), (-0.5j, 0, 0))
        + single_mode(grid, (0, 0, 1), (0, -0.5j, 0))
        + single_mode(grid, (1, 0, 0), (0, 0, -0.5j))
    )
    return u * (amplitude / u.norm(0))


@dataclass(frozen=True)
class ZeroDrift:
    is_zero = True

    def __call__(self, t, u: DivFreeField) -> DivFreeField:
        return DivFreeField.zeros(u.grid)

    def rescaled(self, epsilon):
        return self

    def average(self):
        return self

    is_time_independent = True


@dataclass(frozen=True)
class LinearDrift:
    """f(t, u) = (alpha + beta sin(omega t)) u + forcing(t) * B."""

    alpha: float = 0.0
    beta: float = 0.0
    omega: float = 1.0
    forcing: Oscillation = Oscillation(0.0, 0.0)
    forcing_field: DivFreeField | None = None

    def __call__(self, t, u: DivFreeField) -> DivFreeField:
        out = u * (self.alpha + self.beta * np.sin(self.omega * t))
        if self.forcing_field is not None:
            out = out + self.forcing_field * self.forcing(t)
        return out

    def rescaled(self, epsilon):
        return replace(self, omega=self.omega / epsilon, forcing=self.forcing.rescaled(epsilon))

    def average(self):
        return replace(self, beta=0.0, forcing=replace(self.forcing, amp=0.0))

    @property
    def is_time_independent(self) -> bool:
        return self.beta == 0 and self.forcing.is_constant


@dataclass(frozen=True)
class OsgoodDrift:
    """Non-Lipschitz drift acting on the unit shell |k|^2 = 1.

    f(t, u) = s(t) * h(Qu) + forcing(t) * B with Q the projection on the shell and
    h(w) = w * phi(||w||^2),  phi(r) = 0.5 * (1 - ln min(r, 1)) ** exponent.

    With ``exponent=1``, phi = A(r) / (2r) for the log modulus A(r) = r(1 - ln r):
    a w ln(1/|w|) type drift, monotone only in the Osgood sense. With
    ``exponent=0.5``, ||h(w) - h(0)||^2 = A(r) / 4, so the Lipschitz-type
    condition on f with the log modulus holds as well.
    """

    strength: Oscillation = Oscillation(1.0, 0.0)
    exponent: float = 0.5
    forcing: Oscillation = Oscillation(0.0, 0.0)
    forcing_field: DivFreeField | None = None

    def phi(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            lr = np.log(np.clip(r, 1e-300, 1.0))
        return 0.5 * (1.0 - lr) ** self.exponent

    def h(self, w: DivFreeField) -> DivFreeField:
        r = sobolev_norm_sq(w, 0)
        if r == 0.0:
            return w
        return w * float(self.phi(r))

    def shell_part(self, u: DivFreeField) -> DivFreeField:
        return DivFreeField(u.grid, u.coeffs * _shell_modes(u.grid))

    def __call__(self, t, u: DivFreeField) -> DivFreeField:
        out = self.h(self.shell_part(u)) * self.strength(t)
        if self.forcing_field is not None:
            out = out + self.forcing_field * self.forcing(t)
        return out

    def rescaled(self, epsilon):
        return replace(
            self, strength=self.strength.rescaled(epsilon), forcing=self.forcing.rescaled(epsilon)
        )

    def average(self):
        return replace(
            self, strength=replace(self.strength, amp=0.0), forcing=replace(self.forcing, amp=0.0)
        )

    @property
    def is_time_independent(self) -> bool:
        return self.strength.is_constant and self.forcing.is_constant


@dataclass(frozen=True)
class DiagonalDiffusion:
    """Columns g_j(t, u) = sigma_j(t) * (lam * P_j u + additive * E_j).

    P_j keeps the +-k_j modes of u and E_j is a unit divergence-free field at k_j.
    """

    wavevectors: tuple[tuple[int, int, int], ...]
    sigma: tuple[Oscillation, ...]
    lam: float = 0.0
    additive: float = 0.0

    @property
    def n_columns(self) -> int:
        return len(self.wavevectors)

    def _unit_field(self, grid: TorusGrid, k) -> DivFreeField:
        kv = np.asarray(k, dtype=float)
        helper = np.array([1.0, 0.0, 0.0]) if abs(kv[0]) < 0.9 * np.linalg.norm(kv) else np.array(
            [0.0, 1.0, 0.0]
        )
        e = np.cross(kv, helper)
        e /= np.linalg.norm(e)
        u = single_mode(grid, k, -0.5j * e)  # e * sin(k.x)
        return u * (1.0 / u.norm(0))

    def _mode_mask(self, grid: TorusGrid, k) -> np.ndarray:
        mask = np.zeros(grid.shape, dtype=bool)
        mask[grid.index_of(k)] = True
        mask[grid.index_of(tuple(-v for v in k))] = True
        return mask

    def __call__(self, t, u: DivFreeField) -> list[DivFreeField]:
        g = u.grid
        cols = []
        for k, s in zip(self.wavevectors, self.sigma):
            c = self.lam * u.coeffs * self._mode_mask(g, k)
            if self.additive:
                c = c + self.additive * self._unit_field(g, k).coeffs
            cols.append(DivFreeField(g, c * s(t)))
        return cols

    def rescaled(self, epsilon):
        return replace(self, sigma=tuple(s.rescaled(epsilon) for s in self.sigma))

    def average(self):
        return replace(self, sigma=tuple(replace(s, amp=0.0) for s in self.sigma))

    @property
    def is_time_independent(self) -> bool:
        return all(s.is_constant for s in self.sigma)


@dataclass(frozen=True)
class ZeroDiffusion:
    n_columns: int = 0

    def __call__(self, t, u):
        return [DivFreeField.zeros(u.grid) for _ in range(self.n_columns)]

    def rescaled(self, epsilon):
        return self

    def average(self):
        return self

    is_time_independent = True


# ---------------------------------------------------------------------------
# coefficient sets


@dataclass
class CoefficientSet:
    """(eta1, eta2, f, g, K) plus the growth and monotonicity metadata.

    ``eta1_star`` ... ``g_star`` carry analytic time averages when known;
    ``None`` means the average has to be estimated empirically.
    """

    eta1: Callable
    eta2: Callable
    f: Callable
    g: Callable
    transport: TransportNoiseSpec
    bounds: tuple[float, float, float, float]
    C: float = 1.0
    M: float = 1.0
    modulus: ModulusOfContinuity = field(default_factory=ModulusOfContinuity.log)
    c_monotone: float = 1.0
    zeta: float = 0.5
    eta1_star: float | None = None
    eta2_star: float | None = None
    f_star: Callable | None = None
    g_star: Callable | None = None
    g_average_converges: bool = True
    name: str = "custom"

    def __post_init__(self):
        a1, a2, a3, a4 = self.bounds
        if not (0 < a1 <= a2 and 0 < a3 <= a4):
            raise ValueError(f"eta bounds must satisfy 0 < a1 <= a2, 0 < a3 <= a4; got {self.bounds}")
        if not 0 < self.zeta < 1:
            raise ValueError(f"locality radius zeta must lie in (0, 1), got {self.zeta}")

    @property
    def J(self) -> int:
        return self.transport.n_columns

    @property
    def averaging_compatible(self) -> bool:
        a1, a2, a3, a4 = self.bounds
        return a4 <= 2 * a3

    def g_columns(self, t, u: DivFreeField) -> list[DivFreeField]:
        cols = list(self.g(t, u))
        if len(cols) > self.J:
            raise ValueError(f"diffusion returns {len(cols)} columns but J = {self.J}")
        cols += [DivFreeField.zeros(u.grid)] * (self.J - len(cols))
        return cols

    @property
    def is_time_independent(self) -> bool:
        return all(
            getattr(x, "is_time_independent", False)
            or getattr(x, "is_constant", False)
            for x in (self.eta1, self.eta2, self.f, self.g)
        ) and self.transport.is_time_independent


def oscillate(cs: CoefficientSet, epsilon: float) -> CoefficientSet:
    """Evaluate every time-dependent member at t / epsilon."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return replace(
        cs,
        eta1=_rescale(cs.eta1, epsilon),
        eta2=_rescale(cs.eta2, epsilon),
        f=_rescale(cs.f, epsilon),
        g=_rescale(cs.g, epsilon),
        transport=cs.transport.rescaled(epsilon),
        name=f"{cs.name}@eps={epsilon:g}",
    )


@dataclass
class AveragedSet:
    eta1_star: float
    eta2_star: float
    f_star: Callable
    g_star: Callable
    transport_star: TransportNoiseSpec
    provenance: dict[str, str]
    rates: dict[str, list[float]] = field(default_factory=dict)

    def as_coefficients(self, template: CoefficientSet) -> CoefficientSet:
        """Time-independent CoefficientSet driving the averaged system."""
        const1, const2 = Oscillation(self.eta1_star), Oscillation(self.eta2_star)
        return replace(
            template,
            eta1=const1,
            eta2=const2,
            f=_Frozen(self.f_star),
            g=_Frozen(self.g_star),
            transport=self.transport_star,
            eta1_star=self.eta1_star,
            eta2_star=self.eta2_star,
            f_star=self.f_star,
            g_star=self.g_star,
            name=f"{template.name}*",
        )


class _Frozen:
    """(t, u) -> fn(u) for time-independent averaged members."""

    is_time_independent = True

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, t, u):
        return self.fn(u)

    def rescaled(self, epsilon):
        return self


# ---------------------------------------------------------------------------
# empirical averaging oracles


def _chunks(t0: float, T: float, chunk: float):
    n = max(1, int(np.ceil(T / chunk)))
    edges = np.linspace(t0, t0 + T, n + 1)
    return zip(edges[:-1], edges[1:])


def _quad_scalar(fn, t0, T, chunk=8.0):
    total = 0.0
    for a, b in _chunks(t0, T, chunk):
        val, err = integrate.quad(fn, a, b, epsabs=1e-13, epsrel=1e-11, limit=200)
        if not np.isfinite(val):
            raise QuadratureError(f"quadrature failed on [{a}, {b}]")
        total += val
    return total


def _quad_array(fn, t0, T, chunk=8.0):
    total = None
    for a, b in _chunks(t0, T, chunk):
        val, err = integrate.quad_vec(fn, a, b, epsabs=1e-13, epsrel=1e-10)
        if not np.all(np.isfinite(val)):
            raise QuadratureError(f"vector quadrature failed on [{a}, {b}]")
        total = val if total is None else total + val
    return total


def window_mean(eta: Callable, t0: float, T: float) -> float:
    if not T > 0:
        raise ValueError(f"window length must be positive, got {T}")
    return _quad_scalar(lambda s: float(eta(s)), t0, T) / T


def empirical_average_eta(
    eta: Callable,
    t0: float,
    T: float,
    eta_star: float | None = None,
    n_offsets: int = 8,
    reference_factor: float = 100.0,
) -> tuple[float, float]:
    """Window mean of eta over [t0, t0+T] and the observed rate sup_t0 |mean - eta*|.

    Without a declared ``eta_star`` the reference value is the mean over a window
    ``reference_factor`` times longer.
    """
    mean = window_mean(eta, t0, T)
    if eta_star is None:
        eta_star = window_mean(eta, t0, reference_factor * T)
    offsets = t0 + np.linspace(0.0, T, n_offsets, endpoint=False)
    rate = max(abs(window_mean(eta, s, T) - eta_star) for s in offsets)
    return mean, rate


def _field_integrand(fn, u: DivFreeField):
    shape = u.coeffs.shape

    def integrand(s):
        c = fn(s, u).coeffs
        return np.concatenate([c.real.ravel(), c.imag.ravel()])

    def unpack(v):
        half = v.size // 2
        return (v[:half] + 1j * v[half:]).reshape(shape)

    return integrand, unpack


def empirical_average_f(
    f: Callable,
    u: DivFreeField,
    t0: float,
    T: float,
    f_star: Callable | None = None,
    M: float = 0.0,
) -> tuple[DivFreeField, float]:
    """(1/T) int f(s, u) ds with a rate estimate normalised by ||u|| + M."""
    if not T > 0:
        raise ValueError(f"window length must be positive, got {T}")
    integrand, unpack = _field_integrand(f, u)
    mean = DivFreeField(u.grid, unpack(_quad_array(integrand, t0, T)) / T)
    scale = u.norm(0) + M
    if scale == 0:
        scale = 1.0
    if f_star is not None:
        ref = f_star(u)
    else:
        ref = DivFreeField(u.grid, unpack(_quad_array(integrand, t0 + T, T)) / T)
    return mean, (mean - ref).norm(0) / scale


def empirical_average_g(
    g: Callable,
    u: DivFreeField,
    t0: float,
    T: float,
    g_star: Callable | None = None,
    M: float = 0.0,
) -> tuple[list[DivFreeField], float]:
    """Column means of g over the window and the squared-distance rate
    (1/T) int sum_j ||g_j(s, u) - g*_j(u)||^2 ds / (||u||^2 + M).

    ``g_star=None`` uses the window mean itself, which minimises that distance.
    """
    if not T > 0:
        raise ValueError(f"window length must be positive, got {T}")
    J = len(g(t0, u))
    shape = u.coeffs.shape

    def stacked(s):
        c = np.stack([col.coeffs for col in g(s, u)]) if J else np.zeros((0,) + shape)
        return np.concatenate([c.real.ravel(), c.imag.ravel()])

    v = _quad_array(stacked, t0, T) / T
    half = v.size // 2
    means = (v[:half] + 1j * v[half:]).reshape((J,) + shape)
    cols = [DivFreeField(u.grid, m) for m in means]
    ref = [c.coeffs for c in (g_star(u) if g_star is not None else cols)]

    def sqdist(s):
        return float(sum(sobolev_norm_sq(DivFreeField(u.grid, a.coeffs - b), 0)
                         for a, b in zip(g(s, u), ref)))

    scale = sobolev_norm_sq(u, 0) + M
    if scale == 0:
        scale = 1.0
    return cols, _quad_scalar(sqdist, t0, T) / T / scale


# ---------------------------------------------------------------------------
# assumption checks on field corpora


@dataclass
class InequalityReport:
    label: str
    n_checked: int
    n_violations: int
    worst_margin: float
    max_ratio: float

    @property
    def fraction(self) -> float:
        return self.n_violations / self.n_checked if self.n_checked else 0.0

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.n_violations == 0

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"{self.label}: {status} ({self.n_violations}/{self.n_checked} violations, "
            f"worst margin {self.worst_margin:.3g}, max ratio {self.max_ratio:.3g})"
        )


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def verify_weak_monotonicity(
    fn: Callable,
    A: ModulusOfContinuity,
    c: float,
    zeta: float,
    corpus: Sequence[tuple[DivFreeField, DivFreeField]],
    kind: str = "monotone",
    m: int = 0,
    times: Sequence[float] = (0.0,),
    label: str | None = None,
) -> InequalityReport:
    """Check <u-v, f(u)-f(v)>_m <= c A(||u-v||_m^2) (``kind="monotone"``) or
    ||f(u)-f(v)||_m^2 <= c A(||u-v||_m^2) (``kind="lipschitz"``, also for
    list-valued g) over every corpus pair within the locality radius.

    ``max_ratio`` is the smallest constant c that would make the corpus pass.
    """
    if kind not in ("monotone", "lipschitz"):
        raise ValueError(f"kind must be 'monotone' or 'lipschitz', got {kind!r}")
    n = viol = 0
    worst = np.inf
    ratio = 0.0
    for u, v in corpus:
        d = u - v
        r = sobolev_norm_sq(d, m)
        if r == 0 or np.sqrt(r) > zeta:
            continue
        a = float(A(r))
        for t in times:
            fu, fv = _as_list(fn(t, u)), _as_list(fn(t, v))
            size = np.sqrt(sum(sobolev_norm_sq(a_, m) + sobolev_norm_sq(b_, m) for a_, b_ in zip(fu, fv)))
            if kind == "monotone":
                lhs = sum(inner_product(d, a_ - b_, m) for a_, b_ in zip(fu, fv))
                noise = np.sqrt(r) * size
            else:
                lhs = sum(sobolev_norm_sq(a_ - b_, m) for a_, b_ in zip(fu, fv))
                noise = np.sqrt(max(lhs, 0.0)) * size
            # round-off floor: differences of O(|f(u)|) quantities lose ~eps * |f(u)|
            tol = 1e-12 * abs(lhs) + 64 * np.finfo(float).eps * noise
            margin = c * a - lhs
            n += 1
            if margin < -tol:
                viol += 1
            worst = min(worst, margin)
            ratio = max(ratio, lhs / a)
    return InequalityReport(label or f"{kind} m={m}", n, viol, float(worst), float(ratio))


def check_linear_growth(
    cs: CoefficientSet,
    corpus: Sequence[DivFreeField],
    m: int = 0,
    times: Sequence[float] = (0.0,),
) -> InequalityReport:
    """<u, f(t,u)>_m v ||g(t,u)||_m^2 <= C ||u||_m^2 + M on the corpus."""
    n = viol = 0
    worst, ratio = np.inf, 0.0
    for u in corpus:
        rhs = cs.C * sobolev_norm_sq(u, m) + cs.M
        for t in times:
            lhs_f = inner_product(u, cs.f(t, u), m)
            lhs_g = sum(sobolev_norm_sq(col, m) for col in cs.g_columns(t, u))
            lhs = max(lhs_f, lhs_g)
            n += 1
            margin = rhs - lhs
            if margin < -1e-12 * abs(rhs):
                viol += 1
            worst = min(worst, margin)
            ratio = max(ratio, lhs / rhs if rhs > 0 else np.inf)
    return InequalityReport(f"linear growth m={m}", n, viol, float(worst), float(ratio))


def field_corpus(grid: TorusGrid, rng: np.random.Generator, n: int = 24,
                 amplitudes=(1e-3, 0.1, 1.0, 10.0)) -> list[DivFreeField]:
    from .field import random_field

    return [random_field(grid, rng, amplitude=amplitudes[i % len(amplitudes)]) for i in range(n)]


def pair_corpus(
    grid: TorusGrid,
    rng: np.random.Generator,
    zeta: float,
    n: int = 40,
    m: int = 0,
    near_origin: bool = True,
) -> list[tuple[DivFreeField, DivFreeField]]:
    """Pairs (u, v) with ||u - v||_m spread log-uniformly over [1e-6 zeta, zeta].

    Half of the base points sit close to the origin of the low shell, where the
    non-Lipschitz behaviour of Osgood-type drifts concentrates.
    """
    from .field import random_field

    pairs = []
    dists = zeta * np.logspace(-6, -1e-3, n)
    for i, dist in enumerate(dists):
        base_amp = 10.0 ** rng.uniform(-6, 0) if (near_origin and i % 2 == 0) else rng.uniform(0.2, 3)
        u = random_field(grid, rng, amplitude=base_amp)
        p = random_field(grid, rng, amplitude=1.0)
        p = p * (dist / p.norm(m))
        v = u - p if (near_origin and i % 4 == 0) else u + p
        if near_origin and i % 8 == 0:
            u, v = DivFreeField.zeros(grid), p
        pairs.append((u, v))
    return pairs


# ---------------------------------------------------------------------------
# family construction


def _osc(d, default_mean=0.0) -> Oscillation:
    if isinstance(d, Oscillation):
        return d
    if d is None:
        return Oscillation(default_mean, 0.0)
    if isinstance(d, (int, float)):
        return Oscillation(float(d), 0.0)
    return Oscillation(
        float(d.get("mean", default_mean)),
        float(d.get("amp", 0.0)),
        float(d.get("omega", 1.0)),
        float(d.get("phase", 0.0)),
    )


_DIFFUSION_WAVEVECTORS = ((1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (0, 1, 1), (1, 0, 1))


def builtin_family(name: str, grid: TorusGrid, params: dict | None = None) -> CoefficientSet:
    """Named coefficient families with analytic averages.

    name: ``"zero"`` (f = g = K = 0), ``"linear"`` ((alpha + beta sin t) u) or
    ``"osgood"`` (shell drift with the log modulus). Shared parameters: ``eta1``,
    ``eta2`` (oscillation dicts with mean/amp/omega/phase), ``J``, ``forcing``,
    ``sigma``, ``g_lambda``, ``g_additive``, ``transport`` (list of mode dicts),
    ``zeta``.
    """
    p = dict(params or {})
    eta1 = _osc(p.pop("eta1", None), 1.0)
    eta2 = _osc(p.pop("eta2", None), 1.0)
    J = int(p.pop("J", 2))
    transport = TransportNoiseSpec.from_list(J, p.pop("transport", None))
    zeta = float(p.pop("zeta", 0.5))
    forcing = _osc(p.pop("forcing", None), 0.0)
    sigma_spec = p.pop("sigma", None)
    g_lambda = float(p.pop("g_lambda", 0.0))
    g_additive = float(p.pop("g_additive", 0.0))
    B = taylor_green_field(grid)

    if name == "zero":
        drift = ZeroDrift()
        diffusion = ZeroDiffusion(0)
        modulus = ModulusOfContinuity.linear()
        Cf, Mf = 0.0, 0.0
        c_f = 0.0
        forcing = Oscillation(0.0)
    elif name == "linear":
        alpha = float(p.pop("alpha", -0.5))
        beta = float(p.pop("beta", 0.0))
        omega = float(p.pop("omega", 1.0))
        drift = LinearDrift(alpha, beta, omega, forcing, B if forcing.upper or forcing.lower else None)
        modulus = ModulusOfContinuity.by_name(p.pop("modulus", "linear"))
        Cf, Mf = abs(alpha) + abs(beta), 0.0
        c_f = (abs(alpha) + abs(beta)) ** 2
    elif name == "osgood":
        strength = _osc(p.pop("strength", None), 1.0)
        exponent = float(p.pop("exponent", 0.5))
        drift = OsgoodDrift(strength, exponent, forcing, B if forcing.upper or forcing.lower else None)
        modulus = ModulusOfContinuity.log()
        smax = max(abs(strength.lower), abs(strength.upper))
        # <w, h(w)> <= (||w||^2 + 1) / 2 and the shell carries H^1 weight 2
        Cf, Mf = smax / 2.0, smax
        c_f = smax**2
    else:
        raise ValueError(f"unknown coefficient family {name!r}; choose zero, linear or osgood")

    fmax = max(abs(forcing.lower), abs(forcing.upper))
    if fmax:
        Cf += 0.5
        Mf += 0.5 * fmax**2 * 2.0  # ||B||_{H^1}^2 = 2
    if name != "zero":
        if isinstance(sigma_spec, list):
            sig = tuple(_osc(s, 0.0) for s in sigma_spec)
        else:
            sig = tuple(_osc(sigma_spec, 0.0) for _ in range(J))
        diffusion = DiagonalDiffusion(_DIFFUSION_WAVEVECTORS[: len(sig)], sig, g_lambda, g_additive)
        if diffusion.n_columns > J:
            raise ValueError(f"{diffusion.n_columns} diffusion columns exceed J = {J}")
        smax_sq = [max(s.lower**2, s.upper**2) for s in sig]
        kw = [1.0 + sum(v * v for v in k) for k in diffusion.wavevectors]
        Cg = 2 * g_lambda**2 * sum(smax_sq)
        Mg = 2 * g_additive**2 * sum(s * w for s, w in zip(smax_sq, kw))
        # columns act on distinct mode pairs, so the Lipschitz constant is the largest one
        c_g = g_lambda**2 * max(smax_sq, default=0.0)
    else:
        Cg = Mg = c_g = 0.0
    if p:
        raise ValueError(f"unknown parameters for family {name!r}: {sorted(p)}")

    bounds = (eta1.lower, eta1.upper, eta2.lower, eta2.upper)
    cs = CoefficientSet(
        eta1=eta1,
        eta2=eta2,
        f=drift,
        g=diffusion,
        transport=transport,
        bounds=bounds,
        C=max(Cf, Cg),
        M=max(Mf, Mg, 1e-12),
        modulus=modulus,
        c_monotone=max(1.0, c_f, c_g),
        zeta=zeta,
        eta1_star=eta1.average(),
        eta2_star=eta2.average(),
        f_star=_time_free(drift.average()),
        g_star=_time_free(diffusion.average()),
        g_average_converges=bool(diffusion.is_time_independent),
        name=name,
    )
    return cs


def _time_free(member):
    def star(u):
        return member(0.0, u)

    star.member = member
    return star


def measure_monotone_constant(cs: CoefficientSet, grid: TorusGrid, rng, slack: float = 1.25) -> float:
    """Smallest c making the f and g corpus checks pass, inflated by ``slack``.

    Sets ``cs.c_monotone`` (measured-then-fixed) and returns it.
    """
    times = np.linspace(0.0, 2 * np.pi, 5)
    best = 0.0
    for m in (0, 1):
        corpus = pair_corpus(grid, rng, cs.zeta, m=m)
        for fn, kind in ((cs.f, "monotone"), (cs.f, "lipschitz"), (cs.g_columns, "lipschitz")):
            r = verify_weak_monotonicity(fn, cs.modulus, np.inf, cs.zeta, corpus, kind, m, times)
            best = max(best, r.max_ratio)
    cs.c_monotone = max(best * slack, 1e-12)
    return cs.c_monotone
