"""Spatial operators: Stokes, tamed nonlinearity, transport noise and the taming profile."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .field import (
    VOL_FACTOR,
    DivFreeField,
    TorusGrid,
    project_coeffs,
    to_physical,
    to_physical_real,
    to_spectral_real,
)


@dataclass(frozen=True)
class TamingProfile:
    """Taming function Psi_N with a quintic bridge on (N, N+1).

    On the bridge ``Psi_N(N + s) = q(s) / nu`` with ``q = 6s^3 - 8s^4 + 3s^5``,
    the unique quintic with q(0) = q'(0) = q''(0) = 0, q(1) = q'(1) = 1, q''(1) = 0.
    Its slope peaks at q'(0.6) = 1.512, below the ceiling 2 / min(nu, 1) for every nu.
    """

    N: float
    nu: float

    def __post_init__(self):
        if not self.N > 0:
            raise ValueError(f"taming threshold N must be positive, got {self.N}")
        if not self.nu > 0:
            raise ValueError(f"viscosity nu must be positive, got {self.nu}")

    @property
    def derivative_ceiling(self) -> float:
        return 2.0 / min(self.nu, 1.0)


def _check_nonneg(z):
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("taming function is defined for z >= 0 only")
    return z


def psi(profile: TamingProfile, z):
    z = _check_nonneg(z)
    s = np.clip(z - profile.N, 0.0, 1.0)
    bridge = s**3 * (6.0 - 8.0 * s + 3.0 * s**2)
    out = np.where(z >= profile.N + 1.0, z - profile.N, bridge) / profile.nu
    return out if out.ndim else float(out)


def psi_prime(profile: TamingProfile, z):
    z = _check_nonneg(z)
    s = np.clip(z - profile.N, 0.0, 1.0)
    bridge = s**2 * (18.0 - 32.0 * s + 15.0 * s**2)
    out = np.where(z >= profile.N + 1.0, 1.0, bridge) / profile.nu
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# transport noise


@dataclass(frozen=True)
class TransportMode:
    """One term ``a(t) * direction * trig(k.x)`` of the noise field K_j.

    ``a(t) = mean + amp * sin(omega * t + phase)`` and ``trig`` is cos or sin.
    """

    column: int
    k: tuple[int, int, int]
    direction: tuple[float, float, float]
    kind: str = "cos"
    mean: float = 1.0
    amp: float = 0.0
    omega: float = 1.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("cos", "sin"):
            raise ValueError(f"transport mode kind must be 'cos' or 'sin', got {self.kind!r}")
        if self.column < 0:
            raise ValueError("column index must be >= 0")

    def amplitude(self, t: float) -> float:
        return self.mean + self.amp * np.sin(self.omega * t + self.phase)

    def to_dict(self) -> dict:
        return {
            "column": self.column,
            "k": list(self.k),
            "direction": list(self.direction),
            "kind": self.kind,
            "mean": self.mean,
            "amp": self.amp,
            "omega": self.omega,
            "phase": self.phase,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TransportMode:
        d = dict(d)
        d["k"] = tuple(int(v) for v in d["k"])
        d["direction"] = tuple(float(v) for v in d["direction"])
        return cls(**d)


@dataclass(frozen=True)
class TransportNoiseSpec:
    """Truncated family K_1..K_J of smooth noise vector fields."""

    n_columns: int
    modes: tuple[TransportMode, ...] = field(default_factory=tuple)

    def __post_init__(self):
        for m in self.modes:
            if m.column >= self.n_columns:
                raise ValueError(f"mode column {m.column} >= n_columns {self.n_columns}")

    @classmethod
    def zero(cls, n_columns: int) -> TransportNoiseSpec:
        return cls(n_columns, ())

    @property
    def is_zero(self) -> bool:
        return all(m.mean == 0 and m.amp == 0 for m in self.modes)

    @property
    def is_time_independent(self) -> bool:
        return all(m.amp == 0 for m in self.modes)

    def rescaled(self, epsilon: float) -> TransportNoiseSpec:
        """K(t/epsilon, x)."""
        return replace(self, modes=tuple(replace(m, omega=m.omega / epsilon) for m in self.modes))

    def time_averaged(self) -> TransportNoiseSpec:
        return replace(self, modes=tuple(replace(m, amp=0.0) for m in self.modes))

    def coeffs(self, grid: TorusGrid, t: float) -> np.ndarray:
        """Fourier coefficients of K_j(t, .), shape (J, 3, n, n, n), built analytically."""
        c = np.zeros((self.n_columns, 3) + grid.shape, dtype=complex)
        for m in self.modes:
            a = m.amplitude(t)
            d = np.asarray(m.direction, dtype=float)
            kp = grid.index_of(m.k)
            km = grid.index_of(tuple(-ki for ki in m.k)) if any(m.k) else kp
            if not any(m.k):
                if m.kind == "cos":
                    c[(m.column, slice(None)) + kp] += a * d
                continue
            if m.kind == "cos":
                c[(m.column, slice(None)) + kp] += 0.5 * a * d
                c[(m.column, slice(None)) + km] += 0.5 * a * d
            else:
                c[(m.column, slice(None)) + kp] += -0.5j * a * d
                c[(m.column, slice(None)) + km] += 0.5j * a * d
        return c

    def physical(self, grid: TorusGrid, t: float) -> np.ndarray:
        return to_physical(self.coeffs(grid, t), grid)

    def sup_sq(self, grid: TorusGrid, times) -> float:
        """sup over the grid and the time mesh of sum_j |K_j(t, x)|^2."""
        best = 0.0
        for t in np.atleast_1d(times):
            K = self.physical(grid, float(t))
            best = max(best, float(np.max(np.sum(K**2, axis=(0, 1)))))
        return best

    def grad_sup(self, grid: TorusGrid, times) -> float:
        """sup over grid, time mesh, axis i and column j of |d_{x_i} K_j|."""
        best = 0.0
        for t in np.atleast_1d(times):
            c = self.coeffs(grid, float(t))
            for i in range(3):
                dK = to_physical(1j * grid.kf[i] * c, grid)
                best = max(best, float(np.sqrt(np.max(np.sum(dK**2, axis=1)))))
        return best

    def to_list(self) -> list[dict]:
        return [m.to_dict() for m in self.modes]

    @classmethod
    def from_list(cls, n_columns: int, entries) -> TransportNoiseSpec:
        return cls(n_columns, tuple(TransportMode.from_dict(e) for e in entries or ()))


# ---------------------------------------------------------------------------
# spectral kernels on raw coefficient arrays


def dealias(grid: TorusGrid, c: np.ndarray) -> np.ndarray:
    return c * grid.dealias_mask


def physical_state(grid: TorusGrid, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dealiased velocity samples (3, n, n, n) and gradient samples grad[i, j] = d_i u_j."""
    h = grid.n_modes // 2 + 1
    cm = dealias(grid, c)[..., :h]
    u = to_physical_real(cm, grid)
    grad = to_physical_real(1j * grid.kf[:, None, ..., :h] * cm[None, :], grid)
    return u, grad


def _finish(grid: TorusGrid, c: np.ndarray, project: bool) -> np.ndarray:
    c = dealias(grid, c)
    return project_coeffs(grid, c) if project else c


def convection_from_physical(
    grid: TorusGrid, u: np.ndarray, grad: np.ndarray, project: bool = True
) -> np.ndarray:
    adv = np.einsum("ixyz,ijxyz->jxyz", u, grad)
    return _finish(grid, to_spectral_real(adv, grid), project)


def taming_from_physical(
    grid: TorusGrid, u: np.ndarray, profile: TamingProfile, project: bool = True
) -> np.ndarray:
    usq = np.sum(u**2, axis=0)
    if np.max(usq) <= profile.N:
        return grid.zeros()
    return _finish(grid, to_spectral_real(psi(profile, usq) * u, grid), project)


def transport_from_physical(
    grid: TorusGrid, K: np.ndarray, grad: np.ndarray, project: bool = True
) -> np.ndarray:
    """Columns Pi((K_j . grad) u), shape (J, 3, n, n, n)."""
    out = np.einsum("qixyz,ijxyz->qjxyz", K, grad)
    return _finish(grid, to_spectral_real(out, grid), project)


def u_grad_u_sq(grid: TorusGrid, u: np.ndarray, grad: np.ndarray) -> float:
    """|| |u| |grad u| ||^2_{H^0} by grid quadrature."""
    return float(VOL_FACTOR * np.mean(np.sum(u**2, axis=0) * np.sum(grad**2, axis=(0, 1))))


# ---------------------------------------------------------------------------
# field-level API


def stokes(u: DivFreeField) -> DivFreeField:
    return DivFreeField(u.grid, -u.grid.k2 * u.coeffs)


def convection(u: DivFreeField) -> DivFreeField:
    g = u.grid
    up, grad = physical_state(g, u.coeffs)
    return DivFreeField(g, convection_from_physical(g, up, grad))


def taming_term(u: DivFreeField, profile: TamingProfile) -> DivFreeField:
    g = u.grid
    up = to_physical_real(dealias(g, u.coeffs), g)
    return DivFreeField(g, taming_from_physical(g, up, profile))


def tamed_drift(
    u: DivFreeField,
    profile: TamingProfile,
    eta1: float,
    eta2: float,
    f_value: DivFreeField | None = None,
) -> DivFreeField:
    """eta1 * S1(u) - eta2 * (convection + taming) + Pi f."""
    g = u.grid
    up, grad = physical_state(g, u.coeffs)
    out = eta1 * (-g.k2 * u.coeffs) - eta2 * (
        convection_from_physical(g, up, grad) + taming_from_physical(g, up, profile)
    )
    if f_value is not None:
        out = out + project_coeffs(g, f_value.coeffs)
    return DivFreeField(g, out)


def transport_noise_apply(spec: TransportNoiseSpec, t: float, u: DivFreeField) -> list[DivFreeField]:
    g = u.grid
    if spec.n_columns == 0:
        return []
    _, grad = physical_state(g, u.coeffs)
    cols = transport_from_physical(g, spec.physical(g, t), grad)
    return [DivFreeField(g, c) for c in cols]


# ---------------------------------------------------------------------------
# noise-bound check


@dataclass
class NoiseBoundReport:
    passed: bool
    sup_K_sq: float
    bound: float
    margin: float
    branch: str
    grad_sup: float

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"noise bound {status}: sup|K|^2={self.sup_K_sq:.6g} bound={self.bound:.6g} "
            f"({self.branch}) margin={self.margin:.6g} sup|dK|={self.grad_sup:.6g}"
        )


def noise_bound(nu: float, p: float, eps: float) -> tuple[float, str]:
    if p < 1:
        raise ValueError("moment exponent p must be >= 1")
    if p <= 37.5:
        return nu / 73.0, "nu/73"
    return (p * nu - eps) / (2.0 * p * (p - 1.0)), "(p*nu-eps)/(2p(p-1))"


def validate_noise_bound(
    spec: TransportNoiseSpec,
    nu: float,
    p: float = 1.0,
    eps: float = 1e-3,
    grid: TorusGrid | None = None,
    times=None,
) -> NoiseBoundReport:
    if not (nu > 0 and eps > 0):
        raise ValueError("nu and eps must be positive")
    if grid is None:
        kmax = max((abs(ki) for m in spec.modes for ki in m.k), default=0)
        grid = TorusGrid(max(8, 4 * (kmax + 1)))
    if times is None:
        # the mesh covers a full period of the slowest time oscillation
        omegas = [m.omega for m in spec.modes if m.amp != 0 and m.omega > 0]
        period = 2 * np.pi / min(omegas) if omegas else 1.0
        times = np.linspace(0.0, period, 65)
    bound, branch = noise_bound(nu, p, eps)
    sup_sq = spec.sup_sq(grid, times)
    margin = bound - sup_sq
    return NoiseBoundReport(
        passed=bool(margin >= -1e-12 * bound),
        sup_K_sq=sup_sq,
        bound=bound,
        margin=margin,
        branch=branch,
        grad_sup=spec.grad_sup(grid, times),
    )
