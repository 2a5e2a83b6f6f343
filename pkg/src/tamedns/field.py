"""Divergence-free spectral vector fields on the periodic box [0, 2*pi)^3.

Transform convention (tag ``"fwd-n3"``): coefficients are

    u_hat[k] = n**-3 * sum_x u(x) exp(-i k.x)

so that ``u(x) = sum_k u_hat[k] exp(i k.x)`` and Parseval reads
``int |u|^2 dx = VOL_FACTOR * sum_k |u_hat[k]|^2`` with ``VOL_FACTOR = (2 pi)^3``.
Coefficient arrays have shape ``(3, n, n, n)`` in numpy FFT ordering.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.fft as sfft

VOL_FACTOR = (2.0 * np.pi) ** 3
TRANSFORM_TAG = "fwd-n3"

_SNAPSHOT_MAGIC = b"TNSF"
_SNAPSHOT_VERSION = 1
# magic, version, n_modes, tag (8 bytes, NUL padded), vol_factor
_SNAPSHOT_HEADER = struct.Struct("<4sHI8sd")


class InvalidFieldError(ValueError):
    """Raised for non-finite or malformed coefficient arrays."""


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TorusGrid:
    """Uniform n^3 grid on the 3-torus with integer wavevectors in [-n/2, n/2)."""

    n_modes: int
    workers: int | None = field(default=None, compare=False)

    def __post_init__(self):
        n = self.n_modes
        if not isinstance(n, (int, np.integer)) or n < 4 or n % 2:
            raise ValueError(f"n_modes must be an even integer >= 4, got {n!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_modes,) * 3

    @cached_property
    def k1d(self) -> np.ndarray:
        n = self.n_modes
        return np.fft.fftfreq(n, 1.0 / n).astype(np.int64)

    @cached_property
    def k(self) -> np.ndarray:
        """Integer wavevectors, shape (3, n, n, n)."""
        return np.array(np.meshgrid(self.k1d, self.k1d, self.k1d, indexing="ij"))

    @cached_property
    def kf(self) -> np.ndarray:
        return self.k.astype(float)

    @cached_property
    def k2(self) -> np.ndarray:
        return np.sum(self.kf**2, axis=0)

    @cached_property
    def k2_safe(self) -> np.ndarray:
        k2 = self.k2.copy()
        k2[0, 0, 0] = 1.0
        return k2

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        # two-thirds rule: keep k with 3|k_i| < n on every axis
        return np.all(3 * np.abs(self.k) < self.n_modes, axis=0)

    @cached_property
    def x(self) -> np.ndarray:
        """Physical sample points, shape (3, n, n, n)."""
        x1 = 2.0 * np.pi * np.arange(self.n_modes) / self.n_modes
        return np.array(np.meshgrid(x1, x1, x1, indexing="ij"))

    def index_of(self, kvec) -> tuple[int, int, int]:
        n = self.n_modes
        out = []
        for ki in kvec:
            ki = int(ki)
            if not -n // 2 <= ki < n // 2:
                raise ValueError(f"wavevector component {ki} outside [-{n // 2}, {n // 2})")
            out.append(ki % n)
        return tuple(out)

    def wavevector(self, index) -> tuple[int, int, int]:
        return tuple(int(self.k1d[i]) for i in index)

    def weights(self, m: int) -> np.ndarray:
        return (1.0 + self.k2) ** m

    def zeros(self) -> np.ndarray:
        return np.zeros((3,) + self.shape, dtype=complex)


@dataclass(frozen=True, eq=False)
class DivFreeField:
    """A velocity field stored by its Fourier coefficients.

    Treated as a value: operations return new fields and never mutate
    ``coeffs`` in place.
    """

    grid: TorusGrid
    coeffs: np.ndarray

    def __post_init__(self):
        if self.coeffs.shape != (3,) + self.grid.shape:
            raise InvalidFieldError(
                f"coefficient shape {self.coeffs.shape} does not match grid {self.grid.shape}"
            )

    @classmethod
    def zeros(cls, grid: TorusGrid) -> DivFreeField:
        return cls(grid, grid.zeros())

    def _check(self, other: DivFreeField):
        if other.grid.n_modes != self.grid.n_modes:
            raise GridMismatchError(f"grid {self.grid.n_modes} vs {other.grid.n_modes}")

    def __add__(self, other):
        self._check(other)
        return DivFreeField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._check(other)
        return DivFreeField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, scalar):
        return DivFreeField(self.grid, self.coeffs * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return DivFreeField(self.grid, -self.coeffs)

    def norm(self, m: int = 0) -> float:
        return float(np.sqrt(sobolev_norm_sq(self, m)))

    def divergence_defect(self) -> float:
        """max_k |k . u_hat_k|."""
        return float(np.max(np.abs(np.sum(self.grid.kf * self.coeffs, axis=0))))

    def hermitian_defect(self) -> float:
        return float(np.max(np.abs(self.coeffs - np.conj(_reflect(self.coeffs)))))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.coeffs)))


def _reflect(c: np.ndarray) -> np.ndarray:
    """Array whose entry at k is c[-k] (index arithmetic mod n)."""
    return np.roll(np.flip(c, axis=(-3, -2, -1)), 1, axis=(-3, -2, -1))


def _coeffs_of(field_or_array, grid: TorusGrid | None = None) -> tuple[TorusGrid, np.ndarray]:
    if isinstance(field_or_array, DivFreeField):
        return field_or_array.grid, field_or_array.coeffs
    if grid is None:
        raise TypeError("a raw coefficient array needs an explicit grid")
    return grid, np.asarray(field_or_array)


def project_coeffs(grid: TorusGrid, c: np.ndarray) -> np.ndarray:
    """Leray projection on a raw (3, n, n, n) or (J, 3, n, n, n) array."""
    kdotc = np.sum(grid.kf * c, axis=-4)
    return c - grid.kf * (kdotc / grid.k2_safe)[..., None, :, :, :]


def leray_project(field, grid: TorusGrid | None = None) -> DivFreeField:
    """Remove the longitudinal part of every non-zero mode; the mean is kept."""
    grid, c = _coeffs_of(field, grid)
    if not np.all(np.isfinite(c)):
        raise InvalidFieldError("cannot project a field with NaN/Inf coefficients")
    return DivFreeField(grid, project_coeffs(grid, c))


def sobolev_norm_sq(field: DivFreeField, m: int = 0) -> float:
    if m not in (0, 1, 2):
        raise ValueError(f"unsupported Sobolev index m={m}; expected 0, 1 or 2")
    w = field.grid.weights(m)
    return float(VOL_FACTOR * np.sum(w * np.abs(field.coeffs) ** 2))


def inner_product(u: DivFreeField, v: DivFreeField, m: int = 0) -> float:
    if m not in (0, 1):
        raise ValueError(f"unsupported inner-product index m={m}; expected 0 or 1")
    if u.grid.n_modes != v.grid.n_modes:
        raise GridMismatchError(f"grid {u.grid.n_modes} vs {v.grid.n_modes}")
    w = u.grid.weights(m)
    return float(VOL_FACTOR * np.real(np.sum(w * u.coeffs * np.conj(v.coeffs))))


def to_physical(field, grid: TorusGrid | None = None, real: bool = True) -> np.ndarray:
    """Samples on the grid points; ``real=True`` drops the (round-off) imaginary part."""
    grid, c = _coeffs_of(field, grid)
    if c.shape[-3:] != grid.shape:
        raise GridMismatchError(f"coefficient shape {c.shape} vs grid {grid.shape}")
    out = sfft.ifftn(c, axes=(-3, -2, -1), norm="forward", workers=grid.workers)
    return out.real if real else out


def to_spectral(samples: np.ndarray, grid: TorusGrid) -> np.ndarray:
    samples = np.asarray(samples)
    if samples.shape[-3:] != grid.shape:
        raise GridMismatchError(f"sample shape {samples.shape} vs grid {grid.shape}")
    return sfft.fftn(samples, axes=(-3, -2, -1), norm="forward", workers=grid.workers)


def _half(grid: TorusGrid) -> int:
    return grid.n_modes // 2 + 1


def to_physical_real(c: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Samples of a Hermitian coefficient array via the real inverse transform.

    Only the k_3 >= 0 half of ``c`` is read. The Nyquist plane k_3 = -n/2 has
    no partner in the half spectrum, so callers pass band-limited input.
    """
    h = _half(grid)
    return sfft.irfftn(c[..., :h], s=grid.shape, axes=(-3, -2, -1), norm="forward",
                       workers=grid.workers)


def to_spectral_real(samples: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Full coefficient array of real samples, filled from the real forward transform."""
    n, h = grid.n_modes, _half(grid)
    r = sfft.rfftn(samples, axes=(-3, -2, -1), norm="forward", workers=grid.workers)
    out = np.empty(r.shape[:-1] + (n,), dtype=complex)
    out[..., :h] = r
    # c(k1, k2, -k3) = conj c(-k1, -k2, k3)
    neg = (-np.arange(n)) % n
    tail = np.arange(h, n)
    out[..., tail] = np.conj(r[..., neg, :, :][..., :, neg, :][..., n - tail])
    return out


def gradient_physical(field: DivFreeField) -> np.ndarray:
    """grad[i, j] = d_i u_j sampled on the grid, shape (3, 3, n, n, n)."""
    g = field.grid
    return to_physical(1j * g.kf[:, None] * field.coeffs[None, :], g)


def random_field(
    grid: TorusGrid,
    rng: np.random.Generator,
    amplitude: float = 1.0,
    decay: float = 2.0,
    mean: bool = False,
    band_limited: bool = True,
) -> DivFreeField:
    """Random real divergence-free field with spectrum ~ (1+|k|^2)^(-decay/2).

    The result is scaled so that its H^0 norm equals ``amplitude``.
    """
    samples = rng.standard_normal((3,) + grid.shape)
    c = to_spectral(samples, grid) * (1.0 + grid.k2) ** (-decay / 2)
    if band_limited:
        c = c * grid.dealias_mask
    if not mean:
        c[:, 0, 0, 0] = 0.0
    u = leray_project(c, grid)
    nrm = u.norm(0)
    return u * (amplitude / nrm) if nrm > 0 else u


def single_mode(grid: TorusGrid, kvec, amplitude, hermitian: bool = True) -> DivFreeField:
    """Field with coefficient ``amplitude`` at k (and its conjugate at -k if requested)."""
    c = grid.zeros()
    idx = grid.index_of(kvec)
    c[(slice(None),) + idx] = np.asarray(amplitude, dtype=complex)
    if hermitian and any(kvec):
        idx_m = tuple((-i) % grid.n_modes for i in idx)
        c[(slice(None),) + idx_m] = np.conj(np.asarray(amplitude, dtype=complex))
    return DivFreeField(grid, c)


def _oversampled(field: DivFreeField, factor: int) -> np.ndarray:
    g = field.grid
    big = g.n_modes * factor
    c = np.zeros((3, big, big, big), dtype=complex)
    kk = g.k1d % big
    c[np.ix_(range(3), kk, kk, kk)] = field.coeffs
    return sfft.ifftn(c, axes=(1, 2, 3), norm="forward").real


def lp_norm(field: DivFreeField, q: float, oversample: int = 2) -> float:
    """||u||_{L^q} by the trapezoid rule on a refined grid (exact for even q <= 2*oversample)."""
    if not np.isfinite(q):
        return sup_norm(field, oversample)
    u = _oversampled(field, oversample)
    mag = np.sqrt(np.sum(u**2, axis=0))
    return float((VOL_FACTOR * np.mean(mag**q)) ** (1.0 / q))


def sup_norm(field: DivFreeField, oversample: int = 2) -> float:
    u = _oversampled(field, oversample)
    return float(np.sqrt(np.max(np.sum(u**2, axis=0))))


def save_snapshot(field: DivFreeField, path) -> None:
    """Binary snapshot: little-endian header then complex128 coefficients in C order."""
    header = _SNAPSHOT_HEADER.pack(
        _SNAPSHOT_MAGIC,
        _SNAPSHOT_VERSION,
        field.grid.n_modes,
        TRANSFORM_TAG.encode("ascii").ljust(8, b"\0"),
        VOL_FACTOR,
    )
    Path(path).write_bytes(header + np.ascontiguousarray(field.coeffs, dtype="<c16").tobytes())


def load_snapshot(path) -> DivFreeField:
    raw = Path(path).read_bytes()
    magic, version, n, tag, vol = _SNAPSHOT_HEADER.unpack_from(raw)
    if magic != _SNAPSHOT_MAGIC or version != _SNAPSHOT_VERSION:
        raise InvalidFieldError(f"{path}: not a field snapshot (magic={magic!r}, version={version})")
    if tag.rstrip(b"\0").decode("ascii") != TRANSFORM_TAG:
        raise InvalidFieldError(f"{path}: unsupported transform convention {tag!r}")
    grid = TorusGrid(n)
    body = np.frombuffer(raw, dtype="<c16", offset=_SNAPSHOT_HEADER.size)
    if body.size != 3 * n**3:
        raise InvalidFieldError(f"{path}: expected {3 * n**3} coefficients, found {body.size}")
    coeffs = body.reshape((3,) + grid.shape).astype(complex)
    if not np.all(np.isfinite(coeffs)):
        raise InvalidFieldError(f"{path}: non-finite coefficients")
    return DivFreeField(grid, coeffs)
