"""Run configuration: YAML in, dataclasses inside, canonical JSON for hashing."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .coefficients import CoefficientSet, builtin_family, taylor_green_field
from .field import DivFreeField, TorusGrid, load_snapshot, random_field
from .integrator import SCHEMES, SolverConfig
from .operators import TamingProfile

EXPERIMENTS = (
    "simulate",
    "probe-uniqueness",
    "averaging-sweep",
    "freeze-rate",
    "average-coeffs",
    "validate-assumptions",
)


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field."""

    def __init__(self, where: str, msg: str):
        super().__init__(f"{where}: {msg}")
        self.where = where


def _take(d: dict, where: str, allowed: dict[str, Any]) -> dict:
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError(where, f"expected a mapping, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}", f"unknown key (allowed: {sorted(allowed)})")
    out = dict(allowed)
    out.update(d)
    return out


def _num(v, where: str, positive: bool = False, allow_none: bool = False) -> float | None:
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(where, f"expected a number, got {v!r}")
    v = float(v)
    if not math.isfinite(v):
        raise ConfigError(where, f"expected a finite number, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(where, f"must be positive, got {v!r}")
    return v


def _int(v, where: str, minimum: int = 0) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(where, f"expected an integer, got {v!r}")
    if v < minimum:
        raise ConfigError(where, f"must be >= {minimum}, got {v}")
    return v


@dataclass(frozen=True)
class GridSpec:
    n_modes: int = 8

    @classmethod
    def from_dict(cls, d) -> GridSpec:
        d = _take(d, "grid", {"n_modes": 8})
        n = _int(d["n_modes"], "grid.n_modes", 4)
        if n % 2:
            raise ConfigError("grid.n_modes", f"must be even, got {n}")
        return cls(n)


@dataclass(frozen=True)
class TamingSpec:
    N: float = 1.0
    nu: float = 1.0

    @classmethod
    def from_dict(cls, d) -> TamingSpec:
        d = _take(d, "taming", {"N": 1.0, "nu": 1.0})
        return cls(_num(d["N"], "taming.N", True), _num(d["nu"], "taming.nu", True))


@dataclass(frozen=True)
class FamilySpec:
    name: str = "linear"
    params: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d) -> FamilySpec:
        d = _take(d, "family", {"name": "linear", "params": {}})
        if d["name"] not in ("zero", "linear", "osgood"):
            raise ConfigError("family.name", f"unknown family {d['name']!r}; choose zero, linear or osgood")
        if not isinstance(d["params"] or {}, dict):
            raise ConfigError("family.params", "expected a mapping")
        return cls(d["name"], dict(d["params"] or {}))


@dataclass(frozen=True)
class SolverSpec:
    dt: float = 0.01
    T: float = 1.0
    scheme: str = "semi-implicit"
    M_cut: float | None = None
    R: float | None = None
    record_stride: int = 1

    @classmethod
    def from_dict(cls, d) -> SolverSpec:
        d = _take(d, "solver", asdict(cls()))
        if d["scheme"] not in SCHEMES:
            raise ConfigError("solver.scheme", f"unknown scheme {d['scheme']!r}; choose from {SCHEMES}")
        spec = cls(
            _num(d["dt"], "solver.dt", True),
            _num(d["T"], "solver.T", True),
            d["scheme"],
            _num(d["M_cut"], "solver.M_cut", True, allow_none=True),
            _num(d["R"], "solver.R", True, allow_none=True),
            _int(d["record_stride"], "solver.record_stride", 1),
        )
        ratio = spec.T / spec.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(ratio, 1.0):
            raise ConfigError("solver.dt", f"T={spec.T} is not a whole number of steps of dt={spec.dt}")
        return spec


@dataclass(frozen=True)
class InitialSpec:
    """kind: random | taylor_green | zero | snapshot."""

    kind: str = "random"
    amplitude: float = 1.0
    decay: float = 2.0
    seed_offset: int = 0
    path: str | None = None

    @classmethod
    def from_dict(cls, d) -> InitialSpec:
        d = _take(d, "initial", asdict(cls()))
        if d["kind"] not in ("random", "taylor_green", "zero", "snapshot"):
            raise ConfigError("initial.kind", f"unknown kind {d['kind']!r}")
        if d["kind"] == "snapshot" and not d["path"]:
            raise ConfigError("initial.path", "snapshot initial data needs a path")
        return cls(
            d["kind"],
            _num(d["amplitude"], "initial.amplitude"),
            _num(d["decay"], "initial.decay"),
            _int(d["seed_offset"], "initial.seed_offset"),
            d["path"],
        )


_EXPERIMENT_DEFAULTS: dict[str, dict[str, Any]] = {
    "simulate": {"n_paths": 4, "p": 1.0},
    "probe-uniqueness": {"n_paths": 16, "beta": 0.5, "deltas": [1e-2, 1e-3, 1e-4], "m": 0,
                         "separation": 0.1, "modulus": None},
    "averaging-sweep": {"epsilons": [0.5, 0.1, 0.02], "n_paths": 16, "m": 0, "d": "sqrt",
                        "record_stride": 1, "initial_offset": 0.0},
    "freeze-rate": {"ds": [0.25, 0.0625, 0.015625], "n_paths": 16, "m": 1, "min_exponent": 0.4},
    "average-coeffs": {"windows": [10.0, 40.0, 160.0]},
    "validate-assumptions": {"p": 1.0, "noise_eps": 1e-3, "corpus_size": 24, "pair_count": 40},
}


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    params: dict

    @classmethod
    def from_dict(cls, d) -> ExperimentSpec:
        if not isinstance(d, dict) or "kind" not in d:
            raise ConfigError("experiment.kind", "missing experiment kind")
        kind = d["kind"]
        if kind not in EXPERIMENTS:
            raise ConfigError("experiment.kind", f"unknown experiment {kind!r}; choose from {EXPERIMENTS}")
        rest = {k: v for k, v in d.items() if k != "kind"}
        params = _take(rest, "experiment", _EXPERIMENT_DEFAULTS[kind])
        for key in ("n_paths",):
            if key in params:
                _int(params[key], f"experiment.{key}", 1)
        if "m" in params and params["m"] not in (0, 1):
            raise ConfigError("experiment.m", f"must be 0 or 1, got {params['m']!r}")
        return cls(kind, params)


@dataclass(frozen=True)
class RunConfig:
    experiment: ExperimentSpec
    seed: int = 0
    grid: GridSpec = GridSpec()
    taming: TamingSpec = TamingSpec()
    family: FamilySpec = FamilySpec()
    solver: SolverSpec = SolverSpec()
    initial: InitialSpec = InitialSpec()
    out: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("<root>", "configuration must be a mapping")
        allowed = {"experiment", "seed", "grid", "taming", "family", "solver", "initial", "out"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ConfigError(unknown[0], f"unknown top-level key (allowed: {sorted(allowed)})")
        seed = d.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigError("seed", f"expected an unsigned 64-bit integer, got {seed!r}")
        return cls(
            experiment=ExperimentSpec.from_dict(d.get("experiment")),
            seed=seed,
            grid=GridSpec.from_dict(d.get("grid")),
            taming=TamingSpec.from_dict(d.get("taming")),
            family=FamilySpec.from_dict(d.get("family")),
            solver=SolverSpec.from_dict(d.get("solver")),
            initial=InitialSpec.from_dict(d.get("initial")),
            out=d.get("out"),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        exp = d.pop("experiment")
        d["experiment"] = {"kind": exp["kind"], **exp["params"]}
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @property
    def config_hash(self) -> str:
        """sha256 of the canonical JSON form, excluding the output directory."""
        d = self.to_dict()
        d.pop("out", None)
        text = json.dumps(_canonical(d), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    # builders -----------------------------------------------------------

    def grid_obj(self) -> TorusGrid:
        return TorusGrid(self.grid.n_modes)

    def profile(self) -> TamingProfile:
        return TamingProfile(self.taming.N, self.taming.nu)

    def coefficients(self, grid: TorusGrid) -> CoefficientSet:
        try:
            return builtin_family(self.family.name, grid, self.family.params)
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError("family.params", str(exc)) from exc

    def solver_config(self) -> SolverConfig:
        s = self.solver
        return SolverConfig(
            dt=s.dt, T=s.T, profile=self.profile(), scheme=s.scheme, M_cut=s.M_cut,
            R=np.inf if s.R is None else s.R, record_stride=s.record_stride,
        )

    def initial_field(self, grid: TorusGrid) -> DivFreeField:
        ini = self.initial
        if ini.kind == "zero":
            return DivFreeField.zeros(grid)
        if ini.kind == "taylor_green":
            return taylor_green_field(grid, ini.amplitude)
        if ini.kind == "snapshot":
            u = load_snapshot(ini.path)
            if u.grid.n_modes != grid.n_modes:
                raise ConfigError("initial.path", f"snapshot grid {u.grid.n_modes} != {grid.n_modes}")
            return u
        rng = np.random.default_rng([self.seed % 2**64, 0xF1E1D, ini.seed_offset])
        return random_field(grid, rng, amplitude=ini.amplitude, decay=ini.decay)


def _canonical(x):
    """Floats normalised so that 1 and 1.0 hash alike."""
    if isinstance(x, dict):
        return {str(k): _canonical(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_canonical(v) for v in x]
    if isinstance(x, bool) or x is None or isinstance(x, str):
        return x
    if isinstance(x, (int, float)):
        return repr(float(x))
    return str(x)


def load_config(path, seed: int | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("--config", f"not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    if seed is not None:
        data = dict(data, seed=seed)
    return RunConfig.from_dict(data)
