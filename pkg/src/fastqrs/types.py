"""Core data containers: selection datasets, grids and solver settings."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np


class DataValidationError(ValueError):
    """Raised when an input table violates the selection-model structure."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Sample-selection data ``(Y, D, Z)`` with ``Z = (Z1, X)``.

    ``x`` always carries the intercept in column 0.
    """

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    z1: np.ndarray
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "y", _frozen(self.y))
        object.__setattr__(self, "d", _frozen(self.d))
        object.__setattr__(self, "x", _frozen(np.atleast_2d(self.x)))
        z1 = np.asarray(self.z1, dtype=np.float64)
        if z1.ndim == 1:
            z1 = z1[:, None]
        object.__setattr__(self, "z1", _frozen(z1))
        if not self.covariate_names:
            names = tuple(f"x{j + 1}" for j in range(1, self.x.shape[1]))
            object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.x.shape[1]

    @property
    def participants(self) -> np.ndarray:
        return self.d == 1.0

    @property
    def n_participants(self) -> int:
        return int(self.participants.sum())

    @property
    def participation_rate(self) -> float:
        return self.n_participants / self.n

    @property
    def z(self) -> np.ndarray:
        """Propensity regressors: intercept, instruments, remaining covariates."""
        return np.column_stack([self.x[:, :1], self.z1, self.x[:, 1:]])

    def to_csv(self) -> str:
        """Serialize with header ``y,d,z1,x2,...,xK`` (intercept omitted)."""
        cols = ["y", "d"]
        cols += ["z1"] if self.z1.shape[1] == 1 else [f"z1_{j + 1}" for j in range(self.z1.shape[1])]
        cols += list(self.covariate_names)
        table = np.column_stack([self.y, self.d, self.z1, self.x[:, 1:]])
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        for row in table:
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for a in (self.y, self.d, self.x, self.z1):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def validate_dataset(raw: Mapping[str, Any] | np.ndarray, columns: list[str] | None = None) -> Dataset:
    """Build a :class:`Dataset` from a column table, checking the model structure.

    ``raw`` is either a mapping ``name -> column`` (a pandas DataFrame works) or a
    2-D array with ``columns`` naming its columns. Required columns are ``y``,
    ``d`` and ``z1`` (or ``z1_1, z1_2, ...``); every other column is a covariate.
    """
    if isinstance(raw, np.ndarray):
        if columns is None:
            raise DataValidationError("column names are required for array input")
        table = {c: raw[:, j] for j, c in enumerate(columns)}
    else:
        table = {str(c): np.asarray(raw[c]) for c in raw.keys()}
    for col in ("y", "d"):
        if col not in table:
            raise DataValidationError(f"missing required column '{col}'")
    inst = sorted((c for c in table if c == "z1" or c.startswith("z1_")), key=_natural_key)
    if not inst:
        raise DataValidationError("missing required column 'z1' (instrument)")
    covs = [c for c in table if c not in ("y", "d") and c not in inst]

    try:
        y = np.asarray(table["y"], dtype=np.float64)
        d = np.asarray(table["d"], dtype=np.float64)
        z1 = np.column_stack([np.asarray(table[c], dtype=np.float64) for c in inst])
        xs = [np.asarray(table[c], dtype=np.float64) for c in covs]
    except (TypeError, ValueError) as exc:
        raise DataValidationError(f"non-numeric column: {exc}") from exc
    n = y.shape[0]
    x = np.column_stack([np.ones(n)] + xs)
    for name, arr in (("y", y), ("d", d), ("z1", z1), ("x", x)):
        if not np.all(np.isfinite(arr)):
            raise DataValidationError(f"non-finite values in column '{name}'")
    if not np.all((d == 0.0) | (d == 1.0)):
        raise DataValidationError("participation indicator d must be 0 or 1")
    if np.any((d == 0.0) & (y != 0.0)):
        raise DataValidationError("outcome nonzero for non-participant")
    part = d == 1.0
    k = x.shape[1]
    if part.sum() < k + 1:
        raise DataValidationError(f"need at least K+1={k + 1} participants, got {int(part.sum())}")
    if np.linalg.matrix_rank(x[part]) < k:
        raise DataValidationError("participant design matrix is rank deficient")
    return Dataset(y=y, d=d, x=x, z1=z1, covariate_names=tuple(covs))


def _natural_key(name: str):
    tail = name.split("_")[-1]
    return (0, int(tail)) if tail.isdigit() else (0, -1)


def read_csv(path: str | Path) -> Dataset:
    """Read a dataset CSV with header ``y,d,z1,x2,...,xK``."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    values = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, encoding="utf-8")
    if values.shape[1] != len(header):
        raise DataValidationError("row width does not match header")
    return validate_dataset(values, [h.strip() for h in header])


def write_csv(data: Dataset, path: str | Path) -> None:
    Path(path).write_text(data.to_csv(), encoding="utf-8")


def _check_increasing(values: np.ndarray, what: str) -> None:
    if values.ndim != 1 or values.size == 0:
        raise ValueError(f"{what} must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} contains non-finite values")
    if np.any(np.diff(values) <= 0):
        raise ValueError(f"{what} must be strictly increasing")


@dataclass(frozen=True, eq=False)
class QuantileGrid:
    """Strictly increasing quantile levels inside ``[epsilon, 1 - epsilon]``."""

    values: np.ndarray
    epsilon: float = 0.01

    def __post_init__(self):
        v = _frozen(np.asarray(self.values, dtype=np.float64).ravel())
        _check_increasing(v, "quantile grid")
        eps = float(self.epsilon)
        if not 0.0 < eps < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")
        if v[0] < eps - 1e-12 or v[-1] > 1.0 - eps + 1e-12:
            raise ValueError(f"quantile grid must lie in [{eps}, {1 - eps}]")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "epsilon", eps)

    def __len__(self) -> int:
        return self.values.size

    @classmethod
    def percentiles(cls, epsilon: float = 0.01) -> QuantileGrid:
        return cls(np.round(np.arange(1, 100) / 100.0, 12), epsilon)

    @classmethod
    def deciles(cls, epsilon: float = 0.01) -> QuantileGrid:
        return cls(np.round(np.arange(1, 10) / 10.0, 12), epsilon)

    def median_index(self) -> int:
        """Index of the grid point closest to 0.5 (lower one on ties)."""
        return int(np.argmin(np.abs(self.values - 0.5)))


@dataclass(frozen=True, eq=False)
class CopulaParamGrid:
    """Strictly increasing Gaussian-copula correlations in ``(-1, 1)``."""

    values: np.ndarray

    def __post_init__(self):
        v = _frozen(np.asarray(self.values, dtype=np.float64).ravel())
        _check_increasing(v, "copula grid")
        if np.any(np.abs(v) >= 1.0):
            raise ValueError("Gaussian copula parameters must lie in (-1, 1)")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size

    @classmethod
    def default(cls) -> CopulaParamGrid:
        return cls(np.round(np.arange(-90, 91) / 100.0, 12))


@dataclass(frozen=True)
class SolverConfig:
    """Interior-point and preprocessing settings."""

    max_iterations: int = 50
    gap_tolerance: float = 1e-5
    m_init_estimation: float = 0.5
    m_init_bootstrap: float = 1.0
    bad_sign_allowance: int = 0
    bad_sign_refactor_fraction: float = 0.1
    max_preprocess_rounds: int = 6
    # full-problem solves may double their iteration cap up to this factor
    full_solve_cap_growth: int = 8

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.gap_tolerance <= 0:
            raise ValueError("gap_tolerance must be positive")
        if self.m_init_estimation <= 0 or self.m_init_bootstrap <= 0:
            raise ValueError("m parameters must be positive")
        if self.bad_sign_allowance < 0:
            raise ValueError("bad_sign_allowance must be non-negative")
        if not 0.0 < self.bad_sign_refactor_fraction < 1.0:
            raise ValueError("bad_sign_refactor_fraction must lie in (0, 1)")
        if self.max_preprocess_rounds < 1:
            raise ValueError("max_preprocess_rounds must be positive")
        if self.full_solve_cap_growth < 1:
            raise ValueError("full_solve_cap_growth must be at least 1")


@dataclass
class EstimationConfig:
    """Everything a run needs besides the data; mirrors the JSON config file."""

    fine_grid: QuantileGrid = field(default_factory=QuantileGrid.percentiles)
    coarse_grid: QuantileGrid = field(default_factory=QuantileGrid.deciles)
    copula_grid: CopulaParamGrid = field(default_factory=CopulaParamGrid.default)
    solver: SolverConfig = field(default_factory=SolverConfig)
    instrument_degree: int = 3
    p_candidates: int = 3


def load_config(path: str | Path | None) -> EstimationConfig:
    """Read a JSON config; missing keys take defaults.

    Recognised keys: ``fine_grid``, ``coarse_grid``, ``copula_grid`` (lists),
    ``epsilon``, ``instrument_degree``, ``p_candidates`` and every
    :class:`SolverConfig` field, either at top level or under ``"solver"``.
    """
    if path is None:
        return EstimationConfig()
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return config_from_dict(raw)


def config_from_dict(raw: Mapping[str, Any]) -> EstimationConfig:
    eps = float(raw.get("epsilon", 0.01))
    solver_keys = {f.name for f in fields(SolverConfig)}
    solver_raw = dict(raw.get("solver", {}))
    solver_raw.update({k: v for k, v in raw.items() if k in solver_keys})
    unknown = set(solver_raw) - solver_keys
    if unknown:
        raise ValueError(f"unknown solver keys: {sorted(unknown)}")
    cfg = EstimationConfig(
        fine_grid=QuantileGrid(raw["fine_grid"], eps) if "fine_grid" in raw else QuantileGrid.percentiles(eps),
        coarse_grid=QuantileGrid(raw["coarse_grid"], eps) if "coarse_grid" in raw else QuantileGrid.deciles(eps),
        copula_grid=CopulaParamGrid(raw["copula_grid"]) if "copula_grid" in raw else CopulaParamGrid.default(),
        solver=SolverConfig(**solver_raw),
        instrument_degree=int(raw.get("instrument_degree", 3)),
        p_candidates=int(raw.get("p_candidates", 3)),
    )
    return cfg


def config_to_dict(cfg: EstimationConfig) -> dict[str, Any]:
    return {
        "fine_grid": cfg.fine_grid.values.tolist(),
        "coarse_grid": cfg.coarse_grid.values.tolist(),
        "copula_grid": cfg.copula_grid.values.tolist(),
        "epsilon": cfg.fine_grid.epsilon,
        "instrument_degree": cfg.instrument_degree,
        "p_candidates": cfg.p_candidates,
        "solver": asdict(cfg.solver),
    }
