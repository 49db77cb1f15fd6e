"""Copula-parameter estimation for quantile regression with selection.

Four estimators share the same building blocks:

* ``estimate_qrs_baseline``: every (quantile, copula) cell solved cold on the
  fine grid; the correctness and timing reference.
* ``estimate_qrs_repeated``: the warm-started quantile process on the fine
  grid, once per copula value.
* ``estimate_qrs_reduced``: the copula profile is computed on a coarse
  quantile grid, chaining warm starts along the copula grid, and only the
  winner gets a fine-grid process.
* ``estimate_qrs_refined``: as the reduced estimator, but the ``P`` best
  coarse candidates are re-scored on the fine grid.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from .copula import rotated_quantiles
from .preprocess import (
    ProcessError,
    ProcessResult,
    participant_arrays,
    rqr_process,
    solve_preprocessed,
    tau_key,
)
from .propensity import PropensityModel, fit_logit, predict_propensity
from .rqr import RqrProblem, RqrSolution, solve_interior_point
from .types import CopulaParamGrid, Dataset, QuantileGrid, SolverConfig

log = logging.getLogger(__name__)

# residuals this close to zero count as "at or below the fitted quantile"
_FIT_TOL = 1e-9


@dataclass(frozen=True)
class InstrumentConfig:
    """Instrument function ``phi(z) = scale * (1, p, p**2, ..., p**degree)`` of the propensity ``p``.

    ``weighting`` is an optional positive semi-definite matrix ``W``; the
    criterion is then ``sqrt(v' W v)`` instead of the Euclidean norm.
    """

    degree: int = 3
    scale: float = 1.0
    weighting: np.ndarray | None = None

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise ValueError("instrument degree must be a non-negative integer")
        if not self.scale > 0:
            raise ValueError("instrument scale must be positive")
        if self.weighting is not None:
            wm = np.asarray(self.weighting, dtype=np.float64)
            if wm.shape != (self.degree + 1, self.degree + 1):
                raise ValueError("weighting matrix must be (degree+1) x (degree+1)")
            object.__setattr__(self, "weighting", wm)

    def basis(self, pscore: np.ndarray) -> np.ndarray:
        p = np.asarray(pscore, dtype=np.float64)
        return self.scale * p[:, None] ** np.arange(self.degree + 1)

    def norm(self, v: np.ndarray) -> float:
        if self.weighting is None:
            return float(np.sqrt(v @ v))
        return float(np.sqrt(max(v @ self.weighting @ v, 0.0)))


class QrsCellError(RuntimeError):
    """A single (quantile, copula) cell could not be solved."""

    def __init__(self, r: int, a: int, tau: float, theta: float, cause: Exception):
        super().__init__(f"cell (r={r}, a={a}) at tau={tau:g}, theta={theta:g} failed: {cause}")
        self.r = r
        self.a = a
        self.tau = tau
        self.theta = theta


@dataclass
class QrsFit:
    """Result of a QRS estimation run.

    ``objective_profile`` is the criterion over ``theta_grid`` evaluated on
    ``profile_grid`` ("coarse" or "fine"). For the refined estimator the
    fine-grid criterion of each candidate is in ``candidate_objectives`` and
    ``theta_hat`` minimizes it. ``coarse_beta`` (A x R x K) holds the
    coarse-grid coefficients for every copula value; the bootstrap
    warm-starts from it.
    """

    algorithm: str
    theta_hat: float
    taus: np.ndarray
    beta_process: np.ndarray
    theta_grid: np.ndarray
    objective_profile: np.ndarray
    profile_grid: str
    epsilon: float
    gamma: np.ndarray
    instrument: InstrumentConfig = field(default_factory=InstrumentConfig)
    candidates: np.ndarray | None = None
    candidate_objectives: np.ndarray | None = None
    coarse_taus: np.ndarray | None = None
    coarse_beta: np.ndarray | None = None
    data_hash: str = ""
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def theta_index(self) -> int:
        return int(np.flatnonzero(self.theta_grid == self.theta_hat)[0])

    def to_dict(self) -> dict[str, Any]:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "algorithm": self.algorithm,
            "theta_hat": float(self.theta_hat),
            "taus": arr(self.taus),
            "beta": arr(self.beta_process),
            "theta_grid": arr(self.theta_grid),
            "objective_profile": arr(self.objective_profile),
            "profile_grid": self.profile_grid,
            "epsilon": self.epsilon,
            "gamma": arr(self.gamma),
            "instrument_degree": self.instrument.degree,
            "instrument_scale": self.instrument.scale,
            "candidates": arr(self.candidates),
            "candidate_objectives": arr(self.candidate_objectives),
            "coarse_taus": arr(self.coarse_taus),
            "coarse_beta": arr(self.coarse_beta),
            "data_hash": self.data_hash,
            "diagnostics": _jsonable(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> QrsFit:
        def arr(key):
            v = raw.get(key)
            return None if v is None else np.asarray(v, dtype=np.float64)

        return cls(
            algorithm=raw["algorithm"],
            theta_hat=float(raw["theta_hat"]),
            taus=arr("taus"),
            beta_process=arr("beta"),
            theta_grid=arr("theta_grid"),
            objective_profile=arr("objective_profile"),
            profile_grid=raw["profile_grid"],
            epsilon=float(raw["epsilon"]),
            gamma=arr("gamma"),
            instrument=InstrumentConfig(int(raw.get("instrument_degree", 3)), float(raw.get("instrument_scale", 1.0))),
            candidates=arr("candidates"),
            candidate_objectives=arr("candidate_objectives"),
            coarse_taus=arr("coarse_taus"),
            coarse_beta=arr("coarse_beta"),
            data_hash=raw.get("data_hash", ""),
            diagnostics=raw.get("diagnostics", {}),
        )

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @classmethod
    def read_json(cls, path: str | Path) -> QrsFit:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def beta_csv(self) -> str:
        k = self.beta_process.shape[1]
        lines = ["tau," + ",".join(f"beta_{j}" for j in range(k))]
        for tau, row in zip(self.taus, self.beta_process):
            lines.append(",".join(repr(float(v)) for v in (tau, *row)))
        return "\n".join(lines) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


class _Sample:
    """Participant arrays, instrument basis and solver hooks for one weighting of the data."""

    def __init__(self, data: Dataset, pscore, instr: InstrumentConfig, weights=None, epsilon: float = 0.01):
        self.data = data
        self.y, self.x, self.ps, self.w = participant_arrays(data, pscore, weights)
        self.pscore = np.asarray(pscore)
        self.weights = weights
        self.phi = instr.basis(self.ps)
        self.instr = instr
        self.n_total = data.n
        self.epsilon = epsilon

    def u(self, tau: float, theta: float) -> np.ndarray:
        return rotated_quantiles(tau, self.ps, theta)

    def problem(self, u: np.ndarray) -> RqrProblem:
        return RqrProblem(self.y, self.x, u, self.w)

    def objective(self, betas: np.ndarray, us: list[np.ndarray]) -> float:
        return _moment_norm(self.y, self.x, self.w, self.phi, betas, us, self.n_total, self.epsilon, self.instr)


def _moment_norm(y, x, w, phi, betas, us, n_total, epsilon, instr) -> float:
    betas = np.atleast_2d(np.asarray(betas, dtype=np.float64))
    if betas.shape[0] != len(us) or betas.shape[1] != x.shape[1]:
        raise ValueError(f"beta matrix of shape {betas.shape} does not match {len(us)} quantiles x {x.shape[1]} covariates")
    tol = _FIT_TOL * (1.0 + np.abs(y))
    acc = np.zeros(y.shape[0])
    for b, u in zip(betas, us):
        acc += (y - x @ b <= tol) - u
    v = phi.T @ (w * acc) * ((1.0 - 2.0 * epsilon) / (n_total * len(us)))
    return instr.norm(v)


def qrs_objective(
    data: Dataset,
    beta_of_tau: np.ndarray,
    t: float,
    pscore: np.ndarray,
    grid: QuantileGrid,
    instr: InstrumentConfig | None = None,
    weights: np.ndarray | None = None,
) -> float:
    """Moment criterion for the copula parameter ``t``.

    ``v(t) = (1 - 2 eps) / (N |grid|) * sum_q sum_i W_i D_i phi_i [1(Y_i <= X_i'b_q) - G(tau_q, p_i; t)]``
    and the function returns ``||v(t)||``. Row ``q`` of ``beta_of_tau`` is
    the coefficient vector at ``grid.values[q]``.
    """
    instr = instr or InstrumentConfig()
    sample = _Sample(data, pscore, instr, weights, grid.epsilon)
    us = [sample.u(float(t_q), t) for t_q in grid.values]
    return sample.objective(beta_of_tau, us)


def _pmap(fn: Callable, items: Iterable, threads: int) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _propensity(data: Dataset, propensity: PropensityModel | None):
    model = propensity if propensity is not None else fit_logit(data)
    return model, predict_propensity(model, data)


def _check_grids(fine_grid: QuantileGrid, coarse_grid: QuantileGrid | None):
    if coarse_grid is None:
        return
    if coarse_grid.values[0] < fine_grid.values[0] - 1e-12 or coarse_grid.values[-1] > fine_grid.values[-1] + 1e-12:
        raise ValueError("coarse quantile grid must lie within the fine grid's range")


class _Flags:
    """Collects solver diagnostics for every cell of a run."""

    def __init__(self):
        self.cells = 0
        self.unconverged: list[tuple[str, float, float]] = []
        self.fallbacks: list[tuple[str, float, float]] = []
        self.iterations = 0

    def add(self, stage: str, tau: float, theta: float, sol: RqrSolution):
        self.cells += 1
        self.iterations += sol.iterations
        if not sol.converged:
            self.unconverged.append((stage, float(tau), float(theta)))
        if sol.fallback:
            self.fallbacks.append((stage, float(tau), float(theta)))

    def add_process(self, stage: str, theta: float, res: ProcessResult, skip: set[float] = frozenset()):
        for tau, sol in zip(res.taus, res.solutions):
            if tau_key(tau) not in skip:
                self.add(stage, tau, theta, sol)

    def as_dict(self) -> dict[str, Any]:
        return {
            "cells": self.cells,
            "iterations": self.iterations,
            "n_unconverged": len(self.unconverged),
            "n_fallback": len(self.fallbacks),
            "unconverged": [list(c) for c in self.unconverged],
            "fallback": [list(c) for c in self.fallbacks],
        }


@dataclass
class CoarseSweep:
    """Coarse-grid solutions for every copula value and the resulting profile."""

    taus: np.ndarray
    thetas: np.ndarray
    solutions: list[list[RqrSolution]]  # [a][r]
    us: list[list[np.ndarray]]
    profile: np.ndarray

    @property
    def beta(self) -> np.ndarray:
        return np.array([[s.beta for s in row] for row in self.solutions])

    def known(self, a: int) -> dict[float, RqrSolution]:
        return {float(t): s for t, s in zip(self.taus, self.solutions[a])}


def coarse_sweep(
    sample: _Sample,
    copula_grid: CopulaParamGrid,
    coarse_grid: QuantileGrid,
    config: SolverConfig,
    flags: _Flags,
    *,
    start_beta: np.ndarray | None = None,
    m: float | None = None,
    threads: int = 1,
) -> CoarseSweep:
    """Coarse-grid coefficients over the whole copula grid.

    Without ``start_beta`` the first copula value gets a warm-started
    quantile process and each later value is preprocessed from the previous
    one at the same quantile. With ``start_beta`` (A x R x K, typically the
    point estimates) every cell is preprocessed from its own entry and the
    chain is skipped.
    """
    taus = coarse_grid.values
    thetas = copula_grid.values
    m_est = config.m_init_estimation if m is None else m
    sols: list[list[RqrSolution]] = []
    us_all: list[list[np.ndarray]] = []

    def cell(args):
        r, a, prelim, mm = args
        tau, theta = float(taus[r]), float(thetas[a])
        u = sample.u(tau, theta)
        try:
            sol = solve_preprocessed(sample.problem(u), prelim, mm, config)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise QrsCellError(r, a, tau, theta, exc) from exc
        return u, sol

    for a, theta in enumerate(thetas):
        if start_beta is not None:
            out = _pmap(cell, [(r, a, start_beta[a, r], m_est) for r in range(taus.size)], threads)
        elif a == 0:
            try:
                res = rqr_process(
                    sample.data, float(theta), coarse_grid, sample.pscore, config,
                    weights=sample.weights, m=m_est,
                )
            except ProcessError as exc:
                raise QrsCellError(exc.q, 0, exc.tau, float(theta), exc) from exc
            out = list(zip(res.us, res.solutions))
        else:
            prev = sols[a - 1]
            out = _pmap(cell, [(r, a, prev[r].beta, m_est) for r in range(taus.size)], threads)
        us_all.append([o[0] for o in out])
        sols.append([o[1] for o in out])
        for tau, (_, sol) in zip(taus, out):
            flags.add("coarse", tau, theta, sol)
    profile = np.array([
        sample.objective(np.array([s.beta for s in row]), us) for row, us in zip(sols, us_all)
    ])
    return CoarseSweep(taus=taus.copy(), thetas=thetas.copy(), solutions=sols, us=us_all, profile=profile)


def fine_process(
    sample: _Sample,
    theta: float,
    fine_grid: QuantileGrid,
    config: SolverConfig,
    known: dict[float, RqrSolution] | None = None,
    m: float | None = None,
    cold: bool = False,
) -> tuple[ProcessResult, float]:
    """Fine-grid coefficient process at ``theta`` and its criterion value."""
    res = rqr_process(
        sample.data, theta, fine_grid, sample.pscore, config,
        weights=sample.weights, known=known, m=m, cold_start=cold,
    )
    return res, sample.objective(res.beta, res.us)


def _first_argmin(values: np.ndarray) -> int:
    """Index of the smallest value; ties go to the lowest index."""
    return int(np.argmin(values))


def select_candidates(profile: np.ndarray, p: int) -> np.ndarray:
    """Indices of the ``p`` smallest profile values, in grid order."""
    if not 1 <= p <= profile.size:
        raise ValueError(f"number of candidates must lie in [1, {profile.size}]")
    return np.sort(np.argsort(profile, kind="stable")[:p])


def _finish(algorithm, data, sample, model, fine_grid, copula_grid, theta_idx, beta, profile, profile_grid,
            flags, timings, **extra) -> QrsFit:
    diag = flags.as_dict()
    diag["timings"] = timings
    diag["propensity_converged"] = bool(model.converged)
    return QrsFit(
        algorithm=algorithm,
        theta_hat=float(copula_grid.values[theta_idx]),
        taus=fine_grid.values.copy(),
        beta_process=beta,
        theta_grid=copula_grid.values.copy(),
        objective_profile=np.asarray(profile, dtype=np.float64),
        profile_grid=profile_grid,
        epsilon=fine_grid.epsilon,
        gamma=np.asarray(model.gamma, dtype=np.float64),
        instrument=sample.instr,
        data_hash=data.content_hash(),
        diagnostics=diag,
        **extra,
    )


def estimate_qrs_reduced(
    data: Dataset,
    copula_grid: CopulaParamGrid,
    fine_grid: QuantileGrid,
    coarse_grid: QuantileGrid,
    instr: InstrumentConfig | None = None,
    config: SolverConfig | None = None,
    *,
    propensity: PropensityModel | None = None,
    threads: int = 1,
) -> QrsFit:
    """Copula parameter from the coarse-grid profile, then one fine-grid process.

    The coarse solutions at ``theta_hat`` are reused on the fine grid and
    serve as preliminary fits for their neighbours.
    """
    instr = instr or InstrumentConfig()
    config = config or SolverConfig()
    _check_grids(fine_grid, coarse_grid)
    t0 = time.perf_counter()
    model, ps = _propensity(data, propensity)
    sample = _Sample(data, ps, instr, epsilon=fine_grid.epsilon)
    flags = _Flags()
    t1 = time.perf_counter()
    sweep = coarse_sweep(sample, copula_grid, coarse_grid, config, flags, threads=threads)
    t2 = time.perf_counter()
    a_hat = _first_argmin(sweep.profile)
    known = sweep.known(a_hat)
    res, _ = fine_process(sample, float(copula_grid.values[a_hat]), fine_grid, config, known=known)
    flags.add_process("fine", copula_grid.values[a_hat], res, skip={tau_key(t) for t in known})
    t3 = time.perf_counter()
    timings = {"propensity": t1 - t0, "coarse": t2 - t1, "fine": t3 - t2, "total": t3 - t0}
    return _finish(
        "alg2", data, sample, model, fine_grid, copula_grid, a_hat, res.beta, sweep.profile, "coarse",
        flags, timings, coarse_taus=sweep.taus, coarse_beta=sweep.beta,
    )


def estimate_qrs_refined(
    data: Dataset,
    copula_grid: CopulaParamGrid,
    fine_grid: QuantileGrid,
    coarse_grid: QuantileGrid,
    instr: InstrumentConfig | None = None,
    p: int = 3,
    config: SolverConfig | None = None,
    *,
    propensity: PropensityModel | None = None,
    threads: int = 1,
) -> QrsFit:
    """Coarse-grid profile, then the ``p`` best candidates re-scored on the fine grid."""
    instr = instr or InstrumentConfig()
    config = config or SolverConfig()
    _check_grids(fine_grid, coarse_grid)
    if not 1 <= p <= len(copula_grid):
        raise ValueError(f"P must lie in [1, {len(copula_grid)}]")
    t0 = time.perf_counter()
    model, ps = _propensity(data, propensity)
    sample = _Sample(data, ps, instr, epsilon=fine_grid.epsilon)
    flags = _Flags()
    t1 = time.perf_counter()
    sweep = coarse_sweep(sample, copula_grid, coarse_grid, config, flags, threads=threads)
    t2 = time.perf_counter()
    cand = select_candidates(sweep.profile, p)

    def run(a):
        return fine_process(sample, float(copula_grid.values[a]), fine_grid, config, known=sweep.known(a))

    results = _pmap(run, cand, threads)
    skip = {tau_key(t) for t in sweep.taus}
    for a, (res, _) in zip(cand, results):
        flags.add_process("fine", copula_grid.values[a], res, skip=skip)
    cand_obj = np.array([obj for _, obj in results])
    best = _first_argmin(cand_obj)
    t3 = time.perf_counter()
    timings = {"propensity": t1 - t0, "coarse": t2 - t1, "fine": t3 - t2, "total": t3 - t0}
    return _finish(
        "alg3", data, sample, model, fine_grid, copula_grid, int(cand[best]), results[best][0].beta,
        sweep.profile, "coarse", flags, timings,
        candidates=copula_grid.values[cand].copy(), candidate_objectives=cand_obj,
        coarse_taus=sweep.taus, coarse_beta=sweep.beta,
    )


def _coarse_from_fine(fine_grid, coarse_grid, betas_by_theta):
    if coarse_grid is None:
        return None, None
    keys = [tau_key(t) for t in fine_grid.values]
    try:
        idx = [keys.index(tau_key(t)) for t in coarse_grid.values]
    except ValueError:
        return None, None
    return coarse_grid.values.copy(), np.array([b[idx] for b in betas_by_theta])


def estimate_qrs_baseline(
    data: Dataset,
    copula_grid: CopulaParamGrid,
    fine_grid: QuantileGrid,
    instr: InstrumentConfig | None = None,
    config: SolverConfig | None = None,
    *,
    propensity: PropensityModel | None = None,
    coarse_grid: QuantileGrid | None = None,
    threads: int = 1,
) -> QrsFit:
    """Every (quantile, copula) cell solved from scratch on the fine grid.

    When ``coarse_grid`` is a subset of ``fine_grid`` the matching cells are
    stored as ``coarse_beta`` so the fit can seed a bootstrap.
    """
    return _fine_everywhere("baseline", data, copula_grid, fine_grid, instr, config, propensity, coarse_grid,
                            threads, cold=True)


def estimate_qrs_repeated(
    data: Dataset,
    copula_grid: CopulaParamGrid,
    fine_grid: QuantileGrid,
    instr: InstrumentConfig | None = None,
    config: SolverConfig | None = None,
    *,
    propensity: PropensityModel | None = None,
    coarse_grid: QuantileGrid | None = None,
    threads: int = 1,
) -> QrsFit:
    """The warm-started fine-grid process repeated for every copula value."""
    return _fine_everywhere("alg1", data, copula_grid, fine_grid, instr, config, propensity, coarse_grid,
                            threads, cold=False)


def _fine_everywhere(algorithm, data, copula_grid, fine_grid, instr, config, propensity, coarse_grid, threads, cold):
    instr = instr or InstrumentConfig()
    config = config or SolverConfig()
    t0 = time.perf_counter()
    model, ps = _propensity(data, propensity)
    sample = _Sample(data, ps, instr, epsilon=fine_grid.epsilon)
    flags = _Flags()
    t1 = time.perf_counter()

    def run(a):
        try:
            return fine_process(sample, float(copula_grid.values[a]), fine_grid, config, cold=cold)
        except ProcessError as exc:
            raise QrsCellError(exc.q, a, exc.tau, float(copula_grid.values[a]), exc) from exc

    results = _pmap(run, range(len(copula_grid)), threads)
    for theta, (res, _) in zip(copula_grid.values, results):
        flags.add_process("fine", theta, res)
    profile = np.array([obj for _, obj in results])
    a_hat = _first_argmin(profile)
    t2 = time.perf_counter()
    coarse_taus, coarse_beta = _coarse_from_fine(fine_grid, coarse_grid, [res.beta for res, _ in results])
    timings = {"propensity": t1 - t0, "fine": t2 - t1, "total": t2 - t0}
    return _finish(
        algorithm, data, sample, model, fine_grid, copula_grid, a_hat, results[a_hat][0].beta, profile, "fine",
        flags, timings, coarse_taus=coarse_taus, coarse_beta=coarse_beta,
    )


ALGORITHMS = ("baseline", "alg1", "alg2", "alg3")


def estimate(
    algorithm: str,
    data: Dataset,
    copula_grid: CopulaParamGrid,
    fine_grid: QuantileGrid,
    coarse_grid: QuantileGrid,
    instr: InstrumentConfig | None = None,
    config: SolverConfig | None = None,
    p: int = 3,
    **kw,
) -> QrsFit:
    """Dispatch on the algorithm name (``baseline``, ``alg1``, ``alg2``, ``alg3``)."""
    if algorithm == "baseline":
        return estimate_qrs_baseline(data, copula_grid, fine_grid, instr, config, coarse_grid=coarse_grid, **kw)
    if algorithm in ("alg1", "alg1-repeated"):
        return estimate_qrs_repeated(data, copula_grid, fine_grid, instr, config, coarse_grid=coarse_grid, **kw)
    if algorithm == "alg2":
        return estimate_qrs_reduced(data, copula_grid, fine_grid, coarse_grid, instr, config, **kw)
    if algorithm == "alg3":
        return estimate_qrs_refined(data, copula_grid, fine_grid, coarse_grid, instr, p, config, **kw)
    raise ValueError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
