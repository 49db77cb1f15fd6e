"""Monte Carlo data-generating process, benchmark runner and numerical diagnostics.

The model is

    Y* = X'beta(U),  Y = D * Y*,  D = 1(V <= Lambda(Z'gamma)),  (U, V) ~ Gaussian copula(theta)

with an intercept plus U(2, 3) covariates in ``X``, a standard normal
instrument ``Z1``, ``beta(U) = (Phi^-1(U), U*b_2, ..., U*b_K)`` and
``gamma = (-1.5, 2, 0.1*g_2, ..., 0.1*g_K)``. The constants ``b_k`` and
``g_k`` are U(0, 1) draws fixed for a whole experiment.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.special import expit, ndtr, ndtri

from .qrs import ALGORITHMS, InstrumentConfig, estimate
from .types import CopulaParamGrid, Dataset, QuantileGrid, SolverConfig

log = logging.getLogger(__name__)

GAMMA_INTERCEPT = -1.5
GAMMA_INSTRUMENT = 2.0
GAMMA_COVARIATE_SCALE = 0.1


@dataclass(frozen=True)
class DgpConfig:
    """One simulated sample.

    ``k`` counts the intercept. ``seed`` drives the sample draws and
    ``constants_seed`` the model constants ``b_k, g_k``, so reps of one
    experiment share the constants.
    """

    n: int
    k: int = 2
    theta_true: float = 0.5
    seed: int = 0
    constants_seed: int = 0

    def __post_init__(self):
        if self.n < 100:
            raise ValueError("the DGP needs n >= 100")
        if self.k < 1:
            raise ValueError("k must be at least 1 (the intercept)")
        if not -1.0 < self.theta_true < 1.0:
            raise ValueError(f"Gaussian copula parameter must lie in (-1, 1), got {self.theta_true}")


@dataclass
class Truth:
    theta: float
    b: np.ndarray
    g: np.ndarray
    gamma: np.ndarray

    def beta(self, tau) -> np.ndarray:
        """True coefficients ``beta(tau)``; rows follow ``tau`` when it is an array."""
        tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
        out = np.column_stack([ndtri(tau)] + [tau * bk for bk in self.b])
        return out

    def to_dict(self) -> dict[str, Any]:
        return {"theta": self.theta, "b": self.b.tolist(), "g": self.g.tolist(), "gamma": self.gamma.tolist()}


def model_constants(k: int, constants_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``b_k`` and ``g_k`` for the ``k - 1`` non-intercept covariates."""
    rng = np.random.default_rng(np.random.SeedSequence([constants_seed, 0xC0FFEE]))
    b = rng.uniform(0.0, 1.0, k - 1)
    g = rng.uniform(0.0, 1.0, k - 1)
    return b, g


def draw_uv(n: int, theta: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform pairs from the Gaussian copula with correlation ``theta``."""
    e1 = rng.standard_normal(n)
    e2 = theta * e1 + np.sqrt(1.0 - theta * theta) * rng.standard_normal(n)
    return ndtr(e1), ndtr(e2)


def simulate_dgp(cfg: DgpConfig, return_latent: bool = False):
    """Draw a dataset and its truth record.

    With ``return_latent=True`` a third element holds the latent ``(U, V)``.
    """
    b, g = model_constants(cfg.k, cfg.constants_seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, cfg.constants_seed]))
    n = cfg.n
    u, v = draw_uv(n, cfg.theta_true, rng)
    covs = rng.uniform(2.0, 3.0, (n, cfg.k - 1))
    z1 = rng.standard_normal(n)
    x = np.column_stack([np.ones(n), covs])
    gamma = np.concatenate([[GAMMA_INTERCEPT, GAMMA_INSTRUMENT], GAMMA_COVARIATE_SCALE * g])
    zmat = np.column_stack([np.ones(n), z1, covs])
    d = (v <= expit(zmat @ gamma)).astype(np.float64)
    ystar = ndtri(u) + covs @ b * u if cfg.k > 1 else ndtri(u)
    y = d * ystar
    # avoid -0.0 for non-participants so CSV output is canonical
    y[d == 0] = 0.0
    data = Dataset(y=y, d=d, x=x, z1=z1)
    truth = Truth(theta=cfg.theta_true, b=b, g=g, gamma=gamma)
    if return_latent:
        return data, truth, (u, v)
    return data, truth


def rep_seed(seed: int, n: int, k: int, rep: int) -> int:
    """Sample seed for one Monte Carlo replication."""
    return int(np.random.SeedSequence([seed, n, k, rep]).generate_state(1)[0])


@dataclass
class ExperimentReport:
    """Per-replication records and their (n, k, algorithm) summaries."""

    records: list[dict[str, Any]] = field(default_factory=list)
    theta_true: float = 0.5

    def summary(self) -> list[dict[str, Any]]:
        groups: dict[tuple, list[dict]] = {}
        for rec in self.records:
            groups.setdefault((rec["n"], rec["k"], rec["algorithm"]), []).append(rec)
        rows = []
        for (n, k, alg), recs in groups.items():
            ok = [r for r in recs if r["ok"]]
            thetas = np.array([r["theta_hat"] for r in ok])
            times = np.array([r["seconds"] for r in ok])
            rows.append({
                "n": n, "k": k, "algorithm": alg, "reps": len(ok), "failed": len(recs) - len(ok),
                "mean_seconds": float(times.mean()) if ok else float("nan"),
                "mse_theta": float(np.mean((thetas - self.theta_true) ** 2)) if ok else float("nan"),
                "mean_theta": float(thetas.mean()) if ok else float("nan"),
                "unconverged_cells": int(sum(r["unconverged"] for r in ok)),
            })
        return rows

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = self.summary()
        times = out / "bench_times.csv"
        mse = out / "bench_mse.csv"
        _write_rows(times, ["n", "k", "algorithm", "reps", "failed", "mean_seconds"], rows)
        _write_rows(mse, ["n", "k", "algorithm", "reps", "mse_theta", "mean_theta", "unconverged_cells"], rows)
        return [times, mse]


def _write_rows(path: Path, cols: Sequence[str], rows: Sequence[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(cols), extrasaction="ignore", lineterminator="\n")
        wr.writeheader()
        for row in rows:
            wr.writerow({c: (repr(v) if isinstance(v, float) else v) for c, v in row.items() if c in cols})


def run_benchmark(
    configs: Sequence[tuple[int, int]],
    algorithms: Sequence[str],
    reps: int,
    seed: int,
    *,
    theta_true: float = 0.5,
    copula_grid: CopulaParamGrid | None = None,
    fine_grid: QuantileGrid | None = None,
    coarse_grid: QuantileGrid | None = None,
    p: int = 3,
    config: SolverConfig | None = None,
    instr: InstrumentConfig | None = None,
    threads: int = 1,
) -> ExperimentReport:
    """Time each algorithm and record its copula estimate over ``reps`` simulated samples.

    Every algorithm sees the same sample in a replication. The model
    constants are fixed by ``seed`` for the whole experiment. A replication
    that raises is recorded as failed and left out of the summaries.
    """
    bad = set(algorithms) - set(ALGORITHMS) - {"alg1-repeated"}
    if bad:
        raise ValueError(f"unknown algorithms {sorted(bad)}")
    copula_grid = copula_grid or CopulaParamGrid.default()
    fine_grid = fine_grid or QuantileGrid.percentiles()
    coarse_grid = coarse_grid or QuantileGrid.deciles()
    report = ExperimentReport(theta_true=theta_true)
    for n, k in configs:
        for rep in range(reps):
            cfg = DgpConfig(n=n, k=k, theta_true=theta_true, seed=rep_seed(seed, n, k, rep), constants_seed=seed)
            data, _ = simulate_dgp(cfg)
            for alg in algorithms:
                rec = {"n": n, "k": k, "algorithm": alg, "rep": rep, "seed": cfg.seed}
                t0 = time.perf_counter()
                try:
                    fit = estimate(alg, data, copula_grid, fine_grid, coarse_grid, instr, config, p=p,
                                   threads=threads)
                except (RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
                    log.warning("rep %d of (%d, %d) failed for %s: %s", rep, n, k, alg, exc)
                    rec.update(ok=False, error=str(exc))
                else:
                    rec.update(
                        ok=True, seconds=time.perf_counter() - t0, theta_hat=fit.theta_hat,
                        unconverged=fit.diagnostics["n_unconverged"],
                    )
                report.records.append(rec)
                log.info("n=%d k=%d rep=%d %s: %s", n, k, rep, alg, rec.get("theta_hat"))
    return report


SUBOPTIMAL_THRESHOLD = 1e-3
IMPLEMENTATIONS = ("preprocessing", "restricted", "unrestricted")


@dataclass
class DiagnosticTables:
    """Cell-level comparison of preprocessing and cold-start solves.

    ``objectives[impl]`` and ``betas[impl]`` are indexed ``[a, q]`` over the
    copula and quantile grids.
    """

    thetas: np.ndarray
    taus: np.ndarray
    objectives: dict[str, np.ndarray]
    betas: dict[str, np.ndarray]
    profiles: dict[str, np.ndarray]
    converged: dict[str, np.ndarray]
    threshold: float = SUBOPTIMAL_THRESHOLD
    # preprocessing cells that fell back to a full solve
    fallbacks: np.ndarray | None = None

    def suboptimal(self, impl: str) -> np.ndarray:
        """Cells where ``impl`` exceeds the preprocessing objective by more than the threshold."""
        return self.objectives[impl] - self.objectives["preprocessing"] > self.threshold

    def preprocessing_worse(self, impl: str) -> np.ndarray:
        return self.objectives["preprocessing"] - self.objectives[impl] > self.threshold

    def ratios(self, impl: str) -> np.ndarray:
        return self.objectives[impl] / self.objectives["preprocessing"]

    def theta_hat(self, impl: str) -> float:
        return float(self.thetas[int(np.argmin(self.profiles[impl]))])

    def tau_groups(self, fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
        """Indices of the ``fraction`` of quantiles farthest from and nearest to the median."""
        size = max(1, int(np.ceil(fraction * self.taus.size)))
        order = np.argsort(np.abs(self.taus - 0.5), kind="stable")
        return order[-size:], order[:size]

    def summary(self) -> list[dict[str, Any]]:
        outer, middle = self.tau_groups()
        rows = []
        total = self.thetas.size * self.taus.size
        for impl in IMPLEMENTATIONS[1:]:
            sub = self.suboptimal(impl)
            worse = self.preprocessing_worse(impl)
            rows.append({
                "implementation": impl,
                "suboptimal": int(sub.sum()),
                "equal": int(total - sub.sum() - worse.sum()),
                "preprocessing_worse": int(worse.sum()),
                "cells": total,
                "min_ratio": float(self.ratios(impl).min()),
                "outer_decile_count": int(sub[:, outer].sum()),
                "middle_decile_count": int(sub[:, middle].sum()),
                "unconverged": int((~self.converged[impl]).sum()),
                "fallback": 0,
                "theta_hat": self.theta_hat(impl),
            })
        rows.append({
            "implementation": "preprocessing", "suboptimal": 0, "equal": total, "preprocessing_worse": 0,
            "cells": total, "min_ratio": 1.0, "outer_decile_count": 0, "middle_decile_count": 0,
            "unconverged": int((~self.converged["preprocessing"]).sum()),
            "fallback": 0 if self.fallbacks is None else int(self.fallbacks.sum()),
            "theta_hat": self.theta_hat("preprocessing"),
        })
        return rows

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"diag_{name}.csv" for name in ("counts", "ratios", "objective", "betas", "summary")]
        counts = []
        for impl in IMPLEMENTATIONS[1:]:
            sub = self.suboptimal(impl)
            counts += [{"margin": "theta", "value": float(t), "implementation": impl, "count": int(c)}
                       for t, c in zip(self.thetas, sub.sum(axis=1))]
            counts += [{"margin": "tau", "value": float(t), "implementation": impl, "count": int(c)}
                       for t, c in zip(self.taus, sub.sum(axis=0))]
        _write_rows(paths[0], ["margin", "value", "implementation", "count"], counts)
        ratios = [
            {"theta": float(t), "tau": float(q), "implementation": impl, "ratio": float(self.ratios(impl)[a, j])}
            for impl in IMPLEMENTATIONS[1:]
            for a, t in enumerate(self.thetas)
            for j, q in enumerate(self.taus)
        ]
        _write_rows(paths[1], ["theta", "tau", "implementation", "ratio"], ratios)
        prof = [{"theta": float(t), "implementation": impl, "objective": float(self.profiles[impl][a])}
                for impl in IMPLEMENTATIONS for a, t in enumerate(self.thetas)]
        _write_rows(paths[2], ["theta", "implementation", "objective"], prof)
        betas = []
        ref = self.betas["preprocessing"]
        for impl in IMPLEMENTATIONS:
            b = self.betas[impl]
            for a, t in enumerate(self.thetas):
                for j, q in enumerate(self.taus):
                    for c in range(b.shape[2]):
                        betas.append({"theta": float(t), "tau": float(q), "coef": c, "implementation": impl,
                                      "beta": float(b[a, j, c]), "diff": float(b[a, j, c] - ref[a, j, c])})
        _write_rows(paths[3], ["theta", "tau", "coef", "implementation", "beta", "diff"], betas)
        _write_rows(paths[4], list(self.summary()[0].keys()), self.summary())
        return paths


def numerical_diagnostics(
    cfg: DgpConfig,
    copula_grid: CopulaParamGrid | None = None,
    fine_grid: QuantileGrid | None = None,
    config: SolverConfig | None = None,
    instr: InstrumentConfig | None = None,
    unrestricted_iterations: int = 100,
) -> DiagnosticTables:
    """Compare three implementations cell by cell on one simulated sample.

    * preprocessing: the warm-started quantile process for every copula value,
      with the default solver settings;
    * restricted: every cell solved from scratch with the default settings;
    * unrestricted: the same with ``unrestricted_iterations`` iterations.

    The cold implementations return the raw interior-point iterate, as a
    plain solver would; non-convergence is recorded, not raised.
    """
    from .propensity import fit_logit, predict_propensity
    from .preprocess import participant_arrays, rqr_process
    from .qrs import _Sample
    from .rqr import RqrProblem, solve_interior_point

    copula_grid = copula_grid or CopulaParamGrid.default()
    fine_grid = fine_grid or QuantileGrid.percentiles()
    config = config or SolverConfig()
    instr = instr or InstrumentConfig()
    loose = SolverConfig(**{**asdict(config), "max_iterations": unrestricted_iterations})
    data, _ = simulate_dgp(cfg)
    ps = predict_propensity(fit_logit(data), data)
    sample = _Sample(data, ps, instr, epsilon=fine_grid.epsilon)
    y, x, _, w = participant_arrays(data, ps)
    a_n, q_n, k = len(copula_grid), len(fine_grid), data.k
    obj = {impl: np.empty((a_n, q_n)) for impl in IMPLEMENTATIONS}
    betas = {impl: np.empty((a_n, q_n, k)) for impl in IMPLEMENTATIONS}
    conv = {impl: np.empty((a_n, q_n), dtype=bool) for impl in IMPLEMENTATIONS}
    prof = {impl: np.empty(a_n) for impl in IMPLEMENTATIONS}
    fallbacks = np.zeros((a_n, q_n), dtype=bool)
    for a, theta in enumerate(copula_grid.values):
        res = rqr_process(data, float(theta), fine_grid, ps, config)
        obj["preprocessing"][a] = res.objectives
        betas["preprocessing"][a] = res.beta
        conv["preprocessing"][a] = res.converged
        fallbacks[a] = res.fallbacks
        for impl, cfg_i in (("restricted", config), ("unrestricted", loose)):
            for q, u in enumerate(res.us):
                sol = solve_interior_point(RqrProblem(y, x, u, w), cfg_i, purify_vertex=False)
                obj[impl][a, q] = sol.objective
                betas[impl][a, q] = sol.beta
                conv[impl][a, q] = sol.converged
        for impl in IMPLEMENTATIONS:
            prof[impl][a] = sample.objective(betas[impl][a], res.us)
    return DiagnosticTables(
        thetas=copula_grid.values.copy(), taus=fine_grid.values.copy(),
        objectives=obj, betas=betas, profiles=prof, converged=conv, fallbacks=fallbacks,
    )
