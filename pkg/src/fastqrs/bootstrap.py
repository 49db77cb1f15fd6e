"""Weighted (multiplicative) bootstrap for the QRS estimators.

Each draw reweights the sample with iid standard-exponential weights,
re-fits the propensity score, and re-solves every coarse (quantile, copula)
cell with preprocessing seeded by the point estimate of that same cell, so
no warm-start chain is needed. The copula parameter then comes either from
the coarse profile (``variant="reduced"``) or from fine-grid re-scoring of
the ``p`` best coarse candidates (``variant="refined"``).
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .propensity import fit_logit, predict_propensity
from .qrs import (
    InstrumentConfig,
    QrsFit,
    _first_argmin,
    _Flags,
    _pmap,
    _Sample,
    coarse_sweep,
    fine_process,
    select_candidates,
)
from .types import CopulaParamGrid, Dataset, QuantileGrid, SolverConfig

log = logging.getLogger(__name__)

MAX_INVALID_FRACTION = 0.10


class BootstrapError(RuntimeError):
    """Too many invalid draws, or a fit that does not belong to the data."""


@dataclass
class BootstrapDraw:
    index: int
    theta_star: float
    beta_star: np.ndarray | None
    gamma_star: np.ndarray | None
    weights: np.ndarray | None = field(default=None, repr=False)
    valid: bool = True
    error: str = ""
    seconds: float = 0.0
    candidates: np.ndarray | None = None
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def to_dict(self, include_beta: bool = True) -> dict[str, Any]:
        return {
            "index": self.index,
            "theta": None if not self.valid else float(self.theta_star),
            "beta": None if (self.beta_star is None or not include_beta) else self.beta_star.tolist(),
            "gamma": None if self.gamma_star is None else self.gamma_star.tolist(),
            "valid": self.valid,
            "error": self.error or None,
            "seconds": self.seconds,
            "candidates": None if self.candidates is None else self.candidates.tolist(),
        }


def draw_weights(n: int, seed: int, j: int | None = None) -> np.ndarray:
    """``n`` iid standard-exponential weights (mean 1, variance 1).

    With ``j`` the stream is derived from ``(seed, j)``, so draw ``j`` is the
    same regardless of how draws are scheduled.
    """
    if n < 1:
        raise ValueError("need at least one weight")
    ss = np.random.SeedSequence([seed, j]) if j is not None else np.random.SeedSequence(seed)
    return np.random.default_rng(ss).standard_exponential(n)


def _check_fit(data: Dataset, fit: QrsFit, copula_grid: CopulaParamGrid, coarse_grid: QuantileGrid):
    if fit.data_hash and fit.data_hash != data.content_hash():
        raise BootstrapError("the fit was estimated on a different dataset (content hash mismatch)")
    if fit.coarse_beta is None or fit.coarse_taus is None:
        raise BootstrapError("the fit does not contain coarse-grid coefficients for every copula value")
    a, r = len(copula_grid), len(coarse_grid)
    if fit.coarse_beta.shape != (a, r, data.k):
        raise BootstrapError(
            f"stored coarse coefficients have shape {fit.coarse_beta.shape}, expected {(a, r, data.k)}"
        )
    if not np.allclose(fit.coarse_taus, coarse_grid.values, rtol=0, atol=1e-12):
        raise BootstrapError("coarse quantile grid differs from the one used for the fit")
    if not np.allclose(fit.theta_grid, copula_grid.values, rtol=0, atol=1e-12):
        raise BootstrapError("copula grid differs from the one used for the fit")


def bootstrap_draw(
    data: Dataset,
    fit: QrsFit,
    weights: np.ndarray,
    copula_grid: CopulaParamGrid,
    fine_grid: QuantileGrid,
    coarse_grid: QuantileGrid,
    variant: str = "reduced",
    p: int = 3,
    config: SolverConfig | None = None,
    instr: InstrumentConfig | None = None,
    index: int = 0,
) -> BootstrapDraw:
    """One bootstrap replication for the given weight vector."""
    config = config or SolverConfig()
    instr = instr or fit.instrument
    t0 = time.perf_counter()
    model = fit_logit(data, weights=weights, start=fit.gamma)
    ps = predict_propensity(model, data)
    sample = _Sample(data, ps, instr, weights=weights, epsilon=fine_grid.epsilon)
    flags = _Flags()
    sweep = coarse_sweep(
        sample, copula_grid, coarse_grid, config, flags,
        start_beta=fit.coarse_beta, m=config.m_init_bootstrap,
    )
    cands = None
    if variant == "reduced":
        a_hat = _first_argmin(sweep.profile)
        res, _ = fine_process(sample, float(copula_grid.values[a_hat]), fine_grid, config, known=sweep.known(a_hat))
        beta = res.beta
    elif variant == "refined":
        idx = select_candidates(sweep.profile, p)
        outs = [
            fine_process(sample, float(copula_grid.values[a]), fine_grid, config, known=sweep.known(a))
            for a in idx
        ]
        best = _first_argmin(np.array([o[1] for o in outs]))
        a_hat = int(idx[best])
        beta = outs[best][0].beta
        cands = copula_grid.values[idx].copy()
    else:
        raise ValueError(f"unknown bootstrap variant {variant!r}")
    return BootstrapDraw(
        index=index,
        theta_star=float(copula_grid.values[a_hat]),
        beta_star=beta,
        gamma_star=np.asarray(model.gamma, dtype=np.float64),
        weights=weights,
        seconds=time.perf_counter() - t0,
        candidates=cands,
        diagnostics=flags.as_dict(),
    )


def bootstrap_qrs(
    data: Dataset,
    fit: QrsFit,
    copula_grid: CopulaParamGrid,
    fine_grid: QuantileGrid,
    coarse_grid: QuantileGrid,
    J: int,
    variant: str = "reduced",
    config: SolverConfig | None = None,
    *,
    p: int = 3,
    seed: int = 0,
    instr: InstrumentConfig | None = None,
    weight_fn: Callable[[int], np.ndarray] | None = None,
    keep_weights: bool = False,
    threads: int = 1,
) -> list[BootstrapDraw]:
    """``J`` weighted-bootstrap replications warm-started from ``fit``.

    ``weight_fn(j)`` overrides the exponential weights (e.g. all ones to check
    that the point estimate is reproduced). A draw that raises is kept as
    invalid; more than 10% invalid draws raise :class:`BootstrapError`.
    """
    if J < 1:
        raise ValueError("J must be positive")
    if variant not in ("reduced", "refined"):
        raise ValueError(f"unknown bootstrap variant {variant!r}")
    _check_fit(data, fit, copula_grid, coarse_grid)

    def one(j):
        w = weight_fn(j) if weight_fn is not None else draw_weights(data.n, seed, j)
        try:
            draw = bootstrap_draw(data, fit, w, copula_grid, fine_grid, coarse_grid, variant, p, config, instr, j)
        except (RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("bootstrap draw %d failed: %s", j, exc)
            draw = BootstrapDraw(index=j, theta_star=np.nan, beta_star=None, gamma_star=None,
                                 valid=False, error=str(exc))
        if not keep_weights:
            draw.weights = None
        return draw

    draws = _pmap(one, range(J), threads)
    n_bad = sum(not d.valid for d in draws)
    if n_bad > MAX_INVALID_FRACTION * J:
        raise BootstrapError(f"{n_bad} of {J} bootstrap draws failed")
    return draws


@dataclass
class BandTable:
    """Pointwise percentile intervals for theta and every ``beta_k(tau_q)``."""

    level: float
    taus: np.ndarray
    theta: tuple[float, float]
    beta_lo: np.ndarray
    beta_hi: np.ndarray
    n_valid: int
    n_invalid: int

    def to_csv(self) -> str:
        lines = ["tau,coef,lo,hi", f",theta,{self.theta[0]!r},{self.theta[1]!r}"]
        for q, tau in enumerate(self.taus):
            for k in range(self.beta_lo.shape[1]):
                lines.append(f"{float(tau)!r},beta_{k},{float(self.beta_lo[q, k])!r},{float(self.beta_hi[q, k])!r}")
        return "\n".join(lines) + "\n"


def _order_stat_interval(values: np.ndarray, level: float) -> tuple[np.ndarray, np.ndarray]:
    """Lower/upper percentile endpoints as order statistics along axis 0.

    With ``J`` draws and ``alpha = 1 - level`` the endpoints are the
    ``ceil(J*alpha/2)``-th and ``ceil(J*(1-alpha/2))``-th smallest values.
    """
    j = values.shape[0]
    alpha = 1.0 - level
    # round away representation noise such as 100*0.05 = 5.000000000000001
    lo_rank = max(1, math.ceil(round(j * alpha / 2.0, 9)))
    hi_rank = min(j, math.ceil(round(j * (1.0 - alpha / 2.0), 9)))
    srt = np.sort(values, axis=0)
    return srt[lo_rank - 1], srt[hi_rank - 1]


def confidence_bands(draws: Sequence[BootstrapDraw], level: float = 0.90, taus=None) -> BandTable:
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    valid = [d for d in draws if d.valid]
    n_invalid = len(draws) - len(valid)
    if not valid:
        raise BootstrapError("all bootstrap draws are invalid")
    if len(valid) < 2:
        raise BootstrapError("need at least two valid draws for intervals")
    thetas = np.array([d.theta_star for d in valid])
    t_lo, t_hi = _order_stat_interval(thetas, level)
    with_beta = [d for d in valid if d.beta_star is not None]
    if with_beta:
        betas = np.stack([d.beta_star for d in with_beta])
        b_lo, b_hi = _order_stat_interval(betas, level)
    else:
        b_lo = b_hi = np.empty((0, 0))
    if taus is None:
        taus = np.arange(b_lo.shape[0], dtype=np.float64)
    return BandTable(level=level, taus=np.asarray(taus), theta=(float(t_lo), float(t_hi)),
                     beta_lo=b_lo, beta_hi=b_hi, n_valid=len(valid), n_invalid=n_invalid)


def draws_to_json(draws: Sequence[BootstrapDraw], include_beta: bool = True, **meta) -> str:
    body = {
        **meta,
        "n_draws": len(draws),
        "n_invalid": sum(not d.valid for d in draws),
        "draws": [d.to_dict(include_beta) for d in draws],
    }
    return json.dumps(body, indent=1)


def draws_from_json(path: str | Path) -> list[BootstrapDraw]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    out = []
    for d in raw["draws"]:
        out.append(BootstrapDraw(
            index=int(d["index"]),
            theta_star=np.nan if d["theta"] is None else float(d["theta"]),
            beta_star=None if d["beta"] is None else np.asarray(d["beta"], dtype=np.float64),
            gamma_star=None if d["gamma"] is None else np.asarray(d["gamma"], dtype=np.float64),
            valid=bool(d["valid"]),
            error=d.get("error") or "",
            seconds=float(d.get("seconds", 0.0)),
            candidates=None if d.get("candidates") is None else np.asarray(d["candidates"]),
        ))
    return out
