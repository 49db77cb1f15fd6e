"""Weighted logit propensity score fitted by Newton-Raphson."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .types import Dataset

log = logging.getLogger(__name__)

PSCORE_CLAMP = 1e-10


class PerfectSeparationError(RuntimeError):
    """The participation indicator is perfectly predicted; the logit MLE does not exist."""

    def __init__(self, msg, model=None):
        super().__init__(msg)
        self.model = model


@dataclass(frozen=True)
class PropensityModel:
    gamma: np.ndarray
    converged: bool
    log_likelihood: float
    iterations: int = 0
    gradient_norm: float = np.nan


def _loglik(eta, d, w):
    return float(np.sum(w * (d * log_expit(eta) + (1.0 - d) * log_expit(-eta))))


def fit_logit(
    data: Dataset,
    weights: np.ndarray | None = None,
    start: np.ndarray | None = None,
    max_iter: int = 100,
    tol: float = 1e-8,
    raise_on_separation: bool = True,
) -> PropensityModel:
    """Maximize the (weighted) Bernoulli log-likelihood of ``d`` on ``data.z``.

    Newton-Raphson with step halving; the Hessian gets a 1e-10 ridge so nearly
    collinear instruments do not break the solve. ``start`` warm-starts the
    iteration (used by the bootstrap). Convergence is declared when the
    max-norm of the score drops to ``tol``.
    """
    z = data.z
    d = data.d
    n, p = z.shape
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise ValueError("weights must have one entry per observation")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be finite and strictly positive")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(d))):
        raise ValueError("non-finite propensity inputs")
    if d.min() == d.max():
        msg = "participation indicator is constant: perfect separation"
        if raise_on_separation:
            raise PerfectSeparationError(msg)
        return PropensityModel(np.zeros(p), False, np.nan)

    gamma = np.zeros(p) if start is None else np.array(start, dtype=np.float64)
    # the score is a sum over n terms; scale the stopping rule with the total weight
    wscale = max(1.0, w.sum() / n)
    eta = z @ gamma
    ll = _loglik(eta, d, w)
    converged = False
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        pi = expit(eta)
        grad = z.T @ (w * (d - pi))
        gnorm = float(np.max(np.abs(grad)))
        if gnorm <= tol * wscale:
            converged = True
            it -= 1
            break
        hw = w * pi * (1.0 - pi)
        hess = (z * hw[:, None]).T @ z
        hess[np.diag_indices(p)] += 1e-10
        step = np.linalg.solve(hess, grad)
        t = 1.0
        for _ in range(40):
            cand = gamma + t * step
            eta_c = z @ cand
            ll_c = _loglik(eta_c, d, w)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        gamma, eta, ll = cand, eta_c, ll_c
        if np.max(np.abs(gamma)) > 1e6:
            break
    if not converged:
        pi = expit(eta)
        gnorm = float(np.max(np.abs(z.T @ (w * (d - pi)))))
        converged = gnorm <= tol * wscale
    model = PropensityModel(gamma=gamma, converged=converged, log_likelihood=ll, iterations=it, gradient_norm=gnorm)
    if not converged and np.max(np.abs(gamma)) > 50:
        msg = "logit coefficients diverge: perfect or quasi-complete separation"
        if raise_on_separation:
            raise PerfectSeparationError(msg, model)
        log.warning(msg)
    return model


def predict_propensity(model: PropensityModel, data: Dataset) -> np.ndarray:
    """Fitted participation probabilities clamped to ``[1e-10, 1 - 1e-10]``."""
    return np.clip(expit(data.z @ model.gamma), PSCORE_CLAMP, 1.0 - PSCORE_CLAMP)
