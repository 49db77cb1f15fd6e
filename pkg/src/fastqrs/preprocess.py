"""Globbing preprocessing for rotated quantile regression and the warm-started
quantile-process driver.

Observations whose residual sign is confidently predicted from a preliminary
fit are collapsed into two pseudo-observations. Their design rows are chosen
so that the reduced objective has the same subgradient as the full objective
wherever the predicted signs hold, hence the same minimizer. A sign check
after every reduced solve guards the prediction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .copula import rotated_quantiles
from .rqr import (
    RankDeficiencyError,
    RqrProblem,
    RqrSolution,
    check_objective,
    solve_full,
    solve_interior_point,
    vertex_beta,
)
from .types import Dataset, QuantileGrid, SolverConfig

log = logging.getLogger(__name__)

_SIGN_TOL = 1e-10


@dataclass
class PreprocessState:
    j_low: np.ndarray
    j_high: np.ndarray
    kept: np.ndarray
    glob_low: tuple[float, np.ndarray] | None
    glob_high: tuple[float, np.ndarray] | None
    tau_bar: float
    m: float
    band: float
    clamped: bool = False

    @property
    def reduced_size(self) -> int:
        return self.kept.size + (self.glob_low is not None) + (self.glob_high is not None)


def _make_globs(problem: RqrProblem, beta_prelim, j_low, j_high, tau_bar):
    """Glob pseudo-observations whose subgradient matches their members'.

    ``x_L = sum_{J_L} w (1 - u) x / (1 - tau_bar)`` and
    ``x_H = sum_{J_H} w u x / tau_bar``. The glob outcome is the same
    weighted combination of member outcomes, pushed outward to the
    preliminary fit if needed: whenever every member residual has the
    predicted sign, so does the glob residual.
    """
    y, x, u, w = problem.y, problem.x, problem.u, problem.w
    glob_low = glob_high = None
    if j_low.size:
        cw = w[j_low] * (1.0 - u[j_low]) / (1.0 - tau_bar)
        x_low = cw @ x[j_low]
        glob_low = (min(float(cw @ y[j_low]), float(x_low @ beta_prelim)), x_low)
    if j_high.size:
        cw = w[j_high] * u[j_high] / tau_bar
        x_high = cw @ x[j_high]
        glob_high = (max(float(cw @ y[j_high]), float(x_high @ beta_prelim)), x_high)
    return glob_low, glob_high


def build_globs(problem: RqrProblem, beta_prelim, m: float, config: SolverConfig | None = None) -> PreprocessState:
    """Split observations into predicted-negative, predicted-positive and kept sets.

    ``J_L`` holds the residuals below their ``min(u) - M/2N`` empirical
    quantile and ``J_H`` those above the ``max(u) + M/2N`` quantile, with
    ``M = m*sqrt(K*N)``. Standardizing by a single global scale would not
    change the order of the residuals, so the raw residuals are ranked.
    Levels falling outside (0, 1) empty the matching glob and set ``clamped``.
    """
    if m <= 0:
        raise ValueError("band parameter m must be positive")
    beta_prelim = np.asarray(beta_prelim, dtype=np.float64)
    if not np.all(np.isfinite(beta_prelim)):
        raise ValueError("preliminary coefficients must be finite")
    n, k = problem.n, problem.k
    res = problem.y - problem.x @ beta_prelim
    band = m * np.sqrt(k * n)
    lo_level = float(problem.u.min()) - band / (2.0 * n)
    hi_level = float(problem.u.max()) + band / (2.0 * n)
    clamped = lo_level <= 0.0 or hi_level >= 1.0
    n_low = int(np.floor(lo_level * n)) if lo_level > 0.0 else 0
    n_high = int(np.floor((1.0 - hi_level) * n)) if hi_level < 1.0 else 0
    if n_low + n_high >= n:
        n_low = n_high = 0
    order = np.argpartition(res, [max(n_low - 1, 0), min(n - n_high, n - 1)])
    j_low = np.sort(order[:n_low])
    j_high = np.sort(order[n - n_high:]) if n_high else order[:0]
    mask = np.ones(n, dtype=bool)
    mask[j_low] = False
    mask[j_high] = False
    kept = np.flatnonzero(mask)
    tau_bar = float(np.mean(problem.u))
    glob_low, glob_high = _make_globs(problem, beta_prelim, j_low, j_high, tau_bar)
    return PreprocessState(
        j_low=j_low, j_high=j_high, kept=kept, glob_low=glob_low, glob_high=glob_high,
        tau_bar=tau_bar, m=float(m), band=float(band), clamped=clamped,
    )


def reduced_problem(problem: RqrProblem, state: PreprocessState) -> RqrProblem:
    """Kept observations plus the two globs at quantile index ``tau_bar`` with unit weight."""
    ys = [problem.y[state.kept]]
    xs = [problem.x[state.kept]]
    us = [problem.u[state.kept]]
    ws = [problem.w[state.kept]]
    for glob in (state.glob_low, state.glob_high):
        if glob is not None:
            ys.append(np.array([glob[0]]))
            xs.append(glob[1][None, :])
            us.append(np.array([state.tau_bar]))
            ws.append(np.ones(1))
    return RqrProblem(np.concatenate(ys), np.vstack(xs), np.concatenate(us), np.concatenate(ws))


def count_bad_signs(problem: RqrProblem, state: PreprocessState, beta):
    """Indices in ``j_low`` with positive and in ``j_high`` with negative residuals."""
    scale = _SIGN_TOL * max(1.0, float(np.max(np.abs(problem.y))))
    r_low = problem.y[state.j_low] - problem.x[state.j_low] @ beta
    r_high = problem.y[state.j_high] - problem.x[state.j_high] @ beta
    return state.j_low[r_low > scale], state.j_high[r_high < -scale]


def _regrow(problem, state, bad_low, bad_high, beta_prelim):
    j_low = np.setdiff1d(state.j_low, bad_low, assume_unique=True)
    j_high = np.setdiff1d(state.j_high, bad_high, assume_unique=True)
    kept = np.union1d(state.kept, np.concatenate([bad_low, bad_high]))
    glob_low, glob_high = _make_globs(problem, beta_prelim, j_low, j_high, state.tau_bar)
    return PreprocessState(
        j_low=j_low, j_high=j_high, kept=kept, glob_low=glob_low, glob_high=glob_high,
        tau_bar=state.tau_bar, m=state.m, band=state.band, clamped=state.clamped,
    )


def solve_preprocessed(
    problem: RqrProblem,
    beta_prelim,
    m0: float,
    config: SolverConfig | None = None,
) -> RqrSolution:
    """Solve through the globbed problem, repairing mispredicted signs.

    After each reduced solve the residual signs of the globbed observations
    are checked. Up to ``bad_sign_allowance`` mistakes are accepted; fewer
    than ``bad_sign_refactor_fraction * M`` move back into the kept set and
    the reduced problem is re-solved; more double ``m`` and rebuild the sets.
    After ``max_preprocess_rounds``, or as soon as a reduced solve fails to
    converge, the full problem is solved instead and the result is flagged
    with ``fallback=True``.
    """
    config = config or SolverConfig()
    beta_prelim = np.asarray(beta_prelim, dtype=np.float64)
    n, k = problem.n, problem.k
    m = float(m0)
    state = build_globs(problem, beta_prelim, m, config)
    total_iter = 0
    for rounds in range(1, config.max_preprocess_rounds + 1):
        if state.glob_low is None and state.glob_high is None:
            sol = solve_full(problem, config)
            sol.iterations += total_iter
            sol.rounds = rounds
            sol.reduced_size = n
            return sol
        if state.kept.size < k + 1:
            m *= 2.0
            state = build_globs(problem, beta_prelim, m, config)
            continue
        red = reduced_problem(problem, state)
        try:
            sol = solve_interior_point(red, config)
        except RankDeficiencyError:
            m *= 2.0
            state = build_globs(problem, beta_prelim, m, config)
            continue
        total_iter += sol.iterations
        if not sol.converged:
            # an unfinished reduced solve certifies nothing; solve the full problem
            break
        bad_low, bad_high = count_bad_signs(problem, state, sol.beta)
        nbad = bad_low.size + bad_high.size
        if nbad <= config.bad_sign_allowance:
            return _accept(problem, state, sol, total_iter, rounds)
        if nbad < config.bad_sign_refactor_fraction * state.band:
            state = _regrow(problem, state, bad_low, bad_high, beta_prelim)
        else:
            m *= 2.0
            state = build_globs(problem, beta_prelim, m, config)
    else:
        rounds = config.max_preprocess_rounds
    log.debug("preprocessing gave up after %d rounds; solving the full problem", rounds)
    sol = solve_full(problem, config)
    sol.iterations += total_iter
    sol.fallback = True
    sol.rounds = rounds
    sol.reduced_size = n
    return sol


def _accept(problem, state, sol, total_iter, rounds):
    beta = sol.beta
    basis = None
    if sol.basis is not None:
        nk = state.kept.size
        if np.all(sol.basis < nk):
            # same rows, same order as a full-sample crossover would use
            basis = state.kept[sol.basis]
            bv = vertex_beta(problem.x, problem.y, basis)
            if bv is not None:
                beta = bv
    return RqrSolution(
        beta=beta,
        objective=check_objective(problem.y, problem.x, problem.u, problem.w, beta),
        iterations=total_iter,
        duality_gap=sol.duality_gap,
        converged=sol.converged,
        basis=basis,
        rounds=rounds,
        reduced_size=state.reduced_size,
    )


@dataclass
class ProcessResult:
    """Coefficient process over a quantile grid for one copula parameter."""

    taus: np.ndarray
    beta: np.ndarray  # Q x K
    solutions: list[RqrSolution] = field(repr=False)
    # per-observation quantile indices used at each grid point
    us: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def converged(self) -> np.ndarray:
        return np.array([s.converged for s in self.solutions])

    @property
    def fallbacks(self) -> np.ndarray:
        return np.array([s.fallback for s in self.solutions])

    @property
    def objectives(self) -> np.ndarray:
        return np.array([s.objective for s in self.solutions])


class ProcessError(RuntimeError):
    def __init__(self, q: int, tau: float, cause: Exception):
        super().__init__(f"quantile index {q} (tau={tau:g}) failed: {cause}")
        self.q = q
        self.tau = tau


def tau_key(tau: float) -> float:
    """Dictionary key for a quantile level; grids built in different ways still match."""
    return round(float(tau), 10)


def participant_arrays(data: Dataset, pscore: np.ndarray, weights: np.ndarray | None = None):
    part = data.participants
    w = np.ones(int(part.sum())) if weights is None else np.asarray(weights, dtype=np.float64)[part]
    return data.y[part], data.x[part], np.asarray(pscore)[part], w


def rqr_process(
    data: Dataset,
    theta: float,
    grid: QuantileGrid,
    pscore: np.ndarray,
    config: SolverConfig | None = None,
    start_at: int | None = None,
    *,
    weights: np.ndarray | None = None,
    prelim: dict[float, np.ndarray] | None = None,
    known: dict[float, RqrSolution] | None = None,
    m: float | None = None,
    cold_start: bool = False,
) -> ProcessResult:
    """Warm-started coefficient process ``beta(tau_q; theta)`` over ``grid``.

    The quantile ``start_at`` (default: the one nearest the median) is solved
    from scratch, then the sweep moves outward in both directions, each
    quantile preprocessed from its already-solved neighbour. ``prelim`` maps
    quantile levels to better preliminary fits (e.g. stored coarse-grid
    solutions) and ``known`` to solutions that are reused as they are.
    With ``cold_start=True`` every quantile is solved from scratch. Full
    solves raise their iteration cap until they converge (see
    :func:`~fastqrs.rqr.solve_full`).
    """
    config = config or SolverConfig()
    y, x, ps, w = participant_arrays(data, pscore, weights)
    taus = grid.values
    q_count = taus.size
    q0 = grid.median_index() if start_at is None else int(start_at)
    if not 0 <= q0 < q_count:
        raise ValueError("start_at outside the grid")
    m = config.m_init_estimation if m is None else m
    prelim = {tau_key(t): b for t, b in (prelim or {}).items()}
    known = {tau_key(t): s for t, s in (known or {}).items()}
    sols: list[RqrSolution | None] = [None] * q_count
    us: list[np.ndarray | None] = [None] * q_count
    order = [q0] + list(range(q0 + 1, q_count)) + list(range(q0 - 1, -1, -1))
    for q in order:
        tau = float(taus[q])
        key = tau_key(tau)
        try:
            u = rotated_quantiles(tau, ps, theta)
            us[q] = u
            if key in known:
                sols[q] = known[key]
                continue
            prob = RqrProblem(y, x, u, w)
            if cold_start:
                sols[q] = solve_full(prob, config)
                continue
            if key in prelim:
                start = prelim[key]
            elif q == q0:
                start = None
            else:
                start = sols[q - 1].beta if q > q0 else sols[q + 1].beta
            if start is None:
                sols[q] = solve_full(prob, config)
            else:
                sols[q] = solve_preprocessed(prob, start, m, config)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise ProcessError(q, tau, exc) from exc
    beta = np.vstack([s.beta for s in sols])
    return ProcessResult(taus=taus.copy(), beta=beta, solutions=sols, us=us)
