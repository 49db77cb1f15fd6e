"""Rotated quantile regression: interior-point solver and an exhaustive oracle.

The problem is

    min_b  sum_i w_i * rho_{u_i}(y_i - x_i'b)

with a quantile index ``u_i`` per observation. It is solved through its
bounded-variable dual

    max_a  y'a   s.t.  X'a = X'(w * (1 - u)),  0 <= a <= w,

by a Frisch-Newton primal-dual method with Mehrotra predictor-corrector
steps. ``b`` is the multiplier of the equality constraint. A converged
interior solution is pushed to the optimal vertex (exact fit on K
observations) when that vertex passes the subgradient optimality check.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .types import SolverConfig

_STEP = 0.99995


def rotated_check_loss(residual, u):
    """Check function ``rho_u(x) = x*u`` for ``x >= 0`` and ``-(1 - u)*x`` otherwise."""
    residual = np.asarray(residual, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    out = np.where(residual >= 0, residual * u, -(1.0 - u) * residual)
    return float(out) if out.ndim == 0 else out


def check_objective(y, x, u, w, beta) -> float:
    """Full weighted rotated check objective at ``beta``."""
    r = y - x @ np.asarray(beta, dtype=np.float64)
    return float(np.sum(w * np.where(r >= 0, u * r, (u - 1.0) * r)))


@dataclass(frozen=True, eq=False)
class RqrProblem:
    """Weighted quantile regression with per-observation quantile indices."""

    y: np.ndarray
    x: np.ndarray
    u: np.ndarray
    w: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        n = y.shape[0]
        u = np.broadcast_to(np.asarray(self.u, dtype=np.float64), (n,))
        w = np.ones(n) if self.w is None else np.broadcast_to(np.asarray(self.w, dtype=np.float64), (n,))
        if x.shape[0] != n:
            raise ValueError("x and y disagree on the number of observations")
        if np.any((u <= 0) | (u >= 1)):
            raise ValueError("quantile indices must lie in (0, 1)")
        if np.any(w <= 0):
            raise ValueError("weights must be strictly positive")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.x.shape[1]

    def objective(self, beta) -> float:
        return check_objective(self.y, self.x, self.u, self.w, beta)


@dataclass
class RqrSolution:
    beta: np.ndarray
    objective: float
    iterations: int
    duality_gap: float
    converged: bool
    basis: np.ndarray | None = None
    objective_trace: list[float] = field(default_factory=list, repr=False)
    # set by the preprocessing driver
    fallback: bool = False
    rounds: int = 0
    reduced_size: int = 0


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


@njit(cache=True, nogil=True, error_model="numpy", fastmath=True)
def _bound(v, dv):
    """Largest step keeping ``v + t*dv >= 0``."""
    t = 1e20
    for i in range(v.shape[0]):
        c = -v[i] / dv[i] if dv[i] < 0.0 else 1e20
        t = min(t, c)
    return t


@njit(cache=True, nogil=True, error_model="numpy", fastmath=True)
def _cholesky_solve(gram, v):
    """Solve ``gram @ out = v`` for a small SPD matrix, with a ridge fallback."""
    k = gram.shape[0]
    ridge = 0.0
    low = np.zeros((k, k))
    for attempt in range(8):
        ok = True
        for i in range(k):
            for j in range(i + 1):
                acc = gram[i, j] + (ridge if i == j else 0.0)
                for m in range(j):
                    acc -= low[i, m] * low[j, m]
                if i == j:
                    if acc <= 0.0:
                        ok = False
                        break
                    low[i, i] = np.sqrt(acc)
                else:
                    low[i, j] = acc / low[j, j]
            if not ok:
                break
        if ok:
            break
        tr = 0.0
        for i in range(k):
            tr += gram[i, i]
        ridge = max(ridge * 100.0, 1e-14 * tr + 1e-300)
    t = np.empty(k)
    for i in range(k):
        acc = v[i]
        for m in range(i):
            acc -= low[i, m] * t[m]
        t[i] = acc / low[i, i]
    out = np.empty(k)
    for i in range(k - 1, -1, -1):
        acc = t[i]
        for m in range(i + 1, k):
            acc -= low[m, i] * out[m]
        out[i] = acc / low[i, i]
    return out


@njit(cache=True, nogil=True, error_model="numpy")
def _objective(y, xt, u, w, beta):
    k, n = xt.shape
    fit = np.zeros(n)
    for j in range(k):
        bj = beta[j]
        for i in range(n):
            fit[i] += xt[j, i] * bj
    tot = 0.0
    for i in range(n):
        r = y[i] - fit[i]
        tot += w[i] * (u[i] * r if r >= 0.0 else (u[i] - 1.0) * r)
    return tot


@njit(cache=True, nogil=True, error_model="numpy", fastmath=True)
def _gram_rhs(xt, q, v, gram, rhs_k, buf):
    k, n = xt.shape
    for a in range(k):
        acc = 0.0
        for i in range(n):
            acc += xt[a, i] * v[i]
        rhs_k[a] = acc
        for i in range(n):
            buf[i] = xt[a, i] * q[i]
        for b in range(a + 1):
            acc = 0.0
            for i in range(n):
                acc += buf[i] * xt[b, i]
            gram[a, b] = acc
            gram[b, a] = acc


@njit(cache=True, nogil=True, error_model="numpy", fastmath=True)
def _matvec(xt, coef, out):
    k, n = xt.shape
    for i in range(n):
        out[i] = 0.0
    for j in range(k):
        cj = coef[j]
        for i in range(n):
            out[i] += xt[j, i] * cj


@njit(cache=True, nogil=True, error_model="numpy", fastmath=True)
def _fn_kernel(y, xt, u, w, beta0, max_iterations, gap_tolerance, trace):
    k, n = xt.shape
    xp = w * (1.0 - u)
    s = w - xp
    rhs_b = np.zeros(k)
    for j in range(k):
        acc = 0.0
        for i in range(n):
            acc += xt[j, i] * xp[i]
        rhs_b[j] = acc
    yv = -beta0.copy()
    fit = np.empty(n)
    _matvec(xt, yv, fit)
    z = np.empty(n)
    wv = np.empty(n)
    for i in range(n):
        ri = -y[i] - fit[i]
        # nudge basic observations off the boundary while keeping dual feasibility exact
        z[i] = max(ri, 0.0) + (0.001 if ri == 0.0 else 0.0)
        wv[i] = z[i] - ri
    # complementarity z'x + w's; equals the duality gap at feasible points but,
    # unlike c'x - b'y + u'w, does not cancel large terms
    gap = 0.0
    for i in range(n):
        gap += z[i] * xp[i] + wv[i] * s[i]

    hist = np.empty(max_iterations)
    q = np.empty(n)
    xinv = np.empty(n)
    sinv = np.empty(n)
    r = np.empty(n)
    rhs = np.empty(n)
    dx = np.empty(n)
    ds = np.empty(n)
    dz = np.empty(n)
    dw = np.empty(n)
    dxdz = np.empty(n)
    dsdw = np.empty(n)
    buf = np.empty(n)
    gram = np.empty((k, k))
    rk = np.empty(k)
    rp = np.empty(k)
    it = 0
    while gap > gap_tolerance and it < max_iterations:
        it += 1
        for i in range(n):
            xinv[i] = 1.0 / xp[i]
            sinv[i] = 1.0 / s[i]
            q[i] = 1.0 / (z[i] * xinv[i] + wv[i] * sinv[i])
            r[i] = z[i] - wv[i]
            rhs[i] = q[i] * r[i]
        # primal residual: rounding in ill-conditioned steps would otherwise accumulate
        for j in range(k):
            acc = rhs_b[j]
            for i in range(n):
                acc -= xt[j, i] * xp[i]
            rp[j] = acc
        _gram_rhs(xt, q, rhs, gram, rk, buf)
        for j in range(k):
            rk[j] += rp[j]
        dy = _cholesky_solve(gram, rk)
        _matvec(xt, dy, fit)
        for i in range(n):
            dx[i] = q[i] * (fit[i] - r[i])
            ds[i] = -dx[i]
            dz[i] = -z[i] * (1.0 + dx[i] * xinv[i])
            dw[i] = -wv[i] * (1.0 + ds[i] * sinv[i])
        fp = min(_STEP * min(_bound(xp, dx), _bound(s, ds)), 1.0)
        fd = min(_STEP * min(_bound(wv, dw), _bound(z, dz)), 1.0)
        if min(fp, fd) < 1.0:
            mu = 0.0
            g = 0.0
            for i in range(n):
                mu += z[i] * xp[i] + wv[i] * s[i]
                g += (z[i] + fd * dz[i]) * (xp[i] + fp * dx[i]) + (wv[i] + fd * dw[i]) * (s[i] + fp * ds[i])
            mu = mu * (g / mu) ** 3 / (2.0 * n)
            for i in range(n):
                dxdz[i] = dx[i] * dz[i]
                dsdw[i] = ds[i] * dw[i]
                rhs[i] = rhs[i] + q[i] * (dxdz[i] - dsdw[i] - mu * (xinv[i] - sinv[i]))
            _gram_rhs(xt, q, rhs, gram, rk, buf)
            for j in range(k):
                rk[j] += rp[j]
            dy = _cholesky_solve(gram, rk)
            _matvec(xt, dy, fit)
            for i in range(n):
                xi = mu * (xinv[i] - sinv[i])
                dx[i] = q[i] * (fit[i] + xi - r[i] - dxdz[i] + dsdw[i])
                ds[i] = -dx[i]
                dz[i] = mu * xinv[i] - z[i] - xinv[i] * z[i] * dx[i] - dxdz[i]
                dw[i] = mu * sinv[i] - wv[i] - sinv[i] * wv[i] * ds[i] - dsdw[i]
            fp = min(_STEP * min(_bound(xp, dx), _bound(s, ds)), 1.0)
            fd = min(_STEP * min(_bound(wv, dw), _bound(z, dz)), 1.0)
        gap = 0.0
        for i in range(n):
            xp[i] += fp * dx[i]
            s[i] += fp * ds[i]
            wv[i] += fd * dw[i]
            z[i] += fd * dz[i]
            gap += z[i] * xp[i] + wv[i] * s[i]
        for j in range(k):
            yv[j] += fd * dy[j]
        if trace:
            hist[it - 1] = _objective(y, xt, u, w, -yv)
    return -yv, it, gap, hist[:it] if trace else hist[:0]


def frisch_newton(y, x, u, w, beta0, max_iterations=50, gap_tolerance=1e-5, trace=False):
    """Raw interior-point iterations on arrays.

    Returns ``(beta, iterations, gap, trace)`` where ``beta`` is the final
    iterate and ``trace`` the check objective after every iteration (empty
    unless requested).
    """
    beta, it, gap, hist = _fn_kernel(
        np.ascontiguousarray(y, dtype=np.float64),
        np.ascontiguousarray(np.asarray(x, dtype=np.float64).T),
        np.ascontiguousarray(u, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(beta0, dtype=np.float64),
        int(max_iterations), float(gap_tolerance), bool(trace),
    )
    return beta, int(it), float(gap), hist.tolist()


def vertex_beta(x, y, idx) -> np.ndarray | None:
    """Exact fit through the observations ``idx`` (sorted first), or None if singular."""
    idx = np.sort(np.asarray(idx))
    xh = x[idx]
    try:
        beta = np.linalg.solve(xh, y[idx])
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(beta)) or np.linalg.cond(xh) > 1e12:
        return None
    return beta


def vertex_certificate(y, x, u, w, idx, beta, tol=1e-9) -> bool:
    """Subgradient optimality check for the basic solution through ``idx``.

    Nonbasic observations contribute their fixed derivative; the basic
    multipliers must then fall inside ``[-w(1-u), w u]``.
    """
    idx = np.sort(np.asarray(idx))
    r = y - x @ beta
    scale = max(1.0, float(np.max(np.abs(y))))
    nb = np.ones(y.shape[0], dtype=bool)
    nb[idx] = False
    if np.any(np.abs(r[nb]) <= 1e-11 * scale):
        return False
    psi = np.where(r[nb] > 0, w[nb] * u[nb], -w[nb] * (1.0 - u[nb]))
    g = x[nb].T @ psi
    try:
        d = -np.linalg.solve(x[idx].T, g)
    except np.linalg.LinAlgError:
        return False
    lo = -w[idx] * (1.0 - u[idx])
    hi = w[idx] * u[idx]
    slack = tol * max(1.0, float(np.max(w)))
    return bool(np.all(d >= lo - slack) and np.all(d <= hi + slack))


def purify(y, x, u, w, beta, n_extra=2, max_tries=64):
    """Move an approximate optimum to the optimal vertex near it.

    Candidate bases come from the observations with the smallest absolute
    residuals. Returns ``(beta_vertex, basis)`` or ``(None, None)``.
    """
    n, k = x.shape
    if n < k:
        return None, None
    r = np.abs(y - x @ beta)
    m = min(n, k + n_extra)
    near = np.argpartition(r, m - 1)[:m] if m < n else np.arange(n)
    near = near[np.lexsort((near, r[near]))]
    base_obj = check_objective(y, x, u, w, beta)
    scale = max(1.0, abs(base_obj))
    for tries, comb in enumerate(itertools.combinations(range(m), k)):
        if tries >= max_tries:
            break
        idx = np.sort(near[list(comb)])
        b = vertex_beta(x, y, idx)
        if b is None:
            continue
        if vertex_certificate(y, x, u, w, idx, b):
            return b, idx
    # degenerate fits (many exact zeros): accept the vertex if it is not worse
    idx = np.sort(near[:k])
    b = vertex_beta(x, y, idx)
    if b is not None:
        rr = np.abs(y - x @ b)
        if np.sum(rr <= 1e-11 * max(1.0, float(np.max(np.abs(y))))) > k:
            if check_objective(y, x, u, w, b) <= base_obj + 1e-12 * scale:
                return b, idx
    return None, None


def weighted_lstsq(y, x, w) -> np.ndarray:
    sw = np.sqrt(w)
    return np.linalg.lstsq(x * sw[:, None], y * sw, rcond=None)[0]


def solve_interior_point(
    problem: RqrProblem,
    config: SolverConfig | None = None,
    beta_start: np.ndarray | None = None,
    purify_vertex: bool = True,
    trace: bool = False,
) -> RqrSolution:
    """Minimize the weighted rotated check objective.

    The cold start is the weighted least-squares fit; ``beta_start`` replaces
    it for warm starts. Never raises on non-convergence: the returned solution
    then carries ``converged=False`` and the last iterate.
    """
    config = config or SolverConfig()
    y, x, u, w = problem.y, problem.x, problem.u, problem.w
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise RankDeficiencyError("design matrix is rank deficient")
    beta0 = weighted_lstsq(y, x, w) if beta_start is None else np.asarray(beta_start, dtype=np.float64)
    beta, it, gap, hist = frisch_newton(
        y, x, u, w, beta0, config.max_iterations, config.gap_tolerance, trace=trace
    )
    converged = gap <= config.gap_tolerance
    obj = check_objective(y, x, u, w, beta)
    basis = None
    if converged and purify_vertex:
        bv, basis = purify(y, x, u, w, beta)
        if bv is not None:
            beta = bv
            obj = check_objective(y, x, u, w, beta)
    return RqrSolution(
        beta=beta, objective=obj, iterations=it, duality_gap=gap,
        converged=converged, basis=basis, objective_trace=hist,
    )


def solve_full(problem: RqrProblem, config: SolverConfig | None = None) -> RqrSolution:
    """Cold solve that doubles the iteration cap until the gap closes.

    Extreme rotations can need more than ``max_iterations`` steps from a
    cold start. The cap grows up to ``full_solve_cap_growth`` times its
    configured value; ``iterations`` counts every attempt.
    """
    config = config or SolverConfig()
    cap = config.max_iterations
    spent = 0
    while True:
        sol = solve_interior_point(problem, replace(config, max_iterations=cap))
        spent += sol.iterations
        if sol.converged or cap >= config.max_iterations * config.full_solve_cap_growth:
            sol.iterations = spent
            return sol
        cap *= 2


def oracle_solve(problem: RqrProblem) -> RqrSolution:
    """Exhaustive search over exact-fit bases; for small test problems only.

    A quantile regression optimum is attained at a basic solution, so scanning
    every K-subset finds it. The lexicographically first subset wins ties.
    """
    y, x, u, w = problem.y, problem.x, problem.u, problem.w
    n, k = x.shape
    if n > 30 or k > 3:
        raise ValueError("oracle_solve is limited to n <= 30 and K <= 3")
    best = None
    best_obj = np.inf
    best_idx = None
    for comb in itertools.combinations(range(n), k):
        idx = np.array(comb)
        try:
            b = np.linalg.solve(x[idx], y[idx])
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(b)):
            continue
        obj = check_objective(y, x, u, w, b)
        if obj < best_obj - 1e-12 * max(1.0, abs(best_obj) if np.isfinite(best_obj) else 1.0):
            best, best_obj, best_idx = b, obj, idx
    if best is None:
        raise np.linalg.LinAlgError("every basis subset is singular")
    return RqrSolution(beta=best, objective=best_obj, iterations=0, duality_gap=0.0, converged=True, basis=best_idx)
