"""Acceptance gate: ten end-to-end criteria at their stated tolerances.

Each test prints one PASS/FAIL line. The full run takes roughly an hour on
one core; set FASTQRS_DIAG_SMALL=1 to run the solver diagnostics on the
N=2000 preset instead of N=10^4.
"""

import os
import time

import numpy as np
import pytest
from scipy import stats
from scipy.optimize import linprog

from fastqrs.bootstrap import bootstrap_qrs, draw_weights
from fastqrs.copula import bvn_cdf, copula_cdf, rotated_quantiles
from fastqrs.preprocess import participant_arrays, rqr_process, solve_preprocessed
from fastqrs.propensity import fit_logit, predict_propensity
from fastqrs.qrs import estimate
from fastqrs.rqr import RqrProblem, solve_interior_point
from fastqrs.simulation import DgpConfig, numerical_diagnostics, rep_seed, simulate_dgp
from fastqrs.types import CopulaParamGrid, QuantileGrid

from oracles import exhaustive_qr

FINE = QuantileGrid.percentiles()
COARSE = QuantileGrid.deciles()
THETAS = CopulaParamGrid.default()


def test_preprocessing_equivalence(verdict):
    rng = np.random.default_rng(101)
    worst = 0.0
    t0 = time.perf_counter()
    for cell in range(100):
        data, _ = simulate_dgp(DgpConfig(n=2000, k=3, seed=int(rng.integers(2**31)), constants_seed=cell))
        ps = predict_propensity(fit_logit(data), data)
        y, x, p, w = participant_arrays(data, ps)
        tau = float(rng.uniform(0.02, 0.98))
        theta = float(rng.uniform(-0.9, 0.9))
        prob = RqrProblem(y, x, rotated_quantiles(tau, p, theta), w)
        # preliminary fit from the neighbouring quantile, as in a process sweep
        prelim = solve_interior_point(RqrProblem(y, x, rotated_quantiles(tau - 0.01, p, theta), w)).beta
        pre = solve_preprocessed(prob, prelim, 0.5)
        full = solve_interior_point(prob)
        worst = max(worst, abs(pre.objective - full.objective) / full.objective)
    secs = time.perf_counter() - t0
    ok = worst <= 1e-6 and secs < 120
    verdict(1, "preprocessing equivalence", ok, f"max relative objective gap {worst:.2e}, {secs:.1f} s")
    assert ok


def test_solver_matches_exhaustive_oracle(verdict):
    rng = np.random.default_rng(202)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(200):
        n = int(rng.integers(4, 21))
        k = int(rng.integers(1, 3))
        x = np.column_stack([np.ones(n)] + [rng.uniform(0, 3, n) for _ in range(k - 1)])
        y = x @ rng.normal(size=k) + rng.standard_t(3, n)
        u = rng.uniform(0.1, 0.9, n)
        w = rng.exponential(size=n)
        sol = solve_interior_point(RqrProblem(y, x, u, w))
        ref, _ = exhaustive_qr(y, x, u, w)
        worst = max(worst, float(np.max(np.abs(sol.beta - ref))))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-8 and secs < 60
    verdict(2, "solver correctness", ok, f"max coefficient error {worst:.2e} over 200 instances, {secs:.1f} s")
    assert ok


def _highs_qr(y, x, tau):
    """Standard quantile regression by dual simplex, snapped to its basic solution."""
    n, k = x.shape
    c = np.concatenate([np.zeros(2 * k), np.full(n, tau), np.full(n, 1 - tau)])
    a_eq = np.hstack([x, -x, np.eye(n), -np.eye(n)])
    res = linprog(c, A_eq=a_eq, b_eq=y, bounds=(0, None), method="highs-ds")
    assert res.status == 0
    b = res.x[:k] - res.x[k:2 * k]
    basis = np.argsort(np.abs(y - x @ b))[:k]
    return np.linalg.solve(x[basis], y[basis])


def test_independence_reduction(verdict):
    worst = 0.0
    t0 = time.perf_counter()
    for seed in range(10):
        data, _ = simulate_dgp(DgpConfig(n=600, k=2, seed=seed))
        ps = predict_propensity(fit_logit(data), data)
        res = rqr_process(data, 0.0, FINE, ps)
        part = data.participants
        for q, tau in enumerate(FINE.values):
            ref = _highs_qr(data.y[part], data.x[part], float(tau))
            worst = max(worst, float(np.max(np.abs(res.beta[q] - ref))))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-8 and secs < 60
    verdict(3, "zero-correlation reduction", ok, f"max coefficient error {worst:.2e} over 10 seeds x 99 quantiles, "
                                                 f"{secs:.1f} s")
    assert ok


def test_copula_math(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    n = 10_000
    thetas = np.round(rng.uniform(-0.95, 0.95, n), 2)
    u = np.sort(rng.uniform(0.001, 0.999, (n, 2)), axis=1)
    v = np.sort(rng.uniform(0.001, 0.999, (n, 2)), axis=1)
    frechet = 0.0
    volume = np.inf
    for t in np.unique(thetas):
        i = thetas == t
        c11 = copula_cdf(u[i, 1], v[i, 1], t)
        c00 = copula_cdf(u[i, 0], v[i, 0], t)
        volume = min(volume, float(np.min(c11 - copula_cdf(u[i, 0], v[i, 1], t) - copula_cdf(u[i, 1], v[i, 0], t) + c00)))
        lo = np.maximum(u[i, 0] + v[i, 0] - 1, 0)
        hi = np.minimum(u[i, 0], v[i, 0])
        frechet = max(frechet, float(np.max(lo - c00)), float(np.max(c00 - hi)))
    uu = rng.uniform(0.001, 0.999, n)
    vv = rng.uniform(0.001, 0.999, n)
    indep = float(np.max(np.abs(copula_cdf(uu, vv, 0.0) - uu * vv)))
    rhos = np.linspace(-0.9, 0.9, 19)
    arcsine = max(abs(bvn_cdf(0.0, 0.0, r) - (0.25 + np.arcsin(r) / (2 * np.pi))) for r in rhos)
    secs = time.perf_counter() - t0
    ok = frechet <= 1e-12 and volume >= -1e-12 and indep <= 1e-12 and arcsine <= 1e-10 and secs < 30
    verdict(4, "copula math", ok, f"Frechet excess {frechet:.1e}, min rectangle volume {volume:.1e}, "
                                  f"independence error {indep:.1e}, arcsine error {arcsine:.1e}, {secs:.1f} s")
    assert ok


def test_estimation_accuracy(verdict, alg2_monte_carlo):
    ok_recs = [r for r in alg2_monte_carlo.records if r["ok"]]
    thetas = np.array([r["theta_hat"] for r in ok_recs])
    share = float(np.mean((thetas >= 0.49 - 1e-12) & (thetas <= 0.51 + 1e-12)))
    mse = float(np.mean((thetas - 0.5) ** 2))
    ok = len(ok_recs) == 50 and share >= 0.90 and mse <= 4 * 2.56e-6
    verdict(5, "estimation accuracy", ok,
            f"{share:.0%} of {len(ok_recs)} reps in [0.49, 0.51], MSE {mse:.2e} (bound 1.02e-05), "
            f"mean theta_hat {thetas.mean():.4f}")
    assert ok


def test_speedup(verdict):
    data, _ = simulate_dgp(DgpConfig(n=10_000, k=10, seed=1))
    times = {}
    fits = {}
    for alg in ("alg2", "alg3", "baseline"):
        t0 = time.perf_counter()
        fits[alg] = estimate(alg, data, THETAS, FINE, COARSE, p=3)
        times[alg] = time.perf_counter() - t0
    speedup = times["baseline"] / times["alg2"]
    ratio = times["alg3"] / times["alg2"]
    ok = speedup >= 5 and 1.2 <= ratio <= 3.0
    verdict(6, "speedup", ok, f"baseline {times['baseline']:.1f} s, alg2 {times['alg2']:.1f} s, "
                              f"alg3 {times['alg3']:.1f} s; baseline/alg2 {speedup:.1f} (need >= 5), "
                              f"alg3/alg2 {ratio:.2f} (need 1.2-3.0)")
    assert ok


def test_refinement_fidelity(verdict):
    exact = 0
    agree = 0
    for rep in range(20):
        data, _ = simulate_dgp(DgpConfig(n=10_000, k=2, seed=rep_seed(7, 10_000, 2, rep), constants_seed=7))
        base = estimate("baseline", data, THETAS, FINE, COARSE)
        alg3 = estimate("alg3", data, THETAS, FINE, COARSE, p=3)
        agree += alg3.theta_hat == base.theta_hat
        if rep < 5:
            full = estimate("alg3", data, THETAS, FINE, COARSE, p=len(THETAS))
            exact += full.theta_hat == base.theta_hat and np.array_equal(full.beta_process, base.beta_process)
    ok = exact == 5 and agree >= 19
    verdict(7, "refinement fidelity", ok, f"P=A identical on {exact}/5 seeds; P=3 agrees on {agree}/20 seeds")
    assert ok


def test_bootstrap_identity_and_speed(verdict):
    data, _ = simulate_dgp(DgpConfig(n=10_000, k=10, seed=2))
    alg2_times = []
    for _ in range(3):
        t0 = time.perf_counter()
        fit2 = estimate("alg2", data, THETAS, FINE, COARSE)
        alg2_times.append(time.perf_counter() - t0)
    fit3 = estimate("alg3", data, THETAS, FINE, COARSE, p=3)
    identical = True
    for fit, variant in ((fit2, "reduced"), (fit3, "refined")):
        d = bootstrap_qrs(data, fit, THETAS, FINE, COARSE, 1, variant, weight_fn=lambda j: np.ones(data.n))[0]
        identical &= d.theta_star == fit.theta_hat and np.array_equal(d.beta_star, fit.beta_process)
    draws = bootstrap_qrs(data, fit2, THETAS, FINE, COARSE, 5, "reduced", seed=11)
    per_draw = float(np.median([d.seconds for d in draws]))
    cold = float(np.median(alg2_times))
    ok = identical and per_draw < cold
    verdict(8, "bootstrap degeneracy and speed", ok,
            f"unit weights reproduce estimates: {identical}; median per-draw {per_draw:.2f} s vs "
            f"median Algorithm 2 run {cold:.2f} s")
    assert ok


def test_solver_diagnostics(verdict):
    small = os.environ.get("FASTQRS_DIAG_SMALL") == "1"
    n = 2000 if small else 10_000
    t0 = time.perf_counter()
    tables = numerical_diagnostics(DgpConfig(n=n, k=2, seed=0), THETAS, FINE)
    secs = time.perf_counter() - t0
    rows = {r["implementation"]: r for r in tables.summary()}
    rest, unre = rows["restricted"], rows["unrestricted"]
    min_ratio = min(rest["min_ratio"], unre["min_ratio"])
    ok = (min_ratio >= 1 - 1e-9
          and unre["suboptimal"] <= rest["suboptimal"]
          and rest["outer_decile_count"] >= rest["middle_decile_count"]
          and unre["outer_decile_count"] >= unre["middle_decile_count"])
    big_theta = np.abs(tables.thetas) >= 0.8
    sub = tables.suboptimal("restricted")
    verdict(9, "solver diagnostics", ok,
            f"N={n}: min cold/preprocessing ratio {min_ratio:.12f}; suboptimal cells restricted "
            f"{rest['suboptimal']} (outer/middle decile {rest['outer_decile_count']}/{rest['middle_decile_count']}), "
            f"unrestricted {unre['suboptimal']} ({unre['outer_decile_count']}/{unre['middle_decile_count']}); "
            f"restricted share at |theta|>=0.8 {sub[big_theta].mean():.3f} vs {sub[~big_theta].mean():.3f} elsewhere; "
            f"{secs:.0f} s")
    assert ok


def test_dgp_fidelity(verdict):
    n = 100_000
    _, _, (u, v) = simulate_dgp(DgpConfig(n=n, k=2, seed=10), return_latent=True)
    ks_u = stats.kstest(u, "uniform").statistic
    ks_v = stats.kstest(v, "uniform").statistic
    bound = 1.63 / np.sqrt(n)
    data, _ = simulate_dgp(DgpConfig(n=n, k=1, seed=10))
    g = fit_logit(data).gamma
    ok = ks_u <= bound and ks_v <= bound and abs(g[0] + 1.5) <= 0.05 and abs(g[1] - 2.0) <= 0.05
    verdict(10, "DGP fidelity", ok, f"KS U {ks_u:.4f}, V {ks_v:.4f} (bound {bound:.4f}); "
                                    f"logit intercept {g[0]:.4f}, instrument {g[1]:.4f}")
    assert ok
