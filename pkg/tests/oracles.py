"""Independent reference solvers used by the tests."""

import itertools

import numpy as np
from scipy.optimize import linprog


def check_loss(y, x, u, w, beta):
    r = y - x @ beta
    return float(np.sum(w * r * (u - (r < 0))))


def exhaustive_qr(y, x, u, w):
    """Minimum over all exact-fit K-subsets; first subset wins ties."""
    n, k = x.shape
    best, best_obj = None, np.inf
    for comb in itertools.combinations(range(n), k):
        sub = x[list(comb)]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        b = np.linalg.solve(sub, y[list(comb)])
        obj = check_loss(y, x, u, w, b)
        if best is None or obj < best_obj - 1e-12 * max(1.0, best_obj):
            best, best_obj = b, obj
    return best, best_obj


def lp_qr(y, x, u, w):
    """The check-loss minimisation as an LP in (b+, b-, e+, e-), solved by HiGHS."""
    n, k = x.shape
    c = np.concatenate([np.zeros(2 * k), w * u, w * (1 - u)])
    a_eq = np.hstack([x, -x, np.eye(n), -np.eye(n)])
    res = linprog(c, A_eq=a_eq, b_eq=y, bounds=(0, None), method="highs")
    assert res.status == 0
    return res.x[:k] - res.x[k:2 * k], float(res.fun)
