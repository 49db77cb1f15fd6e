"""Gaussian copula and the bivariate normal CDF behind it.

The bivariate normal integral follows Genz's BVNU routine (Drezner-Wesolowsky
for moderate correlation, Genz's asymptotic expansion for |rho| >= 0.925)
with his 6, 12 or 20 point Gauss-Legendre rules. It is vectorized over the
integration limits; the correlation is a scalar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri


def _nodes(npts: int) -> tuple[np.ndarray, np.ndarray]:
    # Gauss-Legendre on (0, 2), matching Genz's 1 -/+ x layout
    x, w = np.polynomial.legendre.leggauss(npts)
    return 1.0 + x, w


# Genz's accuracy-driven rule sizes for |rho| < 0.3, < 0.75 and the rest
_RULES = {6: _nodes(6), 12: _nodes(12), 20: _nodes(20)}


def _rule(r: float) -> tuple[np.ndarray, np.ndarray]:
    ar = abs(r)
    return _RULES[6 if ar < 0.3 else 12 if ar < 0.75 else 20]


_TWOPI = 2.0 * np.pi


def _bvnu(h: np.ndarray, k: np.ndarray, r: float) -> np.ndarray:
    """P(X > h, Y > k) for finite h, k."""
    hk = h * k
    gx, gw = _rule(r)
    if abs(r) < 0.925:
        hs = 0.5 * (h * h + k * k)
        asr = 0.5 * np.arcsin(r)
        sn = np.sin(asr * gx)
        e = np.exp((np.multiply.outer(hk, sn) - hs[..., None]) / (1.0 - sn * sn))
        return e @ gw * asr / _TWOPI + ndtr(-h) * ndtr(-k)

    if r < 0:
        k = -k
        hk = -hk
    bvn = np.zeros_like(h)
    if abs(r) < 1:
        a_s = (1.0 - r) * (1.0 + r)
        a = np.sqrt(a_s)
        bs = (h - k) ** 2
        c = (4.0 - hk) / 8.0
        d = (12.0 - hk) / 80.0
        asr = -0.5 * (bs / a_s + hk)
        with np.errstate(under="ignore"):
            term = a * np.exp(asr) * (1.0 - c * (bs - a_s) * (1.0 - d * bs) / 3.0 + c * d * a_s * a_s)
        bvn = np.where(asr > -100.0, term, 0.0)
        b = np.sqrt(bs)
        sp = np.sqrt(_TWOPI) * ndtr(-b / a)
        with np.errstate(over="ignore", invalid="ignore"):
            corr = np.exp(-0.5 * hk) * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0)
        bvn = np.where(hk > -100.0, bvn - corr, bvn)
        a = 0.5 * a
        xs = (a * gx) ** 2
        asr = -0.5 * (bs[..., None] / xs + hk[..., None])
        keep = asr > -100.0
        c_ = c[..., None]
        d_ = d[..., None]
        sp = 1.0 + c_ * xs * (1.0 + 5.0 * d_ * xs)
        rs = np.sqrt(1.0 - xs)
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            ep = np.exp(-(hk[..., None] / 2.0) * xs / (1.0 + rs) ** 2) / rs
            terms = np.where(keep, np.exp(np.where(keep, asr, 0.0)) * (sp - ep), 0.0)
        bvn = (a * (terms @ gw) - bvn) / _TWOPI
    if r > 0:
        return bvn + ndtr(-np.maximum(h, k))
    lower = np.where(h < 0, ndtr(k) - ndtr(h), ndtr(-h) - ndtr(-k))
    return np.where(h >= k, -bvn, lower - bvn)


def bvn_cdf(a, b, rho: float):
    """Standard bivariate normal CDF ``P(A <= a, B <= b)`` with correlation ``rho``.

    ``a`` and ``b`` broadcast against each other and may contain ``+-inf``.
    Absolute accuracy is about 1e-15 away from the |rho| -> 1 limit.
    """
    rho = float(rho)
    if not abs(rho) < 1.0:
        raise ValueError("correlation must lie strictly inside (-1, 1)")
    a, b = np.broadcast_arrays(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    scalar = a.ndim == 0
    a = np.atleast_1d(a).astype(np.float64)
    b = np.atleast_1d(b).astype(np.float64)
    if np.isnan(a).any() or np.isnan(b).any():
        raise ValueError("bvn_cdf limits must not be NaN")
    out = np.empty(a.shape)
    fin = np.isfinite(a) & np.isfinite(b)
    if fin.any():
        out[fin] = _bvnu(-a[fin], -b[fin], rho)
    inf = ~fin
    if inf.any():
        ai, bi = a[inf], b[inf]
        # an infinite limit collapses to a marginal or to 0
        val = np.where(ai == np.inf, ndtr(bi), np.where(bi == np.inf, ndtr(ai), 0.0))
        val = np.where((ai == -np.inf) | (bi == -np.inf), 0.0, val)
        out[inf] = val
    out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if scalar else out


def _check_theta(theta: float) -> float:
    theta = float(theta)
    if not -1.0 < theta < 1.0:
        raise ValueError(f"Gaussian copula parameter must lie in (-1, 1), got {theta}")
    return theta


def copula_cdf(u, v, theta: float):
    """Gaussian copula ``C(u, v; theta)``.

    Interior arguments are required; use :func:`copula_cdf_bounded` when
    ``u`` or ``v`` may sit on the boundary of the unit square.
    """
    theta = _check_theta(theta)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any((u <= 0) | (u >= 1)) or np.any((v <= 0) | (v >= 1)):
        raise ValueError("copula arguments must lie in the open unit interval")
    if theta == 0.0:
        res = u * v
        return float(res) if res.ndim == 0 else res
    return bvn_cdf(ndtri(u), ndtri(v), theta)


def copula_cdf_bounded(u, v, theta: float):
    """``C(u, v; theta)`` extended to the closed square by ``C(u,1)=u``, ``C(1,v)=v``, ``C(.,0)=0``."""
    theta = _check_theta(theta)
    u, v = np.broadcast_arrays(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64))
    scalar = u.ndim == 0
    u = np.atleast_1d(u)
    v = np.atleast_1d(v)
    if np.any((u < 0) | (u > 1)) or np.any((v < 0) | (v > 1)):
        raise ValueError("copula arguments must lie in [0, 1]")
    if theta == 0.0:
        out = u * v
    else:
        # ndtri maps 0/1 to -inf/+inf, which bvn_cdf handles as marginal limits
        out = bvn_cdf(ndtri(u), ndtri(v), theta)
    return float(out[0]) if scalar else out


def conditional_copula(u, v, theta: float):
    """Participation-conditional copula ``G(u, v; theta) = C(u, v; theta) / v``.

    ``v`` may equal 1; ``v = 0`` is rejected.
    """
    theta = _check_theta(theta)
    v_arr = np.asarray(v, dtype=np.float64)
    if np.any(v_arr <= 0) or np.any(v_arr > 1):
        raise ValueError("conditional copula needs v in (0, 1]")
    u_arr = np.asarray(u, dtype=np.float64)
    if np.any((u_arr <= 0) | (u_arr >= 1)):
        raise ValueError("conditional copula needs u in (0, 1)")
    if theta == 0.0:
        out = np.broadcast_to(u_arr, np.broadcast_shapes(u_arr.shape, v_arr.shape)).astype(np.float64)
        return float(out) if out.ndim == 0 else out
    out = copula_cdf_bounded(u_arr, v_arr, theta) / v_arr
    return out


def rotated_quantiles(tau: float, pscore: np.ndarray, theta: float) -> np.ndarray:
    """Per-observation quantile indices ``G(tau, pscore_i; theta)``, kept inside (0, 1)."""
    g = np.asarray(conditional_copula(tau, pscore, theta), dtype=np.float64)
    tiny = 1e-12
    return np.clip(g, tiny, 1.0 - tiny)


@dataclass(frozen=True)
class CopulaModel:
    """A parametric copula; only the Gaussian family is provided."""

    theta: float
    family: str = "gaussian"

    def __post_init__(self):
        if self.family != "gaussian":
            raise ValueError(f"unsupported copula family {self.family!r}")
        _check_theta(self.theta)

    def cdf(self, u, v):
        return copula_cdf(u, v, self.theta)

    def conditional(self, u, v):
        return conditional_copula(u, v, self.theta)
