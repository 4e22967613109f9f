"""Gamma CDF, quantile function, and two-quantile fits.

The CDF is the regularized lower incomplete gamma P(k, x/theta): a power
series for x/theta < k + 1 and a modified Lentz continued fraction
otherwise (abs error < 1e-12). The fit inverts the scale-free quantile
ratio q90/q50, which is strictly decreasing in the shape k.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln

__all__ = [
    "GammaParams",
    "gamma_cdf",
    "gamma_ppf",
    "fit_gamma_from_quantiles",
    "fit_gamma_scalar",
    "FitRangeError",
]

_MAX_ITER = 10000
_EPS = 1e-16
_LOG_K_LO = math.log(1e-3)
_LOG_K_HI = math.log(1e3)


class FitRangeError(ValueError):
    """Quantile ratio outside the invertible shape bracket [1e-3, 1e3]."""


class GammaParams(tuple):
    """(shape k, scale theta), both finite and positive."""

    def __new__(cls, shape, scale):
        if not (np.isfinite(shape) and np.isfinite(scale)
                and shape > 0 and scale > 0):
            raise ValueError(f"invalid gamma parameters ({shape}, {scale})")
        return super().__new__(cls, (float(shape), float(scale)))

    @property
    def shape(self):
        return self[0]

    @property
    def scale(self):
        return self[1]


# -- CDF -----------------------------------------------------------------


def _lower_series(z, k):
    """P(k, z) by power series; requires z < k + 1 (vectorized)."""
    term = np.full_like(z, 1.0) / k
    total = term.copy()
    ap = np.asarray(k, dtype=float).copy()
    active = np.ones(z.shape, dtype=bool)
    for _ in range(_MAX_ITER):
        ap = ap + 1.0
        term = term * z / ap
        total = np.where(active, total + term, total)
        active = active & (np.abs(term) >= np.abs(total) * 1e-17)
        if not active.any():
            break
    return total * np.exp(-z + k * np.log(z) - gammaln(k))


def _upper_cf(z, k):
    """Q(k, z) by Lentz continued fraction; requires z >= k + 1."""
    tiny = 1e-300
    b = z + 1.0 - k
    c = np.full_like(z, 1.0 / tiny)
    d = 1.0 / np.maximum(b, tiny)
    h = d.copy()
    active = np.ones(z.shape, dtype=bool)
    for i in range(1, _MAX_ITER):
        an = -i * (i - k)
        b = b + 2.0
        d = an * d + b
        d = np.where(np.abs(d) < tiny, tiny, d)
        c = b + an / c
        c = np.where(np.abs(c) < tiny, tiny, c)
        d = 1.0 / d
        delta = d * c
        h = np.where(active, h * delta, h)
        active = active & (np.abs(delta - 1.0) >= 1e-15)
        if not active.any():
            break
    return h * np.exp(-z + k * np.log(z) - gammaln(k))


def gamma_cdf(x, shape, scale=1.0):
    """Regularized lower incomplete gamma P(shape, x / scale).

    Accepts scalars or broadcastable arrays; negative x is a domain error.
    """
    x_arr = np.asarray(x, dtype=float)
    scalar = x_arr.ndim == 0 and np.ndim(shape) == 0 and np.ndim(scale) == 0
    x_arr, k, th = np.broadcast_arrays(
        x_arr, np.asarray(shape, float), np.asarray(scale, float))
    if np.any(x_arr < 0):
        raise ValueError("gamma_cdf domain error: x must be >= 0")
    if np.any(k <= 0) or np.any(th <= 0):
        raise ValueError("gamma parameters must be positive")
    z = x_arr / th
    out = np.zeros_like(z)
    lo = (z < k + 1.0) & (z > 0.0)
    if lo.any():
        out[lo] = _lower_series(z[lo], k[lo])
    hi = z >= k + 1.0
    if hi.any():
        out[hi] = 1.0 - _upper_cf(z[hi], k[hi])
    out = np.clip(out, 0.0, 1.0)
    return float(out) if scalar else out


def gamma_pdf(x, shape, scale=1.0):
    x = np.asarray(x, dtype=float)
    z = np.maximum(x / scale, 1e-320)
    return np.exp((shape - 1.0) * np.log(z) - z - gammaln(shape)) / scale


def gamma_ppf(p, shape, scale=1.0):
    """Quantile function by Newton iteration on gamma_cdf.

    Wilson-Hilferty start, with a bisection fallback for coordinates where
    Newton leaves the support.
    """
    p_arr = np.asarray(p, dtype=float)
    scalar = p_arr.ndim == 0 and np.ndim(shape) == 0
    p_arr, k = np.broadcast_arrays(p_arr, np.asarray(shape, float))
    p_arr = np.clip(p_arr, 1e-300, 1.0 - 1e-16)
    # Wilson-Hilferty: (x/k)^(1/3) approximately normal
    from scipy.stats import norm
    zn = norm.ppf(p_arr)
    c = 1.0 - 1.0 / (9.0 * k)
    x_wh = k * (c + zn * np.sqrt(1.0 / (9.0 * k))) ** 3
    # deep lower tail: invert the leading series term P(k,z) ~ z^k/Gamma(k+1)
    u_lo = (np.log(p_arr) + gammaln(k + 1.0)) / k
    u_wh = np.log(np.maximum(x_wh, 1e-300))
    u = np.where((x_wh <= 0) | (u_lo < np.log(1e-2 * (k + 1.0))), u_lo, u_wh)
    # Newton on log x, so tiny (even subnormal) quantiles stay reachable
    u = np.clip(u, -690.0, 690.0)
    for _ in range(100):
        x = np.exp(u)
        f = gamma_cdf(x, k) - p_arr
        log_den = k * u - x - gammaln(k)  # log of x * pdf(x)
        step = np.clip(f * np.exp(-np.maximum(log_den, -690.0)), -3.0, 3.0)
        u = np.clip(u - step, -690.0, 690.0)
        if np.all(np.abs(step) <= 1e-14):
            break
    result = np.exp(u) * scale
    return float(result) if scalar else result


# -- two-quantile fit ----------------------------------------------------


def _quantile_ratio(log_k, p_hi=0.9, p_lo=0.5):
    k = np.exp(np.asarray(log_k, dtype=float))
    return gamma_ppf(p_hi, k) / gamma_ppf(p_lo, k)


_TABLE = None


def _ratio_table(n=400000):
    """Dense (log k, log ratio, log median) table for vectorized fitting.

    Built once per process with scipy's gammaincinv; the public gamma_cdf /
    gamma_ppf path above stays self-contained.
    """
    global _TABLE
    if _TABLE is None:
        from scipy.special import gammaincinv
        log_k = np.linspace(_LOG_K_LO, _LOG_K_HI, n)
        k = np.exp(log_k)
        q50 = gammaincinv(k, 0.5)
        q90 = gammaincinv(k, 0.9)
        log_ratio = np.log(q90) - np.log(q50)
        # ratio decreases in k -> reverse for np.interp's ascending x
        _TABLE = (log_ratio[::-1].copy(), log_k[::-1].copy(),
                  np.log(q50), log_k)
    return _TABLE


def fit_gamma_from_quantiles(q50, q90):
    """Gamma (shape, scale) whose 0.5 / 0.9 quantiles match (q50, q90).

    Vectorized. The scale-free ratio q90/q50 pins the shape (inverted from
    a dense monotone table); the scale then follows from the median.
    Raises on crossed quantiles; ratios outside the shape bracket
    [1e-3, 1e3] raise FitRangeError.
    """
    q50_arr = np.asarray(q50, dtype=float)
    scalar = q50_arr.ndim == 0
    q50_arr, q90_arr = np.broadcast_arrays(q50_arr, np.asarray(q90, float))
    if np.any(q50_arr <= 0):
        raise ValueError("q50 must be positive")
    if np.any(q90_arr <= q50_arr):
        raise ValueError("quantile crossing: require q50 < q90")
    log_ratio = np.log(q90_arr) - np.log(q50_arr)
    xs, ys, log_med, log_k_grid = _ratio_table()
    if np.any(log_ratio < xs[0]) or np.any(log_ratio > xs[-1]):
        raise FitRangeError("quantile ratio outside the fittable range")
    log_k = np.interp(log_ratio, xs, ys)
    k = np.exp(log_k)
    theta = q50_arr / np.exp(np.interp(log_k, log_k_grid, log_med))
    if scalar:
        return GammaParams(float(k), float(theta))
    return k, theta


def fit_gamma_scalar(q50, q90, tol=1e-13):
    """Reference scalar fit: bisection on log k over [log 1e-3, log 1e3]."""
    if q50 <= 0:
        raise ValueError("q50 must be positive")
    if q90 <= q50:
        raise ValueError("quantile crossing: require q50 < q90")
    target = q90 / q50
    lo, hi = _LOG_K_LO, _LOG_K_HI
    xs, _, _, _ = _ratio_table()
    if not (xs[0] <= math.log(target) <= xs[-1]):
        raise FitRangeError("quantile ratio outside the fittable range")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _quantile_ratio(mid) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    k = math.exp(0.5 * (lo + hi))
    theta = q50 / gamma_ppf(0.5, k)
    return GammaParams(k, theta)
