"""Per-station temporal exceedance-probability estimators.

Three methods are provided. IND keeps the raw 0/1 indicators, EDF takes
a moving weighted average with weights proportional to the empirical
distribution function of the station's own values, and KER applies the
Nadaraya-Watson kernel estimator over rescaled time. A global bandwidth
of order n^(-1/5) is used for KER; the same bandwidth must be reused
across thresholds so the estimates stay monotone in the threshold.

Pointwise confidence bands for KER come from the asymptotic normal
approximation, with the estimator variance assembled from kernel
weights and kernel-smoothed lag covariances of the indicator process.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .covariance import inv_norm_cdf
from .data import TimeGrid
from .errors import NumericalError, ValidationError

__all__ = [
    "KernelSpec",
    "CovEstimate",
    "smooth_ind",
    "smooth_ker",
    "smooth_ker_series",
    "smooth_edf",
    "bandwidth_rule",
    "smoothed_lag_covariances",
    "variance_band",
]

KERNEL_FAMILIES = ("gaussian", "epanechnikov")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and bandwidth on the rescaled time axis."""

    family: str = "gaussian"
    bandwidth: float = 0.1

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValidationError(f"kernel family must be one of {KERNEL_FAMILIES}")
        if not (math.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValidationError(f"bandwidth must be > 0, got {self.bandwidth!r}")

    def weights(self, u: np.ndarray) -> np.ndarray:
        """Kernel density evaluated at scaled offsets u (integrates to 1)."""
        u = np.asarray(u, dtype=float)
        if self.family == "gaussian":
            return np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
        return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)

    def roughness(self) -> float:
        """R(K) = integral of K^2, used in the iid variance formula."""
        if self.family == "gaussian":
            return 1.0 / (2.0 * math.sqrt(math.pi))
        return 0.6


@dataclass(frozen=True)
class CovEstimate:
    """Smoothed lag covariances g(0..L) of the indicator process at one time."""

    lags: int
    g: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g, dtype=float)
        if g.shape != (self.lags + 1,):
            raise ValidationError(f"expected {self.lags + 1} covariances, got shape {g.shape}")
        # project onto the valid cone: g(0) >= 0 and |g(k)| <= g(0)
        g = g.copy()
        g[0] = max(g[0], 0.0)
        g[1:] = np.clip(g[1:], -g[0], g[0])
        g.setflags(write=False)
        object.__setattr__(self, "g", g)


def _as_indicator_array(indicators) -> np.ndarray:
    arr = np.asarray(indicators, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError("indicators must be a nonempty 1-d sequence")
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise ValidationError("indicators must contain only 0 and 1")
    return arr


def smooth_ind(indicators) -> np.ndarray:
    """Method IND: the raw indicators, untouched."""
    return _as_indicator_array(indicators)


def smooth_ker(indicators, grid: TimeGrid, kernel: KernelSpec, eval_t: float) -> float:
    """Nadaraya-Watson estimate of the exceedance probability at one time.

    Raises NumericalError if every kernel weight vanishes at eval_t
    (possible for compact kernels with a too-small bandwidth).
    """
    ind = _as_indicator_array(indicators)
    if ind.size != grid.n:
        raise ValidationError(f"indicators length {ind.size} != grid length {grid.n}")
    w = kernel.weights((grid.points - eval_t) / kernel.bandwidth)
    denom = float(np.dot(w, np.ones_like(w)))
    if denom <= 0.0:
        raise NumericalError(
            f"all kernel weights vanish at t={eval_t!r} "
            f"(family={kernel.family}, b={kernel.bandwidth!r})")
    return float(np.dot(w, ind) / denom)


def smooth_ker_series(indicators, grid: TimeGrid, kernel: KernelSpec) -> np.ndarray:
    """Nadaraya-Watson estimates at every grid point.

    ``indicators`` may be one series of length n or a (stations, n) block;
    the kernel weight matrix is shared across rows.
    """
    ind = np.asarray(indicators, dtype=float)
    one_series = ind.ndim == 1
    block = np.atleast_2d(ind)
    if block.shape[1] != grid.n:
        raise ValidationError(f"indicators length {block.shape[1]} != grid length {grid.n}")
    if not np.all((block == 0.0) | (block == 1.0)):
        raise ValidationError("indicators must contain only 0 and 1")
    t = grid.points
    W = kernel.weights((t[None, :] - t[:, None]) / kernel.bandwidth)
    denom = W.sum(axis=1)
    if np.any(denom <= 0.0):
        bad = t[np.argmin(denom)]
        raise NumericalError(
            f"all kernel weights vanish at t={bad!r} "
            f"(family={kernel.family}, b={kernel.bandwidth!r})")
    est = (block @ W.T) / denom[None, :]
    return est[0] if one_series else est


def smooth_edf(values, x0: float, window: int) -> np.ndarray:
    """Method EDF: windowed average of indicators weighted by the EDF.

    The weight of time point j is EDF(values[j]) computed from the full
    series; the average runs over a ``window``-point window centered at
    each time point, truncated at the edges. If all weights in a window
    were to vanish the unweighted mean of the window indicators is used
    instead (unreachable with this EDF, which is always >= 1/n, but kept
    as a documented fallback).
    """
    vals = np.asarray(values, dtype=float)
    if vals.ndim != 1 or vals.size == 0:
        raise ValidationError("values must be a nonempty 1-d sequence")
    if not np.all(np.isfinite(vals)):
        raise ValidationError("values must be finite (impute before smoothing)")
    n = vals.size
    if not isinstance(window, int) or window < 1 or window % 2 == 0:
        raise ValidationError(f"window must be an odd positive integer, got {window!r}")
    if window > n:
        raise ValidationError(f"window {window} exceeds series length {n}")
    edf = np.searchsorted(np.sort(vals), vals, side="right") / n
    ind = (vals >= x0).astype(float)
    half = window // 2
    wi = edf * ind
    num = np.zeros(n)
    den = np.zeros(n)
    isum = np.zeros(n)
    cnt = np.zeros(n)
    for off in range(-half, half + 1):
        if off >= 0:
            sl_dst, sl_src = slice(0, n - off), slice(off, n)
        else:
            sl_dst, sl_src = slice(-off, n), slice(0, n + off)
        num[sl_dst] += wi[sl_src]
        den[sl_dst] += edf[sl_src]
        isum[sl_dst] += ind[sl_src]
        cnt[sl_dst] += 1.0
    out = np.empty(n)
    ok = den > 0.0
    out[ok] = num[ok] / den[ok]
    out[~ok] = isum[~ok] / cnt[~ok]
    return out


def bandwidth_rule(n: int, c: float = 1.0) -> float:
    """Global bandwidth b = c * n^(-1/5), clipped into (0, 0.5]."""
    if not isinstance(n, int) or n < 2:
        raise ValidationError(f"bandwidth_rule needs n >= 2, got {n!r}")
    if not (math.isfinite(c) and c > 0):
        raise ValidationError(f"scale constant must be > 0, got {c!r}")
    return min(c * n ** (-0.2), 0.5)


def smoothed_lag_covariances(indicators, grid: TimeGrid, kernel: KernelSpec,
                             eval_t: float, max_lag: int) -> CovEstimate:
    """Kernel-smoothed empirical lag covariances of the indicator process at eval_t.

    Residuals are taken against the Nadaraya-Watson estimate; the lag-k
    products are then locally averaged with the same kernel, centered at
    eval_t.
    """
    ind = _as_indicator_array(indicators)
    est = smooth_ker_series(ind, grid, kernel)
    resid = ind - est
    t = grid.points
    g = np.empty(max_lag + 1)
    for k in range(max_lag + 1):
        prod = resid[: grid.n - k] * resid[k:]
        w = kernel.weights((t[: grid.n - k] - eval_t) / kernel.bandwidth)
        sw = w.sum()
        g[k] = float(np.dot(w, prod) / sw) if sw > 0 else 0.0
    return CovEstimate(max_lag, g)


def variance_band(indicators, grid: TimeGrid, kernel: KernelSpec,
                  level: float = 0.95) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pointwise asymptotic confidence band for the KER estimator.

    Returns (lower, upper, sd) arrays aligned to the grid, the band
    clipped into [0, 1]. The variance at each time combines the kernel
    weights with smoothed lag covariances up to L = floor(n^(1/3));
    covariances beyond L are treated as zero. A negative variance
    estimate is floored at zero with a warning.
    """
    if not (0.0 < level < 1.0):
        raise ValidationError(f"coverage level must lie in (0, 1), got {level!r}")
    ind = _as_indicator_array(indicators)
    if ind.size != grid.n:
        raise ValidationError(f"indicators length {ind.size} != grid length {grid.n}")
    n = grid.n
    max_lag = int(n ** (1.0 / 3.0))
    if max_lag < 1:
        raise ValidationError(f"series too short for a lag window: n={n}")
    t = grid.points
    est = smooth_ker_series(ind, grid, kernel)
    resid = ind - est
    z = inv_norm_cdf(0.5 * (1.0 + level))
    var = np.empty(n)
    floored = False
    for j in range(n):
        w = kernel.weights((t - t[j]) / kernel.bandwidth)
        sw = w.sum()
        g = np.empty(max_lag + 1)
        for k in range(max_lag + 1):
            wk = w[: n - k]
            swk = wk.sum()
            g[k] = float(np.dot(wk, resid[: n - k] * resid[k:]) / swk) if swk > 0 else 0.0
        g = CovEstimate(max_lag, g).g
        v = g[0] * float(np.dot(w, w))
        for k in range(1, max_lag + 1):
            v += 2.0 * g[k] * float(np.dot(w[: n - k], w[k:]))
        v /= sw * sw
        if v < 0.0:
            floored = True
            v = 0.0
        var[j] = v
    if floored:
        warnings.warn("variance estimate went negative and was floored at 0",
                      RuntimeWarning, stacklevel=2)
    sd = np.sqrt(var)
    lower = np.clip(est - z * sd, 0.0, 1.0)
    upper = np.clip(est + z * sd, 0.0, 1.0)
    return lower, upper, sd
