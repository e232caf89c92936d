"""Covariance models and the special functions they are built on.

Provides the Matern family in the parameterization

    C(h) = sigma / (2^(nu-1) Gamma(nu)) * (2 sqrt(nu) h / rho)^nu * K_nu(2 sqrt(nu) h / rho)

(note the 2*sqrt(nu) scaling inside the argument; the more common form
without it is obtained by substituting rho' = rho / (2 sqrt(nu))), the
Whittle-Matern spatial factor sigma_S^2 * 2^(1-gamma)/Gamma(gamma) * h^gamma * K_gamma(h),
the stable temporal covariance sigma_T^2 * exp(-u^alpha), and their
separable product. Zero-distance and zero-lag values are handled by
explicit limit branches, never by evaluating K_nu at 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special as _sp

from .errors import NumericalError, ValidationError

__all__ = [
    "MaternParams",
    "SeparableCovParams",
    "gamma_fn",
    "bessel_k",
    "matern_cov",
    "whittle_matern_cov",
    "stable_temporal_cov",
    "separable_cov",
    "norm_cdf",
    "inv_norm_cdf",
]


@dataclass(frozen=True)
class MaternParams:
    """Variance scale, range and smoothness of one Matern covariance."""

    sigma: float
    rho: float
    nu: float

    def __post_init__(self):
        for name in ("sigma", "rho", "nu"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValidationError(f"MaternParams.{name} must be finite and > 0, got {v!r}")


@dataclass(frozen=True)
class SeparableCovParams:
    """Parameters of the separable stable x Whittle-Matern space-time covariance."""

    sigma_t2: float
    alpha: float
    sigma_s2: float
    gamma: float

    def __post_init__(self):
        if not (math.isfinite(self.sigma_t2) and self.sigma_t2 > 0):
            raise ValidationError(f"sigma_t2 must be > 0, got {self.sigma_t2!r}")
        if not (math.isfinite(self.sigma_s2) and self.sigma_s2 > 0):
            raise ValidationError(f"sigma_s2 must be > 0, got {self.sigma_s2!r}")
        if not (math.isfinite(self.alpha) and 0 < self.alpha <= 2):
            raise ValidationError(f"alpha must lie in (0, 2], got {self.alpha!r}")
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ValidationError(f"gamma must be > 0, got {self.gamma!r}")


def gamma_fn(z):
    """Gamma function for z > 0."""
    if not (math.isfinite(z) and z > 0):
        raise ValidationError(f"gamma_fn requires z > 0, got {z!r}")
    try:
        return math.gamma(z)
    except OverflowError as exc:
        raise NumericalError(f"gamma_fn overflow at z={z!r}") from exc


def bessel_k(nu, x):
    """Modified Bessel function of the third kind K_nu(x), nu > 0, x > 0.

    Accepts a scalar or array x. Overflow is reported, never silently
    saturated.
    """
    if not (math.isfinite(nu) and nu > 0):
        raise ValidationError(f"bessel_k requires nu > 0, got {nu!r}")
    xa = np.asarray(x, dtype=float)
    if xa.size == 0:
        return xa.copy()
    if not np.all(np.isfinite(xa)) or np.any(xa <= 0):
        raise ValidationError("bessel_k requires x > 0 (K_nu diverges at 0)")
    out = _sp.kv(nu, xa)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"bessel_k overflow for nu={nu!r} at small x")
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(out)
    return out


def _matern_shape(t: np.ndarray, nu: float) -> np.ndarray:
    """2^(1-nu)/Gamma(nu) * t^nu * K_nu(t) for t > 0; tends to 1 as t -> 0."""
    scale = math.exp((1.0 - nu) * math.log(2.0) - math.lgamma(nu))
    return scale * np.power(t, nu) * _sp.kv(nu, t)


def matern_cov(h, p: MaternParams):
    """Matern covariance at distance h >= 0 (scalar or array).

    matern_cov(0) = sigma by the continuity limit; strictly decreasing in h.
    """
    ha = np.asarray(h, dtype=float)
    if not np.all(np.isfinite(ha)) or np.any(ha < 0):
        raise ValidationError("matern_cov requires finite h >= 0")
    t = (2.0 * math.sqrt(p.nu) / p.rho) * ha
    out = np.full_like(ha, p.sigma, dtype=float)
    pos = t > 0
    if np.any(pos):
        val = p.sigma * _matern_shape(t[pos], p.nu)
        if not np.all(np.isfinite(val)):
            raise NumericalError(f"matern_cov overflow at params {p!r}")
        out[pos] = val
    if np.isscalar(h) or np.ndim(h) == 0:
        return float(out)
    return out


def stable_temporal_cov(u, sigma_t2: float, alpha: float):
    """Stable temporal covariance sigma_T^2 * exp(-u^alpha) at lag u >= 0."""
    if not (math.isfinite(sigma_t2) and sigma_t2 > 0):
        raise ValidationError(f"sigma_t2 must be > 0, got {sigma_t2!r}")
    if not (math.isfinite(alpha) and 0 < alpha <= 2):
        raise ValidationError(f"alpha must lie in (0, 2], got {alpha!r}")
    ua = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(ua)) or np.any(ua < 0):
        raise ValidationError("stable_temporal_cov requires finite u >= 0")
    out = sigma_t2 * np.exp(-np.power(ua, alpha))
    if np.isscalar(u) or np.ndim(u) == 0:
        return float(out)
    return out


def whittle_matern_cov(h, sigma_s2: float, gamma: float):
    """Whittle-Matern spatial factor sigma_S^2 * 2^(1-gamma)/Gamma(gamma) * h^gamma * K_gamma(h).

    Equals sigma_S^2 at h = 0 by continuity.
    """
    if not (math.isfinite(sigma_s2) and sigma_s2 > 0):
        raise ValidationError(f"sigma_s2 must be > 0, got {sigma_s2!r}")
    if not (math.isfinite(gamma) and gamma > 0):
        raise ValidationError(f"gamma must be > 0, got {gamma!r}")
    ha = np.asarray(h, dtype=float)
    if not np.all(np.isfinite(ha)) or np.any(ha < 0):
        raise ValidationError("whittle_matern_cov requires finite h >= 0")
    out = np.full_like(ha, sigma_s2, dtype=float)
    pos = ha > 0
    if np.any(pos):
        out[pos] = sigma_s2 * _matern_shape(ha[pos], gamma)
    if np.isscalar(h) or np.ndim(h) == 0:
        return float(out)
    return out


def separable_cov(u, h, p: SeparableCovParams):
    """Separable space-time covariance C_T(u) * C_S(h)."""
    ct = stable_temporal_cov(u, p.sigma_t2, p.alpha)
    cs = whittle_matern_cov(h, p.sigma_s2, p.gamma)
    return ct * cs


def norm_cdf(z: float) -> float:
    """Standard normal CDF."""
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


# Coefficients of Acklam's rational approximation to the inverse normal CDF.
_ICDF_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
           1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ICDF_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
           6.680131188771972e+01, -1.328068155288572e+01)
_ICDF_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
           -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ICDF_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
           3.754408661907416e+00)


def inv_norm_cdf(p: float) -> float:
    """Inverse standard normal CDF via Acklam's rational approximation.

    A single Halley refinement step brings the absolute error well below
    the 1e-8 contract.
    """
    if not (0.0 < p < 1.0):
        raise ValidationError(f"inv_norm_cdf requires p in (0, 1), got {p!r}")
    a, b, c, d = _ICDF_A, _ICDF_B, _ICDF_C, _ICDF_D
    p_low, p_high = 0.02425, 1.0 - 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
             / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0))
    elif p <= p_high:
        q = p - 0.5
        r = q * q
        x = ((((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
             / (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0))
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -((((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
              / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0))
    # Halley refinement against the erfc-based CDF
    e = norm_cdf(x) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    x = x - u / (1.0 + 0.5 * x * u)
    return x
