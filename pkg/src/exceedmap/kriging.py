"""Maximum-likelihood Matern fitting and universal-kriging prediction.

One slice of smoothed exceedance probabilities is treated as a Gaussian
field with a Matern covariance and an unknown constant mean (ordinary
kriging, the default) or a linear-in-coordinates trend. Covariance
parameters are fitted by maximizing the profile log-likelihood with a
derivative-free simplex started from three fixed initial points.
Prediction is the BLUP; standard errors come from the kriging variance
and ignore covariance-parameter uncertainty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import linalg as _la
from scipy.special import kv as _kv

from .covariance import MaternParams, matern_cov
from .data import GridSpec, Location, atomic_write
from .errors import NumericalError, ValidationError

__all__ = [
    "FitConfig",
    "KrigingModel",
    "KrigedField",
    "fit_ml",
    "kriging_weights",
    "krige_predict",
    "krige_field",
    "save_model",
    "load_model",
]

MEAN_MODELS = ("constant", "linear")
NU_BOUNDS = (0.05, 5.0)
LOGIT_EPS = 1e-6

# Diagonal jitter ladder applied when a Cholesky factorization fails,
# as multiples of sigma.
_JITTERS = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8)


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings for fit_ml."""

    n_starts: int = 3
    max_iter: int = 500
    ftol: float = 1e-8
    nu_bounds: tuple[float, float] = NU_BOUNDS


@dataclass(frozen=True)
class KrigingModel:
    """A fitted Matern model tied to its observation sites."""

    params: MaternParams
    mean_model: str
    loglik: float
    sites: np.ndarray  # (m, 2)
    nugget: float = 0.0

    def __post_init__(self):
        if self.mean_model not in MEAN_MODELS:
            raise ValidationError(f"mean model must be one of {MEAN_MODELS}")
        if not (math.isfinite(self.nugget) and self.nugget >= 0):
            raise ValidationError(f"nugget must be >= 0, got {self.nugget!r}")
        sites = np.asarray(self.sites, dtype=float)
        if sites.ndim != 2 or sites.shape[1] != 2 or sites.shape[0] < 1:
            raise ValidationError("sites must be an (m, 2) array")
        sites = sites.copy()
        sites.setflags(write=False)
        object.__setattr__(self, "sites", sites)

    @property
    def m(self) -> int:
        return self.sites.shape[0]


@dataclass(frozen=True)
class KrigedField:
    """Gridded predictions and kriging standard errors for one time slice."""

    grid: GridSpec
    pred: np.ndarray
    se: np.ndarray
    time_label: str = ""
    method: str = ""
    transform: str = "none"

    def __post_init__(self):
        pred = np.asarray(self.pred, dtype=float)
        se = np.asarray(self.se, dtype=float)
        if pred.shape != (self.grid.n_cells,) or se.shape != pred.shape:
            raise ValidationError("pred and se must be 1-d arrays of length nx*ny")
        if np.any(se < 0):
            raise ValidationError("kriging standard errors must be >= 0")
        pred = pred.copy()
        pred.setflags(write=False)
        se = se.copy()
        se.setflags(write=False)
        object.__setattr__(self, "pred", pred)
        object.__setattr__(self, "se", se)

    @property
    def pred_clamped(self) -> np.ndarray:
        """Predictions clipped into [0, 1] for map output; raw values stay in pred."""
        return np.clip(self.pred, 0.0, 1.0)


def _as_sites(sites) -> np.ndarray:
    if isinstance(sites, np.ndarray):
        arr = np.asarray(sites, dtype=float)
    else:
        arr = np.array([[s.x, s.y] if isinstance(s, Location) else list(s) for s in sites],
                       dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValidationError("sites must be (m, 2) coordinates or Location objects")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("site coordinates must be finite")
    return arr


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.hypot(a[:, 0, None] - b[None, :, 0], a[:, 1, None] - b[None, :, 1])


def _closest_pair(sites: np.ndarray) -> tuple[int, int, float]:
    d = _pairwise(sites, sites)
    np.fill_diagonal(d, np.inf)
    i, j = np.unravel_index(np.argmin(d), d.shape)
    return int(i), int(j), float(d[i, j])


def _trend_matrix(sites: np.ndarray, mean_model: str) -> np.ndarray:
    if mean_model == "constant":
        return np.ones((sites.shape[0], 1))
    return np.column_stack([np.ones(sites.shape[0]), sites[:, 0], sites[:, 1]])


def _chol_with_jitter(C: np.ndarray, sigma: float,
                      sites: Optional[np.ndarray] = None) -> np.ndarray:
    """Cholesky factor of C, escalating diagonal jitter up to 1e-8*sigma."""
    for jit in _JITTERS:
        A = C if jit == 0.0 else C + jit * sigma * np.eye(C.shape[0])
        try:
            return np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            continue
    if sites is not None:
        i, j, d = _closest_pair(sites)
        raise NumericalError(
            f"covariance matrix singular after max jitter; closest sites are "
            f"#{i} and #{j} at distance {d:.6g}")
    raise NumericalError("covariance matrix singular after max jitter")


class _SliceGeometry:
    """Cached distance structure for repeated fits at a fixed site set."""

    def __init__(self, sites: np.ndarray):
        m = sites.shape[0]
        d = _pairwise(sites, sites)
        iu = np.triu_indices(m, 1)
        off = d[iu]
        if np.any(off == 0.0):
            k = int(np.argmin(off))
            raise ValidationError(
                f"duplicate sites: #{iu[0][k]} and #{iu[1][k]} coincide")
        # rounding guards against distances that differ only in the last ulp
        hu, inv = np.unique(off.round(decimals=12), return_inverse=True)
        self.m = m
        self.sites = sites
        self.iu = iu
        self.unique_h = hu
        self.inv = inv
        self.dmed = float(np.median(off))

    def corr_unique(self, rho: float, nu: float) -> np.ndarray:
        # inlined Matern correlation on the cached positive unique distances;
        # the public matern_cov wrapper is bypassed in this hot loop
        t = (2.0 * math.sqrt(nu) / rho) * self.unique_h
        return math.exp((1.0 - nu) * math.log(2.0) - math.lgamma(nu)) \
            * np.power(t, nu) * _kv(nu, t)

    def corr_matrix(self, rho: float, nu: float) -> np.ndarray:
        R = np.eye(self.m)
        ru = self.corr_unique(rho, nu)[self.inv]
        R[self.iu] = ru
        R[(self.iu[1], self.iu[0])] = ru
        return R


def _nelder_mead(f: Callable[[np.ndarray], float], x0: np.ndarray,
                 step: float = 0.7, ftol: float = 1e-8, max_iter: int = 500
                 ) -> tuple[np.ndarray, float]:
    """Minimize f with the standard Nelder-Mead simplex.

    Stops when the objective spread across the simplex drops below ftol
    or after max_iter iterations.
    """
    n = x0.size
    sim = np.tile(x0, (n + 1, 1))
    for i in range(n):
        sim[i + 1, i] += step
    fv = np.array([f(s) for s in sim])
    for _ in range(max_iter):
        order = np.argsort(fv, kind="stable")
        sim, fv = sim[order], fv[order]
        if fv[-1] - fv[0] < ftol:
            break
        cen = sim[:-1].mean(axis=0)
        xr = cen + (cen - sim[-1])
        fr = f(xr)
        if fr < fv[0]:
            xe = cen + 2.0 * (cen - sim[-1])
            fe = f(xe)
            if fe < fr:
                sim[-1], fv[-1] = xe, fe
            else:
                sim[-1], fv[-1] = xr, fr
        elif fr < fv[-2]:
            sim[-1], fv[-1] = xr, fr
        else:
            xc = cen + 0.5 * (sim[-1] - cen)
            fc = f(xc)
            if fc < fv[-1]:
                sim[-1], fv[-1] = xc, fc
            else:
                for i in range(1, n + 1):
                    sim[i] = sim[0] + 0.5 * (sim[i] - sim[0])
                    fv[i] = f(sim[i])
    k = int(np.argmin(fv))
    return sim[k], float(fv[k])


_BIG = 1e12


def _neg_profile_loglik(theta: np.ndarray, geom: _SliceGeometry, y: np.ndarray,
                        F: np.ndarray, nu_bounds: tuple[float, float],
                        nugget: float) -> float:
    """Negative Gaussian log-likelihood with the trend profiled out by GLS.

    theta = (log sigma, log rho, log nu); nu is kept inside its bounds and
    rho within a generous window around the median site distance, both via
    quadratic penalties so the simplex is steered back smoothly. Parameter
    points whose correlation matrix is (near) singular are rejected with a
    large value outright; the jitter ladder is reserved for the final fit.
    """
    lsig, lrho, lnu = theta
    pen = 0.0
    llo, lhi = math.log(nu_bounds[0]), math.log(nu_bounds[1])
    if lnu < llo:
        pen += (lnu - llo) ** 2
        lnu = llo
    elif lnu > lhi:
        pen += (lnu - lhi) ** 2
        lnu = lhi
    ldm = math.log(geom.dmed)
    if lrho < ldm - 7.0:
        pen += (lrho - (ldm - 7.0)) ** 2
        lrho = ldm - 7.0
    elif lrho > ldm + 7.0:
        pen += (lrho - (ldm + 7.0)) ** 2
        lrho = ldm + 7.0
    if abs(lsig) > 60.0:
        return _BIG + pen
    sigma, rho, nu = math.exp(lsig), math.exp(lrho), math.exp(lnu)
    r = geom.corr_unique(rho, nu)
    if r.max() > 1.0 - 1e-10:
        return _BIG + pen  # sites effectively perfectly correlated
    R = np.eye(geom.m)
    ru = r[geom.inv]
    R[geom.iu] = ru
    R[(geom.iu[1], geom.iu[0])] = ru
    C = sigma * R
    if nugget > 0.0:
        C[np.diag_indices_from(C)] += nugget
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        return _BIG + pen
    m = geom.m
    rhs = np.column_stack([y, F])
    sol = _la.solve_triangular(L, rhs, lower=True, check_finite=False)
    a, B = sol[:, 0], sol[:, 1:]
    if B.shape[1] == 1:
        b = B[:, 0]
        bb = float(b @ b)
        if bb <= 0.0:
            return _BIG + pen
        res = a - (float(b @ a) / bb) * b
    else:
        M = B.T @ B
        try:
            beta = np.linalg.solve(M, B.T @ a)
        except np.linalg.LinAlgError:
            return _BIG + pen
        res = a - B @ beta
    quad = float(res @ res)
    logdet = 2.0 * float(np.log(L.diagonal()).sum())
    nll = 0.5 * (quad + logdet + m * math.log(2.0 * math.pi))
    if not math.isfinite(nll):
        return _BIG + pen
    return nll + pen


def fit_ml(sites, values, mean_model: str = "constant",
           config: FitConfig = FitConfig(), nugget: float = 0.0) -> KrigingModel:
    """Fit Matern parameters to one slice of values by maximum likelihood.

    Requires at least 3 distinct sites and a non-constant value vector.
    The optimizer runs over (log sigma, log rho, log nu) from fixed
    deterministic starts (three by default); the best result is kept.
    """
    pts = _as_sites(sites)
    y = np.asarray(values, dtype=float)
    if mean_model not in MEAN_MODELS:
        raise ValidationError(f"mean model must be one of {MEAN_MODELS}")
    if pts.shape[0] < 3:
        raise ValidationError(f"fitting needs at least 3 sites, got {pts.shape[0]}")
    if y.shape != (pts.shape[0],):
        raise ValidationError("values must align with sites")
    if not np.all(np.isfinite(y)):
        raise ValidationError("values must be finite")
    if float(np.ptp(y)) == 0.0:
        raise ValidationError("all values are equal; covariance cannot be fitted")
    geom = _SliceGeometry(pts)
    F = _trend_matrix(pts, mean_model)

    resid = y - F @ np.linalg.lstsq(F, y, rcond=None)[0]
    v0 = max(float(np.var(resid)), 1e-12)
    d0 = geom.dmed
    starts = [
        np.array([math.log(v0), math.log(d0), math.log(0.5)]),
        np.array([math.log(v0), math.log(d0 / 4.0), math.log(1.5)]),
        np.array([math.log(v0), math.log(d0 * 2.0), math.log(0.2)]),
    ][: config.n_starts]

    obj = lambda th: _neg_profile_loglik(th, geom, y, F, config.nu_bounds, nugget)
    best = None
    for x0 in starts:
        xb, fb = _nelder_mead(obj, x0, ftol=config.ftol, max_iter=config.max_iter)
        if math.isfinite(fb) and fb < _BIG and (best is None or fb < best[1]):
            best = (xb, fb)
    if best is None:
        raise NumericalError("optimizer found no finite objective from any start")
    lsig, lrho, lnu = best[0]
    lnu = min(max(lnu, math.log(config.nu_bounds[0])), math.log(config.nu_bounds[1]))
    params = MaternParams(math.exp(lsig), math.exp(lrho), math.exp(lnu))
    return KrigingModel(params, mean_model, -best[1], pts, nugget)


def _kriging_system(model: KrigingModel, targets: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Solve the constrained BLUP equations for a batch of targets.

    Returns (weights, mult, c0, f0): weights is (m, q), mult the Lagrange
    multipliers (k, q); columns index targets.
    """
    pts = model.sites
    p = model.params
    C = matern_cov(_pairwise(pts, pts), p)
    if model.nugget > 0.0:
        C[np.diag_indices_from(C)] += model.nugget
    L = _chol_with_jitter(C, p.sigma, sites=pts)
    F = _trend_matrix(pts, model.mean_model)
    c0 = matern_cov(_pairwise(pts, targets), p)  # (m, q)
    f0 = _trend_matrix(targets, model.mean_model).T  # (k, q)

    def csolve(B):
        z = _la.solve_triangular(L, B, lower=True, check_finite=False)
        return _la.solve_triangular(L.T, z, lower=False, check_finite=False)

    Ci_c0 = csolve(c0)
    Ci_F = csolve(F)
    M = F.T @ Ci_F
    try:
        mult = np.linalg.solve(M, F.T @ Ci_c0 - f0)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("trend normal equations are singular "
                             "(degenerate site configuration)") from exc
    lam = Ci_c0 - Ci_F @ mult
    return lam, mult, c0, f0


def kriging_weights(model: KrigingModel, targets) -> np.ndarray:
    """BLUP weights (m, n_targets); for a constant mean each column sums to 1."""
    lam, _, _, _ = _kriging_system(model, _as_sites(targets))
    return lam


def krige_predict(model: KrigingModel, values, targets
                  ) -> tuple[np.ndarray, np.ndarray]:
    """BLUP prediction and kriging standard error at each target location."""
    y = np.asarray(values, dtype=float)
    if y.shape != (model.m,):
        raise ValidationError(f"values length {y.shape} does not match {model.m} model sites")
    if not np.all(np.isfinite(y)):
        raise ValidationError("values must be finite")
    tgt = _as_sites(targets)
    lam, mult, c0, f0 = _kriging_system(model, tgt)
    pred = lam.T @ y
    c00 = model.params.sigma + model.nugget
    var = c00 - np.einsum("mq,mq->q", lam, c0) - np.einsum("kq,kq->q", mult, f0)
    se = np.sqrt(np.maximum(var, 0.0))
    return pred, se


def krige_field(model: KrigingModel, values, grid: GridSpec,
                transform: str = "none", time_label: str = "",
                method: str = "") -> KrigedField:
    """Krige one slice of values onto a grid, optionally on the logit scale.

    With transform="none" raw predictions are stored (clamping into [0, 1]
    happens at map rendering); with "logit" the values are clamped into
    [eps, 1-eps], kriged on the logit scale and inverted, so predictions
    land in (0, 1) by construction. Standard errors are reported on the
    kriging scale that was used.
    """
    if transform not in ("none", "logit"):
        raise ValidationError(f"transform must be 'none' or 'logit', got {transform!r}")
    y = np.asarray(values, dtype=float)
    if transform == "logit":
        z = np.clip(y, LOGIT_EPS, 1.0 - LOGIT_EPS)
        z = np.log(z / (1.0 - z))
        pred, se = krige_predict(model, z, grid.cell_xy())
        pred = 1.0 / (1.0 + np.exp(-pred))
    else:
        pred, se = krige_predict(model, y, grid.cell_xy())
    return KrigedField(grid, pred, se, time_label=time_label, method=method,
                       transform=transform)


def save_model(model: KrigingModel, path: str) -> None:
    """Serialize a fitted model as plain-text key=value records."""
    sites = ";".join(f"{format(x, '.17g')}:{format(y, '.17g')}" for x, y in model.sites)
    text = "\n".join([
        f"sigma={format(model.params.sigma, '.17g')}",
        f"rho={format(model.params.rho, '.17g')}",
        f"nu={format(model.params.nu, '.17g')}",
        f"nugget={format(model.nugget, '.17g')}",
        f"mean_model={model.mean_model}",
        f"loglik={format(model.loglik, '.17g')}",
        f"sites={sites}",
    ]) + "\n"
    atomic_write(path, text)


def load_model(path: str) -> KrigingModel:
    """Read a model written by save_model."""
    kv = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
    try:
        sites = np.array([[float(c) for c in pair.split(":")]
                          for pair in kv["sites"].split(";")])
        params = MaternParams(float(kv["sigma"]), float(kv["rho"]), float(kv["nu"]))
        return KrigingModel(params, kv["mean_model"], float(kv["loglik"]),
                            sites, float(kv.get("nugget", "0")))
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed model file ({exc})") from None
