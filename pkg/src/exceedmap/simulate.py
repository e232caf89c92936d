"""Exact simulation of separable space-time Gaussian random fields.

The target covariance factorizes as Cov(X(s_i, t_k), X(s_j, t_l)) =
C_S(||s_i - s_j||) * C_T(|t_k - t_l|), so a draw is realized as
L_S @ E @ L_T' with E a matrix of independent standard normals and
L_S, L_T the Cholesky factors of the spatial and temporal covariance
matrices. The full (N*n)^2 covariance is never materialized.

Replicate r of a scenario uses the generator seeded from
SeedSequence((seed, r)), so parallel and serial runs of a replicate
set produce identical output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import date as Date
from datetime import timedelta
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .covariance import SeparableCovParams, norm_cdf, stable_temporal_cov, whittle_matern_cov
from .data import GridSpec, Location, StationSeries, TimeGrid
from .errors import NumericalError, ValidationError

__all__ = [
    "MonotoneTransform",
    "SimScenario",
    "simulate",
    "true_exceedance",
    "sample_sites",
    "field_to_stations",
    "DEFAULT_MAX_POINTS",
]

DEFAULT_MAX_POINTS = 4000


@dataclass(frozen=True)
class MonotoneTransform:
    """A strictly increasing pointwise map G with an optional known inverse."""

    fn: Callable[[np.ndarray], np.ndarray]
    inverse: Optional[Callable[[float], float]] = None


@dataclass(frozen=True)
class SimScenario:
    """A reproducible simulation setup: grid, extra sites, length, covariance, seed."""

    grid: GridSpec
    n_time: int
    cov: SeparableCovParams
    seed: int
    extra_sites: tuple[Location, ...] = ()
    transform: Optional[MonotoneTransform] = None

    def __post_init__(self):
        if not isinstance(self.n_time, int) or self.n_time < 2:
            raise ValidationError(f"n_time must be an integer >= 2, got {self.n_time!r}")
        if not isinstance(self.seed, int):
            raise ValidationError(f"seed must be an integer, got {self.seed!r}")
        object.__setattr__(self, "extra_sites", tuple(self.extra_sites))

    @property
    def n_points(self) -> int:
        return self.grid.n_cells + len(self.extra_sites)

    def points(self) -> np.ndarray:
        """Grid cells (x fastest) followed by the extra sites, as (N, 2)."""
        pts = self.grid.cell_xy()
        if self.extra_sites:
            extra = np.array([[s.x, s.y] for s in self.extra_sites])
            pts = np.vstack([pts, extra])
        return pts


def _chol_psd(C: np.ndarray, what: str) -> np.ndarray:
    scale = float(np.max(np.diag(C)))
    for jit in (0.0, 1e-12, 1e-10, 1e-8):
        A = C if jit == 0.0 else C + jit * scale * np.eye(C.shape[0])
        try:
            return np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(f"{what} covariance matrix is not positive definite after jitter")


@lru_cache(maxsize=8)
def _factors(sc: SimScenario) -> tuple[np.ndarray, np.ndarray]:
    """Cholesky factors (L_S, L_T) for a scenario; cached, read-only."""
    pts = sc.points()
    h = np.hypot(pts[:, 0, None] - pts[None, :, 0], pts[:, 1, None] - pts[None, :, 1])
    Cs = whittle_matern_cov(h, sc.cov.sigma_s2, sc.cov.gamma)
    lags = np.abs(np.subtract.outer(np.arange(sc.n_time), np.arange(sc.n_time))).astype(float)
    Ct = stable_temporal_cov(lags, sc.cov.sigma_t2, sc.cov.alpha)
    Ls = _chol_psd(Cs, "spatial")
    Lt = _chol_psd(Ct, "temporal")
    Ls.setflags(write=False)
    Lt.setflags(write=False)
    return Ls, Lt


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """The generator for one replicate; derived so runs are schedule invariant."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, replicate))))


def simulate(sc: SimScenario, replicate: int = 0,
             max_points: int = DEFAULT_MAX_POINTS) -> np.ndarray:
    """Draw one zero-mean field realization, shape (n_points, n_time).

    The same (scenario, replicate) pair always produces bit-identical
    output. Scenarios whose spatial covariance matrix would exceed
    ``max_points`` points are refused.
    """
    if sc.n_points > max_points:
        raise ValidationError(
            f"scenario has {sc.n_points} spatial points, exceeding the "
            f"memory budget of {max_points}; raise max_points explicitly to allow")
    if replicate < 0:
        raise ValidationError(f"replicate index must be >= 0, got {replicate!r}")
    Ls, Lt = _factors(sc)
    rng = replicate_rng(sc.seed, replicate)
    E = rng.standard_normal((sc.n_points, sc.n_time))
    field = Ls @ E @ Lt.T
    if sc.transform is not None:
        field = sc.transform.fn(field)
    return field


def true_exceedance(sc: SimScenario, x0: float) -> float:
    """Analytic P(X >= x0) for the stationary zero-mean Gaussian scenario.

    With a transform G present, its known inverse maps the threshold back
    to the Gaussian scale.
    """
    if not math.isfinite(x0):
        raise ValidationError(f"threshold must be finite, got {x0!r}")
    if sc.transform is not None:
        if sc.transform.inverse is None:
            raise ValidationError("transform has no known inverse; "
                                  "true exceedance is unavailable")
        x0 = float(sc.transform.inverse(x0))
    sd = math.sqrt(sc.cov.sigma_t2 * sc.cov.sigma_s2)
    return 1.0 - norm_cdf(x0 / sd)


def sample_sites(grid: GridSpec, m: int, seed: int) -> np.ndarray:
    """Draw m distinct grid cells uniformly without replacement, as (m, 2)."""
    if not isinstance(m, int) or m < 1:
        raise ValidationError(f"m must be a positive integer, got {m!r}")
    if m > grid.n_cells:
        raise ValidationError(f"cannot sample {m} sites from {grid.n_cells} cells")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed,))))
    idx = rng.choice(grid.n_cells, size=m, replace=False)
    return grid.cell_xy()[idx]


def field_to_stations(field: np.ndarray, sc: SimScenario,
                      start_date: Date = Date(2004, 1, 1)
                      ) -> tuple[list[StationSeries], TimeGrid]:
    """Wrap a simulated field as station series (grid cells become stations)."""
    if field.shape != (sc.n_points, sc.n_time):
        raise ValidationError(f"field shape {field.shape} does not match scenario")
    labels = tuple(start_date + timedelta(days=i) for i in range(sc.n_time))
    grid = TimeGrid(sc.n_time, labels)
    pts = sc.points()
    width = len(str(sc.n_points - 1))
    observed = np.ones(sc.n_time, dtype=bool)
    stations = [
        StationSeries(f"s{i:0{width}d}", Location(float(x), float(y)), field[i], observed)
        for i, (x, y) in enumerate(pts)
    ]
    return stations, grid
