"""exceedmap: threshold exceedance probability estimation and mapping.

A two-step pipeline for spatially correlated daily time series: smooth
each station's 0/1 threshold-exceedance indicators over time (methods
IND, EDF, KER), then interpolate the per-day probability field by
universal kriging under a Matern covariance fitted by maximum
likelihood. Includes an exact simulator for separable space-time
Gaussian fields and a seeded Monte Carlo harness comparing the three
methods, plus a CLI (``exceedmap --help``).
"""

__version__ = "0.1.0"

from .covariance import (
    MaternParams,
    SeparableCovParams,
    bessel_k,
    gamma_fn,
    inv_norm_cdf,
    matern_cov,
    norm_cdf,
    separable_cov,
    stable_temporal_cov,
    whittle_matern_cov,
)
from .data import (
    ExceedanceEstimate,
    GridSpec,
    Location,
    StationSeries,
    TimeGrid,
    distance,
    impute_missing,
    indicator_series,
    load_stations,
    read_exceedance_csv,
    save_stations,
    write_exceedance_csv,
)
from .errors import ExceedmapError, NumericalError, ValidationError
from .evaluate import (
    ExperimentReport,
    Table1Config,
    loo_crossval,
    normality_check,
    rate_check,
    rmse_time,
    run_table1,
    season_predicate,
    seasonal_average,
)
from .kriging import (
    FitConfig,
    KrigedField,
    KrigingModel,
    fit_ml,
    krige_field,
    krige_predict,
    kriging_weights,
    load_model,
    save_model,
)
from .simulate import (
    MonotoneTransform,
    SimScenario,
    sample_sites,
    simulate,
    true_exceedance,
)
from .smoothing import (
    CovEstimate,
    KernelSpec,
    bandwidth_rule,
    smooth_edf,
    smooth_ind,
    smooth_ker,
    smooth_ker_series,
    variance_band,
)

__all__ = [
    "__version__",
    # errors
    "ExceedmapError", "ValidationError", "NumericalError",
    # data model
    "Location", "TimeGrid", "StationSeries", "ExceedanceEstimate", "GridSpec",
    "distance", "load_stations", "save_stations", "impute_missing",
    "indicator_series", "write_exceedance_csv", "read_exceedance_csv",
    # smoothing
    "KernelSpec", "CovEstimate", "smooth_ind", "smooth_ker", "smooth_ker_series",
    "smooth_edf", "bandwidth_rule", "variance_band",
    # covariance
    "MaternParams", "SeparableCovParams", "gamma_fn", "bessel_k", "matern_cov",
    "whittle_matern_cov", "stable_temporal_cov", "separable_cov",
    "norm_cdf", "inv_norm_cdf",
    # kriging
    "FitConfig", "KrigingModel", "KrigedField", "fit_ml", "kriging_weights",
    "krige_predict", "krige_field", "save_model", "load_model",
    # simulation
    "MonotoneTransform", "SimScenario", "simulate", "true_exceedance", "sample_sites",
    # evaluation
    "Table1Config", "ExperimentReport", "rmse_time", "run_table1", "loo_crossval",
    "seasonal_average", "season_predicate", "rate_check", "normality_check",
]
