"""Command-line interface wiring the pipeline.

Subcommands: simulate, smooth, fit, krige, map, crossval, experiment.
Flags may also be supplied through an optional key=value config file
(``--config``); explicit flags win on conflict. Exit codes: 0 success,
1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from datetime import date as Date
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .data import (GridSpec, Location, atomic_write, impute_missing, indicator_series,
                   load_stations, read_exceedance_csv, save_stations,
                   write_exceedance_csv, ExceedanceEstimate)
from .errors import NumericalError, ValidationError
from .evaluate import (Table1Config, loo_crossval, report_to_csv, report_to_text,
                       run_table1, season_predicate, seasonal_average)
from .covariance import SeparableCovParams
from .kriging import KrigedField, fit_ml, krige_field, save_model
from .simulate import SimScenario, field_to_stations, simulate
from .smoothing import KernelSpec, bandwidth_rule, smooth_edf, smooth_ker_series, variance_band

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


class _Parser(argparse.ArgumentParser):
    """argparse that reports flag problems with exit code 1."""

    def error(self, message):
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _parse_grid(text: str) -> GridSpec:
    try:
        nx, ny, spacing = text.split(",")
        return GridSpec(int(nx), int(ny), Location(0.0, 0.0), float(spacing))
    except (ValueError, TypeError):
        raise ValidationError(f"bad --grid {text!r}, expected nx,ny,spacing") from None


def _parse_date(text: str) -> Date:
    try:
        return Date.fromisoformat(text)
    except ValueError:
        raise ValidationError(f"bad date {text!r}, expected YYYY-MM-DD") from None


def _load_config_file(path: str) -> dict[str, str]:
    out = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValidationError(f"{path}:{lineno}: expected key=value")
                k, v = line.split("=", 1)
                out[k.strip().replace("-", "_")] = v.strip()
    except OSError as exc:
        raise ValidationError(f"cannot read config file: {exc}") from None
    return out


def build_parser() -> _Parser:
    p = _Parser(prog="exceedmap",
                description="Threshold exceedance probability estimation and mapping.")
    p.add_argument("--version", action="version", version=f"exceedmap {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *names):
        if "input" in names:
            sp.add_argument("--input", help="input CSV path (required)")
        if "output" in names:
            sp.add_argument("--output", help="output path (required)")
        if "threshold" in names:
            sp.add_argument("--threshold", type=float,
                            help="exceedance threshold x0 (required)")
        if "method" in names:
            sp.add_argument("--method", choices=["ind", "edf", "ker"], default="ker")
        if "smoothing" in names:
            sp.add_argument("--bandwidth-c", type=float, default=1.0,
                            help="scale constant of the n^(-1/5) bandwidth rule")
            sp.add_argument("--window", type=int, default=7,
                            help="EDF window width (odd)")
            sp.add_argument("--kernel", choices=["gaussian", "epanechnikov"],
                            default="gaussian")
        if "config" in names:
            sp.add_argument("--config", default=None,
                            help="key=value config file; explicit flags win")

    sp = sub.add_parser("simulate", help="simulate a separable Gaussian field to a station CSV")
    common(sp, "output", "config")
    sp.add_argument("--seed", type=int, help="master seed (required; no hidden entropy)")
    sp.add_argument("--grid", default="20,20,1", help="nx,ny,spacing")
    sp.add_argument("--ntime", type=int, default=200)
    sp.add_argument("--sigma-t2", type=float, default=0.7)
    sp.add_argument("--alpha", type=float, default=0.2)
    sp.add_argument("--sigma-s2", type=float, default=1.3)
    sp.add_argument("--gamma", type=float, default=0.5)
    sp.add_argument("--replicate", type=int, default=0)
    sp.add_argument("--start-date", default="2004-01-01")

    sp = sub.add_parser("smooth", help="estimate per-station exceedance probabilities")
    common(sp, "input", "output", "threshold", "method", "smoothing", "config")
    sp.add_argument("--band-level", type=float, default=None,
                    help="KER only: emit pointwise standard errors for this coverage")
    sp.add_argument("--missing-cap", type=float, default=0.10)

    sp = sub.add_parser("fit", help="fit Matern parameters to smoothed estimates by ML")
    common(sp, "input", "output", "config")
    sp.add_argument("--stations", help="station CSV supplying locations (required)")
    sp.add_argument("--date", default=None,
                    help="fit this day only; default fits the time-averaged field")
    sp.add_argument("--mean-model", choices=["constant", "linear"], default="constant")
    sp.add_argument("--nugget", type=float, default=0.0)

    sp = sub.add_parser("krige", help="krige smoothed estimates onto a grid (one day)")
    common(sp, "input", "output", "config")
    sp.add_argument("--stations", help="station CSV supplying locations (required)")
    sp.add_argument("--date", help="day to krige, YYYY-MM-DD (required)")
    sp.add_argument("--grid", help="nx,ny,spacing (required)")
    sp.add_argument("--origin", default="0,0", help="grid origin x,y")
    sp.add_argument("--transform", choices=["none", "logit"], default="none")
    sp.add_argument("--mean-model", choices=["constant", "linear"], default="constant")
    sp.add_argument("--fit", choices=["daily", "averaged"], default="daily",
                    help="refit covariance per day, or once on the "
                         "time-averaged field (stabilizes sparse networks)")

    sp = sub.add_parser("map", help="grid CSV + PGM map for a day or seasonal average")
    common(sp, "input", "output", "config")
    sp.add_argument("--stations", help="station CSV supplying locations (required)")
    sp.add_argument("--date", default=None, help="one day (YYYY-MM-DD)")
    sp.add_argument("--season", default=None,
                    help="summer, winter, all, or YYYY-MM-DD:YYYY-MM-DD")
    sp.add_argument("--grid", help="nx,ny,spacing (required)")
    sp.add_argument("--origin", default="0,0")
    sp.add_argument("--transform", choices=["none", "logit"], default="none")
    sp.add_argument("--mean-model", choices=["constant", "linear"], default="constant")
    sp.add_argument("--fit", choices=["daily", "averaged"], default="daily",
                    help="refit covariance per day, or once on the "
                         "time-averaged field (stabilizes sparse networks)")

    sp = sub.add_parser("crossval", help="leave-one-out cross-validation over stations")
    common(sp, "input", "output", "threshold", "method", "smoothing", "config")
    sp.add_argument("--daily-refit", action="store_true",
                    help="refit covariance per day instead of once per held-out site")
    sp.add_argument("--missing-cap", type=float, default=0.10)

    sp = sub.add_parser("experiment", help="seeded Monte Carlo method comparison")
    common(sp, "output", "config")
    sp.add_argument("--seed", type=int, help="master seed (required; no hidden entropy)")
    sp.add_argument("--reps", type=int, default=50)
    sp.add_argument("--methods", default="ind,edf,ker")
    sp.add_argument("--thresholds", default="0,2")
    sp.add_argument("--m-values", default="24,400")
    sp.add_argument("--grid", default="20,20,1")
    sp.add_argument("--ntime", type=int, default=200)
    sp.add_argument("--sigma-t2", type=float, default=0.7)
    sp.add_argument("--alpha", type=float, default=0.2)
    sp.add_argument("--sigma-s2", type=float, default=1.3)
    sp.add_argument("--gamma", type=float, default=0.5)
    sp.add_argument("--bandwidth-c", type=float, default=1.0)
    sp.add_argument("--window", type=int, default=7)
    sp.add_argument("--parallel", type=int, default=1)
    return p


# flags that must be present (via flag or config file) per subcommand
_REQUIRED = {
    "simulate": ("seed", "output"),
    "smooth": ("input", "output", "threshold"),
    "fit": ("input", "output", "stations"),
    "krige": ("input", "output", "stations", "date", "grid"),
    "map": ("input", "output", "stations", "grid"),
    "crossval": ("input", "output", "threshold"),
    "experiment": ("seed", "output"),
}


def _coerce_like(current, raw: str):
    if isinstance(current, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def _apply_config_file(args: argparse.Namespace, argv: Sequence[str]) -> argparse.Namespace:
    """Fill unset options from a --config key=value file; explicit flags win."""
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        overrides = _load_config_file(cfg_path)
        for key, raw in overrides.items():
            if key in ("config", "command") or not hasattr(args, key):
                raise ValidationError(f"config file sets unknown option {key!r}")
            flag = "--" + key.replace("_", "-")
            if flag in argv:
                continue  # explicit flag wins
            current = getattr(args, key)
            try:
                if current is None:
                    # pick a numeric type for known numeric options
                    if key in ("threshold", "band_level"):
                        value = float(raw)
                    elif key in ("seed",):
                        value = int(raw)
                    else:
                        value = raw
                else:
                    value = _coerce_like(current, raw)
            except ValueError:
                raise ValidationError(f"config file: bad value for {key}: {raw!r}") from None
            setattr(args, key, value)
    missing = [k for k in _REQUIRED.get(args.command, ()) if getattr(args, k, None) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise ValidationError(f"{args.command}: missing required option(s): {flags}")
    return args


def write_pgm(field: KrigedField, path: str) -> None:
    """8-bit binary PGM: pixel 0 is probability 0, pixel 255 is probability 1.

    The top image row is the row of cells with the largest y.
    """
    probs = field.pred_clamped.reshape(field.grid.ny, field.grid.nx)
    pixels = np.round(255.0 * probs).astype(np.uint8)[::-1]  # flip so north is up
    header = f"P5\n{field.grid.nx} {field.grid.ny}\n255\n".encode("ascii")
    atomic_write(path, header + pixels.tobytes(), binary=True)


def write_grid_csv(field: KrigedField, path: str) -> None:
    """Grid CSV x,y,pred,se; pred keeps raw (unclamped) values."""
    xy = field.grid.cell_xy()
    lines = ["x,y,pred,se"]
    for (x, y), p, s in zip(xy, field.pred, field.se):
        lines.append(f"{format(x, '.17g')},{format(y, '.17g')},"
                     f"{format(p, '.17g')},{format(s, '.17g')}")
    atomic_write(path, "\n".join(lines) + "\n")


def _smooth_stations(stations, grid, args):
    """Shared smoothing step for cmd_smooth and cmd_crossval inputs."""
    stations = [impute_missing(s) for s in stations]
    method = args.method.upper()
    kernel = KernelSpec(args.kernel, bandwidth_rule(grid.n, args.bandwidth_c))
    estimates = []
    for s in stations:
        ind = indicator_series(s, args.threshold)
        se = None
        if method == "IND":
            probs = ind.astype(float)
        elif method == "EDF":
            probs = smooth_edf(s.values, args.threshold, args.window)
        else:
            probs = smooth_ker_series(ind, grid, kernel)
            if getattr(args, "band_level", None) is not None:
                _, _, se = variance_band(ind, grid, kernel, args.band_level)
        estimates.append(ExceedanceEstimate(s.id, args.threshold, probs, method, se))
    return stations, estimates


def cmd_simulate(args) -> int:
    grid = _parse_grid(args.grid)
    cov = SeparableCovParams(args.sigma_t2, args.alpha, args.sigma_s2, args.gamma)
    sc = SimScenario(grid, args.ntime, cov, args.seed)
    field = simulate(sc, replicate=args.replicate)
    stations, tgrid = field_to_stations(field, sc, _parse_date(args.start_date))
    save_stations(stations, tgrid, args.output)
    print(f"wrote {len(stations)} stations x {tgrid.n} days to {args.output}")
    return EXIT_OK


def cmd_smooth(args) -> int:
    stations, grid = load_stations(args.input, missing_cap=args.missing_cap)
    _, estimates = _smooth_stations(stations, grid, args)
    write_exceedance_csv(estimates, grid, args.output)
    print(f"wrote {len(estimates)} stations x {grid.n} days to {args.output}")
    return EXIT_OK


def _estimates_by_location(est_path: str, stations_path: str):
    estimates, grid = read_exceedance_csv(est_path)
    stations, sgrid = load_stations(stations_path)
    if sgrid.labels != grid.labels:
        raise ValidationError("station file dates do not match the estimate file")
    locs = {s.id: s.loc for s in stations}
    missing = [e.station_id for e in estimates if e.station_id not in locs]
    if missing:
        raise ValidationError(f"stations file lacks locations for: {', '.join(missing)}")
    pts = np.array([[locs[e.station_id].x, locs[e.station_id].y] for e in estimates])
    probs = np.vstack([e.probs for e in estimates])
    return estimates, grid, pts, probs


def cmd_fit(args) -> int:
    estimates, grid, pts, probs = _estimates_by_location(args.input, args.stations)
    if args.date is not None:
        day = _parse_date(args.date)
        if day not in grid.labels:
            raise ValidationError(f"date {day} not present in {args.input}")
        y = probs[:, grid.labels.index(day)]
    else:
        y = probs.mean(axis=1)
    model = fit_ml(pts, y, mean_model=args.mean_model, nugget=args.nugget)
    save_model(model, args.output)
    p = model.params
    print(f"sigma={p.sigma:.6g} rho={p.rho:.6g} nu={p.nu:.6g} loglik={model.loglik:.6g}")
    return EXIT_OK


def _target_grid(args) -> GridSpec:
    gspec = _parse_grid(args.grid)
    ox, oy = (float(v) for v in args.origin.split(","))
    return GridSpec(gspec.nx, gspec.ny, Location(ox, oy), gspec.spacing)


def _averaged_model(pts, probs, args):
    """One covariance fit on the time-averaged field, reused across days."""
    if getattr(args, "fit", "daily") != "averaged":
        return None
    ybar = probs.mean(axis=1)
    if float(np.ptp(ybar)) == 0.0:
        return None
    if args.transform == "logit":
        ybar = np.clip(ybar, 1e-6, 1.0 - 1e-6)
        ybar = np.log(ybar / (1.0 - ybar))
    return fit_ml(pts, ybar, mean_model=args.mean_model)


def _field_for_day(pts, probs, grid, day_index, label, args, model=None) -> KrigedField:
    gspec = _target_grid(args)
    y = probs[:, day_index]
    if float(np.ptp(y)) == 0.0:
        # constant field: kriging reproduces the constant with zero variance
        return KrigedField(gspec, np.full(gspec.n_cells, y[0]),
                           np.zeros(gspec.n_cells), time_label=label,
                           transform=args.transform)
    if model is None:
        model = fit_ml(pts, y, mean_model=args.mean_model)
    return krige_field(model, y, gspec, transform=args.transform, time_label=label)


def cmd_krige(args) -> int:
    estimates, grid, pts, probs = _estimates_by_location(args.input, args.stations)
    day = _parse_date(args.date)
    if day not in grid.labels:
        raise ValidationError(f"date {day} not present in {args.input}")
    model = _averaged_model(pts, probs, args)
    fld = _field_for_day(pts, probs, grid, grid.labels.index(day), day.isoformat(),
                         args, model)
    write_grid_csv(fld, args.output)
    print(f"wrote {fld.grid.n_cells} cells to {args.output}")
    return EXIT_OK


def cmd_map(args) -> int:
    if (args.date is None) == (args.season is None):
        raise ValidationError("map needs exactly one of --date or --season")
    estimates, grid, pts, probs = _estimates_by_location(args.input, args.stations)
    if pts.shape[0] < 3:
        raise ValidationError("mapping needs at least 3 stations")
    model = _averaged_model(pts, probs, args)
    if args.date is not None:
        day = _parse_date(args.date)
        if day not in grid.labels:
            raise ValidationError(f"date {day} not present in {args.input}")
        fld = _field_for_day(pts, probs, grid, grid.labels.index(day),
                             day.isoformat(), args, model)
    else:
        pred = season_predicate(args.season)
        days = [(i, d) for i, d in enumerate(grid.labels) if pred(d)]
        if not days:
            raise ValidationError(f"season {args.season!r} matches no days")
        daily = [_field_for_day(pts, probs, grid, i, d.isoformat(), args, model)
                 for i, d in days]
        fld = seasonal_average(daily, pred)
    write_grid_csv(fld, args.output + ".csv")
    write_pgm(fld, args.output + ".pgm")
    print(f"wrote {args.output}.csv and {args.output}.pgm")
    return EXIT_OK


def cmd_crossval(args) -> int:
    stations, grid = load_stations(args.input, missing_cap=args.missing_cap)
    stations = [impute_missing(s) for s in stations]
    rmse = loo_crossval(stations, args.threshold, args.method.upper(),
                        bandwidth_c=args.bandwidth_c, window=args.window,
                        kernel_family=args.kernel, daily_refit=args.daily_refit)
    lines = ["station_id,rmse"]
    lines += [f"{sid},{format(v, '.17g')}" for sid, v in rmse.items()]
    atomic_write(args.output, "\n".join(lines) + "\n")
    med = float(np.median(list(rmse.values())))
    print(f"median per-station RMSE: {med:.6g} ({len(rmse)} stations)")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = Table1Config(
        seed=args.seed,
        reps=args.reps,
        methods=tuple(m.strip().upper() for m in args.methods.split(",") if m.strip()),
        thresholds=tuple(float(x) for x in args.thresholds.split(",") if x.strip()),
        m_values=tuple(int(m) for m in args.m_values.split(",") if m.strip()),
        grid=_parse_grid(args.grid),
        n_time=args.ntime,
        cov=SeparableCovParams(args.sigma_t2, args.alpha, args.sigma_s2, args.gamma),
        bandwidth_c=args.bandwidth_c,
        window=args.window,
        parallel=args.parallel,
    )
    report = run_table1(cfg)
    report_to_csv(report, args.output)
    sys.stdout.write(report_to_text(report))
    print(f"wall clock: {report.wall_clock:.1f} s", file=sys.stderr)
    if report.attrition:
        return EXIT_NUMERICAL
    return EXIT_OK


_COMMANDS = {
    "simulate": cmd_simulate,
    "smooth": cmd_smooth,
    "fit": cmd_fit,
    "krige": cmd_krige,
    "map": cmd_map,
    "crossval": cmd_crossval,
    "experiment": cmd_experiment,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(argv) if argv is not None else sys.argv[1:]
    try:
        args = _apply_config_file(parser.parse_args(argv), argv)
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
