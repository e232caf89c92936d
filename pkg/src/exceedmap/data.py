"""Core domain types and station CSV ingestion.

Station files follow the schema ``station_id,x,y,date,value`` with a
required header, ISO dates and an empty value field marking a missing
observation. All stations must share one regular daily time grid;
irregular series are rejected, not resampled. Numbers are written with
17 significant digits so a serialize/load round trip is bit exact.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from datetime import date as Date
from datetime import timedelta
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError

__all__ = [
    "Location",
    "TimeGrid",
    "StationSeries",
    "ExceedanceEstimate",
    "GridSpec",
    "distance",
    "load_stations",
    "save_stations",
    "impute_missing",
    "indicator_series",
    "write_exceedance_csv",
    "read_exceedance_csv",
    "atomic_write",
]

STATION_HEADER = ["station_id", "x", "y", "date", "value"]
EXCEEDANCE_HEADER = ["station_id", "date", "prob", "se", "method", "threshold"]
DEFAULT_MISSING_CAP = 0.10

METHODS = ("IND", "EDF", "KER")


def _fmt(v: float) -> str:
    """Format a float with 17 significant digits (round-trips exactly)."""
    return format(float(v), ".17g")


@dataclass(frozen=True)
class Location:
    """A planar site position (abstract units; projection is the caller's job)."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValidationError(f"Location coordinates must be finite, got ({self.x!r}, {self.y!r})")


def distance(a: Location, b: Location) -> float:
    """Euclidean distance between two locations."""
    return math.hypot(a.x - b.x, a.y - b.y)


@dataclass(frozen=True)
class TimeGrid:
    """A regular daily time grid with rescaled points t_i = i/n in (0, 1]."""

    n: int
    labels: Optional[tuple[Date, ...]] = None

    def __post_init__(self):
        if not isinstance(self.n, int) or self.n < 2:
            raise ValidationError(f"TimeGrid needs n >= 2 time points, got {self.n!r}")
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != self.n:
                raise ValidationError(f"TimeGrid has {self.n} points but {len(labels)} labels")
            for prev, cur in zip(labels, labels[1:]):
                if (cur - prev) != timedelta(days=1):
                    raise ValidationError(
                        f"time grid must be regular daily; gap between {prev} and {cur}")
            object.__setattr__(self, "labels", labels)

    @property
    def points(self) -> np.ndarray:
        """Rescaled time points i/n for i = 1..n."""
        return np.arange(1, self.n + 1, dtype=float) / self.n


@dataclass(frozen=True)
class StationSeries:
    """One monitoring site: location plus a daily series with a missing mask."""

    id: str
    loc: Location
    values: np.ndarray
    observed: np.ndarray  # bool, True where a measurement exists

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        observed = np.asarray(self.observed, dtype=bool)
        if values.ndim != 1 or observed.shape != values.shape:
            raise ValidationError(f"station {self.id}: values and mask must be 1-d and aligned")
        if np.any(~np.isfinite(values[observed])):
            raise ValidationError(f"station {self.id}: observed values must be finite")
        values = values.copy()
        values[~observed] = np.nan
        values.setflags(write=False)
        observed = observed.copy()
        observed.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "observed", observed)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def fraction_missing(self) -> float:
        return float(np.mean(~self.observed))

    @property
    def fully_observed(self) -> bool:
        return bool(np.all(self.observed))


@dataclass(frozen=True)
class ExceedanceEstimate:
    """Per-site smoothed exceedance probabilities for one threshold."""

    station_id: str
    threshold: float
    probs: np.ndarray
    method: str
    se: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}, got {self.method!r}")
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size == 0:
            raise ValidationError("probs must be a nonempty 1-d sequence")
        if np.any(~np.isfinite(probs)) or np.any(probs < 0) or np.any(probs > 1):
            raise ValidationError(f"station {self.station_id}: probabilities must lie in [0, 1]")
        probs = probs.copy()
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        if self.se is not None:
            se = np.asarray(self.se, dtype=float)
            if se.shape != probs.shape or np.any(~np.isfinite(se)) or np.any(se < 0):
                raise ValidationError("se must be nonnegative and aligned to probs")
            se = se.copy()
            se.setflags(write=False)
            object.__setattr__(self, "se", se)


@dataclass(frozen=True)
class GridSpec:
    """A rectangular prediction/simulation lattice."""

    nx: int
    ny: int
    origin: Location = field(default_factory=lambda: Location(0.0, 0.0))
    spacing: float = 1.0

    def __post_init__(self):
        if not (isinstance(self.nx, int) and isinstance(self.ny, int)) or self.nx * self.ny < 1:
            raise ValidationError(f"grid needs nx*ny >= 1, got {self.nx!r} x {self.ny!r}")
        if not (math.isfinite(self.spacing) and self.spacing > 0):
            raise ValidationError(f"grid spacing must be > 0, got {self.spacing!r}")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def cell_xy(self) -> np.ndarray:
        """Cell centers as an (nx*ny, 2) array, x fastest, y increasing."""
        ix = np.arange(self.nx)
        iy = np.arange(self.ny)
        xx, yy = np.meshgrid(ix, iy)  # rows iterate y
        pts = np.column_stack([xx.ravel(), yy.ravel()]).astype(float)
        pts *= self.spacing
        pts[:, 0] += self.origin.x
        pts[:, 1] += self.origin.y
        return pts

    def cell_locations(self) -> list[Location]:
        return [Location(float(x), float(y)) for x, y in self.cell_xy()]


def atomic_write(path: str, data: str, binary: bool = False) -> None:
    """Write a file atomically (temp file in the same directory, then rename)."""
    tmp = f"{path}.tmp.{os.getpid()}"
    mode = "wb" if binary else "w"
    try:
        with open(tmp, mode, newline="" if not binary else None) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_stations(path: str, missing_cap: float = DEFAULT_MISSING_CAP
                  ) -> tuple[list[StationSeries], TimeGrid]:
    """Load a station CSV into StationSeries sharing one TimeGrid.

    Raises ValidationError on malformed rows (with the line number),
    inconsistent dates across stations, duplicate (station, date) pairs,
    duplicate station locations, or a station whose missing fraction
    exceeds ``missing_cap``.
    """
    if not os.path.exists(path):
        raise ValidationError(f"no such file: {path}")
    records: dict[str, dict[Date, Optional[float]]] = {}
    locs: dict[str, Location] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file, expected header {','.join(STATION_HEADER)}")
        if [h.strip() for h in header] != STATION_HEADER:
            raise ValidationError(
                f"{path}: bad header {','.join(header)!r}, expected {','.join(STATION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ValidationError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            sid, xs, ys, ds, vs = (f.strip() for f in row)
            try:
                x, y = float(xs), float(ys)
                day = Date.fromisoformat(ds)
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed row ({exc})") from None
            if vs == "":
                value: Optional[float] = None
            else:
                try:
                    value = float(vs)
                except ValueError:
                    raise ValidationError(f"{path}:{lineno}: malformed value {vs!r}") from None
                if not math.isfinite(value):
                    raise ValidationError(f"{path}:{lineno}: non-finite value {vs!r}")
            loc = Location(x, y)
            if sid not in records:
                records[sid] = {}
                locs[sid] = loc
                order.append(sid)
            elif locs[sid] != loc:
                raise ValidationError(
                    f"{path}:{lineno}: station {sid} has conflicting coordinates")
            if day in records[sid]:
                raise ValidationError(f"{path}:{lineno}: duplicate (station, date) pair ({sid}, {day})")
            records[sid][day] = value
    if not records:
        raise ValidationError(f"{path}: no data rows")

    first = order[0]
    dates = sorted(records[first])
    for sid in order[1:]:
        if sorted(records[sid]) != dates:
            raise ValidationError(f"{path}: inconsistent dates across stations ({first} vs {sid})")
    grid = TimeGrid(len(dates), tuple(dates))

    seen_locs: dict[tuple[float, float], str] = {}
    stations = []
    for sid in order:
        loc = locs[sid]
        key = (loc.x, loc.y)
        if key in seen_locs:
            raise ValidationError(
                f"{path}: stations {seen_locs[key]} and {sid} share location ({loc.x}, {loc.y})")
        seen_locs[key] = sid
        vals = np.array([np.nan if records[sid][d] is None else records[sid][d] for d in dates])
        obs = np.array([records[sid][d] is not None for d in dates])
        s = StationSeries(sid, loc, vals, obs)
        if s.fraction_missing > missing_cap:
            raise ValidationError(
                f"station {sid}: missing cap exceeded "
                f"({s.fraction_missing:.3f} > {missing_cap:.3f})")
        stations.append(s)
    return stations, grid


def _check_plain_id(sid: str) -> None:
    if any(ch in sid for ch in ',"\n\r'):
        raise ValidationError(f"station id {sid!r} contains CSV delimiter characters")


def save_stations(stations: Sequence[StationSeries], grid: TimeGrid, path: str) -> None:
    """Write stations in the ingestion CSV schema (bit-exact round trip)."""
    if grid.labels is None:
        raise ValidationError("save_stations requires a TimeGrid with date labels")
    lines = [",".join(STATION_HEADER)]
    for s in stations:
        _check_plain_id(s.id)
        if s.n != grid.n:
            raise ValidationError(f"station {s.id} has {s.n} values, grid has {grid.n}")
        for i, day in enumerate(grid.labels):
            v = "" if not s.observed[i] else _fmt(s.values[i])
            lines.append(f"{s.id},{_fmt(s.loc.x)},{_fmt(s.loc.y)},{day.isoformat()},{v}")
    atomic_write(path, "\n".join(lines) + "\n")


def impute_missing(s: StationSeries) -> StationSeries:
    """Fill missing values by linear interpolation, constant at the edges.

    Observed indices are unchanged; the operation is idempotent.
    """
    obs_idx = np.flatnonzero(s.observed)
    if obs_idx.size < 2:
        raise ValidationError(f"station {s.id}: need at least 2 observed values to impute")
    if obs_idx.size == s.n:
        return s
    idx = np.arange(s.n, dtype=float)
    filled = np.interp(idx, obs_idx.astype(float), s.values[obs_idx])
    return replace(s, values=filled, observed=np.ones(s.n, dtype=bool))


def indicator_series(s: StationSeries, x0: float) -> np.ndarray:
    """0/1 exceedance indicators 1{value >= x0}; ties count as exceedance."""
    if not s.fully_observed:
        raise ValidationError(f"station {s.id}: indicator_series requires a fully observed series")
    if not math.isfinite(x0):
        raise ValidationError(f"threshold must be finite, got {x0!r}")
    return (s.values >= x0).astype(np.int8)


def write_exceedance_csv(estimates: Sequence[ExceedanceEstimate], grid: TimeGrid,
                         path: str) -> None:
    """Write estimates in the schema station_id,date,prob,se,method,threshold."""
    if grid.labels is None:
        raise ValidationError("write_exceedance_csv requires a TimeGrid with date labels")
    lines = [",".join(EXCEEDANCE_HEADER)]
    for e in estimates:
        _check_plain_id(e.station_id)
        if e.probs.shape[0] != grid.n:
            raise ValidationError(f"station {e.station_id}: estimate length != grid length")
        for i, day in enumerate(grid.labels):
            se = "" if e.se is None else _fmt(e.se[i])
            lines.append(f"{e.station_id},{day.isoformat()},{_fmt(e.probs[i])},{se},"
                         f"{e.method},{_fmt(e.threshold)}")
    atomic_write(path, "\n".join(lines) + "\n")


def read_exceedance_csv(path: str) -> tuple[list[ExceedanceEstimate], TimeGrid]:
    """Read an exceedance CSV written by write_exceedance_csv."""
    if not os.path.exists(path):
        raise ValidationError(f"no such file: {path}")
    rows: dict[str, dict[Date, tuple[float, Optional[float], str, float]]] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file")
        if [h.strip() for h in header] != EXCEEDANCE_HEADER:
            raise ValidationError(
                f"{path}: bad header, expected {','.join(EXCEEDANCE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise ValidationError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            sid, ds, ps, ses, method, ths = (f.strip() for f in row)
            try:
                day = Date.fromisoformat(ds)
                prob = float(ps)
                se = None if ses == "" else float(ses)
                threshold = float(ths)
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed row ({exc})") from None
            if sid not in rows:
                rows[sid] = {}
                order.append(sid)
            if day in rows[sid]:
                raise ValidationError(f"{path}:{lineno}: duplicate (station, date)")
            rows[sid][day] = (prob, se, method, threshold)
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    dates = sorted(rows[order[0]])
    grid = TimeGrid(len(dates), tuple(dates))
    estimates = []
    for sid in order:
        if sorted(rows[sid]) != dates:
            raise ValidationError(f"{path}: inconsistent dates across stations")
        entries = [rows[sid][d] for d in dates]
        probs = np.array([e[0] for e in entries])
        ses = None
        if all(e[1] is not None for e in entries):
            ses = np.array([e[1] for e in entries])
        methods = {e[2] for e in entries}
        thresholds = {e[3] for e in entries}
        if len(methods) != 1 or len(thresholds) != 1:
            raise ValidationError(f"{path}: station {sid} mixes methods or thresholds")
        estimates.append(ExceedanceEstimate(sid, thresholds.pop(), probs, methods.pop(), ses))
    return estimates, grid
