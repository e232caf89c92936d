import math
from datetime import date

import numpy as np
import pytest

import exceedmap.evaluate as ev
from exceedmap.covariance import SeparableCovParams
from exceedmap.data import GridSpec, Location, StationSeries
from exceedmap.errors import ExceedmapError, ValidationError
from exceedmap.evaluate import (Table1Config, loo_crossval, normality_check, rate_check,
                                report_to_csv, report_to_text, rmse_time, run_table1,
                                season_predicate, seasonal_average)
from exceedmap.kriging import KrigedField
from exceedmap.simulate import SimScenario, field_to_stations, simulate

BENCH_COV = SeparableCovParams(0.7, 0.2, 1.3, 0.5)

SMALL = dict(reps=2, thresholds=(0.0, 1.0), m_values=(8, 36), grid=GridSpec(6, 6),
             n_time=24)


class TestRmseTime:
    def test_identical_is_zero(self):
        assert rmse_time([0.1, 0.2, 0.3], [0.1, 0.2, 0.3]) == 0.0

    def test_constant_offset(self):
        a = np.array([0.1, 0.5, 0.9])
        assert rmse_time(a + 0.07, a) == pytest.approx(0.07, rel=1e-12)

    def test_arithmetic_example(self):
        got = rmse_time([0.2, 0.4], [0.0, 0.0])
        assert got == pytest.approx(math.sqrt(0.1), rel=1e-12)
        assert got == pytest.approx(0.31623, abs=1e-5)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            rmse_time([0.1, 0.2], [0.1])


class TestSeasons:
    def test_summer_boundaries(self):
        summer = season_predicate("summer")
        assert summer(date(2004, 4, 1)) and summer(date(2004, 9, 30))
        assert not summer(date(2004, 3, 31)) and not summer(date(2004, 10, 1))

    def test_winter_is_complement(self):
        summer, winter = season_predicate("summer"), season_predicate("winter")
        for d in (date(2004, 1, 15), date(2004, 6, 15), date(2004, 12, 31)):
            assert summer(d) != winter(d)

    def test_explicit_range(self):
        pred = season_predicate("2004-02-10:2004-02-20")
        assert pred(date(2004, 2, 10)) and pred(date(2004, 2, 20))
        assert not pred(date(2004, 2, 21))

    def test_unknown_rejected(self):
        with pytest.raises(ValidationError):
            season_predicate("monsoon")


def _field(grid, value, label, se=0.1):
    n = grid.n_cells
    return KrigedField(grid, np.full(n, value), np.full(n, se), time_label=label)


class TestSeasonalAverage:
    def test_single_day_identity(self):
        g = GridSpec(3, 3)
        f = _field(g, 0.4, "2004-07-01")
        out = seasonal_average([f], season_predicate("summer"))
        assert np.allclose(out.pred, 0.4)

    def test_two_day_mean(self):
        g = GridSpec(2, 2)
        fields = [_field(g, 0.2, "2004-07-01"), _field(g, 0.4, "2004-07-02")]
        out = seasonal_average(fields, season_predicate("summer"))
        assert np.allclose(out.pred, 0.3)

    def test_se_combines_as_rms(self):
        g = GridSpec(2, 2)
        fields = [_field(g, 0.2, "2004-07-01", se=0.3),
                  _field(g, 0.2, "2004-07-02", se=0.4)]
        out = seasonal_average(fields, season_predicate("summer"))
        assert np.allclose(out.se, math.sqrt((0.09 + 0.16) / 2.0))

    def test_empty_season_rejected(self):
        g = GridSpec(2, 2)
        with pytest.raises(ValidationError):
            seasonal_average([_field(g, 0.5, "2004-01-05")], season_predicate("summer"))


class TestRunTable1:
    def test_smoke_r1(self):
        cfg = Table1Config(seed=11, reps=1, thresholds=(0.0,), m_values=(8,),
                           grid=GridSpec(6, 6), n_time=24)
        rep = run_table1(cfg)
        assert rep.reps == 1
        assert len(rep.cells) == 3  # three methods, one threshold, one m
        for c in rep.cells:
            assert c.mean_rmse >= 0.0
        text = report_to_text(rep)
        assert "IND" in text and "KER" in text

    def test_deterministic_and_parallel_invariant(self, tmp_path):
        runs = []
        for parallel in (1, 2):
            cfg = Table1Config(seed=5, parallel=parallel, **SMALL)
            runs.append(run_table1(cfg))
        assert runs[0].cells == runs[1].cells
        p1, p2 = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
        report_to_csv(runs[0], p1)
        report_to_csv(runs[1], p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_rerun_identical(self):
        cfg = Table1Config(seed=6, reps=1, thresholds=(0.5,), m_values=(8,),
                           grid=GridSpec(5, 5), n_time=20)
        assert run_table1(cfg).cells == run_table1(cfg).cells

    def test_attrition_logged(self, monkeypatch):
        real = ev._table1_replicate

        def flaky(cfg, rep, target_idx, site_idx):
            if rep == 1:
                raise ExceedmapError("synthetic failure")
            return real(cfg, rep, target_idx, site_idx)

        monkeypatch.setattr(ev, "_table1_replicate", flaky)
        cfg = Table1Config(seed=3, reps=2, thresholds=(0.0,), m_values=(8,),
                           grid=GridSpec(5, 5), n_time=20)
        rep = run_table1(cfg)
        assert len(rep.attrition) == 1
        assert "replicate 1" in rep.attrition[0]

    def test_seed_required(self):
        with pytest.raises(ValidationError):
            Table1Config(seed="nope")  # type: ignore[arg-type]

    def test_csv_schema(self, tmp_path):
        cfg = Table1Config(seed=11, reps=1, thresholds=(0.0,), m_values=(8,),
                           grid=GridSpec(6, 6), n_time=24)
        rep = run_table1(cfg)
        path = str(tmp_path / "r.csv")
        report_to_csv(rep, path)
        lines = open(path).read().splitlines()
        assert lines[0] == "method,threshold,m,mean_rmse,sd_rmse,R,seed"
        assert len(lines) == 1 + len(rep.cells)
        assert lines[1].startswith("IND,0,8,")


class _FakeSc:
    def __init__(self, pts, n_time):
        self._pts = np.asarray(pts, dtype=float)
        self.n_points = len(pts)
        self.n_time = n_time

    def points(self):
        return self._pts


class TestLooCrossval:
    def test_constant_field_near_zero_rmse(self):
        n = 30
        rng = np.random.default_rng(2)
        base = rng.normal(50.0, 10.0, size=n)  # same series at every station
        obs = np.ones(n, dtype=bool)
        stations = [StationSeries(f"s{k}", Location(float(k % 3), float(k // 3)),
                                  base, obs) for k in range(6)]
        for method in ("IND", "EDF", "KER"):
            rmse = loo_crossval(stations, 50.0, method)
            assert len(rmse) == 6  # exactly one entry per station
            assert max(rmse.values()) < 1e-12

    def test_needs_four_stations(self):
        obs = np.ones(10, dtype=bool)
        stations = [StationSeries(f"s{k}", Location(k, 0.0),
                                  np.arange(10.0) + k, obs) for k in range(3)]
        with pytest.raises(ValidationError):
            loo_crossval(stations, 5.0, "KER")

    def test_ker_beats_ind_on_simulated_field(self):
        stations, _ = _make_sim_stations(n_sites=12, n_time=80, seed=31)
        med = {}
        for method in ("IND", "KER"):
            rmse = loo_crossval(stations, 0.0, method)
            med[method] = float(np.median(list(rmse.values())))
        assert med["KER"] < med["IND"]


def _make_sim_stations(n_sites, n_time, seed):
    grid = GridSpec(20, 20)
    sc = SimScenario(grid, n_time, BENCH_COV, seed)
    field = simulate(sc)
    rng = np.random.default_rng(seed)
    idx = rng.choice(grid.n_cells, size=n_sites, replace=False)
    fake = _FakeSc(sc.points()[idx], n_time)
    return field_to_stations(field[idx], fake)


class TestRateCheck:
    def test_slope_near_theory(self):
        res = rate_check([200, 800, 3200], reps=200, seed=1)
        assert -0.6 <= res.slope <= -0.2
        assert not res.low_reps

    def test_rmse_strictly_decreasing(self):
        res = rate_check([200, 800, 3200], reps=200, seed=2)
        assert res.rmse[0] > res.rmse[1] > res.rmse[2]

    def test_single_rep_flagged(self):
        res = rate_check([50, 100, 200], reps=1, seed=3)
        assert res.low_reps

    def test_needs_three_distinct_n(self):
        with pytest.raises(ValidationError):
            rate_check([100, 100, 100])


class TestNormalityCheck:
    def test_standardized_moments_small(self):
        skew, kurt = normality_check(n=200, reps=500, seed=4)
        assert abs(skew) < 0.3
        assert abs(kurt) < 0.6
