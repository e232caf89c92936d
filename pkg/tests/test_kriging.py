import math

import numpy as np
import pytest

from exceedmap.covariance import MaternParams, matern_cov
from exceedmap.data import GridSpec, Location
from exceedmap.errors import ValidationError
from exceedmap.kriging import (FitConfig, KrigingModel, _nelder_mead, fit_ml,
                               krige_field, krige_predict, load_model, save_model)

from oracles import kriging_weights_dense


def _model(sites, sigma=1.0, rho=2.0, nu=1.5, mean_model="constant", nugget=0.0):
    return KrigingModel(MaternParams(sigma, rho, nu), mean_model, 0.0,
                        np.asarray(sites, dtype=float), nugget)


def _sim_values(sites, params, rng):
    pts = np.asarray(sites, dtype=float)
    h = np.hypot(pts[:, 0, None] - pts[None, :, 0], pts[:, 1, None] - pts[None, :, 1])
    C = matern_cov(h, params)
    L = np.linalg.cholesky(C + 1e-10 * np.eye(len(pts)))
    return L @ rng.standard_normal(len(pts))


class TestNelderMead:
    def test_quadratic(self):
        f = lambda x: float((x[0] - 1.0) ** 2 + 2.0 * (x[1] + 0.5) ** 2 + 3.0)
        x, fx = _nelder_mead(f, np.array([4.0, 4.0]), ftol=1e-12, max_iter=500)
        assert np.allclose(x, [1.0, -0.5], atol=1e-4)
        assert fx == pytest.approx(3.0, abs=1e-8)

    def test_rosenbrock_3d(self):
        def f(x):
            return float(sum(100.0 * (x[i + 1] - x[i] ** 2) ** 2 + (1 - x[i]) ** 2
                             for i in range(2)))
        x, fx = _nelder_mead(f, np.zeros(3), ftol=1e-14, max_iter=3000)
        assert fx < 1e-8


class TestKrigePredict:
    def test_exact_interpolation_at_sites(self):
        rng = np.random.default_rng(0)
        sites = rng.uniform(0, 10, size=(6, 2))
        model = _model(sites)
        y = rng.standard_normal(6)
        pred, se = krige_predict(model, y, sites)
        assert np.max(np.abs(pred - y)) < 1e-8
        assert np.max(se) < 1e-6

    def test_symmetric_pair_averages(self):
        sites = np.array([[-1.0, 0.0], [1.0, 0.0]])
        model = _model(sites)
        y = np.array([0.2, 0.8])
        pred, _ = krige_predict(model, y, np.array([[0.0, 0.0]]))
        assert pred[0] == pytest.approx(0.5, rel=1e-10)

    def test_triangle_weights_match_dense_solve(self):
        # independent route: assemble the bordered system by hand and solve
        # it with a dense LU solver, then compare the implied prediction
        sites = np.array([[0.0, 0.0], [4.0, 0.0], [1.0, 3.0]])
        target = np.array([[1.5, 1.0]])
        p = MaternParams(1.4, 2.5, 0.8)
        model = _model(sites, sigma=p.sigma, rho=p.rho, nu=p.nu)
        h = np.hypot(sites[:, 0, None] - sites[None, :, 0],
                     sites[:, 1, None] - sites[None, :, 1])
        C = matern_cov(h, p)
        c0 = matern_cov(np.hypot(sites[:, 0] - 1.5, sites[:, 1] - 1.0), p)
        F = np.ones((3, 1))
        lam, mult = kriging_weights_dense(C, F, c0, np.array([1.0]))
        y = np.array([0.3, 0.9, 0.5])
        pred, se = krige_predict(model, y, target)
        assert pred[0] == pytest.approx(float(lam @ y), rel=1e-10)
        var = p.sigma - float(lam @ c0) - float(mult[0])
        assert se[0] == pytest.approx(math.sqrt(max(var, 0.0)), rel=1e-8)

    def test_constant_mean_weights_sum_to_one(self):
        # implied by prediction of a constant field being that constant
        rng = np.random.default_rng(4)
        sites = rng.uniform(0, 10, size=(7, 2))
        model = _model(sites, sigma=0.8, rho=1.5, nu=0.6)
        targets = rng.uniform(0, 10, size=(11, 2))
        pred, _ = krige_predict(model, np.full(7, 0.37), targets)
        assert np.max(np.abs(pred - 0.37)) < 1e-10

    def test_translation_consistency(self):
        rng = np.random.default_rng(5)
        sites = rng.uniform(0, 8, size=(6, 2))
        model = _model(sites)
        y = rng.standard_normal(6)
        targets = rng.uniform(0, 8, size=(5, 2))
        p1, s1 = krige_predict(model, y, targets)
        p2, s2 = krige_predict(model, y + 3.7, targets)
        assert np.allclose(p2 - p1, 3.7, atol=1e-9)
        assert np.allclose(s1, s2, atol=1e-12)

    def test_blup_beats_equal_weights(self):
        # expected squared error evaluated analytically from the covariance
        sites = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [5.0, 5.0], [1.0, 2.0]])
        target = np.array([[1.2, 1.4]])
        p = MaternParams(1.0, 2.0, 1.0)
        model = _model(sites, sigma=p.sigma, rho=p.rho, nu=p.nu)
        h = np.hypot(sites[:, 0, None] - sites[None, :, 0],
                     sites[:, 1, None] - sites[None, :, 1])
        C = matern_cov(h, p)
        c0 = matern_cov(np.hypot(sites[:, 0] - 1.2, sites[:, 1] - 1.4), p)

        def esq(w):
            return p.sigma - 2.0 * float(w @ c0) + float(w @ C @ w)

        F = np.ones((5, 1))
        lam, _ = kriging_weights_dense(C, F, c0, np.array([1.0]))
        _, se = krige_predict(model, np.zeros(5), target)
        eq = np.full(5, 0.2)
        assert esq(lam) < esq(eq)
        assert se[0] ** 2 == pytest.approx(esq(lam), rel=1e-8)

    def test_misaligned_values_rejected(self):
        model = _model(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        with pytest.raises(ValidationError):
            krige_predict(model, np.zeros(4), np.array([[0.5, 0.5]]))

    def test_singular_after_jitter_names_site_pair(self, monkeypatch):
        import exceedmap.kriging as K
        from exceedmap.errors import NumericalError

        def always_fail(a):
            raise np.linalg.LinAlgError("not positive definite")

        monkeypatch.setattr(K.np.linalg, "cholesky", always_fail)
        sites = np.array([[0.0, 0.0], [5.0, 0.0], [0.1, 0.0]])
        model = _model(sites)
        with pytest.raises(NumericalError, match="#0 and #2"):
            krige_predict(model, np.zeros(3), np.array([[1.0, 1.0]]))


class TestFitMl:
    def test_duplicate_sites_rejected(self):
        sites = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
        with pytest.raises(ValidationError, match="duplicate"):
            fit_ml(sites, np.array([1.0, 2.0, 3.0]))

    def test_constant_values_rejected(self):
        sites = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ValidationError, match="equal"):
            fit_ml(sites, np.full(3, 2.0))

    def test_too_few_sites(self):
        with pytest.raises(ValidationError):
            fit_ml(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([1.0, 2.0]))

    def test_loglik_beats_truth(self):
        rng = np.random.default_rng(10)
        sites = rng.uniform(0, 10, size=(40, 2))
        truth = MaternParams(1.0, 2.0, 0.5)
        y = _sim_values(sites, truth, rng)
        model = fit_ml(sites, y)
        # hand-computed profile log-likelihood at the generating parameters
        h = np.hypot(sites[:, 0, None] - sites[None, :, 0],
                     sites[:, 1, None] - sites[None, :, 1])
        C = matern_cov(h, truth)
        Ci = np.linalg.inv(C)
        one = np.ones(len(y))
        beta = (one @ Ci @ y) / (one @ Ci @ one)
        r = y - beta
        ll_true = -0.5 * (r @ Ci @ r + np.linalg.slogdet(C)[1]
                          + len(y) * math.log(2.0 * math.pi))
        assert model.loglik >= ll_true - 1e-6

    def test_recovery_within_factor_two(self):
        # self-consistency Monte Carlo; exact recovery is not expected at
        # this sample size, medians must land within a factor of 2
        truth = MaternParams(1.0, 2.0, 0.5)
        sigmas, rhos = [], []
        for rep in range(20):
            rng = np.random.default_rng(100 + rep)
            sites = rng.uniform(0, 10, size=(100, 2))
            y = _sim_values(sites, truth, rng)
            model = fit_ml(sites, y, config=FitConfig(max_iter=250))
            sigmas.append(model.params.sigma)
            rhos.append(model.params.rho)
        med_sigma, med_rho = float(np.median(sigmas)), float(np.median(rhos))
        assert 0.5 <= med_sigma / truth.sigma <= 2.0
        assert 0.5 <= med_rho / truth.rho <= 2.0

    def test_nu_respects_bounds(self):
        rng = np.random.default_rng(42)
        sites = rng.uniform(0, 5, size=(12, 2))
        y = rng.standard_normal(12)
        model = fit_ml(sites, y)
        assert 0.05 <= model.params.nu <= 5.0


class TestKrigeField:
    def test_constant_field_reproduced_both_transforms(self):
        sites = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0], [3.0, 3.0]])
        grid = GridSpec(4, 4, Location(0.0, 0.0), 1.0)
        model = _model(sites)
        for transform in ("none", "logit"):
            fld = krige_field(model, np.full(4, 0.42), grid, transform=transform)
            assert np.allclose(fld.pred, 0.42, atol=1e-8)

    def test_raw_kept_clamped_on_demand(self):
        grid = GridSpec(2, 2)
        fld_sites = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        model = _model(fld_sites, sigma=0.5, rho=0.7, nu=0.5)
        fld = krige_field(model, np.array([-0.03, 0.2, 0.4, 0.9]), grid)
        # the site value -0.03 is reproduced raw at its cell, mapped to 0
        assert fld.pred[0] == pytest.approx(-0.03, abs=1e-8)
        assert fld.pred_clamped[0] == 0.0

    def test_logit_stays_inside_unit_interval(self):
        rng = np.random.default_rng(3)
        sites = rng.uniform(0, 6, size=(8, 2))
        model = _model(sites, sigma=2.0, rho=1.0, nu=0.5)
        y = rng.uniform(0.01, 0.99, size=8)
        fld = krige_field(model, y, GridSpec(7, 7), transform="logit")
        assert np.all(fld.pred > 0.0) and np.all(fld.pred < 1.0)

    def test_logit_and_none_agree_on_smooth_field(self):
        # one fixed synthetic scenario away from the 0/1 boundary
        rng = np.random.default_rng(8)
        sites = rng.uniform(0, 10, size=(20, 2))
        vals = 0.45 + 0.18 * np.sin(sites[:, 0] / 3.0) * np.cos(sites[:, 1] / 3.0)
        model = fit_ml(sites, vals)
        grid = GridSpec(6, 6, Location(1.0, 1.0), 1.4)
        a = krige_field(model, vals, grid, transform="none")
        b = krige_field(model, vals, grid, transform="logit")
        assert np.max(np.abs(a.pred - b.pred)) < 0.05

    def test_bad_transform(self):
        model = _model(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]]))
        with pytest.raises(ValidationError):
            krige_field(model, np.zeros(3), GridSpec(2, 2), transform="probit")


class TestModelSerialization:
    def test_roundtrip(self, tmp_path):
        sites = np.array([[0.0, 0.0], [1.5, 2.5], [4.0, 1.0]])
        model = KrigingModel(MaternParams(1.23456789012345, 2.5, 0.77),
                             "linear", -12.75, sites, 1e-4)
        path = str(tmp_path / "model.txt")
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.params == model.params
        assert loaded.mean_model == "linear"
        assert loaded.loglik == model.loglik
        assert loaded.nugget == model.nugget
        assert np.array_equal(loaded.sites, model.sites)

    def test_malformed_file(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("sigma=1.0\nrho=oops\n")
        with pytest.raises(ValidationError):
            load_model(str(p))
