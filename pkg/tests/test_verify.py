import json
import math

import numpy as np
import pytest
from scipy.stats import norm

from probe.errors import DataError, DomainError
from probe.verify import (SUITES, VerificationResult, closed_form_mle_gaussian,
                          compare_densities, empirical_conditional, run_suites)
from probe.verify.mixed import ProductCDFMixture, fit_mixture
from probe.verify.oracles import (bivariate_normal_pdf, lognormal_pdf, normal_pdf,
                                  normal_shift_l1, result)

GRID = np.linspace(-8, 8, 1601)


class TestCompareDensities:
    def test_identical(self):
        cmp = compare_densities(normal_pdf, normal_pdf, GRID)
        assert cmp.l1 == 0 and cmp.kl == 0 and cmp.max_abs == 0

    def test_shifted_normal(self):
        cmp = compare_densities(normal_pdf, lambda x: normal_pdf(x, 0.1), GRID)
        assert abs(normal_shift_l1(0.1) - 2 * (2 * norm.cdf(0.05) - 1)) <= 1e-15
        assert abs(cmp.l1 - normal_shift_l1(0.1)) <= 1e-6
        assert abs(cmp.l1 - 0.0797) <= 1e-4
        assert abs(cmp.kl - 0.005) <= 1e-6

    def test_disjoint_boxes(self):
        g = np.linspace(0, 4, 4001)
        a = ((g > 0.5) & (g < 1.5)).astype(float)
        b = ((g > 2.5) & (g < 3.5)).astype(float)
        assert abs(compare_densities(a, b, g).l1 - 2) <= 2e-3

    def test_two_dimensional(self):
        g = np.linspace(-6, 6, 121)
        cmp = compare_densities(lambda p: bivariate_normal_pdf(p, 0.5),
                                lambda p: bivariate_normal_pdf(p, 0.5), (g, g))
        assert cmp.l1 == 0 and cmp.reference.shape == (121, 121)

    def test_negative_density(self):
        with pytest.raises(DomainError):
            compare_densities(normal_pdf, lambda x: normal_pdf(x) - 0.1, GRID)

    def test_non_finite_density(self):
        with pytest.raises(DomainError):
            compare_densities(normal_pdf, np.full(GRID.size, np.nan), GRID)

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            compare_densities(np.ones(3), np.ones(4), np.arange(3.0))

    def test_metrics_nonnegative(self, rng):
        a, b = rng.uniform(size=(2, 50))
        m = compare_densities(a, b, np.linspace(0, 1, 50)).metrics()
        assert all(v >= 0 for v in m.values())


class TestClosedForm:
    def test_two_points(self):
        assert closed_form_mle_gaussian([1, 3]) == (2.0, 1.0)

    def test_single(self):
        assert closed_form_mle_gaussian([4.5]) == (4.5, 0.0)

    def test_large_sample(self):
        x = np.random.default_rng(0).normal(5, 2, 100_000)
        mean, var = closed_form_mle_gaussian(x)
        assert abs(mean - 5) <= 0.03 and abs(var - 4) <= 0.1

    def test_empty(self):
        with pytest.raises(DataError):
            closed_form_mle_gaussian([])


class TestEmpiricalConditional:
    def test_even_split(self):
        assert empirical_conditional([(0, "A"), (0, "B")]) == {0: {"A": 0.5, "B": 0.5}}

    def test_counting(self):
        t = empirical_conditional([(0, "A"), (0, "A"), (0, "B"), (1, "B")])
        assert t[0] == pytest.approx({"A": 2 / 3, "B": 1 / 3}, abs=1e-15)
        assert t[1] == {"B": 1.0}

    def test_single_pair(self):
        assert empirical_conditional([("x", 7)]) == {"x": {7: 1.0}}

    def test_rows_sum_to_one(self, rng):
        pairs = zip(rng.integers(0, 5, 500), rng.integers(0, 3, 500))
        for row in empirical_conditional(pairs).values():
            assert abs(math.fsum(row.values()) - 1) <= 1e-12


class TestReferenceDensities:
    def test_normalized(self):
        g = np.linspace(1e-9, 60, 600_001)
        assert abs(np.trapezoid(lognormal_pdf(g, 0, 0.5), g) - 1) <= 1e-6
        assert abs(np.trapezoid(normal_pdf(GRID, 1, 2), GRID) - norm.cdf(3.5) + norm.cdf(-4.5)) <= 1e-6

    def test_bivariate_matches_scipy(self, rng):
        from scipy.stats import multivariate_normal
        pts = rng.normal(size=(20, 2))
        ref = multivariate_normal([0, 0], [[1, 0.8], [0.8, 1]]).pdf(pts)
        np.testing.assert_allclose(bivariate_normal_pdf(pts, 0.8), ref, rtol=1e-12)


class TestMixedDerivativeModel:
    def test_dual_matches_closed_form(self, rng):
        model = ProductCDFMixture.init(3, rng)
        for p in rng.uniform(-2, 2, size=(10, 2)):
            assert abs(model.density_dual(p) - model.density(p)[0]) <= 1e-10

    def test_mass(self, rng):
        assert abs(ProductCDFMixture.init(4, rng).mass(half_width=25, n_panels=500) - 1) <= 1e-6

    def test_fit_reduces_loss_and_stays_normalized(self):
        x = np.random.default_rng(0).multivariate_normal([1, -1], [[1, 0.6], [0.6, 2]], 2000)
        model, losses = fit_mixture(x, k=4, epochs=150)
        assert losses[-1] < losses[0]
        assert abs(model.mass(half_width=15) - 1) <= 1e-4


class TestReports:
    def test_result_json(self):
        r = result("demo", "abs", 0.5, 1.0)
        assert json.loads(r.to_json()) == {"check": "demo", "metric": "abs", "value": 0.5,
                                           "tolerance": 1.0, "pass": True}
        assert not result("demo", "abs", float("nan"), 1.0).passed
        assert result("demo", "min", 2.0, 1.0, upper=False).passed

    @pytest.mark.parametrize("suite", sorted(SUITES))
    def test_suites_pass(self, suite):
        out = run_suites(suite, seed=0)
        assert out and all(isinstance(r, VerificationResult) for r in out)
        failed = [r.to_dict() for r in out if not r.passed]
        assert not failed

    def test_unknown_suite(self):
        with pytest.raises(ValueError):
            run_suites("nope")
