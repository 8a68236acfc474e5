import math

import numpy as np
import pytest

from probe.core import (DiscreteEstimator, expected_loss, fit_discrete, fit_discrete_conditional,
                        log_loss, softmax)
from probe.data import Dataset
from probe.errors import DataError, DomainError, UnseenConditionError
from probe.verify.oracles import empirical_conditional


class TestLogLoss:
    def test_unity(self):
        assert log_loss(1.0) == 0.0

    def test_inverse_exp(self):
        assert log_loss(math.exp(-2)) == pytest.approx(2.0, abs=1e-15)

    @pytest.mark.parametrize("phi", [0.0, -1.0, float("nan")])
    def test_domain(self, phi):
        with pytest.raises(DomainError, match="positive"):
            log_loss(phi)


class TestExpectedLoss:
    def test_constant_model(self):
        assert expected_loss(lambda x: 1.0, [1, 2, 3]) == 0.0

    def test_mean_of_exponents(self):
        assert expected_loss(lambda x: x, [math.exp(-1), math.exp(-3)]) == pytest.approx(2.0)

    def test_frequency_model(self):
        data = ["a", "a", "a", "b"]
        freq = {"a": 0.75, "b": 0.25}
        want = -0.75 * math.log(0.75) - 0.25 * math.log(0.25)
        assert expected_loss(freq.get, data) == pytest.approx(want, abs=1e-15)
        assert round(want, 4) == 0.5623

    def test_domain_error_names_sample(self):
        with pytest.raises(DomainError, match="sample 1"):
            expected_loss(lambda x: x, [1.0, 0.0])

    def test_empty(self):
        with pytest.raises(DataError):
            expected_loss(lambda x: 1.0, [])


class TestFitDiscrete:
    def test_symmetric(self):
        np.testing.assert_allclose(fit_discrete(["a", "b"]).probabilities, [0.5, 0.5])

    def test_three_to_one(self):
        est = fit_discrete(["a"] * 3 + ["b"])
        np.testing.assert_allclose(est.probabilities, [0.75, 0.25], atol=1e-6)

    def test_single_category(self):
        np.testing.assert_allclose(fit_discrete([5, 5, 5, 5, 5]).probabilities, [1.0])

    def test_empty(self):
        with pytest.raises(DataError):
            fit_discrete([])

    def test_outside_support(self):
        with pytest.raises(DataError, match="outside"):
            fit_discrete(["a", "c"], support=["a", "b"])

    def test_declared_support_gets_zero(self):
        est = fit_discrete(["a", "a"], support=["a", "b"])
        assert est.prob("a") > 0.999 and est.prob("b") < 1e-3

    def test_dataset_input(self):
        ds = Dataset.from_columns(c=np.array(["x", "y", "y", "y"], dtype=object))
        assert fit_discrete(ds).prob("y") == pytest.approx(0.75, abs=1e-6)

    def test_json_round_trip(self):
        est = fit_discrete(["a", "b", "b"])
        back = DiscreteEstimator.from_dict(est.to_dict())
        np.testing.assert_array_equal(back.logits, est.logits)
        assert back.support == est.support


class TestConditional:
    def test_counting(self):
        pairs = [(0, "A"), (0, "A"), (0, "B"), (1, "B")]
        est = fit_discrete_conditional(pairs)
        oracle = empirical_conditional(pairs)
        assert est.prob("B", 0) == pytest.approx(oracle[0]["B"], abs=1e-6)
        assert est.prob("B", 1) == pytest.approx(1.0)
        for row in est.rows.values():
            assert row.probabilities.sum() == pytest.approx(1.0, abs=1e-12)

    def test_uniform_single_condition(self):
        est = fit_discrete_conditional([(0, "A"), (0, "B")])
        np.testing.assert_allclose(est.row(0).probabilities, [0.5, 0.5])

    def test_unseen_condition(self):
        est = fit_discrete_conditional([(0, "A")])
        with pytest.raises(UnseenConditionError, match="unseen"):
            est.prob("A", 2)


def test_softmax_normalized(rng):
    for _ in range(100):
        assert softmax(rng.normal(0, 10, rng.integers(1, 20))).sum() == pytest.approx(1, abs=1e-12)
