import numpy as np
import pytest

from core.errors import DataError
from core.models import LinearModelConfig
from mean_models.linear_mean import (
    LinearMean,
    coefficient_posterior,
    design_matrix,
    update_linear_coefficients,
)


@pytest.fixture
def regression():
    rng = np.random.default_rng(31)
    X = rng.normal(size=(200, 2))
    y = 1.0 + 2.0 * X[:, 0] - 0.5 * X[:, 1] + 0.1 * rng.normal(size=200)
    return X, y


class TestDesign:
    def test_intercept_first(self):
        X = np.arange(6.0).reshape(3, 2)
        D = design_matrix(X)
        assert D[:, 0].tolist() == [1.0, 1.0, 1.0]
        assert D.shape == (3, 3)

    def test_column_subset(self):
        X = np.arange(6.0).reshape(3, 2)
        D = design_matrix(X, [1])
        assert D[:, 1].tolist() == [1.0, 3.0, 5.0]


class TestCoefficientPosterior:
    def test_posterior_mean_close_to_least_squares(self, regression):
        X, y = regression
        mean, cov, _ = coefficient_posterior(design_matrix(X), y, 0.01, LinearModelConfig())
        np.testing.assert_allclose(mean, [1.0, 2.0, -0.5], atol=0.05)
        assert np.all(np.linalg.eigvalsh(cov) > 0)

    def test_tight_prior_shrinks_to_zero(self, regression):
        X, y = regression
        mean, _, _ = coefficient_posterior(design_matrix(X), y, 1.0,
                                           LinearModelConfig(prior_variance=1e-8))
        np.testing.assert_allclose(mean, 0.0, atol=1e-4)

    def test_non_finite_design_rejected(self):
        D = np.array([[1.0, np.nan], [1.0, 2.0]])
        with pytest.raises(DataError):
            coefficient_posterior(D, np.zeros(2), 1.0, LinearModelConfig())

    def test_draws_have_posterior_covariance(self, regression):
        X, y = regression
        D = design_matrix(X)
        cfg = LinearModelConfig()
        mean, cov, _ = coefficient_posterior(D, y, 0.5, cfg)
        rng = np.random.default_rng(32)
        draws = np.array([update_linear_coefficients(D, y, 0.5, cfg, rng) for _ in range(20_000)])
        np.testing.assert_allclose(draws.mean(axis=0), mean, atol=4 * np.sqrt(np.diag(cov) / 20_000))
        np.testing.assert_allclose(np.diag(np.cov(draws.T)), np.diag(cov), rtol=0.05)


class TestLinearMean:
    def test_update_on_active_rows(self, regression):
        X, y = regression
        m = LinearMean("111", X, LinearModelConfig())
        m.update(y, 0.01, np.random.default_rng(1), active=np.arange(100))
        assert m.fitted().shape == (200,)
        np.testing.assert_allclose(m.beta, [1.0, 2.0, -0.5], atol=0.1)

    def test_covariate_subset(self, regression):
        X, _ = regression
        m = LinearMean("z", X, LinearModelConfig(covariate_subsets={"z": (1,)}))
        assert m.beta.shape == (2,)

    def test_seed_linear_uses_coefficients(self, regression):
        X, _ = regression
        m = LinearMean("w", X, LinearModelConfig())
        m.seed_linear(np.zeros(200), np.array([0.5, 0.0, 0.0]))
        np.testing.assert_allclose(m.fitted(), 0.5)

    def test_seed_linear_without_coefficients_uses_mean(self, regression):
        X, _ = regression
        m = LinearMean("w", X, LinearModelConfig())
        m.seed_linear(np.full(200, -0.3), None)
        np.testing.assert_allclose(m.fitted(), -0.3)

    def test_dict_round_trip(self, regression):
        X, y = regression
        m = LinearMean("110", X, LinearModelConfig())
        m.update(y, 0.1, np.random.default_rng(2))
        clone = LinearMean("110", X, LinearModelConfig())
        clone.load_dict(m.to_dict())
        np.testing.assert_array_equal(clone.fitted(), m.fitted())

    def test_load_wrong_shape(self, regression):
        X, _ = regression
        m = LinearMean("110", X, LinearModelConfig())
        with pytest.raises(DataError):
            m.load_dict({"name": "110", "beta": [0.0]})
