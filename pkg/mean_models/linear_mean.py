"""Linear mean functions with conjugate Gaussian coefficient updates (the parametric baseline)."""

import logging
from typing import Any, Dict, Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from core.errors import DataError
from core.models import LinearModelConfig
from mean_models.base import MeanFunction

log = logging.getLogger("sacebart.mean.linear")


def design_matrix(X: np.ndarray, columns: Optional[Sequence[int]] = None) -> np.ndarray:
    """Intercept column followed by the selected covariates."""
    cols = X if columns is None else X[:, list(columns)]
    return np.column_stack([np.ones(X.shape[0]), cols])


def coefficient_posterior(design: np.ndarray, response: np.ndarray, sigma2: float,
                          config: LinearModelConfig):
    """Mean and covariance of N(V (X'y / sigma2 + S0^-1 mu0), V), V = (X'X / sigma2 + S0^-1)^-1.

    The prior mean mu0 is zero.
    """
    if not (np.isfinite(design).all() and np.isfinite(response).all()):
        raise DataError("matrice de design ou reponse non finie")
    p = design.shape[1]
    precision = design.T @ design / sigma2 + np.eye(p) / config.prior_variance
    chol = cholesky(precision, lower=True)
    mean = cho_solve((chol, True), design.T @ response / sigma2)
    cov = cho_solve((chol, True), np.eye(p))
    return mean, cov, chol


def update_linear_coefficients(design: np.ndarray, response: np.ndarray, sigma2: float,
                               config: LinearModelConfig,
                               rng: np.random.Generator) -> np.ndarray:
    """One draw of the coefficient vector from its Gaussian full conditional."""
    mean, _, chol = coefficient_posterior(design, response, sigma2, config)
    z = rng.standard_normal(design.shape[1])
    # precision = L L', so L'^-1 z has covariance precision^-1
    return mean + solve_triangular(chol.T, z, lower=False)


class LinearMean(MeanFunction):
    def __init__(self, name: str, X: np.ndarray, config: LinearModelConfig):
        self.name = name
        self.config = config
        self.columns = config.covariate_subsets.get(name)
        self.design = design_matrix(X, self.columns)
        self.beta = np.zeros(self.design.shape[1])

    def update(self, response: np.ndarray, sigma2: float, rng: np.random.Generator,
               active: Optional[np.ndarray] = None) -> None:
        rows = np.arange(self.design.shape[0]) if active is None else np.asarray(active)
        self.beta = update_linear_coefficients(
            self.design[rows], response[rows], sigma2, self.config, rng)

    def fitted(self) -> np.ndarray:
        return self.design @ self.beta

    def predict(self, X: np.ndarray) -> np.ndarray:
        return design_matrix(X, self.columns) @ self.beta

    def seed_linear(self, eta: np.ndarray, coefficients: Optional[np.ndarray],
                    rng: Optional[np.random.Generator] = None, n_sweeps: int = 20) -> None:
        if coefficients is not None and coefficients.shape == self.beta.shape:
            self.beta = np.asarray(coefficients, dtype=float).copy()
        else:
            self.beta = np.zeros_like(self.beta)
            self.beta[0] = float(np.mean(eta))

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "beta": self.beta.tolist()}

    def load_dict(self, data: Dict[str, Any]) -> None:
        beta = np.asarray(data["beta"], dtype=float)
        if beta.shape != self.beta.shape:
            raise DataError(f"{self.name}: {beta.size} coefficients lus, {self.beta.size} attendus")
        self.beta = beta
