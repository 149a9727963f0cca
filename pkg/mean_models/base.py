from abc import ABC, abstractmethod
from typing import Any, Dict, Optional

import numpy as np

from core.bart import draw_variance


class MeanFunction(ABC):
    """A regression mean m(X) over the rows of a fixed covariate matrix, updated by Gibbs steps."""
    name: str

    @abstractmethod
    def update(self, response: np.ndarray, sigma2: float, rng: np.random.Generator,
               active: Optional[np.ndarray] = None) -> None:
        ...

    @abstractmethod
    def fitted(self) -> np.ndarray:
        """Current m(X_i) for every row."""
        ...

    @abstractmethod
    def predict(self, X: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def seed_linear(self, eta: np.ndarray, coefficients: Optional[np.ndarray],
                    rng: Optional[np.random.Generator] = None, n_sweeps: int = 20) -> None:
        """Start from a linear predictor (probit GLM fit); `coefficients` may be None.

        Backends that cannot hold the linear surface exactly fit `eta` with `n_sweeps` updates.
        """
        ...

    @abstractmethod
    def to_dict(self) -> Dict[str, Any]:
        ...

    @abstractmethod
    def load_dict(self, data: Dict[str, Any]) -> None:
        ...

    def split_counts(self) -> Optional[np.ndarray]:
        """Per-covariate split counts for tree backends, None otherwise."""
        return None

    def initialize(self, response: np.ndarray, active: np.ndarray, rng: np.random.Generator,
                   n_sweeps: int, a0: float, b0: float) -> float:
        """Standalone fit on `active` rows with the variance updated alongside; returns sigma2."""
        r = response[active]
        sigma2 = float(np.var(r)) if r.size > 1 else 1.0
        sigma2 = sigma2 if sigma2 > 0 else 1e-4
        for _ in range(n_sweeps):
            self.update(response, sigma2, rng, active=active)
            sigma2 = draw_variance(r - self.fitted()[active], a0, b0, rng)
        return sigma2
