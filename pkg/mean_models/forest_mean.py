import logging
from typing import Any, Dict, Optional

import numpy as np

from core.bart import Forest
from core.models import BartConfig
from mean_models.base import MeanFunction

log = logging.getLogger("sacebart.mean.forest")

SEED_SIGMA2 = 0.01  # noise variance used when fitting the trees to a GLM linear predictor


class ForestMean(MeanFunction):
    """BART sum-of-trees mean function."""

    def __init__(self, name: str, X: np.ndarray, config: BartConfig, monitor=None):
        self.name = name
        self.config = config
        self.monitor = monitor
        self.forest = Forest.root_only(X, config, name=name)

    def update(self, response: np.ndarray, sigma2: float, rng: np.random.Generator,
               active: Optional[np.ndarray] = None) -> None:
        self.forest.backfit(response, sigma2, rng, active=active, monitor=self.monitor)

    def fitted(self) -> np.ndarray:
        return self.forest.fitted()

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.forest.predict_matrix(X)

    def seed_linear(self, eta: np.ndarray, coefficients: Optional[np.ndarray],
                    rng: Optional[np.random.Generator] = None, n_sweeps: int = 20) -> None:
        if rng is None:
            raise ValueError(f"{self.name}: generateur requis pour ajuster la foret")
        self.forest = Forest.root_only(self.forest.X, self.config, init=float(np.mean(eta)),
                                       name=self.name)
        # moves made while seeding stay out of the acceptance monitor
        for _ in range(n_sweeps):
            self.forest.backfit(eta, SEED_SIGMA2, rng)
        log.debug("%s: foret ajustee au predicteur lineaire (%d balayages).", self.name, n_sweeps)

    def to_dict(self) -> Dict[str, Any]:
        return self.forest.to_dict()

    def load_dict(self, data: Dict[str, Any]) -> None:
        self.forest = Forest.from_dict(data, self.forest.X, self.config)

    def split_counts(self) -> np.ndarray:
        return self.forest.split_counts()
