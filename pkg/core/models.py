from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from core.errors import ConfigError

# Stratum codes stored in strata arrays.
STRATUM_00 = 0  # never-survivor
STRATUM_10 = 1  # protected
STRATUM_11 = 2  # always-survivor
STRATUM_LABELS = {STRATUM_00: "00", STRATUM_10: "10", STRATUM_11: "11"}

CONTINUOUS = "continuous"
BINARY = "binary"

SIGN_CONVENTION_NOTE = (
    "pi00 = Phi(m_Z), pi10 = (1 - Phi(m_Z)) Phi(m_W), pi11 = (1 - Phi(m_Z)) (1 - Phi(m_W)); "
    "Z >= 0 iff S = 00, W >= 0 iff S = 10. Membership probabilities, latent utility draws "
    "and stratum imputation all follow this convention."
)


class ObservedGroup(str, Enum):
    O11 = "O(1,1)"
    O10 = "O(1,0)"
    O01 = "O(0,1)"
    O00 = "O(0,0)"


@dataclass(frozen=True)
class CovariateSpec:
    names: Tuple[str, ...]
    kinds: Tuple[str, ...]
    center: Tuple[float, ...] = ()  # one entry per covariate, 0 for binary
    scale: Tuple[float, ...] = ()  # one entry per covariate, 1 for binary
    standardized: bool = False

    def __post_init__(self):
        if len(self.names) != len(self.kinds):
            raise ConfigError("CovariateSpec: names et kinds de longueurs differentes")
        for k in self.kinds:
            if k not in (CONTINUOUS, BINARY):
                raise ConfigError(f"CovariateSpec: type de covariable inconnu '{k}'")
        if len(set(self.names)) != len(self.names):
            raise ConfigError("CovariateSpec: noms de covariables dupliques")

    @property
    def n_covariates(self) -> int:
        return len(self.names)

    @property
    def continuous_indices(self) -> List[int]:
        return [i for i, k in enumerate(self.kinds) if k == CONTINUOUS]

    def to_original_scale(self, index: int, value: float) -> float:
        """Map a (possibly standardized) value of covariate `index` back to natural units."""
        if not self.standardized or self.kinds[index] == BINARY:
            return float(value)
        return float(value) * self.scale[index] + self.center[index]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "names": list(self.names),
            "kinds": list(self.kinds),
            "center": list(self.center),
            "scale": list(self.scale),
            "standardized": self.standardized,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CovariateSpec":
        return cls(
            names=tuple(data["names"]),
            kinds=tuple(data["kinds"]),
            center=tuple(data.get("center", ())),
            scale=tuple(data.get("scale", ())),
            standardized=bool(data.get("standardized", False)),
        )


@dataclass(frozen=True, eq=False)
class TrialDataset:
    ids: np.ndarray
    treat: np.ndarray  # int8, 0/1
    survive: np.ndarray  # int8, 0/1
    outcome: np.ndarray  # float, NaN where survive == 0
    covariates: np.ndarray  # n_units x K
    covariate_spec: CovariateSpec

    @property
    def n_units(self) -> int:
        return int(self.treat.shape[0])

    @property
    def n_covariates(self) -> int:
        return int(self.covariates.shape[1])


@dataclass(frozen=True)
class BartConfig:
    tau: float = 0.95
    gamma: float = 2.0
    w: float = 4.0
    n_trees: int = 50
    move_probs: Tuple[float, float, float] = (0.25, 0.25, 0.50)  # grow, prune, change
    n_cutpoints: Optional[int] = None  # None = every observed value at the node

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"bart.tau hors de [0,1]: {self.tau}")
        if self.gamma < 0:
            raise ConfigError(f"bart.gamma doit etre >= 0: {self.gamma}")
        if self.w <= 0:
            raise ConfigError(f"bart.w doit etre > 0: {self.w}")
        if self.n_trees < 1:
            raise ConfigError(f"bart.n_trees doit etre >= 1: {self.n_trees}")
        if len(self.move_probs) != 3 or min(self.move_probs) < 0:
            raise ConfigError(f"bart.move_probs invalide: {self.move_probs}")
        if abs(sum(self.move_probs) - 1.0) > 1e-9:
            raise ConfigError(f"bart.move_probs doit sommer a 1: {self.move_probs}")
        if self.n_cutpoints is not None and self.n_cutpoints < 1:
            raise ConfigError(f"bart.n_cutpoints doit etre >= 1: {self.n_cutpoints}")

    @property
    def leaf_prior_variance(self) -> float:
        """Variance of the terminal-node prior, (4 w^2 J)^-1."""
        return 1.0 / (4.0 * self.w ** 2 * self.n_trees)


@dataclass(frozen=True)
class LinearModelConfig:
    prior_variance: float = 100.0
    # forest name -> covariate indices; missing names use every covariate
    covariate_subsets: Dict[str, Tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if self.prior_variance <= 0:
            raise ConfigError(f"linear.prior_variance doit etre > 0: {self.prior_variance}")


@dataclass(frozen=True)
class ChainConfig:
    n_iter: int = 10000
    burn_in: int = 5000
    thin: int = 1
    seed: int = 2024
    a0: float = 0.001
    b0: float = 0.001
    bart: BartConfig = field(default_factory=BartConfig)
    # per-forest overrides keyed by "z", "w", "111", "110", "101"
    bart_overrides: Dict[str, BartConfig] = field(default_factory=dict)
    linear: LinearModelConfig = field(default_factory=LinearModelConfig)
    init_sweeps: int = 50
    init_retries: int = 20
    keep_forests: bool = False

    def __post_init__(self):
        if self.n_iter < 0 or self.burn_in < 0:
            raise ConfigError("chain.n_iter et chain.burn_in doivent etre >= 0")
        if self.n_iter > 0 and self.burn_in >= self.n_iter:
            raise ConfigError(f"chain.burn_in ({self.burn_in}) doit etre < n_iter ({self.n_iter})")
        if self.thin < 1:
            raise ConfigError(f"chain.thin doit etre >= 1: {self.thin}")
        if self.a0 <= 0 or self.b0 <= 0:
            raise ConfigError("chain.a0 et chain.b0 doivent etre > 0")
        if self.init_retries < 1:
            raise ConfigError("chain.init_retries doit etre >= 1")

    @property
    def n_retained(self) -> int:
        return max(0, self.n_iter - self.burn_in) // self.thin

    def bart_for(self, forest: str) -> BartConfig:
        return self.bart_overrides.get(forest, self.bart)


@dataclass(eq=False)
class PosteriorDraws:
    """Retained iterations of one chain (or several, concatenated).

    Arrays are aligned to dataset row order; outcome-scale quantities are on the
    original outcome scale.
    """
    strata: np.ndarray  # n_draws x n_units, int8 stratum codes
    m111: np.ndarray  # n_draws x n_units
    m110: np.ndarray  # n_draws x n_units
    sigma2: np.ndarray  # n_draws x 3, columns (111, 110, 101)
    chain_ids: np.ndarray  # n_draws, chain index of each draw
    model: str = "bart"
    metadata: Dict[str, Any] = field(default_factory=dict)
    forests: Optional[List[Dict[str, Any]]] = None  # optional per-draw forest checkpoints

    @property
    def n_draws(self) -> int:
        return int(self.strata.shape[0])

    @property
    def n_units(self) -> int:
        return int(self.strata.shape[1])

    @staticmethod
    def concatenate(draws: List["PosteriorDraws"]) -> "PosteriorDraws":
        """Merge chains; chain_ids keep track of the origin of each draw."""
        if not draws:
            raise ValueError("aucune chaine a fusionner")
        models = {d.model for d in draws}
        if len(models) != 1:
            raise ValueError(f"modeles heterogenes: {sorted(models)}")
        meta = dict(draws[0].metadata)
        meta["chains"] = [d.metadata for d in draws]
        return PosteriorDraws(
            strata=np.concatenate([d.strata for d in draws]),
            m111=np.concatenate([d.m111 for d in draws]),
            m110=np.concatenate([d.m110 for d in draws]),
            sigma2=np.concatenate([d.sigma2 for d in draws]),
            chain_ids=np.concatenate([d.chain_ids for d in draws]),
            model=draws[0].model,
            metadata=meta,
        )
