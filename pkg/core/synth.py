"""Synthetic monotone principal-strata data and brute-force truth for validation.

A map from covariates to reals is written as a dict of terms, all optional:
    {"intercept": a, "linear": [b_1..b_K], "sin": {"k": c}, "square": {"k": c},
     "product": [[j, k, c]], "sign": {"k": c}}
meaning a + sum_k b_k x_k + sum c sin(x_k) + sum c x_k^2 + sum c x_j x_k + sum c sign(x_k),
with 0-based covariate indices.
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

from core.errors import ConfigError
from core.models import (
    BINARY,
    CONTINUOUS,
    STRATUM_00,
    STRATUM_10,
    STRATUM_11,
    CovariateSpec,
    TrialDataset,
)
from core.utils import load_config_json

log = logging.getLogger("sacebart.synth")

_TERMS = ("intercept", "linear", "sin", "square", "product", "sign")

# Default presets (also shipped as config/dgp_presets.json)
DEFAULT_PRESETS: Dict[str, Any] = {
    "dgp_a": {
        "n_continuous": 4, "n_binary": 2,
        "membership_z": {"intercept": -0.8, "linear": [0.3, 0, 0, 0, 0, 0]},
        "membership_w": {"intercept": -0.5, "linear": [0, 0.3, 0, 0, 0, 0]},
        "mu110": {"intercept": 10.0, "linear": [1.0, 0.5, 0, 0, 0.5, 0]},
        "effect": {"intercept": 2.0, "linear": [1.0, 0, 0, 0, 0, 0]},
        "mu101": {"intercept": 11.0, "linear": [0.5, 0.5, 0, 0, 0, 0]},
    },
    "dgp_b": {
        "n_continuous": 4, "n_binary": 2,
        "membership_z": {"intercept": -0.8, "linear": [0.3, 0, 0, 0, 0, 0], "square": {"2": 0.2}},
        "membership_w": {"intercept": -0.5, "linear": [0, 0.3, 0, 0, 0, 0], "sin": {"3": 0.5}},
        "mu110": {"intercept": 10.0, "sin": {"0": 1.0}, "square": {"1": 0.5},
                  "linear": [0, 0, 0, 0, 0.5, 0]},
        "effect": {"intercept": 2.0, "sin": {"0": 2.0}, "product": [[1, 4, 1.5]]},
        "mu101": {"intercept": 11.0, "sin": {"1": 1.0}},
    },
    "null": {
        "n_continuous": 4, "n_binary": 2,
        "membership_z": {"intercept": -0.8},
        "membership_w": {"intercept": -0.5},
        "mu110": {"intercept": 10.0, "linear": [1.0, 0.5, 0, 0, 0.5, 0]},
        "effect": {"intercept": 0.0},
        "mu101": {"intercept": 11.0},
    },
    "constant": {
        "n_continuous": 4, "n_binary": 2,
        "membership_z": {"intercept": -0.8, "linear": [0.3, 0, 0, 0, 0, 0]},
        "membership_w": {"intercept": -0.5, "linear": [0, 0.3, 0, 0, 0, 0]},
        "mu110": {"intercept": 10.0, "linear": [1.0, 0.5, 0, 0, 0.5, 0]},
        "effect": {"intercept": 3.0},
        "mu101": {"intercept": 11.0},
    },
    "moderated": {
        "n_continuous": 8, "n_binary": 3,
        "membership_z": {"intercept": -1.0, "linear": [0, 0.3, 0, 0, 0, 0, 0, 0, 0, 0, 0]},
        "membership_w": {"intercept": -0.8},
        "mu110": {"intercept": 10.0, "linear": [0, 0.5, 0.5, 0, 0, 0, 0, 0, 0, 0, 0]},
        "effect": {"sign": {"0": 5.0}},
        "mu101": {"intercept": 11.0},
    },
}


def load_presets() -> Dict[str, Any]:
    return load_config_json("dgp_presets.json", DEFAULT_PRESETS)


def _check_map(name: str, m: Dict[str, Any], K: int) -> None:
    unknown = set(m) - set(_TERMS)
    if unknown:
        raise ConfigError(f"{name}: termes inconnus {sorted(unknown)}")
    if "linear" in m and len(m["linear"]) != K:
        raise ConfigError(f"{name}.linear: {len(m['linear'])} coefficients pour {K} covariables")
    indices = [int(k) for key in ("sin", "square", "sign") for k in m.get(key, {})]
    indices += [int(i) for j, k, _ in m.get("product", []) for i in (j, k)]
    if any(not 0 <= i < K for i in indices):
        raise ConfigError(f"{name}: indice de covariable hors de [0,{K})")


def evaluate_map(m: Dict[str, Any], X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.full(X.shape[0], float(m.get("intercept", 0.0)))
    if "linear" in m:
        out = out + X @ np.asarray(m["linear"], dtype=float)
    for k, c in m.get("sin", {}).items():
        out = out + float(c) * np.sin(X[:, int(k)])
    for k, c in m.get("square", {}).items():
        out = out + float(c) * X[:, int(k)] ** 2
    for j, k, c in m.get("product", []):
        out = out + float(c) * X[:, int(j)] * X[:, int(k)]
    for k, c in m.get("sign", {}).items():
        out = out + float(c) * np.where(X[:, int(k)] >= 0, 1.0, -1.0)
    return out


@dataclass(frozen=True)
class DgpSpec:
    name: str
    n_units: int
    n_continuous: int
    n_binary: int
    membership_z: Dict[str, Any]
    membership_w: Dict[str, Any]
    mu110: Dict[str, Any]
    effect: Dict[str, Any]  # mu111 = mu110 + effect
    mu101: Dict[str, Any]
    noise_sd: Tuple[float, float, float] = (1.0, 1.0, 1.0)  # 111, 110, 101
    p_treat: float = 0.5
    seed: int = 7

    def __post_init__(self):
        if self.n_units < 1:
            raise ConfigError(f"n_units doit etre >= 1: {self.n_units}")
        if not 0.0 < self.p_treat < 1.0:
            raise ConfigError(f"p_treat hors de ]0,1[: {self.p_treat}")
        if min(self.noise_sd) < 0:
            raise ConfigError("noise_sd doit etre >= 0")
        for name in ("membership_z", "membership_w", "mu110", "effect", "mu101"):
            _check_map(name, getattr(self, name), self.n_covariates)

    @property
    def n_covariates(self) -> int:
        return self.n_continuous + self.n_binary

    def mu111(self, X: np.ndarray) -> np.ndarray:
        return evaluate_map(self.mu110, X) + evaluate_map(self.effect, X)

    def covariate_spec(self) -> CovariateSpec:
        K = self.n_covariates
        return CovariateSpec(
            names=tuple(f"x{k + 1}" for k in range(K)),
            kinds=tuple([CONTINUOUS] * self.n_continuous + [BINARY] * self.n_binary),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name, "n_units": self.n_units, "n_continuous": self.n_continuous,
            "n_binary": self.n_binary, "membership_z": self.membership_z,
            "membership_w": self.membership_w, "mu110": self.mu110, "effect": self.effect,
            "mu101": self.mu101, "noise_sd": list(self.noise_sd), "p_treat": self.p_treat,
            "seed": self.seed,
        }


def get_preset(name: str, n_units: int = 1000, seed: int = 7, **overrides) -> DgpSpec:
    presets = load_presets()
    if name not in presets:
        raise ConfigError(f"DGP inconnu '{name}' (disponibles: {sorted(presets)})")
    data = dict(presets[name])
    data.update(overrides)
    data["noise_sd"] = tuple(data.get("noise_sd", (1.0, 1.0, 1.0)))
    return DgpSpec(name=name, n_units=n_units, seed=seed, **data)


def _draw_covariates(spec: DgpSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    cont = rng.standard_normal((n, spec.n_continuous))
    binary = (rng.random((n, spec.n_binary)) < 0.5).astype(float)
    return np.column_stack([cont, binary]) if spec.n_covariates else np.empty((n, 0))


def _draw_strata(spec: DgpSpec, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    z = evaluate_map(spec.membership_z, X) + rng.standard_normal(n)
    w = evaluate_map(spec.membership_w, X) + rng.standard_normal(n)
    return np.where(z >= 0, STRATUM_00, np.where(w >= 0, STRATUM_10, STRATUM_11)).astype(np.int8)


def generate(spec: DgpSpec) -> Tuple[TrialDataset, Dict[str, Any]]:
    """Observable trial data plus the hidden truth (strata, potential outcomes, effects)."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_units
    X = _draw_covariates(spec, n, rng)
    strata = _draw_strata(spec, X, rng)
    treat = (rng.random(n) < spec.p_treat).astype(np.int8)
    eps = rng.standard_normal((n, 3))

    sd111, sd110, sd101 = spec.noise_sd
    y1 = np.full(n, np.nan)
    y0 = np.full(n, np.nan)
    s11 = strata == STRATUM_11
    s10 = strata == STRATUM_10
    y1[s11] = spec.mu111(X[s11]) + sd111 * eps[s11, 0]
    y0[s11] = evaluate_map(spec.mu110, X[s11]) + sd110 * eps[s11, 1]
    y1[s10] = evaluate_map(spec.mu101, X[s10]) + sd101 * eps[s10, 2]

    survive = np.where(treat == 1, s11 | s10, s11).astype(np.int8)
    outcome = np.where(survive == 1, np.where(treat == 1, y1, y0), np.nan)
    dataset = TrialDataset(
        ids=np.array([f"u{i:06d}" for i in range(n)]),
        treat=treat, survive=survive, outcome=outcome, covariates=X,
        covariate_spec=spec.covariate_spec(),
    )
    csace = evaluate_map(spec.effect, X)
    truth = {
        "dgp": spec.to_dict(),
        "strata": strata,
        "y1": y1,
        "y0": y0,
        "csace": csace,
        "sample_sace": float(csace[s11].mean()) if s11.any() else float("nan"),
        "strata_counts": {"00": int((strata == STRATUM_00).sum()), "10": int(s10.sum()),
                          "11": int(s11.sum())},
    }
    log.info("DGP %s: %d unites, strates %s.", spec.name, n, truth["strata_counts"])
    return dataset, truth


def oracle_sace(spec: DgpSpec, n_mc: int = 1_000_000, seed: Optional[int] = None,
                chunk: int = 200_000) -> Tuple[float, float]:
    """Monte Carlo mean of mu111 - mu110 over simulated always-survivors, with its standard error."""
    rng = np.random.default_rng(spec.seed + 1 if seed is None else seed)
    total, total_sq, count = 0.0, 0.0, 0
    remaining = n_mc
    while remaining > 0:
        n = min(chunk, remaining)
        X = _draw_covariates(spec, n, rng)
        strata = _draw_strata(spec, X, rng)
        eff = evaluate_map(spec.effect, X[strata == STRATUM_11])
        total += float(eff.sum())
        total_sq += float((eff ** 2).sum())
        count += eff.size
        remaining -= n
    if count == 0:
        raise ConfigError(f"DGP {spec.name}: aucun always-survivor simule")
    mean = total / count
    var = max(total_sq / count - mean ** 2, 0.0)
    se = float(np.sqrt(var / count))
    return mean, se


def oracle_csace(spec: DgpSpec, x) -> np.ndarray:
    """mu111(x) - mu110(x); a float for a single x, one value per row for a matrix."""
    x = np.asarray(x, dtype=float)
    out = evaluate_map(spec.effect, x)
    return float(out[0]) if x.ndim == 1 else out


def write_truth(truth: Dict[str, Any], path: str, extra: Optional[Dict[str, Any]] = None) -> None:
    """Truth sidecar, kept apart from the observable CSV."""
    data = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in truth.items()}
    for key in ("y1", "y0"):
        data[key] = [None if not np.isfinite(v) else v for v in truth[key]]
    if extra:
        data.update(extra)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
    os.replace(tmp, path)
