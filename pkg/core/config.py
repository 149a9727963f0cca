"""Centralized configuration: environment defaults and the JSON run configuration."""

import os
import copy
import json
import logging
from typing import Any, Dict, Optional

from core.errors import ConfigError
from core.models import BartConfig, ChainConfig, LinearModelConfig

log = logging.getLogger("sacebart.config")

# =========================
# Chain defaults
# =========================
N_ITER: int = int(os.getenv("SACE_N_ITER", "10000"))
BURN_IN: int = int(os.getenv("SACE_BURN_IN", "5000"))
THIN: int = int(os.getenv("SACE_THIN", "1"))
SEED: int = int(os.getenv("SACE_SEED", "2024"))
INIT_SWEEPS: int = int(os.getenv("SACE_INIT_SWEEPS", "50"))
INIT_RETRIES: int = int(os.getenv("SACE_INIT_RETRIES", "20"))

# =========================
# BART defaults
# =========================
N_TREES: int = int(os.getenv("SACE_N_TREES", "50"))
W: float = float(os.getenv("SACE_W", "4.0"))

# =========================
# Logging / checkpoints / output
# =========================
LOG_EVERY: int = int(os.getenv("SACE_LOG_EVERY", "500"))
CHECKPOINT_EVERY: int = int(os.getenv("SACE_CHECKPOINT_EVERY", "1000"))
OUT_DIR: str = os.getenv("SACE_OUT_DIR", "out")
SUPPRESS_TIMESTAMPS: bool = os.getenv("SACE_SUPPRESS_TIMESTAMPS", "0") == "1"

BLOCKS = ("data", "model", "chains", "chain", "bart", "linear", "cv", "summary",
          "subgroups", "simulate", "out")
FOREST_NAMES = ("z", "w", "111", "110", "101")


def default_run_config() -> Dict[str, Any]:
    return {
        "data": {"path": None, "covariates": {}, "standardize": True},
        "model": "bart",
        "chains": 1,
        "threads": 1,
        "chain": {
            "n_iter": N_ITER, "burn_in": BURN_IN, "thin": THIN, "seed": SEED,
            "a0": 0.001, "b0": 0.001, "init_sweeps": INIT_SWEEPS,
            "init_retries": INIT_RETRIES, "keep_forests": False,
            "checkpoint_every": CHECKPOINT_EVERY,
        },
        "bart": {
            "tau": 0.95, "gamma": 2.0, "w": W, "n_trees": N_TREES,
            "move_probs": [0.25, 0.25, 0.5], "n_cutpoints": None, "overrides": {},
        },
        "linear": {"prior_variance": 100.0, "covariate_subsets": {}},
        "cv": {"w_grid": [1, 2, 3, 4], "J_grid": [50, 75, 100, 200], "folds": 5,
               "n_sweeps": 200, "burn_in": 100},
        "summary": {"p": "auto", "p_grid": [0.50, 0.99, 0.01],
                    "thresholds": [0.99, 0.95, 0.9, 0.8], "d_mode": "per_draw",
                    "grid_points": 512, "band_draws": 200},
        "subgroups": {"min_leaf": 20, "max_depth": 4, "min_improvement": 0.01,
                      "stop_gain": 0.01},
        "simulate": {"dgp": "dgp_a", "n_units": 1000, "seed": 7, "oracle_mc": 0},
        "out": OUT_DIR,
    }


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _check(cond: bool, field: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{field}: {message}")


def validate_run_config(cfg: Dict[str, Any]) -> Dict[str, Any]:
    """Check every field before any compute; raises ConfigError naming the field."""
    unknown = set(cfg) - set(BLOCKS) - {"threads"}
    _check(not unknown, "config", f"blocs inconnus {sorted(unknown)}")
    _check(cfg["model"] in ("bart", "parametric"), "model", f"'{cfg['model']}' invalide")
    _check(isinstance(cfg["chains"], int) and cfg["chains"] >= 1, "chains", "entier >= 1 attendu")
    _check(isinstance(cfg["threads"], int) and cfg["threads"] >= 1, "threads",
           "entier >= 1 attendu")
    covariates = cfg["data"].get("covariates") or {}
    _check(isinstance(covariates, dict), "data.covariates", "objet {nom: type} attendu")
    for name, kind in covariates.items():
        _check(kind in ("continuous", "binary"), f"data.covariates.{name}",
               f"type '{kind}' invalide")

    cv = cfg["cv"]
    _check(len(cv["w_grid"]) > 0 and all(w > 0 for w in cv["w_grid"]), "cv.w_grid",
           "valeurs > 0 attendues")
    _check(len(cv["J_grid"]) > 0 and all(int(j) >= 1 for j in cv["J_grid"]), "cv.J_grid",
           "entiers >= 1 attendus")
    _check(int(cv["folds"]) >= 2, "cv.folds", "doit etre >= 2")

    summary = cfg["summary"]
    p = summary["p"]
    _check(p == "auto" or (isinstance(p, (int, float)) and 0 < p <= 1), "summary.p",
           "'auto' ou reel dans ]0,1] attendu")
    _check(all(0 <= t <= 1 for t in summary["thresholds"]), "summary.thresholds",
           "valeurs dans [0,1] attendues")
    _check(summary["d_mode"] in ("per_draw", "posterior_mean"), "summary.d_mode",
           f"'{summary['d_mode']}' invalide")
    _check(len(summary["p_grid"]) == 3 and summary["p_grid"][2] > 0, "summary.p_grid",
           "[debut, fin, pas] attendu")
    _check(isinstance(summary["band_draws"], int) and summary["band_draws"] >= 1,
           "summary.band_draws", "entier >= 1 attendu")

    sg = cfg["subgroups"]
    _check(int(sg["min_leaf"]) >= 1, "subgroups.min_leaf", "doit etre >= 1")
    _check(int(sg["max_depth"]) >= 1, "subgroups.max_depth", "doit etre >= 1")
    _check(float(sg["min_improvement"]) >= 0, "subgroups.min_improvement", "doit etre >= 0")

    overrides = cfg["bart"].get("overrides", {})
    _check(set(overrides) <= set(FOREST_NAMES), "bart.overrides",
           f"cles attendues parmi {FOREST_NAMES}")
    # dataclass validation (burn_in < n_iter, tau, w, ...)
    build_chain_config(cfg)
    return cfg


def load_run_config(path: Optional[str] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Read the JSON run configuration, fill defaults per block, apply CLI overrides, validate."""
    data: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"fichier de configuration introuvable: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"configuration JSON invalide ({path}): {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: objet JSON attendu")
    cfg = _merge(default_run_config(), data)
    if overrides:
        cfg = _merge(cfg, overrides)
    return validate_run_config(cfg)


def _bart_config(block: Dict[str, Any]) -> BartConfig:
    n_cut = block.get("n_cutpoints")
    return BartConfig(
        tau=float(block["tau"]), gamma=float(block["gamma"]), w=float(block["w"]),
        n_trees=int(block["n_trees"]),
        move_probs=tuple(float(x) for x in block["move_probs"]),
        n_cutpoints=None if n_cut is None else int(n_cut),
    )


def build_chain_config(cfg: Dict[str, Any]) -> ChainConfig:
    try:
        bart_block = cfg["bart"]
        base = _bart_config(bart_block)
        overrides = {
            name: _bart_config(_merge(bart_block, dict(ov, overrides={})))
            for name, ov in bart_block.get("overrides", {}).items()
        }
        linear = LinearModelConfig(
            prior_variance=float(cfg["linear"]["prior_variance"]),
            covariate_subsets={k: tuple(int(i) for i in v)
                               for k, v in cfg["linear"]["covariate_subsets"].items()},
        )
        chain = cfg["chain"]
        return ChainConfig(
            n_iter=int(chain["n_iter"]), burn_in=int(chain["burn_in"]), thin=int(chain["thin"]),
            seed=int(chain["seed"]), a0=float(chain["a0"]), b0=float(chain["b0"]),
            bart=base, bart_overrides=overrides, linear=linear,
            init_sweeps=int(chain["init_sweeps"]), init_retries=int(chain["init_retries"]),
            keep_forests=bool(chain["keep_forests"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"configuration invalide: {e}") from None
