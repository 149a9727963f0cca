import os
import json
import logging
from datetime import datetime, timezone
from typing import Any, Dict, Optional

import numpy as np

from core.models import SIGN_CONVENTION_NOTE

log = logging.getLogger("sacebart.utils")

CODE_VERSION = "1.0.0"
CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "config")

_JSON_CACHE: Dict[str, Any] = {}


def load_config_json(name: str, default: Dict[str, Any]) -> Dict[str, Any]:
    """Read config/<name> once; fall back to `default` when missing or unreadable."""
    if name in _JSON_CACHE:
        return _JSON_CACHE[name]
    path = os.path.join(CONFIG_DIR, name)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ValueError(f"{name} doit etre un objet JSON")
        _JSON_CACHE[name] = data
    except (FileNotFoundError, json.JSONDecodeError, ValueError) as e:
        log.warning("Impossible de charger %s: %s. Utilisation des defauts.", name, e)
        _JSON_CACHE[name] = default
    return _JSON_CACHE[name]


def derive_chain_seed(seed_base: int, chain_index: int) -> int:
    """Chain c of a run seeded with s uses seed s + c."""
    return int(seed_base) + int(chain_index)


def metadata_header(config_echo: Dict[str, Any], seeds, suppress_timestamps: bool,
                    extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Common header of every output file."""
    header = {
        "code_version": CODE_VERSION,
        "config": config_echo,
        "seeds": [int(s) for s in seeds],
        "sign_convention": SIGN_CONVENTION_NOTE,
    }
    if not suppress_timestamps:
        header["created_at"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    if extra:
        header.update(extra)
    return header


def credible_interval(samples: np.ndarray, level: float = 0.95, axis: int = 0):
    """Central interval (lower, upper) of `samples` along `axis`."""
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(samples, [alpha, 1.0 - alpha], axis=axis)
    return lo, hi


def summarize_samples(samples: np.ndarray, level: float = 0.95) -> Dict[str, float]:
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        return {"mean": float("nan"), "lower": float("nan"), "upper": float("nan"), "n": 0}
    lo, hi = credible_interval(samples, level)
    return {"mean": float(samples.mean()), "lower": float(lo), "upper": float(hi),
            "n": int(samples.size)}
