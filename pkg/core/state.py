import os
import json
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from core.errors import DataError
from core.models import PosteriorDraws

log = logging.getLogger("sacebart.state")

DRAWS_FORMAT_VERSION = 1


def _atomic_write_json(path: str, data: Dict[str, Any]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
    os.replace(tmp, path)


def _atomic_write_npy(path: str, array: np.ndarray) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        np.save(f, np.ascontiguousarray(array), allow_pickle=False)
    os.replace(tmp, path)


def write_csv(frame: pd.DataFrame, path: str) -> None:
    """Atomic CSV write: no index, full float precision, NaN as an empty field, LF line ends."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    frame.to_csv(tmp, index=False, float_format="%.17g", na_rep="", lineterminator="\n")
    os.replace(tmp, path)


def read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise DataError(f"fichier introuvable: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"JSON corrompu dans {path}: {e}") from None
    if not isinstance(data, dict):
        raise DataError(f"{path} n'est pas un objet JSON")
    return data


@dataclass
class Checkpoint:
    meta: Dict[str, Any]
    arrays: Dict[str, np.ndarray]


class CheckpointStore:
    """
    One directory per chain:
      checkpoint.json  iteration, RNG bit-generator state, move counters, serialized mean functions
      checkpoint.npz   strata, latents and draws retained so far
    The JSON file is written last, so a readable JSON always has matching arrays.
    """

    def __init__(self, directory: str):
        self.directory = directory
        self.json_path = os.path.join(directory, "checkpoint.json")
        self.npz_path = os.path.join(directory, "checkpoint.npz")

    def exists(self) -> bool:
        return os.path.exists(self.json_path) and os.path.exists(self.npz_path)

    def save(self, meta: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> None:
        os.makedirs(self.directory, exist_ok=True)
        tmp = f"{self.npz_path}.tmp"
        with open(tmp, "wb") as f:
            np.savez(f, **arrays)
        os.replace(tmp, self.npz_path)
        _atomic_write_json(self.json_path, meta)
        log.debug("Checkpoint ecrit: %s (iteration %s).", self.directory, meta.get("iteration"))

    def load(self) -> Optional[Checkpoint]:
        if not self.exists():
            log.info("Aucun checkpoint dans %s.", self.directory)
            return None
        meta = read_json(self.json_path)
        if "iteration" not in meta or "state" not in meta:
            raise DataError(f"checkpoint incomplet: {self.json_path}")
        try:
            with np.load(self.npz_path, allow_pickle=False) as npz:
                arrays = {k: npz[k] for k in npz.files}
        except (OSError, ValueError) as e:
            raise DataError(f"checkpoint illisible {self.npz_path}: {e}") from None
        return Checkpoint(meta=meta, arrays=arrays)

    def clear(self) -> None:
        for path in (self.json_path, self.npz_path):
            if os.path.exists(path):
                os.remove(path)


# =========================
# Draws directory
# =========================

def _scalars_frame(draws: PosteriorDraws, sace: np.ndarray, pi11: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame({
        "draw": np.arange(draws.n_draws),
        "sigma2_111": draws.sigma2[:, 0],
        "sigma2_110": draws.sigma2[:, 1],
        "sigma2_101": draws.sigma2[:, 2],
        "sace": sace,
        "pi11": pi11,
    })


def save_draws(directory: str, chains: List[PosteriorDraws], metadata: Dict[str, Any]) -> None:
    """Write metadata.json and per-chain arrays; identical inputs give identical files."""
    from core.estimands import sace_draws

    os.makedirs(directory, exist_ok=True)
    for c, draws in enumerate(chains):
        chain_dir = os.path.join(directory, f"chain_{c}")
        os.makedirs(chain_dir, exist_ok=True)
        _atomic_write_npy(os.path.join(chain_dir, "strata.npy"), draws.strata)
        _atomic_write_npy(os.path.join(chain_dir, "m111.npy"), draws.m111)
        _atomic_write_npy(os.path.join(chain_dir, "m110.npy"), draws.m110)
        _atomic_write_npy(os.path.join(chain_dir, "sigma2.npy"), draws.sigma2)
        sace, _ = sace_draws(draws, keep_nan=True)
        pi11 = (draws.strata == 2).mean(axis=1) if draws.n_draws else np.empty(0)
        write_csv(_scalars_frame(draws, sace, pi11), os.path.join(chain_dir, "scalars.csv"))
        if draws.forests is not None:
            _atomic_write_json(os.path.join(chain_dir, "forests.json"),
                               {"format_version": 1, "draws": draws.forests})
    meta = dict(metadata)
    meta["format_version"] = DRAWS_FORMAT_VERSION
    meta["n_chains"] = len(chains)
    meta["chains"] = [d.metadata for d in chains]
    _atomic_write_json(os.path.join(directory, "metadata.json"), meta)
    log.info("Tirages ecrits dans %s (%d chaine(s)).", directory, len(chains))


def load_draws(directory: str) -> List[PosteriorDraws]:
    meta = read_json(os.path.join(directory, "metadata.json"))
    if meta.get("format_version") != DRAWS_FORMAT_VERSION:
        raise DataError(f"version de format inconnue: {meta.get('format_version')}")
    chains = []
    for c in range(int(meta.get("n_chains", 0))):
        chain_dir = os.path.join(directory, f"chain_{c}")
        try:
            strata = np.load(os.path.join(chain_dir, "strata.npy"), allow_pickle=False)
            m111 = np.load(os.path.join(chain_dir, "m111.npy"), allow_pickle=False)
            m110 = np.load(os.path.join(chain_dir, "m110.npy"), allow_pickle=False)
            sigma2 = np.load(os.path.join(chain_dir, "sigma2.npy"), allow_pickle=False)
        except (OSError, ValueError) as e:
            raise DataError(f"tirages illisibles dans {chain_dir}: {e}") from None
        chain_meta = meta["chains"][c] if c < len(meta.get("chains", [])) else {}
        chains.append(PosteriorDraws(
            strata=strata, m111=m111, m110=m110, sigma2=sigma2,
            chain_ids=np.full(strata.shape[0], c, dtype=np.int32),
            model=meta.get("model", "bart"), metadata=chain_meta,
        ))
    if not chains:
        raise DataError(f"aucune chaine dans {directory}")
    return chains
