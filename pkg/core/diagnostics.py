"""Convergence diagnostics across chains: bulk ESS and split R-hat via arviz."""

import logging
import warnings
from typing import Any, Dict, List, Sequence

import arviz as az
import numpy as np
import pandas as pd

from core.estimands import sace_draws
from core.models import STRATUM_11, PosteriorDraws

log = logging.getLogger("sacebart.diagnostics")

SERIES = ("sace", "sigma2_111", "sigma2_110", "sigma2_101", "pi11")


def _as_float(result) -> float:
    if hasattr(result, "data_vars"):
        result = next(iter(result.data_vars.values())).values
    return float(np.asarray(result))


def scalar_series(draws: PosteriorDraws) -> Dict[str, np.ndarray]:
    sace, _ = sace_draws(draws, keep_nan=True)
    return {
        "sace": sace,
        "sigma2_111": draws.sigma2[:, 0],
        "sigma2_110": draws.sigma2[:, 1],
        "sigma2_101": draws.sigma2[:, 2],
        "pi11": (draws.strata == STRATUM_11).mean(axis=1),
    }


def series_diagnostics(values: np.ndarray) -> Dict[str, Any]:
    """ESS (capped at the draw count) and R-hat of a (chains, draws) array."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    n_total = int(values.size)
    out: Dict[str, Any] = {"n_draws": n_total, "ess_bulk": None, "rhat": None}
    if values.shape[1] < 4 or not np.isfinite(values).all():
        return out
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ess = _as_float(az.ess(values, method="bulk"))
        rhat = _as_float(az.rhat(values, method="rank"))
    out["ess_bulk"] = float(min(ess, n_total)) if np.isfinite(ess) else None
    out["rhat"] = rhat if np.isfinite(rhat) else None
    return out


def compute_diagnostics(chains: List[PosteriorDraws]) -> Dict[str, Any]:
    per_chain = [scalar_series(d) for d in chains]
    report: Dict[str, Any] = {"n_chains": len(chains), "series": {}}
    for name in SERIES:
        rows = [s[name] for s in per_chain]
        if name == "sace":
            # draws without always-survivors are dropped; chains are cut to a common length
            rows = [r[np.isfinite(r)] for r in rows]
        n = min((r.size for r in rows), default=0)
        report["series"][name] = series_diagnostics(np.stack([r[:n] for r in rows]))
    report["acceptance"] = [d.metadata.get("acceptance", {}) for d in chains]
    rhat = report["series"]["sace"]["rhat"]
    if rhat is not None and rhat > 1.1:
        log.warning("Diagnostic: R-hat SACE = %.3f (> 1.1).", rhat)
    return report


def variable_importance(chains: List[PosteriorDraws], names: Sequence[str]) -> pd.DataFrame:
    """Split counts per (forest, covariate) summed over chains and retained draws.

    `share` is the fraction of a forest's splits that use the covariate, 0 when the
    forest never split.
    Chains without split counts (linear mean functions) contribute nothing.
    """
    totals: Dict[str, np.ndarray] = {}
    for d in chains:
        for forest, counts in d.metadata.get("split_counts", {}).items():
            counts = np.asarray(counts, dtype=np.int64)
            if counts.size != len(names):
                raise ValueError(
                    f"foret {forest}: {counts.size} comptes pour {len(names)} covariables")
            totals[forest] = totals.get(forest, 0) + counts
    rows = []
    for forest, counts in totals.items():
        total = int(counts.sum())
        for name, c in zip(names, counts):
            rows.append({"forest": forest, "covariate": name, "count": int(c),
                         "share": float(c) / total if total else 0.0})
    return pd.DataFrame(rows, columns=["forest", "covariate", "count", "share"])
