"""Principal-stratification mixture sampler (nested-probit membership, three outcome models).

Stratum membership convention used everywhere in this module:
    pi00 = Phi(m_Z), pi10 = (1 - Phi(m_Z)) Phi(m_W), pi11 = (1 - Phi(m_Z)) (1 - Phi(m_W)),
    Z >= 0 iff S = 00, W >= 0 iff S = 10.
"""

import asyncio
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import statsmodels.api as sm
from scipy.stats import norm
from statsmodels.tools.sm_exceptions import ConvergenceWarning

from core import config as settings
from core.bart import OutcomeScaler, draw_variance, fit_bart
from core.errors import DataError, InitializationError, NumericalError
from core.models import (
    SIGN_CONVENTION_NOTE,
    STRATUM_00,
    STRATUM_10,
    STRATUM_11,
    BartConfig,
    ChainConfig,
    PosteriorDraws,
    TrialDataset,
)
from core.monitoring import MoveMonitor
from core.truncnorm import sample_by_sign
from core.utils import derive_chain_seed
from mean_models.base import MeanFunction
from mean_models.forest_mean import ForestMean
from mean_models.linear_mean import LinearMean, design_matrix

log = logging.getLogger("sacebart.sampler")

MODELS = ("bart", "parametric")
MEAN_NAMES = ("z", "w", "111", "110", "101")
PROBIT_SIGMA2 = 1.0
# outcome model -> (stratum, treatment arm)
OUTCOME_CELLS = {"111": (STRATUM_11, 1), "110": (STRATUM_11, 0), "101": (STRATUM_10, 1)}
SIGMA2_ORDER = ("111", "110", "101")


# =========================
# Data prepared for sampling
# =========================

@dataclass(frozen=True, eq=False)
class ChainData:
    X: np.ndarray
    treat: np.ndarray  # bool
    survive: np.ndarray  # bool
    y: np.ndarray  # internal outcome scale, 0 where undefined
    scaler: OutcomeScaler

    @classmethod
    def from_dataset(cls, dataset: TrialDataset) -> "ChainData":
        survive = dataset.survive == 1
        scaler = OutcomeScaler.fit(dataset.outcome[survive])
        y = np.zeros(dataset.n_units)
        y[survive] = scaler.to_internal(dataset.outcome[survive])
        return cls(X=dataset.covariates, treat=dataset.treat == 1, survive=survive,
                   y=y, scaler=scaler)

    @property
    def n_units(self) -> int:
        return int(self.treat.shape[0])

    @property
    def fixed_00(self) -> np.ndarray:
        return self.treat & ~self.survive

    @property
    def fixed_11(self) -> np.ndarray:
        return ~self.treat & self.survive

    @property
    def ambiguous_11(self) -> np.ndarray:
        """Observed O(1,1): stratum 10 or 11."""
        return self.treat & self.survive

    @property
    def ambiguous_00(self) -> np.ndarray:
        """Observed O(0,0): stratum 00 or 10."""
        return ~self.treat & ~self.survive


@dataclass(eq=False)
class SamplerState:
    strata: np.ndarray  # int8 stratum codes
    z_latent: np.ndarray
    w_latent: np.ndarray  # NaN where strata == 00
    models: Dict[str, MeanFunction]  # "z", "w", "111", "110", "101"
    sigma2: Dict[str, float] = field(default_factory=dict)  # internal outcome scale

    def cell_rows(self, data: ChainData, cell: str) -> np.ndarray:
        stratum, arm = OUTCOME_CELLS[cell]
        return np.flatnonzero((self.strata == stratum) & (data.treat == bool(arm)))


# =========================
# Membership probabilities
# =========================

def strata_probabilities(mz, mw) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mz = np.asarray(mz, dtype=float)
    mw = np.asarray(mw, dtype=float)
    alive = norm.sf(mz)
    return norm.cdf(mz), alive * norm.cdf(mw), alive * norm.sf(mw)


# =========================
# Initialization
# =========================

def _build_models(data: ChainData, config: ChainConfig, model: str,
                  monitor: Optional[MoveMonitor]) -> Dict[str, MeanFunction]:
    if model not in MODELS:
        raise ValueError(f"modele inconnu: {model}")
    out: Dict[str, MeanFunction] = {}
    for name in MEAN_NAMES:
        if model == "bart":
            out[name] = ForestMean(name, data.X, config.bart_for(name), monitor=monitor)
        else:
            out[name] = LinearMean(name, data.X, config.linear)
    return out


def _random_strata(data: ChainData, rng: np.random.Generator) -> np.ndarray:
    strata = np.full(data.n_units, STRATUM_00, dtype=np.int8)
    strata[data.fixed_11] = STRATUM_11
    amb11 = np.flatnonzero(data.ambiguous_11)
    amb00 = np.flatnonzero(data.ambiguous_00)
    strata[amb11] = np.where(rng.integers(2, size=amb11.size) == 1, STRATUM_11, STRATUM_10)
    strata[amb00] = np.where(rng.integers(2, size=amb00.size) == 1, STRATUM_10, STRATUM_00)
    return strata


def _cells_filled(strata: np.ndarray, data: ChainData) -> bool:
    for stratum, arm in OUTCOME_CELLS.values():
        if not ((strata == stratum) & (data.treat == bool(arm))).any():
            return False
    return True


def probit_glm_init(indicator: np.ndarray, design: np.ndarray,
                    design_all: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Probit GLM of a stratum indicator; returns (linear predictor on design_all, coefficients).

    Falls back to a constant predictor when the fit fails or does not converge.
    """
    share = float(indicator.mean()) if indicator.size else 0.5
    fallback = np.full(design_all.shape[0], norm.ppf(np.clip(share, 0.01, 0.99)))
    if indicator.size == 0 or share in (0.0, 1.0):
        log.warning("GLM probit: indicatrice constante, initialisation constante.")
        return fallback, None
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", ConvergenceWarning)
            warnings.simplefilter("ignore", RuntimeWarning)
            family = sm.families.Binomial(link=sm.families.links.Probit())
            res = sm.GLM(indicator.astype(float), design, family=family).fit()
        params = np.asarray(res.params, dtype=float)
        if not np.isfinite(params).all() or not getattr(res, "converged", True):
            raise ValueError("coefficients non finis ou non convergence")
        return design_all @ params, params
    except Exception as e:
        log.warning("GLM probit en echec (%s), initialisation constante.", e)
        return fallback, None


def initialize(data: ChainData, config: ChainConfig, rng: np.random.Generator,
               model: str = "bart", monitor: Optional[MoveMonitor] = None) -> SamplerState:
    for attempt in range(1, config.init_retries + 1):
        strata = _random_strata(data, rng)
        if _cells_filled(strata, data):
            break
        log.info("Initialisation: cellule strate-traitement vide (essai %d/%d).",
                 attempt, config.init_retries)
    else:
        raise InitializationError(
            f"cellule strate-traitement vide apres {config.init_retries} essais")

    models = _build_models(data, config, model, monitor)
    state = SamplerState(strata=strata, z_latent=np.zeros(data.n_units),
                         w_latent=np.full(data.n_units, np.nan), models=models)

    for cell in SIGMA2_ORDER:
        rows = state.cell_rows(data, cell)
        state.sigma2[cell] = models[cell].initialize(
            data.y, rows, rng, config.init_sweeps, config.a0, config.b0)

    subset = config.linear.covariate_subsets if model == "parametric" else {}
    design_z = design_matrix(data.X, subset.get("z"))
    eta_z, beta_z = probit_glm_init(strata == STRATUM_00, design_z, design_z)
    models["z"].seed_linear(eta_z, beta_z, rng, config.init_sweeps)

    alive = strata != STRATUM_00
    design_w = design_matrix(data.X, subset.get("w"))
    eta_w, beta_w = probit_glm_init(strata[alive] == STRATUM_10, design_w[alive], design_w)
    models["w"].seed_linear(eta_w, beta_w, rng, config.init_sweeps)

    state.z_latent = sample_by_sign(models["z"].fitted(), strata == STRATUM_00, rng)
    state.w_latent[alive] = sample_by_sign(models["w"].fitted()[alive], strata[alive] == STRATUM_10,
                                           rng)
    log.debug("Initialisation: strates %s.", np.bincount(strata, minlength=3).tolist())
    return state


# =========================
# Gibbs steps
# =========================

def update_outcome_models(state: SamplerState, data: ChainData, rng: np.random.Generator) -> None:
    for cell in SIGMA2_ORDER:
        rows = state.cell_rows(data, cell)
        state.models[cell].update(data.y, state.sigma2[cell], rng, active=rows)


def update_variances(state: SamplerState, data: ChainData, config: ChainConfig,
                     rng: np.random.Generator) -> SamplerState:
    for cell in SIGMA2_ORDER:
        rows = state.cell_rows(data, cell)
        resid = data.y[rows] - state.models[cell].fitted()[rows]
        state.sigma2[cell] = draw_variance(resid, config.a0, config.b0, rng)
    return state


def impute_strata(state: SamplerState, data: ChainData, rng: np.random.Generator) -> SamplerState:
    mz = state.models["z"].fitted()
    mw = state.models["w"].fitted()
    strata = state.strata
    strata[data.fixed_00] = STRATUM_00
    strata[data.fixed_11] = STRATUM_11

    rows = np.flatnonzero(data.ambiguous_00)
    if rows.size:
        lp00 = norm.logcdf(mz[rows])
        lp10 = norm.logsf(mz[rows]) + norm.logcdf(mw[rows])
        p00 = np.exp(lp00 - np.logaddexp(lp00, lp10))
        strata[rows] = np.where(rng.random(rows.size) < p00, STRATUM_00, STRATUM_10)

    rows = np.flatnonzero(data.ambiguous_11)
    if rows.size:
        y = data.y[rows]
        m101 = state.models["101"].fitted()[rows]
        m111 = state.models["111"].fitted()[rows]
        lp10 = norm.logcdf(mw[rows]) + norm.logpdf(y, m101, np.sqrt(state.sigma2["101"]))
        lp11 = norm.logsf(mw[rows]) + norm.logpdf(y, m111, np.sqrt(state.sigma2["111"]))
        total = np.logaddexp(lp10, lp11)
        bad = ~np.isfinite(total)
        if bad.any():
            raise NumericalError(
                f"probabilites de strate nulles pour l'unite {int(rows[np.argmax(bad)])}")
        p10 = np.exp(lp10 - total)
        strata[rows] = np.where(rng.random(rows.size) < p10, STRATUM_10, STRATUM_11)
    return state


def sample_latents(state: SamplerState, data: ChainData, rng: np.random.Generator) -> SamplerState:
    mz = state.models["z"].fitted()
    mw = state.models["w"].fitted()
    state.z_latent = sample_by_sign(mz, state.strata == STRATUM_00, rng)
    alive = state.strata != STRATUM_00
    w = np.full(data.n_units, np.nan)
    w[alive] = sample_by_sign(mw[alive], state.strata[alive] == STRATUM_10, rng)
    state.w_latent = w
    return state


def gibbs_iteration(state: SamplerState, data: ChainData, config: ChainConfig,
                    rng: np.random.Generator) -> SamplerState:
    update_outcome_models(state, data, rng)                        # step 1
    update_variances(state, data, config, rng)                     # step 2
    state.models["z"].update(state.z_latent, PROBIT_SIGMA2, rng)   # step 3
    alive = np.flatnonzero(state.strata != STRATUM_00)
    state.models["w"].update(state.w_latent, PROBIT_SIGMA2, rng, active=alive)  # step 4
    impute_strata(state, data, rng)                                # step 5
    sample_latents(state, data, rng)                               # steps 6-7
    return state


def run_iterations(state: SamplerState, data: ChainData, config: ChainConfig,
                   rng: np.random.Generator, n_iterations: int) -> SamplerState:
    for _ in range(n_iterations):
        gibbs_iteration(state, data, config, rng)
    return state


# =========================
# Chains
# =========================

def state_to_checkpoint(state: SamplerState) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    meta = {
        "sigma2": dict(state.sigma2),
        "models": {name: m.to_dict() for name, m in state.models.items()},
    }
    arrays = {"strata": state.strata, "z_latent": state.z_latent, "w_latent": state.w_latent}
    return meta, arrays


def restore_state(state: SamplerState, meta: Dict[str, Any],
                  arrays: Dict[str, np.ndarray]) -> SamplerState:
    state.strata = arrays["strata"].astype(np.int8)
    state.z_latent = arrays["z_latent"].astype(float)
    state.w_latent = arrays["w_latent"].astype(float)
    state.sigma2 = {k: float(v) for k, v in meta["sigma2"].items()}
    for name, data in meta["models"].items():
        state.models[name].load_dict(data)
    return state


def chain_metadata(config: ChainConfig, model: str, chain_id: int,
                   scaler: OutcomeScaler) -> Dict[str, Any]:
    return {
        "chain_id": chain_id,
        "seed": config.seed,
        "model": model,
        "n_iter": config.n_iter,
        "burn_in": config.burn_in,
        "thin": config.thin,
        "retained": config.n_retained,
        "retained_rule": "(n_iter - burn_in) // thin",
        "outcome_scale": scaler.to_dict(),
        "sign_convention": SIGN_CONVENTION_NOTE,
    }


def run_chain(dataset: TrialDataset, config: ChainConfig, model: str = "bart",
              chain_id: int = 0, checkpoint=None, checkpoint_every: Optional[int] = None,
              resume: bool = False, stop_at: Optional[int] = None,
              monitor: Optional[MoveMonitor] = None) -> Optional[PosteriorDraws]:
    """Run one chain and return its retained draws.

    With `checkpoint` (a CheckpointStore) the state is saved every `checkpoint_every`
    iterations; `resume=True` continues from the stored checkpoint. `stop_at` interrupts the
    chain after that many iterations, saves a checkpoint and returns None.
    """
    data = ChainData.from_dataset(dataset)
    monitor = monitor or MoveMonitor()
    rng = np.random.default_rng(config.seed)
    n, R = data.n_units, config.n_retained
    strata_draws = np.zeros((R, n), dtype=np.int8)
    m111_draws = np.zeros((R, n))
    m110_draws = np.zeros((R, n))
    sigma2_draws = np.zeros((R, 3))
    split_totals = np.zeros((len(MEAN_NAMES), data.X.shape[1]), dtype=np.int64)
    kept_forests: Optional[List[Dict[str, Any]]] = [] if config.keep_forests else None

    start = 0
    saved = checkpoint.load() if (checkpoint is not None and resume) else None
    if saved is not None:
        state = SamplerState(strata=np.zeros(n, dtype=np.int8), z_latent=np.zeros(n),
                             w_latent=np.zeros(n),
                             models=_build_models(data, config, model, monitor))
        restore_state(state, saved.meta["state"], saved.arrays)
        rng.bit_generator.state = saved.meta["rng"]
        monitor.load_dict(saved.meta.get("moves", {}))
        start = int(saved.meta["iteration"])
        kept = int(saved.meta["retained_so_far"])
        strata_draws[:kept] = saved.arrays["strata_draws"]
        m111_draws[:kept] = saved.arrays["m111_draws"]
        m110_draws[:kept] = saved.arrays["m110_draws"]
        sigma2_draws[:kept] = saved.arrays["sigma2_draws"]
        split_totals[:] = saved.arrays["split_totals"]
        log.info("Chaine %d: reprise a l'iteration %d.", chain_id, start)
    else:
        state = initialize(data, config, rng, model=model, monitor=monitor)
        kept = 0

    span2 = data.scaler.span ** 2
    t0 = time.monotonic()
    for it in range(start, config.n_iter):
        if stop_at is not None and it >= stop_at:
            _save_checkpoint(checkpoint, state, rng, monitor, it, kept, strata_draws,
                             m111_draws, m110_draws, sigma2_draws, split_totals)
            log.info("Chaine %d: interrompue a l'iteration %d.", chain_id, it)
            return None
        gibbs_iteration(state, data, config, rng)
        if it >= config.burn_in and (it - config.burn_in + 1) % config.thin == 0 and kept < R:
            strata_draws[kept] = state.strata
            m111_draws[kept] = data.scaler.to_original(state.models["111"].fitted())
            m110_draws[kept] = data.scaler.to_original(state.models["110"].fitted())
            sigma2_draws[kept] = [state.sigma2[c] * span2 for c in SIGMA2_ORDER]
            split_totals += _split_counts(state, split_totals.shape[1])
            if kept_forests is not None:
                kept_forests.append({k: m.to_dict() for k, m in state.models.items()})
            kept += 1
        done = it + 1
        if done % settings.LOG_EVERY == 0:
            monitor.check_alerts()
            log.info("Chaine %d: iteration %d/%d (%.1fs).", chain_id, done, config.n_iter,
                     time.monotonic() - t0)
        if checkpoint is not None and checkpoint_every and done % checkpoint_every == 0:
            _save_checkpoint(checkpoint, state, rng, monitor, done, kept, strata_draws,
                             m111_draws, m110_draws, sigma2_draws, split_totals)

    meta = chain_metadata(config, model, chain_id, data.scaler)
    meta["acceptance"] = monitor.get_status()
    if model == "bart":
        meta["split_counts"] = {name: split_totals[i].tolist()
                                for i, name in enumerate(MEAN_NAMES)}
    return PosteriorDraws(
        strata=strata_draws[:kept], m111=m111_draws[:kept], m110=m110_draws[:kept],
        sigma2=sigma2_draws[:kept], chain_ids=np.full(kept, chain_id, dtype=np.int32),
        model=model, metadata=meta, forests=kept_forests,
    )


def _split_counts(state: SamplerState, n_covariates: int) -> np.ndarray:
    counts = np.zeros((len(MEAN_NAMES), n_covariates), dtype=np.int64)
    for i, name in enumerate(MEAN_NAMES):
        c = state.models[name].split_counts()
        if c is not None:
            counts[i] = c
    return counts


def _save_checkpoint(checkpoint, state, rng, monitor, iteration, kept, strata_draws,
                     m111_draws, m110_draws, sigma2_draws, split_totals) -> None:
    if checkpoint is None:
        return
    state_meta, arrays = state_to_checkpoint(state)
    meta = {
        "iteration": iteration,
        "retained_so_far": kept,
        "rng": rng.bit_generator.state,
        "moves": monitor.to_dict(),
        "state": state_meta,
    }
    arrays = dict(arrays, strata_draws=strata_draws[:kept], m111_draws=m111_draws[:kept],
                  m110_draws=m110_draws[:kept], sigma2_draws=sigma2_draws[:kept],
                  split_totals=split_totals)
    checkpoint.save(meta, arrays)


def run_chain_parametric(dataset: TrialDataset, config: ChainConfig,
                         **kwargs) -> Optional[PosteriorDraws]:
    """run_chain with every mean function linear (conjugate Gaussian coefficients)."""
    return run_chain(dataset, config, model="parametric", **kwargs)


async def run_chains_async(dataset: TrialDataset, config: ChainConfig, n_chains: int,
                           threads: int = 1, model: str = "bart",
                           checkpoints: Optional[Sequence] = None,
                           checkpoint_every: Optional[int] = None,
                           resume: bool = False) -> List[PosteriorDraws]:
    """Run chains concurrently on a thread pool; chain c uses seed base + c."""
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        tasks = []
        for c in range(n_chains):
            cfg = replace(config, seed=derive_chain_seed(config.seed, c))
            store = checkpoints[c] if checkpoints else None
            tasks.append(loop.run_in_executor(
                pool, lambda cfg=cfg, c=c, store=store: run_chain(
                    dataset, cfg, model=model, chain_id=c, checkpoint=store,
                    checkpoint_every=checkpoint_every, resume=resume)))
        return list(await asyncio.gather(*tasks))


def run_chains(dataset: TrialDataset, config: ChainConfig, n_chains: int, threads: int = 1,
               model: str = "bart", **kwargs) -> List[PosteriorDraws]:
    return asyncio.run(run_chains_async(dataset, config, n_chains, threads, model, **kwargs))


# =========================
# Cross-validation over (w, J)
# =========================

def _make_folds(survive: np.ndarray, folds: int, rng: np.random.Generator,
                stratified: bool) -> np.ndarray:
    n = survive.shape[0]
    fold_of = np.empty(n, dtype=int)
    if stratified:
        for group in (np.flatnonzero(survive), np.flatnonzero(~survive)):
            perm = rng.permutation(group)
            fold_of[perm] = np.arange(perm.size) % folds
    else:
        perm = rng.permutation(n)
        fold_of[perm] = np.arange(n) % folds
    return fold_of


def _folds_valid(fold_of: np.ndarray, survive: np.ndarray, folds: int) -> bool:
    for f in range(folds):
        held = fold_of == f
        if not (survive & held).any() or not (survive & ~held).any():
            return False
    return True


def cross_validate(dataset: TrialDataset, w_grid: Sequence[float], J_grid: Sequence[int],
                   folds: int = 5, base: Optional[BartConfig] = None, seed: int = 0,
                   n_sweeps: int = 200, burn_in: int = 100, a0: float = 0.001,
                   b0: float = 0.001) -> Tuple[float, int, List[Dict[str, Any]]]:
    """K-fold CV of standalone BART on observed survivor outcomes; score = mean held-out RMSE.

    Ties go to the smallest J, then the smallest w.
    """
    if folds < 2:
        raise DataError(f"folds doit etre >= 2: {folds}")
    base = base or BartConfig()
    survive = dataset.survive == 1
    rng = np.random.default_rng(seed)
    fold_of = _make_folds(survive, folds, rng, stratified=False)
    if not _folds_valid(fold_of, survive, folds):
        log.info("Validation croisee: pli sans survivant, repartition stratifiee.")
        fold_of = _make_folds(survive, folds, rng, stratified=True)
        if not _folds_valid(fold_of, survive, folds):
            raise DataError("validation croisee: pli sans survivant apres stratification")

    X, y = dataset.covariates, dataset.outcome
    constant = np.ptp(y[survive]) == 0
    if constant:
        log.info("Validation croisee: outcome constant, scores nuls.")
    table = []
    for ci, (w, J) in enumerate((w, J) for w in w_grid for J in J_grid):
        cfg = replace(base, w=float(w), n_trees=int(J))
        fold_rmse = []
        for f in range(folds):
            if constant:
                fold_rmse.append(0.0)
                continue
            train = np.flatnonzero(survive & (fold_of != f))
            test = np.flatnonzero(survive & (fold_of == f))
            fit = fit_bart(X[train], y[train], cfg, np.random.default_rng([seed, ci, f]),
                           n_sweeps=n_sweeps, burn_in=burn_in, a0=a0, b0=b0, X_test=X[test])
            fold_rmse.append(float(np.sqrt(np.mean((fit.test_mean - y[test]) ** 2))))
        table.append({"w": float(w), "J": int(J), "rmse": float(np.mean(fold_rmse)),
                      "fold_rmse": fold_rmse})
        log.info("CV w=%g J=%d: RMSE=%.4f", w, J, table[-1]["rmse"])

    best_score = min(row["rmse"] for row in table)
    tol = 1e-12 * max(1.0, abs(best_score))
    best = min((row for row in table if row["rmse"] - best_score <= tol),
               key=lambda row: (row["J"], row["w"]))
    return best["w"], best["J"], table
