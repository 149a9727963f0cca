"""SACE/CSACE posteriors, likely always-survivors, balance diagnostics and heterogeneity metrics."""

import logging
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm

from core.errors import DataError
from core.models import STRATUM_00, STRATUM_10, STRATUM_11, PosteriorDraws, TrialDataset
from core.utils import credible_interval, summarize_samples

log = logging.getLogger("sacebart.estimands")

DEFAULT_THRESHOLDS = (0.99, 0.95, 0.9, 0.8)
EVIDENCE_BANDS = (0.9, 0.8, 0.7)
_DENSITY_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class MembershipPosterior:
    p11: np.ndarray
    p10: np.ndarray
    p00: np.ndarray
    n_draws: int

    @property
    def marginal_11(self) -> float:
        return float(self.p11.mean())

    def as_matrix(self) -> np.ndarray:
        """Rows (P(S=00), P(S=10), P(S=11)) per unit."""
        return np.column_stack([self.p00, self.p10, self.p11])


@dataclass(frozen=True, eq=False)
class LikelySet:
    indices: np.ndarray
    p: float
    n_units: int

    @property
    def n11(self) -> int:
        return int(self.indices.size)

    @property
    def share(self) -> float:
        return self.n11 / self.n_units if self.n_units else 0.0


@dataclass
class DensityEstimate:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    spike: bool = False
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None


@dataclass
class DifferentialEffects:
    D: np.ndarray
    D_star: np.ndarray
    mode: str
    evidence: Dict[str, float] = field(default_factory=dict)


@dataclass
class BenefitSummary:
    q: np.ndarray  # per likely unit
    Q: np.ndarray  # per draw
    tabulation: Dict[str, float] = field(default_factory=dict)


# =========================
# SACE / CSACE draws
# =========================

def csace_draws(draws: PosteriorDraws) -> np.ndarray:
    """draws x units matrix of m111(X_i) - m110(X_i)."""
    return draws.m111 - draws.m110


def sace_draws(draws: PosteriorDraws, keep_nan: bool = False) -> Tuple[np.ndarray, int]:
    """Per draw, the mean CSACE over units imputed S=11 in that draw.

    Returns (values, n_skipped); draws without always-survivors are dropped
    (or kept as NaN with keep_nan=True).
    """
    if draws.n_draws == 0:
        return np.empty(0), 0
    mask = draws.strata == STRATUM_11
    counts = mask.sum(axis=1)
    sums = np.where(mask, csace_draws(draws), 0.0).sum(axis=1)
    values = np.full(draws.n_draws, np.nan)
    ok = counts > 0
    values[ok] = sums[ok] / counts[ok]
    skipped = int((~ok).sum())
    if skipped:
        log.warning("SACE: %d tirage(s) sans always-survivor ignore(s).", skipped)
    return (values if keep_nan else values[ok]), skipped


def likely_sace_draws(csace: np.ndarray, likely: LikelySet) -> np.ndarray:
    """Per draw, mean CSACE over the fixed likely set."""
    return csace[:, likely.indices].mean(axis=1)


# =========================
# Membership and the likely set
# =========================

def membership_posterior(draws: PosteriorDraws) -> MembershipPosterior:
    if draws.n_draws < 1:
        raise DataError("aucun tirage retenu")
    n = draws.n_draws
    c00 = np.count_nonzero(draws.strata == STRATUM_00, axis=0)
    c10 = np.count_nonzero(draws.strata == STRATUM_10, axis=0)
    c11 = n - c00 - c10
    return MembershipPosterior(p11=c11 / n, p10=c10 / n, p00=c00 / n, n_draws=n)


def build_likely_set(membership: MembershipPosterior, dataset: TrialDataset, p: float) -> LikelySet:
    """Observed O(0,1) units plus every unit with P(S=11) >= p."""
    fixed = (dataset.treat == 0) & (dataset.survive == 1)
    mask = fixed | (membership.p11 >= p)
    return LikelySet(indices=np.flatnonzero(mask), p=float(p), n_units=dataset.n_units)


def p_grid(start: float = 0.50, stop: float = 0.99, step: float = 0.01) -> np.ndarray:
    n = int(round((stop - start) / step)) + 1
    return np.round(start + step * np.arange(n), 10)


def choose_p(membership: MembershipPosterior, dataset: TrialDataset,
             grid: Optional[Sequence[float]] = None) -> float:
    """p whose likely-set share is closest to the marginal always-survivor proportion; ties -> larger p."""
    grid = p_grid() if grid is None else np.asarray(grid, dtype=float)
    target = membership.marginal_11
    best_p, best_gap = None, np.inf
    for p in sorted(grid, reverse=True):
        gap = abs(build_likely_set(membership, dataset, p).share - target)
        if gap < best_gap:
            best_p, best_gap = float(p), gap
    log.info("choose_p: p=%.2f (proportion marginale %.4f).", best_p, target)
    return best_p


# =========================
# Covariate balance
# =========================

def asd(sample_a: np.ndarray, sample_b: np.ndarray) -> float:
    """Absolute standardized difference with pooled variance (var_a + var_b) / 2."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise DataError("ASD: echantillon vide")
    return float(_asd(a.mean(), b.mean(), a.var(), b.var()))


def _asd(mean_a, mean_b, var_a, var_b):
    mean_a, mean_b = np.asarray(mean_a, float), np.asarray(mean_b, float)
    diff = np.abs(mean_a - mean_b)
    den = np.sqrt((np.asarray(var_a, float) + np.asarray(var_b, float)) / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, diff / np.where(den > 0, den, 1.0),
                       np.where(diff == 0, 0.0, np.inf))
    return out


def _stratum_moments(strata: np.ndarray, X: np.ndarray, stratum: int):
    """Per-draw covariate means/variances (draws x K) and counts for one latent stratum."""
    M = (strata == stratum).astype(float)
    counts = M.sum(axis=1)
    safe = np.where(counts > 0, counts, 1.0)[:, None]
    means = (M @ X) / safe
    var = np.clip((M @ (X * X)) / safe - means ** 2, 0.0, None)
    return means, var, counts


def balance_report(draws: PosteriorDraws, likely: LikelySet, dataset: TrialDataset) -> pd.DataFrame:
    """Covariate means in the likely set against the latent strata, with posterior-mean ASDs.

    Draws where a latent stratum is empty are left out of that stratum's averages;
    the counts are in `report.attrs["excluded"]`.
    """
    X = dataset.covariates
    names = list(dataset.covariate_spec.names)
    if likely.n11 == 0:
        raise DataError("ensemble des always-survivors probables vide")
    XL = X[likely.indices]
    likely_mean, likely_var = XL.mean(axis=0), XL.var(axis=0)

    moments = {s: _stratum_moments(draws.strata, X, s) for s in (STRATUM_00, STRATUM_10, STRATUM_11)}
    excluded = {}
    posterior_means = {}
    for s, (means, _, counts) in moments.items():
        ok = counts > 0
        excluded[s] = int((~ok).sum())
        posterior_means[s] = means[ok].mean(axis=0) if ok.any() else np.full(X.shape[1], np.nan)

    m11, v11, c11 = moments[STRATUM_11]
    ok11 = c11 > 0
    asd_likely = _asd(likely_mean[None, :], m11[ok11], likely_var[None, :], v11[ok11])
    asd_likely_mean = asd_likely.mean(axis=0) if ok11.any() else np.full(X.shape[1], np.nan)

    all_ok = np.all([moments[s][2] > 0 for s in moments], axis=0)
    pairs = ((STRATUM_00, STRATUM_10), (STRATUM_00, STRATUM_11), (STRATUM_10, STRATUM_11))
    if all_ok.any():
        pairwise = np.stack([
            _asd(moments[a][0][all_ok], moments[b][0][all_ok],
                 moments[a][1][all_ok], moments[b][1][all_ok]) for a, b in pairs])
        max_pairwise = pairwise.max(axis=0).mean(axis=0)
    else:
        max_pairwise = np.full(X.shape[1], np.nan)

    report = pd.DataFrame({
        "covariate": names,
        "likely_mean": likely_mean,
        "latent_11_mean": posterior_means[STRATUM_11],
        "asd_likely_vs_latent_11": asd_likely_mean,
        "latent_00_mean": posterior_means[STRATUM_00],
        "latent_10_mean": posterior_means[STRATUM_10],
        "max_pairwise_asd": max_pairwise,
    })
    report.attrs["excluded"] = {"00": excluded[STRATUM_00], "10": excluded[STRATUM_10],
                                "11": excluded[STRATUM_11]}
    if np.isinf(report["asd_likely_vs_latent_11"]).any():
        log.warning("Balance: ASD infinie (variances nulles, moyennes differentes).")
    return report


# =========================
# Posterior CDF and density of the CSACE
# =========================

def csace_cdf(csace: np.ndarray, likely: LikelySet, u):
    """Average over likely units of the fraction of draws with CSACE <= u (scalar or array u)."""
    values = np.sort(csace[:, likely.indices], axis=None)
    if values.size == 0:
        raise DataError("fonction de repartition: aucun tirage")
    out = np.searchsorted(values, np.asarray(u, dtype=float), side="right") / values.size
    return float(out) if np.ndim(out) == 0 else out


def silverman_bandwidth(sigma: float, iqr: float, n: int) -> float:
    return 0.9 * min(sigma, iqr) / (1.34 * n ** 0.2)


def csace_bandwidth(csace: np.ndarray, likely: LikelySet) -> float:
    """Posterior means of the draw-wise sd and IQR across likely units plugged into the rule of thumb."""
    vals = csace[:, likely.indices]
    if vals.shape[1] < 2:
        return 0.0
    sigma = float(vals.std(axis=1, ddof=1).mean())
    q75, q25 = np.quantile(vals, [0.75, 0.25], axis=1)
    iqr = float((q75 - q25).mean())
    return silverman_bandwidth(sigma, iqr, likely.n11)


def _grid_weights(grid: np.ndarray) -> np.ndarray:
    """Width attributed to each grid point (half the distance to each neighbour)."""
    if grid.size == 1:
        return np.ones(1)
    gaps = np.diff(grid)
    return np.concatenate([[gaps[0]], (gaps[:-1] + gaps[1:]) / 2.0, [gaps[-1]]])


def _spike_density(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    idx = np.abs(grid[:, None] - values[None, :]).argmin(axis=0)
    mass = np.bincount(idx, minlength=grid.size) / values.size
    return mass / _grid_weights(grid)


def _kernel_density(values: np.ndarray, grid: np.ndarray, bandwidth: float) -> np.ndarray:
    total = np.zeros(grid.size)
    for start in range(0, values.size, _DENSITY_CHUNK):
        chunk = values[start:start + _DENSITY_CHUNK]
        total += norm.pdf((grid[:, None] - chunk[None, :]) / bandwidth).sum(axis=1)
    return total / (values.size * bandwidth)


def csace_density(csace: np.ndarray, likely: LikelySet, grid,
                  bandwidth: Optional[float] = None) -> DensityEstimate:
    """Gaussian-kernel density of the CSACE averaged over likely units and draws.

    When the bandwidth is not positive (all draws identical) each value becomes a
    spike of unit mass on its nearest grid point, flagged in the result.
    """
    grid = np.asarray(grid, dtype=float)
    values = csace[:, likely.indices].ravel()
    if values.size == 0:
        raise DataError("densite: aucun tirage")
    lam = csace_bandwidth(csace, likely) if bandwidth is None else float(bandwidth)
    if not (np.isfinite(lam) and lam > 0):
        log.warning("Densite: largeur de bande %.3g <= 0, densite en pics.", lam)
        return DensityEstimate(grid=grid, density=_spike_density(values, grid), bandwidth=0.0,
                               spike=True)
    return DensityEstimate(grid=grid, density=_kernel_density(values, grid, lam), bandwidth=lam)


def posterior_density_average(csace: np.ndarray, likely: LikelySet, grid,
                              bandwidth: Optional[float] = None,
                              level: float = 0.95,
                              max_draws: Optional[int] = None) -> DensityEstimate:
    """Per-draw kernel densities over the likely set: their mean and a pointwise credible envelope.

    With `max_draws`, at most that many evenly spaced draws enter the average.
    """
    grid = np.asarray(grid, dtype=float)
    lam = csace_bandwidth(csace, likely) if bandwidth is None else float(bandwidth)
    vals = csace[:, likely.indices]
    if max_draws is not None and vals.shape[0] > max_draws:
        keep = np.unique(np.linspace(0, vals.shape[0] - 1, max_draws).round().astype(int))
        vals = vals[keep]
    if not (np.isfinite(lam) and lam > 0):
        per_draw = np.stack([_spike_density(v, grid) for v in vals])
        spike, lam = True, 0.0
    else:
        per_draw = np.stack([_kernel_density(v, grid, lam) for v in vals])
        spike = False
    lo, hi = credible_interval(per_draw, level, axis=0)
    return DensityEstimate(grid=grid, density=per_draw.mean(axis=0), bandwidth=lam,
                           spike=spike, lower=lo, upper=hi)


def default_grid(csace: np.ndarray, likely: LikelySet, n_points: int = 512,
                 pad: float = 0.25) -> np.ndarray:
    vals = csace[:, likely.indices]
    lo, hi = float(vals.min()), float(vals.max())
    width = max(hi - lo, 1.0)
    return np.linspace(lo - pad * width, hi + pad * width, n_points)


# =========================
# Heterogeneity metrics
# =========================

def d_star(d: float) -> float:
    """max{1 - 2D, 2D - 1}, computed on the decimal value of D."""
    return float(abs(2 * Decimal(repr(float(d))) - 1))


def differential_effects(csace: np.ndarray, likely: LikelySet,
                         mode: str = "per_draw") -> DifferentialEffects:
    """D_i = P(CSACE_i <= likely-set average CSACE), D_i* = |2 D_i - 1|.

    mode="per_draw" compares against each draw's own average; mode="posterior_mean"
    against the posterior mean of that average.
    """
    vals = csace[:, likely.indices]
    n = vals.shape[0]
    if n < 1:
        raise DataError("aucun tirage retenu")
    avg = vals.mean(axis=1)
    if mode == "per_draw":
        below = np.count_nonzero(vals <= avg[:, None], axis=0)
    elif mode == "posterior_mean":
        below = np.count_nonzero(vals <= avg.mean(), axis=0)
    else:
        raise ValueError(f"mode inconnu: {mode}")
    D = below / n
    D_star = np.abs(2 * below - n) / n
    evidence = {f">{b}": float((D_star > b).mean()) if D_star.size else 0.0
                for b in EVIDENCE_BANDS}
    return DifferentialEffects(D=D, D_star=D_star, mode=mode, evidence=evidence)


def benefit_probabilities(csace: np.ndarray, likely: LikelySet,
                          thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> BenefitSummary:
    """q_i = P(CSACE_i < 0); Q = per-draw share of likely units with negative CSACE."""
    neg = csace[:, likely.indices] < 0
    if neg.shape[0] < 1:
        raise DataError("aucun tirage retenu")
    q = neg.mean(axis=0)
    Q = neg.mean(axis=1)
    tab = {f">{t}": float((q > t).mean()) if q.size else 0.0 for t in thresholds}
    return BenefitSummary(q=q, Q=Q, tabulation=tab)


def credible_exclusion_fraction(csace: np.ndarray, likely: LikelySet, level: float = 0.95) -> float:
    """Share of likely units whose CSACE credible interval excludes 0."""
    lo, hi = credible_interval(csace[:, likely.indices], level, axis=0)
    return float(((lo > 0) | (hi < 0)).mean()) if lo.size else 0.0


def csace_range(csace: np.ndarray, likely: LikelySet) -> Tuple[float, float]:
    means = csace[:, likely.indices].mean(axis=0)
    return float(means.min()), float(means.max())


def sace_comparison(draws: PosteriorDraws, likely: LikelySet) -> Dict[str, Any]:
    """SACE over latent always-survivors against SACE over the fixed likely set."""
    latent, skipped = sace_draws(draws)
    fixed = likely_sace_draws(csace_draws(draws), likely)
    return {
        "latent": summarize_samples(latent),
        "likely_set": summarize_samples(fixed),
        "difference": float(np.mean(latent) - np.mean(fixed)) if latent.size else float("nan"),
        "skipped_draws": skipped,
    }


def per_unit_table(dataset: TrialDataset, csace: np.ndarray, membership: MembershipPosterior,
                   likely: LikelySet, diff: DifferentialEffects,
                   benefit: BenefitSummary, level: float = 0.95) -> pd.DataFrame:
    lo, hi = credible_interval(csace, level, axis=0)
    in_likely = np.zeros(dataset.n_units, dtype=bool)
    in_likely[likely.indices] = True
    D = np.full(dataset.n_units, np.nan)
    D_star = np.full(dataset.n_units, np.nan)
    q = np.full(dataset.n_units, np.nan)
    D[likely.indices] = diff.D
    D_star[likely.indices] = diff.D_star
    q[likely.indices] = benefit.q
    return pd.DataFrame({
        "id": dataset.ids,
        "csace_mean": csace.mean(axis=0),
        "csace_lower": lo,
        "csace_upper": hi,
        "p00": membership.p00,
        "p10": membership.p10,
        "p11": membership.p11,
        "likely": in_likely.astype(int),
        "D": D,
        "D_star": D_star,
        "q": q,
    })


def summarize_fit(draws: PosteriorDraws, dataset: TrialDataset, p="auto",
                  p_grid_bounds: Sequence[float] = (0.50, 0.99, 0.01),
                  thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                  d_mode: str = "per_draw", grid_points: int = 512,
                  band_draws: int = 200) -> Dict[str, Any]:
    """Every estimand report of a fit, as produced by the summarize command."""
    membership = membership_posterior(draws)
    chosen = choose_p(membership, dataset, p_grid(*p_grid_bounds)) if p == "auto" else float(p)
    likely = build_likely_set(membership, dataset, chosen)
    if likely.n11 == 0:
        raise DataError(f"ensemble des always-survivors probables vide (p={chosen}, "
                        "aucune unite O(0,1) ni probabilite d'appartenance suffisante)")
    csace = csace_draws(draws)
    sace, skipped = sace_draws(draws)
    diff = differential_effects(csace, likely, d_mode)
    benefit = benefit_probabilities(csace, likely, thresholds)
    grid = default_grid(csace, likely, grid_points)
    density = csace_density(csace, likely, grid)
    band = posterior_density_average(csace, likely, grid, bandwidth=density.bandwidth,
                                     max_draws=band_draws)
    likely_stat = likely_sace_draws(csace, likely)
    summary = {
        "sace": summarize_samples(sace),
        "sace_skipped_draws": skipped,
        "marginal_11": membership.marginal_11,
        "p": chosen,
        "p_auto": p == "auto",
        "n11": likely.n11,
        "benefit_tabulation": benefit.tabulation,
        "Q": summarize_samples(benefit.Q),
        "evidence": diff.evidence,
        "d_mode": d_mode,
        "bandwidth": density.bandwidth,
        "density_spike": density.spike,
        "band_draws": int(min(band_draws, csace.shape[0])),
        "credible_exclusion_fraction": credible_exclusion_fraction(csace, likely),
        "csace_range": list(csace_range(csace, likely)),
        "sace_comparison": sace_comparison(draws, likely),
        "consistency_gap": float(abs(csace[:, likely.indices].mean(axis=0).mean()
                                     - likely_stat.mean())),
    }
    grids = pd.DataFrame({"u": grid, "cdf": csace_cdf(csace, likely, grid),
                          "density": density.density, "density_lower": band.lower,
                          "density_upper": band.upper})
    return {
        "summary": summary,
        "membership": membership,
        "likely": likely,
        "per_unit": per_unit_table(dataset, csace, membership, likely, diff, benefit),
        "grids": grids,
        "balance": balance_report(draws, likely, dataset),
        "Q_draws": benefit.Q,
    }
