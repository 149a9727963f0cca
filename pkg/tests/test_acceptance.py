"""End-to-end recovery on simulated trials with a known truth.

The short fits run on every `pytest`; the long ones need `--runslow`.
"""

import numpy as np
import pytest

from core.data import standardize
from core.estimands import (
    build_likely_set,
    csace_draws,
    differential_effects,
    membership_posterior,
    sace_draws,
)
from core.models import STRATUM_11, BartConfig, ChainConfig
from core.sampler import run_chain
from core.subgroup import stepwise_fit_the_fit
from core.synth import generate, get_preset, oracle_sace
from core.utils import credible_interval


def _fit(dgp, n_units, seed, model="bart", n_iter=200, burn_in=100, n_trees=20):
    spec = get_preset(dgp, n_units=n_units, seed=seed)
    raw, truth = generate(spec)
    dataset, _ = standardize(raw)
    config = ChainConfig(n_iter=n_iter, burn_in=burn_in, thin=1, seed=seed,
                         bart=BartConfig(n_trees=n_trees), init_sweeps=10)
    draws = run_chain(dataset, config, model=model)
    return {"spec": spec, "raw": raw, "dataset": dataset, "truth": truth, "draws": draws}


def _likely(fit, p=0.5):
    return build_likely_set(membership_posterior(fit["draws"]), fit["dataset"], p)


def _csace_rmse(fit) -> float:
    always = fit["truth"]["strata"] == STRATUM_11
    estimate = csace_draws(fit["draws"]).mean(axis=0)
    return float(np.sqrt(np.mean((estimate[always] - fit["truth"]["csace"][always]) ** 2)))


def _flagged_share(fit, level=0.9) -> float:
    diff = differential_effects(csace_draws(fit["draws"]), _likely(fit))
    return float(np.mean(diff.D_star > level))


@pytest.fixture(scope="module")
def linear_trial_fit():
    return _fit("dgp_a", 300, 13)


@pytest.fixture(scope="module")
def step_trial_fit():
    return _fit("moderated", 300, 17)


@pytest.fixture(scope="module")
def step_trial_linear_fit():
    return _fit("moderated", 300, 17, model="parametric")


@pytest.fixture(scope="module")
def constant_trial_fit():
    return _fit("constant", 300, 19)


# ── SACE ──────────────────────────────────────────────────

class TestSaceRecovery:
    def test_bart_sace_near_oracle(self, linear_trial_fit):
        fit = linear_trial_fit
        sace, _ = sace_draws(fit["draws"])
        truth, _ = oracle_sace(fit["spec"], n_mc=200_000)
        sd_y = float(np.nanstd(fit["raw"].outcome))
        assert abs(sace.mean() - truth) < 0.5 * sd_y

    @pytest.mark.slow
    def test_bart_sace_and_csace_intervals_on_long_chain(self):
        fit = _fit("dgp_a", 1000, 23, n_iter=2000, burn_in=1000, n_trees=50)
        sace, _ = sace_draws(fit["draws"])
        truth, _ = oracle_sace(fit["spec"], n_mc=1_000_000)
        sd_y = float(np.nanstd(fit["raw"].outcome))
        assert abs(sace.mean() - truth) < 0.15 * sd_y
        always = fit["truth"]["strata"] == STRATUM_11
        lo, hi = credible_interval(csace_draws(fit["draws"])[:, always], 0.95, axis=0)
        true_csace = fit["truth"]["csace"][always]
        assert np.mean((lo <= true_csace) & (true_csace <= hi)) >= 0.75


# ── Heterogeneity ─────────────────────────────────────────

class TestHeterogeneityRecovery:
    def test_bart_beats_linear_on_step_effect(self, step_trial_fit, step_trial_linear_fit):
        assert _csace_rmse(step_trial_fit) < _csace_rmse(step_trial_linear_fit)

    def test_d_star_separates_constant_from_step_effect(self, constant_trial_fit,
                                                         step_trial_fit):
        step = _flagged_share(step_trial_fit)
        assert step > 0.5
        assert _flagged_share(constant_trial_fit) < step

    @pytest.mark.slow
    def test_constant_effect_rarely_flagged(self):
        fit = _fit("constant", 1000, 29, n_iter=2000, burn_in=1000, n_trees=50)
        assert _flagged_share(fit) <= 0.02

    @pytest.mark.slow
    def test_bart_beats_linear_on_nonlinear_effect(self):
        bart = _fit("dgp_b", 1000, 31, n_iter=2000, burn_in=1000, n_trees=50)
        linear = _fit("dgp_b", 1000, 31, model="parametric", n_iter=2000, burn_in=1000)
        assert _csace_rmse(bart) < _csace_rmse(linear)


# ── Subgroups ─────────────────────────────────────────────

class TestFitTheFitRecovery:
    def test_step_covariate_selected_first(self, step_trial_fit):
        fit = step_trial_fit
        report = stepwise_fit_the_fit(csace_draws(fit["draws"]), _likely(fit), fit["dataset"])
        assert report.selected[0] == "x1"
        assert report.rules["covariate"] == "x1"
        assert abs(report.rules["threshold"]) < 0.5

    @pytest.mark.slow
    def test_step_recovered_on_long_chain(self):
        fit = _fit("moderated", 1000, 37, n_iter=2000, burn_in=1000, n_trees=50)
        likely = _likely(fit)
        csace = csace_draws(fit["draws"])
        report = stepwise_fit_the_fit(csace, likely, fit["dataset"])
        assert report.selected[0] == "x1"
        assert report.rules["covariate"] == "x1"
        assert abs(report.rules["threshold"]) < 0.1
        y = csace[:, likely.indices].mean(axis=0)
        x1 = fit["raw"].covariates[likely.indices, 0]
        assert y[x1 < 0].mean() == pytest.approx(-5.0, abs=1.0)
        assert y[x1 >= 0].mean() == pytest.approx(5.0, abs=1.0)
