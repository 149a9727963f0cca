import numpy as np
import pytest

from conftest import make_dataset
from core.bart import SIGMA2_CEILING
from core.data import standardize
from core.errors import DataError, InitializationError
from core.estimands import sace_draws
from core.models import STRATUM_00, STRATUM_10, STRATUM_11, BartConfig, ChainConfig
from core.sampler import (
    ChainData,
    cross_validate,
    gibbs_iteration,
    impute_strata,
    initialize,
    probit_glm_init,
    run_chain,
    run_chain_parametric,
    run_chains,
    run_chains_async,
    run_iterations,
    sample_latents,
    strata_probabilities,
    update_variances,
)
from core.state import CheckpointStore
from core.synth import generate, get_preset, oracle_sace
from mean_models.linear_mean import design_matrix


@pytest.fixture(scope="module")
def trial():
    dataset, truth = generate(get_preset("dgp_a", n_units=120, seed=3))
    dataset, _ = standardize(dataset)
    return dataset, truth


def _config(**kw):
    base = dict(n_iter=8, burn_in=2, thin=2, seed=5, bart=BartConfig(n_trees=5),
                init_sweeps=3)
    base.update(kw)
    return ChainConfig(**base)


# ── Membership probabilities ──────────────────────────────

class TestStrataProbabilities:
    def test_sum_to_one(self):
        mz = np.linspace(-3, 3, 7)
        mw = np.linspace(2, -2, 7)
        p00, p10, p11 = strata_probabilities(mz, mw)
        np.testing.assert_allclose(p00 + p10 + p11, 1.0)

    def test_sign_convention(self):
        p00, p10, p11 = strata_probabilities(8.0, 0.0)
        assert p00 == pytest.approx(1.0)
        p00, p10, p11 = strata_probabilities(-8.0, -8.0)
        assert p11 == pytest.approx(1.0)
        p00, p10, p11 = strata_probabilities(-8.0, 8.0)
        assert p10 == pytest.approx(1.0)


# ── Initialization ────────────────────────────────────────

class TestInitialize:
    def test_observed_groups_fix_strata(self, trial):
        dataset, _ = trial
        data = ChainData.from_dataset(dataset)
        state = initialize(data, _config(), np.random.default_rng(0))
        assert (state.strata[data.fixed_00] == STRATUM_00).all()
        assert (state.strata[data.fixed_11] == STRATUM_11).all()
        for cell in ("111", "110", "101"):
            assert state.cell_rows(data, cell).size > 0

    def test_latent_signs_match_strata(self, trial):
        dataset, _ = trial
        data = ChainData.from_dataset(dataset)
        state = initialize(data, _config(), np.random.default_rng(1))
        assert ((state.z_latent >= 0) == (state.strata == STRATUM_00)).all()
        alive = state.strata != STRATUM_00
        assert ((state.w_latent[alive] >= 0) == (state.strata[alive] == STRATUM_10)).all()
        assert np.isnan(state.w_latent[~alive]).all()

    def test_probit_forests_start_from_glm(self, trial):
        dataset, _ = trial
        data = ChainData.from_dataset(dataset)
        state = initialize(data, _config(init_sweeps=10), np.random.default_rng(2))
        mz = state.models["z"].fitted()
        assert np.ptp(mz) > 0
        eta_z, _ = probit_glm_init(state.strata == STRATUM_00, design_matrix(data.X),
                                   design_matrix(data.X))
        assert np.corrcoef(mz, eta_z)[0, 1] > 0.5

    def test_impossible_cells_raise(self):
        # no treated survivors: strata 11 and 10 under treatment are both empty
        ds = make_dataset([1, 1, 0, 0], [0, 0, 1, 0], [np.nan, np.nan, 1.0, np.nan],
                          [0.1, 0.2, 0.3, 0.4])
        data = ChainData.from_dataset(ds)
        with pytest.raises(InitializationError):
            initialize(data, _config(init_retries=3), np.random.default_rng(0))

    def test_probit_glm_constant_indicator_falls_back(self):
        design = design_matrix(np.random.default_rng(0).normal(size=(20, 1)))
        eta, params = probit_glm_init(np.zeros(20, dtype=bool), design, design)
        assert params is None
        assert np.unique(eta).size == 1

    def test_probit_glm_recovers_direction(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(500, 1))
        indicator = (1.0 * X[:, 0] + rng.normal(size=500)) > 0
        design = design_matrix(X)
        _, params = probit_glm_init(indicator, design, design)
        assert params[1] == pytest.approx(1.0, abs=0.3)


# ── Gibbs sweeps ──────────────────────────────────────────

class TestGibbs:
    @pytest.mark.parametrize("model", ["bart", "parametric"])
    def test_strata_stay_compatible_with_observed_groups(self, trial, model):
        dataset, _ = trial
        data = ChainData.from_dataset(dataset)
        config = _config()
        rng = np.random.default_rng(3)
        state = initialize(data, config, rng, model=model)
        run_iterations(state, data, config, rng, 5)
        s = state.strata
        assert (s[data.fixed_00] == STRATUM_00).all()
        assert (s[data.fixed_11] == STRATUM_11).all()
        assert np.isin(s[data.ambiguous_11], (STRATUM_10, STRATUM_11)).all()
        assert np.isin(s[data.ambiguous_00], (STRATUM_00, STRATUM_10)).all()
        assert all(v > 0 for v in state.sigma2.values())

    def test_single_steps_keep_constraints(self, trial):
        dataset, _ = trial
        data = ChainData.from_dataset(dataset)
        config = _config()
        rng = np.random.default_rng(4)
        state = initialize(data, config, rng)
        update_variances(state, data, config, rng)
        assert all(v > 0 for v in state.sigma2.values())
        impute_strata(state, data, rng)
        assert (state.strata[data.fixed_00] == STRATUM_00).all()
        assert (state.strata[data.fixed_11] == STRATUM_11).all()
        sample_latents(state, data, rng)
        assert ((state.z_latent >= 0) == (state.strata == STRATUM_00)).all()
        alive = state.strata != STRATUM_00
        assert ((state.w_latent[alive] >= 0) == (state.strata[alive] == STRATUM_10)).all()
        assert np.isnan(state.w_latent[~alive]).all()

    def test_emptied_cell_can_refill(self, trial):
        dataset, _ = trial
        data = ChainData.from_dataset(dataset)
        config = _config()
        rng = np.random.default_rng(21)
        state = initialize(data, config, rng)
        state.strata[data.ambiguous_11] = STRATUM_11
        assert state.cell_rows(data, "101").size == 0
        update_variances(state, data, config, rng)
        assert all(np.isfinite(v) and 0 < v <= SIGMA2_CEILING for v in state.sigma2.values())
        impute_strata(state, data, rng)
        assert state.cell_rows(data, "101").size > 0

    def test_gibbs_iteration_keeps_latents_consistent(self, trial):
        dataset, _ = trial
        data = ChainData.from_dataset(dataset)
        config = _config()
        rng = np.random.default_rng(9)
        state = gibbs_iteration(initialize(data, config, rng), data, config, rng)
        assert ((state.z_latent >= 0) == (state.strata == STRATUM_00)).all()


# ── Chains ────────────────────────────────────────────────

class TestRunChain:
    def test_retained_draw_count(self, trial):
        dataset, _ = trial
        draws = run_chain(dataset, _config(n_iter=9, burn_in=2, thin=3))
        assert draws.n_draws == (9 - 2) // 3
        assert draws.n_units == dataset.n_units
        assert draws.sigma2.shape == (draws.n_draws, 3)
        assert (draws.sigma2 > 0).all()

    def test_same_seed_same_draws(self, trial):
        dataset, _ = trial
        a = run_chain(dataset, _config())
        b = run_chain(dataset, _config())
        np.testing.assert_array_equal(a.strata, b.strata)
        np.testing.assert_array_equal(a.m111, b.m111)
        np.testing.assert_array_equal(a.sigma2, b.sigma2)

    def test_different_seed_different_draws(self, trial):
        dataset, _ = trial
        a = run_chain(dataset, _config(seed=5))
        b = run_chain(dataset, _config(seed=6))
        assert not np.array_equal(a.m111, b.m111)

    def test_outcome_means_on_original_scale(self, trial):
        dataset, _ = trial
        draws = run_chain(dataset, _config())
        observed = dataset.outcome[dataset.survive == 1]
        assert observed.min() - 5 < draws.m110.mean() < observed.max() + 5

    def test_resume_reproduces_uninterrupted_run(self, trial, tmp_path):
        dataset, _ = trial
        config = _config(n_iter=10, burn_in=3, thin=1)
        full = run_chain(dataset, config)
        store = CheckpointStore(str(tmp_path / "chain_0"))
        assert run_chain(dataset, config, checkpoint=store, stop_at=5) is None
        assert store.exists()
        resumed = run_chain(dataset, config, checkpoint=store, resume=True)
        np.testing.assert_array_equal(resumed.strata, full.strata)
        np.testing.assert_array_equal(resumed.m111, full.m111)
        np.testing.assert_array_equal(resumed.m110, full.m110)
        np.testing.assert_array_equal(resumed.sigma2, full.sigma2)
        assert resumed.metadata["split_counts"] == full.metadata["split_counts"]

    def test_periodic_checkpoint_written(self, trial, tmp_path):
        dataset, _ = trial
        store = CheckpointStore(str(tmp_path / "chain_0"))
        run_chain(dataset, _config(), checkpoint=store, checkpoint_every=4)
        saved = store.load()
        assert saved.meta["iteration"] == 8
        assert saved.arrays["strata_draws"].shape[0] == _config().n_retained

    def test_parametric_model(self, trial):
        dataset, _ = trial
        draws = run_chain_parametric(dataset, _config())
        assert draws.model == "parametric"
        assert draws.metadata["model"] == "parametric"

    def test_split_counts_accumulate_over_retained_draws(self, trial):
        dataset, _ = trial
        draws = run_chain(dataset, _config())
        counts = draws.metadata["split_counts"]
        assert set(counts) == {"z", "w", "111", "110", "101"}
        assert all(len(c) == dataset.covariates.shape[1] for c in counts.values())
        assert sum(sum(c) for c in counts.values()) > 0
        assert "split_counts" not in run_chain_parametric(dataset, _config()).metadata

    def test_chain_seeds_follow_base(self, trial):
        dataset, _ = trial
        chains = run_chains(dataset, _config(seed=5), n_chains=2, threads=2)
        single = run_chain(dataset, _config(seed=6), chain_id=1)
        np.testing.assert_array_equal(chains[1].m111, single.m111)
        assert [c.metadata["seed"] for c in chains] == [5, 6]

    @pytest.mark.slow
    def test_parametric_sace_close_to_oracle(self):
        spec = get_preset("dgp_a", n_units=1000, seed=11)
        dataset, _ = generate(spec)
        dataset, _ = standardize(dataset)
        draws = run_chain_parametric(dataset, _config(n_iter=1500, burn_in=500, thin=1))
        sace, _ = sace_draws(draws)
        truth, _ = oracle_sace(spec, n_mc=200_000)
        assert abs(sace.mean() - truth) < 0.5


# ── Cross-validation ──────────────────────────────────────

class TestCrossValidate:
    def test_constant_outcome_picks_smallest_J_then_w(self):
        rng = np.random.default_rng(0)
        n = 40
        survive = np.ones(n, dtype=int)
        ds = make_dataset(rng.integers(2, size=n), survive, np.full(n, 3.0), rng.normal(size=n))
        w, J, table = cross_validate(ds, [2, 1], [10, 5], folds=2, n_sweeps=2, burn_in=1)
        assert (w, J) == (1.0, 5)
        assert all(row["rmse"] == 0.0 for row in table)

    def test_too_few_folds(self, small_trial):
        with pytest.raises(DataError):
            cross_validate(small_trial, [1], [5], folds=1)

    def test_table_covers_grid(self, trial):
        dataset, _ = trial
        w, J, table = cross_validate(dataset, [1, 2], [3], folds=2, n_sweeps=4, burn_in=2)
        assert [(r["w"], r["J"]) for r in table] == [(1.0, 3), (2.0, 3)]
        assert (w, J) in [(r["w"], r["J"]) for r in table]
        assert all(len(r["fold_rmse"]) == 2 for r in table)


# ── Async runner ──────────────────────────────────────────

class TestRunChainsAsync:
    @pytest.mark.asyncio
    async def test_chains_gathered_in_order(self, trial):
        dataset, _ = trial
        chains = await run_chains_async(dataset, _config(seed=20), n_chains=3, threads=3)
        assert [c.metadata["chain_id"] for c in chains] == [0, 1, 2]
        assert [c.metadata["seed"] for c in chains] == [20, 21, 22]
        assert not np.array_equal(chains[0].m111, chains[1].m111)
