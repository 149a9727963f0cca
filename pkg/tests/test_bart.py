import math
from collections import Counter

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import invgamma, multivariate_normal

from core.bart import (
    LEAF,
    SIGMA2_CEILING,
    UNUSED,
    Forest,
    OutcomeScaler,
    Tree,
    available_cuts,
    backfit_sweep,
    draw_leaf_values,
    draw_variance,
    fit_bart,
    leaf_posterior,
    log_marginal_likelihood,
    log_tree_prior,
    make_cut_grid,
    probit_sweep,
    prior_split_counts,
    split_probability,
    update_tree,
    variance_posterior,
)
from core.errors import StructuralError
from core.models import BartConfig


# ── Tree structure ────────────────────────────────────────

class TestTree:
    def test_root_is_single_leaf(self):
        tree = Tree.root(0.3)
        assert tree.leaves().tolist() == [0]
        assert tree.max_depth() == 0

    def test_split_and_route(self):
        tree = Tree.root()
        tree.split_leaf(0, 0, 0.5, left_value=-1.0, right_value=1.0)
        X = np.array([[0.0], [0.5], [0.6], [2.0]])
        assert tree.route(X).tolist() == [1, 1, 2, 2]
        assert tree.predict(X).tolist() == [-1.0, -1.0, 1.0, 1.0]

    def test_prune_restores_leaf(self):
        tree = Tree.root()
        tree.split_leaf(0, 0, 0.5)
        tree.prune(0, value=2.0)
        assert tree.var[0] == LEAF
        assert tree.var[1] == UNUSED and tree.var[2] == UNUSED
        assert tree.predict(np.array([[9.0]]))[0] == 2.0

    def test_prune_requires_two_leaves(self):
        tree = Tree.root()
        tree.split_leaf(0, 0, 0.5)
        tree.split_leaf(1, 0, 0.1)
        with pytest.raises(StructuralError):
            tree.prune(0)

    def test_split_internal_node_rejected(self):
        tree = Tree.root()
        tree.split_leaf(0, 0, 0.5)
        with pytest.raises(StructuralError):
            tree.split_leaf(0, 0, 0.2)

    def test_route_rejects_out_of_range_variable(self):
        tree = Tree.root()
        tree.split_leaf(0, 3, 0.5)
        with pytest.raises(StructuralError):
            tree.route(np.zeros((4, 2)))

    def test_prunable_nodes(self):
        tree = Tree.root()
        tree.split_leaf(0, 0, 0.5)
        tree.split_leaf(2, 0, 0.8)
        assert tree.prunable_nodes().tolist() == [2]

    def test_dict_round_trip_keeps_predictions(self):
        tree = Tree.root()
        tree.split_leaf(0, 1, 0.0, -0.5, 0.25)
        tree.split_leaf(1, 0, 1.0, 0.1, 0.2)
        X = np.random.default_rng(0).normal(size=(50, 2))
        clone = Tree.from_dict(tree.to_dict())
        np.testing.assert_array_equal(clone.predict(X), tree.predict(X))

    def test_from_dict_empty_rejected(self):
        with pytest.raises(StructuralError):
            Tree.from_dict({"var": [], "cut": [], "value": []})


# ── Cutpoints and prior ───────────────────────────────────

class TestPrior:
    def test_split_probability(self):
        cfg = BartConfig(tau=0.95, gamma=2.0)
        assert split_probability(0, cfg) == pytest.approx(0.95)
        assert split_probability(2, cfg) == pytest.approx(0.95 / 9.0)

    def test_available_cuts_leave_both_children_nonempty(self):
        cuts = available_cuts(np.array([3.0, 1.0, 2.0, 2.0]), None)
        assert cuts.tolist() == [1.0, 2.0]

    def test_single_value_has_no_cut(self):
        assert available_cuts(np.array([1.0, 1.0]), None).size == 0

    def test_cut_grid_is_bounded(self):
        X = np.arange(100.0)[:, None]
        grid = make_cut_grid(X, 10)
        assert grid[0].size <= 10
        assert make_cut_grid(X, None) is None

    def test_unsplittable_root_has_zero_log_prior(self):
        cfg = BartConfig()
        X = np.ones((5, 2))
        assert log_tree_prior(Tree.root(), X, cfg) == 0.0

    def test_split_prior_frequencies(self):
        cfg = BartConfig(tau=0.95, gamma=2.0)
        nodes, splits = prior_split_counts(cfg, 20_000, np.random.default_rng(11), max_depth=8)
        for d in range(4):
            p = split_probability(d, cfg)
            se = math.sqrt(p * (1 - p) / nodes[d])
            assert splits[d] / nodes[d] == pytest.approx(p, abs=4 * se)

    @pytest.mark.slow
    def test_split_prior_frequencies_large(self):
        cfg = BartConfig(tau=0.95, gamma=2.0)
        nodes, splits = prior_split_counts(cfg, 100_000, np.random.default_rng(12), max_depth=8)
        for d in range(5):
            p = split_probability(d, cfg)
            assert splits[d] / nodes[d] == pytest.approx(p, abs=0.01)


# ── Likelihood and leaf posterior ─────────────────────────

class TestLikelihood:
    def test_root_marginal_matches_multivariate_normal(self):
        cfg = BartConfig(w=1.0, n_trees=1)
        r = np.array([0.2, -0.1, 0.4, 0.3])
        sigma2 = 0.5
        v = cfg.leaf_prior_variance
        cov = sigma2 * np.eye(4) + v * np.ones((4, 4))
        expected = multivariate_normal(mean=np.zeros(4), cov=cov).logpdf(r)
        got = log_marginal_likelihood(Tree.root(), r, sigma2, cfg, X=np.zeros((4, 1)))
        assert got == pytest.approx(expected, rel=1e-10)

    def test_split_marginal_factorizes(self):
        cfg = BartConfig(w=1.0, n_trees=1)
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        r = np.array([0.2, -0.1, 0.4, 0.3])
        tree = Tree.root()
        tree.split_leaf(0, 0, 1.0)
        left = log_marginal_likelihood(Tree.root(), r[:2], 1.0, cfg, X=X[:2])
        right = log_marginal_likelihood(Tree.root(), r[2:], 1.0, cfg, X=X[2:])
        assert log_marginal_likelihood(tree, r, 1.0, cfg, X=X) == pytest.approx(left + right)

    def test_empty_tree_rejected(self):
        tree = Tree(np.array([UNUSED]), np.zeros(1), np.zeros(1))
        with pytest.raises(StructuralError):
            log_marginal_likelihood(tree, np.zeros(2), 1.0, BartConfig(), X=np.zeros((2, 1)))

    def test_leaf_posterior_formula(self):
        cfg = BartConfig(w=1.0, n_trees=1)
        mean, var = leaf_posterior(np.array([20.0]), np.array([20.0]), 1.0, cfg)
        assert mean[0] == pytest.approx(20.0 / 24.0)
        assert var[0] == pytest.approx(1.0 / 24.0)

    def test_leaf_draws_match_conjugate_posterior(self):
        cfg = BartConfig(w=1.0, n_trees=1)
        rng = np.random.default_rng(21)
        r = np.ones(20)
        tree = Tree.root()
        ids = np.zeros(20, dtype=int)
        draws = np.empty(100_000)
        for i in range(draws.size):
            draw_leaf_values(tree, ids, r, 1.0, cfg, rng)
            draws[i] = tree.value[0]
        assert draws.mean() == pytest.approx(20.0 / 24.0, rel=0.02)
        assert draws.var() == pytest.approx(1.0 / 24.0, rel=0.02)

    def test_zero_split_probability_keeps_root(self):
        cfg = BartConfig(tau=0.0, w=1.0, n_trees=1)
        rng = np.random.default_rng(22)
        X = np.arange(20.0)[:, None]
        r = np.ones(20)
        tree = Tree.root()
        values = []
        for _ in range(5000):
            tree, ids, _ = update_tree(tree, r, 1.0, cfg, rng, X)
            values.append(tree.value[0])
        assert tree.leaves().tolist() == [0]
        assert np.mean(values) == pytest.approx(20.0 / 24.0, rel=0.02)


# ── MH moves ──────────────────────────────────────────────

def _subtrees(lo, hi, depth, max_depth):
    yield None
    if depth >= max_depth or hi <= lo:
        return
    for c in range(lo, hi):
        for left in _subtrees(lo, c, depth + 1, max_depth):
            for right in _subtrees(c + 1, hi, depth + 1, max_depth):
                yield (c, left, right)


def _build(tree, node, desc):
    if desc is None:
        return
    c, left, right = desc
    tree.split_leaf(node, 0, float(c))
    _build(tree, 2 * node + 1, left)
    _build(tree, 2 * node + 2, right)


class TestMoves:
    def test_infeasible_prune_on_root(self):
        cfg = BartConfig(move_probs=(0.0, 1.0, 0.0), n_trees=1)
        rng = np.random.default_rng(0)
        X = np.arange(5.0)[:, None]
        _, _, outcome = update_tree(Tree.root(), np.zeros(5), 1.0, cfg, rng, X)
        assert outcome.move == "prune"
        assert not outcome.feasible and not outcome.accepted

    def test_grow_on_constant_covariate_infeasible(self):
        cfg = BartConfig(move_probs=(1.0, 0.0, 0.0), n_trees=1)
        rng = np.random.default_rng(0)
        _, _, outcome = update_tree(Tree.root(), np.zeros(5), 1.0, cfg, rng, np.ones((5, 1)))
        assert not outcome.feasible

    def test_no_leaf_is_ever_empty(self):
        cfg = BartConfig(tau=0.95, gamma=1.0, w=0.5, n_trees=1)
        rng = np.random.default_rng(3)
        X = rng.normal(size=(30, 2))
        r = np.where(X[:, 0] > 0, 1.0, -1.0)
        tree = Tree.root()
        for _ in range(500):
            tree, ids, _ = update_tree(tree, r, 0.1, cfg, rng, X)
            assert set(tree.leaves().tolist()) == set(np.unique(ids).tolist())

    @pytest.mark.slow
    def test_structure_chain_matches_enumerated_posterior(self):
        cfg = BartConfig(tau=0.95, gamma=3.0, w=0.5, n_trees=1)
        X = np.arange(10.0)[:, None]
        r = np.array([-1.0, -1.0, 0.5, 0.5, 0.5, 2.0, 2.0, 2.0, 2.0, 2.0])

        log_post = {}
        for desc in _subtrees(0, 9, 0, 2):
            tree = Tree.root()
            _build(tree, 0, desc)
            lp = log_tree_prior(tree, X, cfg) + log_marginal_likelihood(tree, r, 1.0, cfg, X=X)
            log_post[tree.max_depth()] = np.logaddexp(log_post.get(tree.max_depth(), -np.inf), lp)
        z = np.logaddexp.reduce(list(log_post.values()))
        exact = {d: math.exp(lp - z) for d, lp in log_post.items()}

        rng = np.random.default_rng(2024)
        tree = Tree.root()
        for _ in range(500):
            tree, _, _ = update_tree(tree, r, 1.0, cfg, rng, X)
        counts = Counter()
        n = 20_000
        for _ in range(n):
            tree, _, _ = update_tree(tree, r, 1.0, cfg, rng, X)
            counts[min(tree.max_depth(), 3)] += 1
        tv = 0.5 * sum(abs(counts.get(d, 0) / n - exact.get(d, 0.0)) for d in range(4))
        assert tv < 0.05

    @staticmethod
    def _root_share_on_binary(n_steps: int, seed: int) -> float:
        # flat likelihood: the chain samples the tree prior, where the root variable is uniform
        cfg = BartConfig(n_trees=1)
        X = np.column_stack([np.arange(40) % 2, np.arange(40.0)])
        r = np.zeros(40)
        rng = np.random.default_rng(seed)
        tree = Tree.root()
        for _ in range(200):
            tree, _, _ = update_tree(tree, r, 1e12, cfg, rng, X)
        split = on_binary = 0
        for _ in range(n_steps):
            tree, _, _ = update_tree(tree, r, 1e12, cfg, rng, X)
            if tree.var[0] >= 0:
                split += 1
                on_binary += int(tree.var[0] == 0)
        return on_binary / split

    def test_change_move_does_not_favour_few_cutpoints(self):
        assert abs(self._root_share_on_binary(5_000, 31) - 0.5) < 0.12

    @pytest.mark.slow
    def test_root_variable_uniform_under_flat_likelihood(self):
        assert abs(self._root_share_on_binary(40_000, 32) - 0.5) < 0.05


# ── Forest and standalone fits ────────────────────────────

class TestForest:
    def test_root_only_fitted_equals_init(self):
        cfg = BartConfig(n_trees=10)
        forest = Forest.root_only(np.zeros((7, 1)), cfg, init=0.4)
        np.testing.assert_allclose(forest.fitted(), 0.4)

    def test_split_counts_per_covariate(self):
        cfg = BartConfig(n_trees=2)
        X = np.arange(30.0).reshape(10, 3)
        a, b = Tree.root(), Tree.root()
        a.split_leaf(0, 2, 10.0)
        a.split_leaf(1, 0, 3.0)
        b.split_leaf(0, 2, 20.0)
        forest = Forest([a, b], X, cfg)
        assert forest.split_counts().tolist() == [1, 0, 2]
        assert Forest.root_only(X, cfg).split_counts().tolist() == [0, 0, 0]

    def test_dict_round_trip_keeps_fits(self):
        cfg = BartConfig(n_trees=5)
        rng = np.random.default_rng(5)
        X = rng.normal(size=(40, 2))
        forest = Forest.root_only(X, cfg, name="111")
        forest.backfit(X[:, 0], 0.1, rng)
        clone = Forest.from_dict(forest.to_dict(), X, cfg)
        np.testing.assert_array_equal(clone.fitted(), forest.fitted())
        assert clone.name == "111"

    def test_from_dict_wrong_tree_count(self):
        cfg = BartConfig(n_trees=5)
        X = np.zeros((3, 1))
        data = Forest.root_only(X, cfg).to_dict()
        with pytest.raises(StructuralError):
            Forest.from_dict(data, X, BartConfig(n_trees=6))

    def test_backfit_without_active_rows_draws_from_prior(self):
        cfg = BartConfig(n_trees=3)
        rng = np.random.default_rng(6)
        X = rng.normal(size=(20, 1))
        forest = Forest.root_only(X, cfg)
        forest.backfit(np.ones(20), 1.0, rng, active=np.arange(0))
        # no data: leaves are drawn from the prior, fits stay finite everywhere
        assert np.isfinite(forest.fitted()).all()

    def test_sweep_rejects_other_configuration(self):
        X = np.zeros((4, 1))
        forest = Forest.root_only(X, BartConfig(n_trees=3))
        with pytest.raises(StructuralError):
            backfit_sweep(forest, np.zeros(4), 1.0, BartConfig(n_trees=4),
                          np.random.default_rng(0))

    def test_probit_sweep_follows_latent_sign(self):
        cfg = BartConfig(n_trees=10, w=2.0)
        rng = np.random.default_rng(8)
        X = rng.uniform(-1, 1, size=(300, 1))
        latent = np.where(X[:, 0] > 0, 1.5, -1.5) + rng.normal(size=300)
        forest = Forest.root_only(X, cfg)
        for _ in range(30):
            probit_sweep(forest, latent, cfg, rng)
        fitted = forest.fitted()
        assert fitted[X[:, 0] > 0].mean() > fitted[X[:, 0] <= 0].mean() + 0.3

    def test_fit_bart_recovers_step(self):
        cfg = BartConfig(n_trees=20, w=2.0)
        rng = np.random.default_rng(7)
        X = rng.uniform(-1, 1, size=(200, 1))
        y = np.where(X[:, 0] > 0, 2.0, 0.0) + 0.1 * rng.normal(size=200)
        X_test = np.array([[-0.5], [0.5]])
        fit = fit_bart(X, y, cfg, rng, n_sweeps=200, burn_in=100, X_test=X_test)
        assert fit.test_mean[0] == pytest.approx(0.0, abs=0.3)
        assert fit.test_mean[1] == pytest.approx(2.0, abs=0.3)


class TestScalingAndVariance:
    def test_scaler_maps_to_unit_interval(self):
        scaler = OutcomeScaler.fit(np.array([2.0, 4.0, np.nan, 6.0]))
        internal = scaler.to_internal(np.array([2.0, 6.0]))
        np.testing.assert_allclose(internal, [-0.5, 0.5])
        np.testing.assert_allclose(scaler.to_original(internal), [2.0, 6.0])

    def test_constant_outcome_scaler(self):
        scaler = OutcomeScaler.fit(np.array([3.0, 3.0]))
        assert scaler.span == 1.0

    def test_variance_draw_mean(self):
        rng = np.random.default_rng(8)
        resid = np.full(50, 0.5)
        a, b = 0.001 + 25.0, 0.001 + 0.5 * 50 * 0.25
        draws = np.array([draw_variance(resid, 0.001, 0.001, rng) for _ in range(20_000)])
        assert draws.mean() == pytest.approx(b / (a - 1.0), rel=0.02)

    def test_empty_cell_variance_is_capped(self):
        rng = np.random.default_rng(12)
        draws = np.array([draw_variance(np.empty(0), 0.001, 0.001, rng) for _ in range(2_000)])
        assert np.isfinite(draws).all()
        assert (draws > 0).all() and (draws <= SIGMA2_CEILING).all()

    def test_capped_draw_follows_truncated_law(self):
        # IG(2, 1) truncated to (0, 1]: mean of the truncated law by quadrature
        rng = np.random.default_rng(13)
        resid = np.full(2, 1.0)
        a, b = variance_posterior(resid, 1.0, 0.0)
        dist = invgamma(a, scale=b)
        mean = quad(lambda v: v * dist.pdf(v), 0, 1)[0] / dist.cdf(1.0)
        draws = np.array([draw_variance(resid, 1.0, 0.0, rng) for _ in range(20_000)])
        assert draws.max() <= 1.0
        assert draws.mean() == pytest.approx(mean, rel=0.02)
