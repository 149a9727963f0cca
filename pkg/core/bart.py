"""Sum-of-trees prior and its Metropolis-within-Gibbs primitives.

Trees are stored heap-style: node i has children 2i+1 (rule X_k <= c) and
2i+2. `var[i]` is the split covariate of an internal node, -1 for a terminal
node and -2 for an unused slot.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import invgamma

from core.errors import StructuralError
from core.models import BartConfig

log = logging.getLogger("sacebart.bart")

LEAF = -1
UNUSED = -2
FORMAT_VERSION = 1
MOVES = ("grow", "prune", "change")
SIGMA2_CEILING = 1.0  # internal outcome scale, outcomes lie in [-0.5, 0.5]


def split_probability(depth: int, config: BartConfig) -> float:
    """Prior probability that a node at `depth` is internal: tau (1 + depth)^-gamma."""
    if depth < 0:
        raise ValueError(f"profondeur negative: {depth}")
    return config.tau * (1.0 + depth) ** (-config.gamma)


def node_depth(node: int) -> int:
    return (node + 1).bit_length() - 1


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


# =========================
# Tree
# =========================

class Tree:
    def __init__(self, var: np.ndarray, cut: np.ndarray, value: np.ndarray):
        self.var = var
        self.cut = cut
        self.value = value

    @classmethod
    def root(cls, value: float = 0.0) -> "Tree":
        return cls(np.array([LEAF]), np.array([0.0]), np.array([float(value)]))

    def copy(self) -> "Tree":
        return Tree(self.var.copy(), self.cut.copy(), self.value.copy())

    @property
    def n_slots(self) -> int:
        return int(self.var.shape[0])

    def _ensure_capacity(self, node: int) -> None:
        if node < self.n_slots:
            return
        size = self.n_slots
        while size <= node:
            size = 2 * size + 1
        grow = size - self.n_slots
        self.var = np.concatenate([self.var, np.full(grow, UNUSED)])
        self.cut = np.concatenate([self.cut, np.zeros(grow)])
        self.value = np.concatenate([self.value, np.zeros(grow)])

    def is_leaf(self, node: int) -> bool:
        return node < self.n_slots and self.var[node] == LEAF

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.var == LEAF)

    def internal_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.var >= 0)

    def prunable_nodes(self) -> np.ndarray:
        """Internal nodes whose two children are terminal."""
        nodes = self.internal_nodes()
        return np.array([n for n in nodes if self.is_leaf(2 * n + 1) and self.is_leaf(2 * n + 2)],
                        dtype=int)

    def max_depth(self) -> int:
        return max(node_depth(int(n)) for n in self.leaves())

    def subtree_nodes(self, node: int) -> List[int]:
        out, stack = [], [node]
        while stack:
            n = stack.pop()
            out.append(n)
            if self.var[n] >= 0:
                stack.extend((2 * n + 2, 2 * n + 1))
        return sorted(out)

    def split_leaf(self, node: int, var: int, cut: float,
                   left_value: float = 0.0, right_value: float = 0.0) -> None:
        if not self.is_leaf(node):
            raise StructuralError(f"split_leaf: le noeud {node} n'est pas terminal")
        self._ensure_capacity(2 * node + 2)
        self.var[node] = var
        self.cut[node] = cut
        for child, val in ((2 * node + 1, left_value), (2 * node + 2, right_value)):
            self.var[child] = LEAF
            self.cut[child] = 0.0
            self.value[child] = val

    def prune(self, node: int, value: float = 0.0) -> None:
        left, right = 2 * node + 1, 2 * node + 2
        if not (self.var[node] >= 0 and self.is_leaf(left) and self.is_leaf(right)):
            raise StructuralError(f"prune: le noeud {node} n'a pas deux feuilles")
        self.var[left] = self.var[right] = UNUSED
        self.var[node] = LEAF
        self.cut[node] = 0.0
        self.value[node] = value

    def set_rule(self, node: int, var: int, cut: float) -> None:
        if self.var[node] < 0:
            raise StructuralError(f"set_rule: le noeud {node} n'est pas interne")
        self.var[node] = var
        self.cut[node] = cut

    def route(self, X: np.ndarray) -> np.ndarray:
        """Terminal node reached by each row of X."""
        if self.n_slots == 0 or self.var[0] == UNUSED:
            raise StructuralError("arbre vide")
        internal = self.var >= 0
        if internal.any() and int(self.var[internal].max()) >= X.shape[1]:
            raise StructuralError(
                f"var_index {int(self.var[internal].max())} hors limites (K={X.shape[1]})")
        idx = np.zeros(X.shape[0], dtype=int)
        rows = np.arange(X.shape[0])
        while True:
            v = self.var[idx]
            moving = v >= 0
            if not moving.any():
                return idx
            r = rows[moving]
            n = idx[moving]
            go_left = X[r, v[moving]] <= self.cut[n]
            idx[moving] = np.where(go_left, 2 * n + 1, 2 * n + 2)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.route(X)]

    def to_dict(self) -> Dict[str, Any]:
        used = np.flatnonzero(self.var != UNUSED)
        last = int(used.max()) + 1 if used.size else 0
        return {
            "var": self.var[:last].tolist(),
            "cut": self.cut[:last].tolist(),
            "value": self.value[:last].tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Tree":
        tree = cls(np.asarray(data["var"], dtype=int),
                   np.asarray(data["cut"], dtype=float),
                   np.asarray(data["value"], dtype=float))
        if tree.n_slots == 0:
            raise StructuralError("arbre serialise vide")
        return tree


# =========================
# Cutpoints and tree prior
# =========================

def make_cut_grid(X: np.ndarray, n_cutpoints: Optional[int]) -> Optional[List[np.ndarray]]:
    """Per-covariate candidate cutpoints; None means every observed value at the node."""
    if n_cutpoints is None:
        return None
    grid = []
    for k in range(X.shape[1]):
        u = np.unique(X[:, k])
        if u.size > n_cutpoints:
            u = np.unique(u[np.linspace(0, u.size - 1, n_cutpoints).round().astype(int)])
        grid.append(u)
    return grid


def available_cuts(col: np.ndarray, grid_col: Optional[np.ndarray]) -> np.ndarray:
    """Cutpoints leaving both children non-empty for the values `col` reaching a node."""
    if col.size < 2:
        return np.empty(0)
    if grid_col is None:
        return np.unique(col)[:-1]
    lo, hi = col.min(), col.max()
    return grid_col[(grid_col >= lo) & (grid_col < hi)]


def splittable_vars(X_node: np.ndarray, grid: Optional[List[np.ndarray]]) -> np.ndarray:
    if X_node.shape[0] < 2:
        return np.empty(0, dtype=int)
    lo, hi = X_node.min(axis=0), X_node.max(axis=0)
    if grid is None:
        return np.flatnonzero(hi > lo)
    ok = [np.searchsorted(g, hi[k], "left") > np.searchsorted(g, lo[k], "left")
          for k, g in enumerate(grid)]
    return np.flatnonzero(ok)


def rule_log_prob(X_node: np.ndarray, var: int, cut: float,
                  grid: Optional[List[np.ndarray]]) -> float:
    """Log prior probability of rule (var, cut) at a node: uniform variable, then uniform cutpoint."""
    n_vars = splittable_vars(X_node, grid).size
    if n_vars == 0:
        return -math.inf
    cuts = available_cuts(X_node[:, var], None if grid is None else grid[var])
    if cuts.size == 0 or not np.isin(cut, cuts):
        return -math.inf
    return -math.log(n_vars) - math.log(cuts.size)


def _terminal_log_prior(depth: int, X_node: np.ndarray, config: BartConfig,
                        grid: Optional[List[np.ndarray]]) -> float:
    # a node that cannot be split has prior splitting probability zero
    if splittable_vars(X_node, grid).size == 0:
        return 0.0
    return _log(1.0 - split_probability(depth, config))


def subtree_log_prior(tree: Tree, node: int, X: np.ndarray, leaf_ids: np.ndarray,
                      config: BartConfig, grid: Optional[List[np.ndarray]] = None) -> float:
    """Log tree prior restricted to the subtree rooted at `node`, given the rows routed there."""
    total = 0.0
    for n in tree.subtree_nodes(node):
        X_n = X[_in_subtree(leaf_ids, n)]
        d = node_depth(n)
        if tree.var[n] >= 0:
            total += _log(split_probability(d, config))
            total += rule_log_prob(X_n, int(tree.var[n]), float(tree.cut[n]), grid)
        else:
            total += _terminal_log_prior(d, X_n, config, grid)
        if total == -math.inf:
            return total
    return total


def log_tree_prior(tree: Tree, X: np.ndarray, config: BartConfig,
                   grid: Optional[List[np.ndarray]] = None) -> float:
    return subtree_log_prior(tree, 0, X, tree.route(X), config, grid)


def _in_subtree(leaf_ids: np.ndarray, node: int) -> np.ndarray:
    anc = leaf_ids.copy()
    deeper = anc > node
    while deeper.any():
        anc[deeper] = (anc[deeper] - 1) // 2
        deeper = anc > node
    return anc == node


def sample_prior_tree(config: BartConfig, rng: np.random.Generator, max_depth: int = 12) -> Tree:
    """Structure-only draw from the depth prior (every node treated as splittable)."""
    tree = Tree.root()
    frontier = [0]
    while frontier:
        node = frontier.pop()
        d = node_depth(node)
        if d < max_depth and rng.random() < split_probability(d, config):
            tree.split_leaf(node, 0, 0.0)
            frontier.extend((2 * node + 1, 2 * node + 2))
    return tree


def prior_split_counts(config: BartConfig, n_draws: int, rng: np.random.Generator,
                       max_depth: int = 12) -> Tuple[np.ndarray, np.ndarray]:
    """Per depth: number of nodes visited and number of them split, over prior draws."""
    nodes = np.zeros(max_depth + 1, dtype=np.int64)
    splits = np.zeros(max_depth + 1, dtype=np.int64)
    for _ in range(n_draws):
        tree = sample_prior_tree(config, rng, max_depth)
        for n in np.flatnonzero(tree.var != UNUSED):
            d = node_depth(int(n))
            nodes[d] += 1
            splits[d] += tree.var[n] >= 0
    return nodes, splits


# =========================
# Likelihood and leaf updates
# =========================

def _leaf_log_ml(n: np.ndarray, s: np.ndarray, ss: np.ndarray,
                 sigma2: float, v: float) -> np.ndarray:
    """Normal-normal marginal log-likelihood per leaf (n rows, sum s, sum of squares ss)."""
    denom = sigma2 + n * v
    return (-0.5 * n * math.log(2.0 * math.pi * sigma2)
            + 0.5 * np.log(sigma2 / denom)
            - ss / (2.0 * sigma2)
            + v * s * s / (2.0 * sigma2 * denom))


def _leaf_stats(leaf_ids: np.ndarray, residuals: np.ndarray, size: int):
    n = np.bincount(leaf_ids, minlength=size).astype(float)
    s = np.bincount(leaf_ids, weights=residuals, minlength=size)
    ss = np.bincount(leaf_ids, weights=residuals * residuals, minlength=size)
    return n, s, ss


def log_marginal_likelihood(tree: Tree, partial_residuals: np.ndarray, sigma2: float,
                            config: BartConfig, X: Optional[np.ndarray] = None,
                            leaf_ids: Optional[np.ndarray] = None) -> float:
    """Integrated likelihood with leaf values marginalized under N(0, (4 w^2 J)^-1)."""
    if tree.n_slots == 0 or tree.var[0] == UNUSED:
        raise StructuralError("arbre vide")
    if leaf_ids is None:
        if X is None:
            raise ValueError("X ou leaf_ids requis")
        leaf_ids = tree.route(X)
    n, s, ss = _leaf_stats(leaf_ids, partial_residuals, tree.n_slots)
    leaves = tree.leaves()
    return float(_leaf_log_ml(n[leaves], s[leaves], ss[leaves], sigma2,
                              config.leaf_prior_variance).sum())


def leaf_posterior(n: np.ndarray, s: np.ndarray, sigma2: float, config: BartConfig):
    """Conjugate leaf posterior: mean (s/sigma2)/prec, variance 1/prec, prec = n/sigma2 + 4w^2J."""
    prec = n / sigma2 + 1.0 / config.leaf_prior_variance
    return (s / sigma2) / prec, 1.0 / prec


def draw_leaf_values(tree: Tree, leaf_ids: np.ndarray, residuals: np.ndarray,
                     sigma2: float, config: BartConfig, rng: np.random.Generator) -> None:
    leaves = tree.leaves()
    n, s, _ = _leaf_stats(leaf_ids, residuals, tree.n_slots)
    mean, var = leaf_posterior(n[leaves], s[leaves], sigma2, config)
    tree.value[leaves] = mean + np.sqrt(var) * rng.standard_normal(leaves.size)


# =========================
# Metropolis-Hastings tree moves
# =========================

@dataclass
class MoveOutcome:
    move: str
    feasible: bool
    accepted: bool


def _node_log_ml(mask: np.ndarray, residuals: np.ndarray, sigma2: float, v: float) -> float:
    r = residuals[mask]
    return float(_leaf_log_ml(np.array([r.size], dtype=float), np.array([r.sum()]),
                              np.array([r @ r]), sigma2, v)[0])


def _propose_grow(tree, X, leaf_ids, residuals, sigma2, config, grid, rng):
    leaves = tree.leaves()
    node = int(leaves[rng.integers(leaves.size)])
    in_node = leaf_ids == node
    X_node = X[in_node]
    vars_ok = splittable_vars(X_node, grid)
    if vars_ok.size == 0:
        return None
    var = int(vars_ok[rng.integers(vars_ok.size)])
    cuts = available_cuts(X_node[:, var], None if grid is None else grid[var])
    cut = float(cuts[rng.integers(cuts.size)])

    proposed = tree.copy()
    proposed.split_leaf(node, var, cut)
    go_left = X[:, var] <= cut
    left, right = in_node & go_left, in_node & ~go_left
    new_ids = leaf_ids.copy()
    new_ids[left] = 2 * node + 1
    new_ids[right] = 2 * node + 2

    d = node_depth(node)
    v = config.leaf_prior_variance
    p_grow, p_prune, _ = config.move_probs
    log_lik = (_node_log_ml(left, residuals, sigma2, v) + _node_log_ml(right, residuals, sigma2, v)
               - _node_log_ml(in_node, residuals, sigma2, v))
    log_prior = (_log(split_probability(d, config))
                 + _terminal_log_prior(d + 1, X[left], config, grid)
                 + _terminal_log_prior(d + 1, X[right], config, grid)
                 - _terminal_log_prior(d, X_node, config, grid))
    log_trans = (_log(p_prune) - _log(p_grow)
                 + math.log(leaves.size) - math.log(proposed.prunable_nodes().size))
    return proposed, new_ids, log_lik + log_prior + log_trans


def _propose_prune(tree, X, leaf_ids, residuals, sigma2, config, grid, rng):
    prunable = tree.prunable_nodes()
    if prunable.size == 0:
        return None
    node = int(prunable[rng.integers(prunable.size)])
    left, right = 2 * node + 1, 2 * node + 2
    in_left, in_right = leaf_ids == left, leaf_ids == right
    in_node = in_left | in_right

    proposed = tree.copy()
    proposed.prune(node)
    new_ids = leaf_ids.copy()
    new_ids[in_node] = node

    d = node_depth(node)
    v = config.leaf_prior_variance
    p_grow, p_prune, _ = config.move_probs
    log_lik = (_node_log_ml(in_node, residuals, sigma2, v)
               - _node_log_ml(in_left, residuals, sigma2, v)
               - _node_log_ml(in_right, residuals, sigma2, v))
    log_prior = (_terminal_log_prior(d, X[in_node], config, grid)
                 - _log(split_probability(d, config))
                 - _terminal_log_prior(d + 1, X[in_left], config, grid)
                 - _terminal_log_prior(d + 1, X[in_right], config, grid))
    log_trans = (_log(p_grow) - _log(p_prune)
                 + math.log(prunable.size) - math.log(proposed.leaves().size))
    return proposed, new_ids, log_lik + log_prior + log_trans


def _propose_change(tree, X, leaf_ids, residuals, sigma2, config, grid, rng):
    internal = tree.internal_nodes()
    if internal.size == 0:
        return None
    node = int(internal[rng.integers(internal.size)])
    in_node = _in_subtree(leaf_ids, node)
    X_node = X[in_node]
    vars_ok = splittable_vars(X_node, grid)
    if vars_ok.size == 0:
        return None
    var = int(vars_ok[rng.integers(vars_ok.size)])
    cuts = available_cuts(X_node[:, var], None if grid is None else grid[var])
    cut = float(cuts[rng.integers(cuts.size)])

    proposed = tree.copy()
    proposed.set_rule(node, var, cut)
    new_ids = leaf_ids.copy()
    new_ids[in_node] = proposed.route(X_node)

    sub_leaves = [n for n in proposed.subtree_nodes(node) if proposed.var[n] == LEAF]
    counts = np.bincount(new_ids[in_node], minlength=proposed.n_slots)
    if (counts[sub_leaves] == 0).any():
        return proposed, new_ids, -math.inf

    old_prior = subtree_log_prior(tree, node, X, leaf_ids, config, grid)
    new_prior = subtree_log_prior(proposed, node, X, new_ids, config, grid)
    if new_prior == -math.inf:
        return proposed, new_ids, -math.inf
    if old_prior == -math.inf:
        return proposed, new_ids, math.inf

    # reverse proposal draws the old rule from the old variable's cutpoints at this node
    old_var = int(tree.var[node])
    old_cuts = available_cuts(X_node[:, old_var], None if grid is None else grid[old_var])
    log_trans = math.log(cuts.size) - math.log(old_cuts.size)

    v = config.leaf_prior_variance
    old_leaves = [n for n in tree.subtree_nodes(node) if tree.var[n] == LEAF]
    n0, s0, ss0 = _leaf_stats(leaf_ids[in_node], residuals[in_node], tree.n_slots)
    n1, s1, ss1 = _leaf_stats(new_ids[in_node], residuals[in_node], proposed.n_slots)
    log_lik = (_leaf_log_ml(n1[sub_leaves], s1[sub_leaves], ss1[sub_leaves], sigma2, v).sum()
               - _leaf_log_ml(n0[old_leaves], s0[old_leaves], ss0[old_leaves], sigma2, v).sum())
    return proposed, new_ids, float(log_lik) + new_prior - old_prior + log_trans


_PROPOSALS = {"grow": _propose_grow, "prune": _propose_prune, "change": _propose_change}


def update_tree(tree: Tree, partial_residuals: np.ndarray, sigma2: float, config: BartConfig,
                rng: np.random.Generator, X: np.ndarray, leaf_ids: Optional[np.ndarray] = None,
                grid: Optional[List[np.ndarray]] = None) -> Tuple[Tree, np.ndarray, MoveOutcome]:
    """One grow/prune/change MH step on `tree`, then a Gibbs draw of every leaf value.

    `X`, `partial_residuals` and `leaf_ids` cover the rows the tree is fit on. Infeasible
    proposals count as rejections.
    """
    if leaf_ids is None:
        leaf_ids = tree.route(X)
    move = MOVES[int(rng.choice(3, p=config.move_probs))]
    proposal = _PROPOSALS[move](tree, X, leaf_ids, partial_residuals, sigma2, config, grid, rng)
    if proposal is None:
        outcome = MoveOutcome(move, feasible=False, accepted=False)
        new_tree, new_ids = tree.copy(), leaf_ids
    else:
        proposed, proposed_ids, log_ratio = proposal
        u = rng.random()
        if math.isnan(log_ratio):
            accepted = False
        else:
            accepted = log_ratio >= 0 or u < math.exp(log_ratio)
        outcome = MoveOutcome(move, feasible=True, accepted=accepted)
        if accepted:
            new_tree, new_ids = proposed, proposed_ids
        else:
            new_tree, new_ids = tree.copy(), leaf_ids
    draw_leaf_values(new_tree, new_ids, partial_residuals, sigma2, config, rng)
    return new_tree, new_ids, outcome


# =========================
# Forest
# =========================

class Forest:
    """J trees fit jointly over the rows of X; caches per-tree fits for every row."""

    def __init__(self, trees: List[Tree], X: np.ndarray, config: BartConfig, name: str = ""):
        self.trees = trees
        self.X = X
        self.config = config
        self.name = name
        self.grid = make_cut_grid(X, config.n_cutpoints)
        self.leaf_of = np.stack([t.route(X) for t in trees])
        self.fits = np.stack([t.value[ids] for t, ids in zip(trees, self.leaf_of)])

    @classmethod
    def root_only(cls, X: np.ndarray, config: BartConfig, init: float = 0.0,
                  name: str = "") -> "Forest":
        trees = [Tree.root(init / config.n_trees) for _ in range(config.n_trees)]
        return cls(trees, X, config, name)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def fitted(self) -> np.ndarray:
        return self.fits.sum(axis=0)

    def predict(self, x: np.ndarray) -> float:
        return float(self.predict_matrix(np.atleast_2d(x))[0])

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        out = np.zeros(X.shape[0])
        for t in self.trees:
            out += t.predict(X)
        return out

    def split_counts(self) -> np.ndarray:
        """Internal nodes splitting on each covariate, summed over trees."""
        counts = np.zeros(self.X.shape[1], dtype=np.int64)
        for t in self.trees:
            counts += np.bincount(t.var[t.internal_nodes()].astype(np.int64),
                                  minlength=counts.size)
        return counts

    def backfit(self, response: np.ndarray, sigma2: float, rng: np.random.Generator,
                active: Optional[np.ndarray] = None, monitor=None) -> "Forest":
        """Update each tree once, in index order, against its partial residuals on `active` rows."""
        rows = np.arange(self.X.shape[0]) if active is None else np.asarray(active)
        X_act = self.X[rows]
        total = self.fits.sum(axis=0)
        for j, tree in enumerate(self.trees):
            partial = response[rows] - (total[rows] - self.fits[j, rows])
            new_tree, _, outcome = update_tree(
                tree, partial, sigma2, self.config, rng, X_act,
                leaf_ids=self.leaf_of[j, rows], grid=self.grid)
            self.trees[j] = new_tree
            self.leaf_of[j] = new_tree.route(self.X)
            new_fit = new_tree.value[self.leaf_of[j]]
            total += new_fit - self.fits[j]
            self.fits[j] = new_fit
            if monitor is not None:
                monitor.record(self.name, outcome)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "name": self.name,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], X: np.ndarray, config: BartConfig) -> "Forest":
        if data.get("format_version") != FORMAT_VERSION:
            raise StructuralError(f"format de foret non supporte: {data.get('format_version')}")
        trees = [Tree.from_dict(t) for t in data["trees"]]
        if len(trees) != config.n_trees:
            raise StructuralError(f"{len(trees)} arbres lus, {config.n_trees} attendus")
        return cls(trees, X, config, data.get("name", ""))


def backfit_sweep(forest: Forest, response: np.ndarray, sigma2: float, config: BartConfig,
                  rng: np.random.Generator, active: Optional[np.ndarray] = None,
                  monitor=None) -> Forest:
    if config is not forest.config and config != forest.config:
        raise StructuralError("backfit_sweep: configuration differente de celle de la foret")
    return forest.backfit(response, sigma2, rng, active=active, monitor=monitor)


def probit_sweep(forest: Forest, latent: np.ndarray, config: BartConfig,
                 rng: np.random.Generator, active: Optional[np.ndarray] = None,
                 monitor=None) -> Forest:
    """Backfitting sweep on probit latents; the error variance is fixed at 1."""
    return backfit_sweep(forest, latent, 1.0, config, rng, active=active, monitor=monitor)


# =========================
# Outcome scaling, variance draws, standalone fits
# =========================

@dataclass(frozen=True)
class OutcomeScaler:
    """Affine map of outcomes onto [-0.5, 0.5]."""
    lo: float
    hi: float

    @classmethod
    def fit(cls, y: np.ndarray) -> "OutcomeScaler":
        y = y[np.isfinite(y)]
        if y.size == 0:
            return cls(0.0, 1.0)
        lo, hi = float(y.min()), float(y.max())
        if hi <= lo:
            hi = lo + 1.0
        return cls(lo, hi)

    @property
    def span(self) -> float:
        return self.hi - self.lo

    def to_internal(self, y: np.ndarray) -> np.ndarray:
        return (y - self.lo) / self.span - 0.5

    def to_original(self, m: np.ndarray) -> np.ndarray:
        return (m + 0.5) * self.span + self.lo

    def to_dict(self) -> Dict[str, float]:
        return {"lo": self.lo, "hi": self.hi}


def variance_posterior(residuals: np.ndarray, a0: float, b0: float) -> Tuple[float, float]:
    """Shape and rate of the inverse-gamma full conditional of a residual variance."""
    return a0 + 0.5 * residuals.size, b0 + 0.5 * float(residuals @ residuals)


def draw_variance(residuals: np.ndarray, a0: float, b0: float, rng: np.random.Generator) -> float:
    """Inverse-gamma draw truncated to ``(0, SIGMA2_CEILING]``.

    An empty cell draws from the truncated prior.
    """
    a, b = variance_posterior(residuals, a0, b0)
    dist = invgamma(a, scale=b)
    top = float(dist.cdf(SIGMA2_CEILING))
    if not top > 0.0:
        return SIGMA2_CEILING
    u = (1.0 - rng.random()) * top
    return float(min(dist.ppf(u), SIGMA2_CEILING))


@dataclass
class BartFit:
    forest: Forest
    sigma2: float  # last draw, internal scale
    scaler: OutcomeScaler
    sigma2_draws: np.ndarray = field(default_factory=lambda: np.empty(0))
    test_mean: Optional[np.ndarray] = None  # posterior mean prediction, original scale


def fit_bart(X: np.ndarray, y: np.ndarray, config: BartConfig, rng: np.random.Generator,
             n_sweeps: int = 200, burn_in: int = 100, a0: float = 0.001, b0: float = 0.001,
             active: Optional[np.ndarray] = None, X_test: Optional[np.ndarray] = None,
             scaler: Optional[OutcomeScaler] = None, name: str = "", monitor=None) -> BartFit:
    """Standalone BART regression of y on X (rows `active` only), sigma2 updated each sweep."""
    rows = np.arange(X.shape[0]) if active is None else np.asarray(active)
    scaler = scaler or OutcomeScaler.fit(y[rows])
    y_int = np.zeros(X.shape[0])
    y_int[rows] = scaler.to_internal(y[rows])
    forest = Forest.root_only(X, config, name=name)
    sigma2 = float(np.var(y_int[rows])) if rows.size > 1 else 1.0
    sigma2 = sigma2 if sigma2 > 0 else 1e-4
    draws = []
    test_sum = None if X_test is None else np.zeros(X_test.shape[0])
    kept = 0
    for it in range(n_sweeps):
        forest.backfit(y_int, sigma2, rng, active=rows, monitor=monitor)
        sigma2 = draw_variance(y_int[rows] - forest.fitted()[rows], a0, b0, rng)
        if it >= burn_in:
            draws.append(sigma2)
            kept += 1
            if test_sum is not None:
                test_sum += forest.predict_matrix(X_test)
    test_mean = None
    if test_sum is not None and kept:
        test_mean = scaler.to_original(test_sum / kept)
    log.debug("fit_bart %s: %d sweeps, sigma2=%.4g", name or "-", n_sweeps, sigma2)
    return BartFit(forest=forest, sigma2=sigma2, scaler=scaler,
                   sigma2_draws=np.asarray(draws), test_mean=test_mean)
