"""Fit-the-fit effect moderation: CART on posterior-mean CSACE, projected subgroup posteriors."""

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import statsmodels.api as sm
from sklearn.tree import DecisionTreeRegressor

from core.errors import DataError
from core.estimands import LikelySet, MembershipPosterior
from core.models import CovariateSpec, TrialDataset
from core.utils import summarize_samples

log = logging.getLogger("sacebart.subgroup")


@dataclass
class RegressionTree:
    columns: List[int]  # covariate indices of the fitted design, in design order
    model: Optional[DecisionTreeRegressor]  # None when root-only
    r2: float
    min_leaf: int
    max_depth: int
    min_improvement: float
    flags: List[str] = field(default_factory=list)
    _leaf_nodes: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=int))

    @property
    def n_leaves(self) -> int:
        return int(self._leaf_nodes.size)

    @property
    def is_root_only(self) -> bool:
        return self.model is None or self.model.tree_.node_count == 1

    def apply(self, X_full: np.ndarray) -> np.ndarray:
        """Leaf index (0..n_leaves-1, left to right) of each row of the full covariate matrix."""
        if self.is_root_only:
            return np.zeros(X_full.shape[0], dtype=int)
        nodes = self.model.apply(X_full[:, self.columns])
        return np.searchsorted(self._leaf_nodes, nodes)

    def to_rules(self, spec: CovariateSpec, y: Optional[np.ndarray] = None,
                 X_full: Optional[np.ndarray] = None) -> Dict[str, Any]:
        """Nested rules with thresholds on the natural covariate scale (x <= threshold goes left)."""
        leaf_means = None
        if y is not None and X_full is not None:
            ids = self.apply(X_full)
            leaf_means = {k: float(y[ids == k].mean()) for k in range(self.n_leaves) if (ids == k).any()}
        if self.is_root_only:
            return {"leaf": 0, "n": None if y is None else int(y.size),
                    "mean": None if leaf_means is None else leaf_means.get(0)}
        t = self.model.tree_

        def node(i: int) -> Dict[str, Any]:
            if t.children_left[i] == -1:
                k = int(np.searchsorted(self._leaf_nodes, i))
                return {"leaf": k, "n": int(t.n_node_samples[i]),
                        "mean": None if leaf_means is None else leaf_means.get(k)}
            col = self.columns[int(t.feature[i])]
            return {
                "covariate": spec.names[col],
                "threshold": spec.to_original_scale(col, float(t.threshold[i])),
                "left": node(int(t.children_left[i])),
                "right": node(int(t.children_right[i])),
            }

        return node(0)


def _r2(y: np.ndarray, fitted: np.ndarray) -> float:
    sst = float(((y - y.mean()) ** 2).sum())
    if sst == 0:
        return 0.0
    return 1.0 - float(((y - fitted) ** 2).sum()) / sst


def fit_cart(y: np.ndarray, X_full: np.ndarray, columns: Sequence[int], min_leaf: int = 20,
             max_depth: int = 4, min_improvement: float = 0.01) -> RegressionTree:
    """Greedy SSE-minimizing CART of y on X_full[:, columns].

    A split is kept only if it lowers the total SSE by at least min_improvement * SST.
    """
    y = np.asarray(y, dtype=float)
    columns = list(columns)
    if y.size < 2 * min_leaf:
        raise DataError(f"CART: {y.size} unites, au moins {2 * min_leaf} requises")
    base = dict(columns=columns, min_leaf=min_leaf, max_depth=max_depth,
                min_improvement=min_improvement)
    if np.ptp(y) == 0 or not columns:
        flags = ["constant_response"] if np.ptp(y) == 0 else []
        if flags:
            log.warning("CART: reponse constante, arbre reduit a la racine.")
        return RegressionTree(model=None, r2=0.0, flags=flags, **base)
    model = DecisionTreeRegressor(
        min_samples_leaf=min_leaf, max_depth=max_depth,
        min_impurity_decrease=min_improvement * float(y.var()), random_state=0,
    )
    model.fit(X_full[:, columns], y)
    leaf_nodes = np.flatnonzero(model.tree_.children_left == -1)
    tree = RegressionTree(model=model, r2=0.0, _leaf_nodes=leaf_nodes, **base)
    ids = tree.apply(X_full)
    means = np.array([y[ids == k].mean() for k in range(tree.n_leaves)])
    tree.r2 = _r2(y, means[ids])
    return tree


# =========================
# Stepwise selection and projection
# =========================

@dataclass
class SubgroupReport:
    tree: RegressionTree
    selected: List[str]
    r2_trajectory: List[float]
    leaf_posteriors: List[Dict[str, Any]] = field(default_factory=list)
    pairwise: List[Dict[str, Any]] = field(default_factory=list)
    leaf_draws: Optional[np.ndarray] = None  # draws x leaves
    linear: List[Dict[str, Any]] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)
    rules: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "selected": self.selected,
            "r2_trajectory": self.r2_trajectory,
            "final_r2": self.tree.r2,
            "tree": self.rules,
            "leaf_posteriors": self.leaf_posteriors,
            "pairwise": self.pairwise,
            "linear_summary": self.linear,
            "flags": self.flags + self.tree.flags,
            "params": {"min_leaf": self.tree.min_leaf, "max_depth": self.tree.max_depth,
                       "min_improvement": self.tree.min_improvement},
        }


def stepwise_fit_the_fit(csace: np.ndarray, likely: LikelySet, dataset: TrialDataset,
                         min_leaf: int = 20, max_depth: int = 4, min_improvement: float = 0.01,
                         stop_gain: float = 0.01) -> SubgroupReport:
    """Forward selection of covariates by CART R^2 until the gain drops below stop_gain."""
    y = csace[:, likely.indices].mean(axis=0)
    X = dataset.covariates[likely.indices]
    names = dataset.covariate_spec.names
    selected: List[int] = []
    trajectory: List[float] = []
    current = 0.0
    while len(selected) < X.shape[1]:
        best_col, best_r2 = None, -np.inf
        for col in range(X.shape[1]):
            if col in selected:
                continue
            r2 = fit_cart(y, X, selected + [col], min_leaf, max_depth, min_improvement).r2
            if r2 > best_r2:
                best_col, best_r2 = col, r2
        if best_r2 - current < stop_gain:
            break
        selected.append(best_col)
        trajectory.append(best_r2)
        current = best_r2
        log.info("Fit-the-fit: ajout de %s (R2=%.4f).", names[best_col], best_r2)

    tree = fit_cart(y, X, selected, min_leaf, max_depth, min_improvement)
    flags = [] if selected else ["no_moderator"]
    if not selected:
        log.info("Fit-the-fit: aucune covariable n'ameliore le R2, arbre racine.")
    report = SubgroupReport(tree=tree, selected=[names[c] for c in selected],
                            r2_trajectory=trajectory, flags=flags)
    report.rules = tree.to_rules(dataset.covariate_spec, y, X)
    if selected:
        report.linear = linear_summary(y, X, selected, names)
    return report


def project_posterior(csace: np.ndarray, likely: LikelySet, tree: RegressionTree,
                      dataset: TrialDataset, level: float = 0.95) -> Dict[str, Any]:
    """Per-draw leaf means of the CSACE, their summaries and every pairwise leaf difference."""
    vals = csace[:, likely.indices]
    leaf_of = tree.apply(dataset.covariates[likely.indices])
    leaves = [k for k in range(tree.n_leaves) if (leaf_of == k).any()]
    leaf_draws = np.column_stack([vals[:, leaf_of == k].mean(axis=1) for k in leaves])
    posteriors = []
    for j, k in enumerate(leaves):
        entry = summarize_samples(leaf_draws[:, j], level)
        entry.update(leaf=k, n_units=int((leaf_of == k).sum()))
        posteriors.append(entry)
    pairwise = []
    for (ja, a), (jb, b) in combinations(enumerate(leaves), 2):
        entry = summarize_samples(leaf_draws[:, ja] - leaf_draws[:, jb], level)
        entry.update(leaf_a=a, leaf_b=b)
        pairwise.append(entry)
    return {"leaf_posteriors": posteriors, "pairwise": pairwise, "leaf_draws": leaf_draws,
            "leaf_of": leaf_of}


def membership_by_leaf(csace: np.ndarray, likely: LikelySet, membership: MembershipPosterior,
                       tree: RegressionTree, dataset: TrialDataset,
                       cutoff: float = 0.9) -> pd.DataFrame:
    """Per likely unit: leaf, posterior-mean CSACE and P(S=11); attrs hold per-leaf low-membership counts."""
    leaf_of = tree.apply(dataset.covariates[likely.indices])
    p11 = membership.p11[likely.indices]
    table = pd.DataFrame({
        "id": dataset.ids[likely.indices],
        "leaf": leaf_of,
        "csace_mean": csace[:, likely.indices].mean(axis=0),
        "p11": p11,
    })
    table.attrs["low_membership"] = {int(k): int((p11[leaf_of == k] < cutoff).sum())
                                     for k in np.unique(leaf_of)}
    return table


def linear_summary(y: np.ndarray, X: np.ndarray, columns: Sequence[int], names: Sequence[str],
                   top: int = 5) -> List[Dict[str, Any]]:
    """OLS of y on the standardized selected covariates, coefficients ranked by |value|."""
    cols = [c for c in columns if X[:, c].std() > 0]
    if not cols:
        return []
    Z = (X[:, cols] - X[:, cols].mean(axis=0)) / X[:, cols].std(axis=0)
    res = sm.OLS(y, sm.add_constant(Z, has_constant="add")).fit()
    rows = [{"covariate": names[c], "coefficient": float(res.params[i + 1]),
             "std_error": float(res.bse[i + 1])} for i, c in enumerate(cols)]
    rows.sort(key=lambda r: -abs(r["coefficient"]))
    return rows[:top]


def run_subgroups(csace: np.ndarray, likely: LikelySet, dataset: TrialDataset,
                  membership: Optional[MembershipPosterior] = None, **params) -> SubgroupReport:
    """Stepwise selection, then the posterior projection onto the final tree."""
    report = stepwise_fit_the_fit(csace, likely, dataset, **params)
    projection = project_posterior(csace, likely, report.tree, dataset)
    report.leaf_posteriors = projection["leaf_posteriors"]
    report.pairwise = projection["pairwise"]
    report.leaf_draws = projection["leaf_draws"]
    if membership is not None:
        table = membership_by_leaf(csace, likely, membership, report.tree, dataset)
        for entry in report.leaf_posteriors:
            entry["low_membership"] = table.attrs["low_membership"].get(entry["leaf"], 0)
    return report
