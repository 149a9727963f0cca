"""One-sided truncated normal draws with unit variance.

Inverse-CDF when the bound sits within TAIL_SWITCH standard deviations of the
mean, exponential-proposal rejection (Robert, 1995) further out.
"""

import numpy as np
from scipy.stats import norm

TAIL_SWITCH = 4.0


def _exp_rejection(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Standard normal truncated to [a, inf) for a > 0, accept-reject from a shifted exponential."""
    alpha = (a + np.sqrt(a * a + 4.0)) / 2.0
    out = np.empty_like(a)
    todo = np.arange(a.shape[0])
    # acceptance probability is bounded below by ~0.76 for a >= 0
    while todo.size:
        z = a[todo] + rng.exponential(size=todo.size) / alpha[todo]
        accept = rng.random(todo.size) <= np.exp(-0.5 * (z - alpha[todo]) ** 2)
        out[todo[accept]] = z[accept]
        todo = todo[~accept]
    return out


def _std_lower(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Standard normal truncated to [a, inf)."""
    out = np.empty_like(a)
    tail = a > TAIL_SWITCH
    body = ~tail
    if body.any():
        u = rng.random(int(body.sum()))
        # isf keeps precision when sf(a) is small; clip guards u == 0
        p = np.clip(u * norm.sf(a[body]), np.finfo(float).tiny, None)
        out[body] = np.maximum(norm.isf(p), a[body])
    if tail.any():
        out[tail] = _exp_rejection(a[tail], rng)
    return out


def sample_lower(mean, lower: float, rng: np.random.Generator) -> np.ndarray:
    """Draw X ~ N(mean, 1) conditioned on X >= lower."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    return mean + _std_lower(lower - mean, rng)


def sample_upper(mean, upper: float, rng: np.random.Generator) -> np.ndarray:
    """Draw X ~ N(mean, 1) conditioned on X < upper."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    x = mean - _std_lower(mean - upper, rng)
    # the upper bound is open
    return np.minimum(x, np.nextafter(upper, -np.inf))


def sample_by_sign(mean, positive: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Truncate to [0, inf) where `positive` is True and to (-inf, 0) elsewhere."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    positive = np.asarray(positive, dtype=bool)
    out = np.empty_like(mean)
    if positive.any():
        out[positive] = sample_lower(mean[positive], 0.0, rng)
    if (~positive).any():
        out[~positive] = sample_upper(mean[~positive], 0.0, rng)
    return out
