"""Multiple-testing engines: BH, conditional calibration and null-proportion estimates."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ConfigurationError, DomainError, RejectionReport
from .pvalues import ScoreTable, modified_matrix


@dataclass(frozen=True)
class BHConfig:
    alpha: float = 0.1
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise DomainError("alpha must lie in (0, 1)")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(w <= 0):
                raise DomainError("BH weights must be positive")
            object.__setattr__(self, "weights", w)


def bh(pvalues, alpha: float) -> np.ndarray:
    """Benjamini-Hochberg step-up rule.

    Returns the sorted positions ``{j : p_j <= alpha k* / m}`` with
    ``k* = max{k : p_(k) <= alpha k / m}``.  Values above one are allowed
    (they arise after null-proportion weighting) and simply never pass.

    Examples
    --------
    >>> bh([0.01, 0.02, 0.5, 0.9], 0.1).tolist()
    [0, 1]
    """
    p = np.asarray(pvalues, dtype=float)
    if p.ndim != 1:
        raise DomainError("p-values must form a vector")
    if not 0 < alpha <= 1:
        raise DomainError("alpha must lie in (0, 1]")
    if np.any(np.isnan(p)) or np.any(p < 0):
        raise DomainError("p-values must be non-negative numbers")
    m = p.size
    if m == 0:
        return np.empty(0, dtype=int)
    ps = np.sort(p)
    ks = np.arange(1, m + 1)
    passing = np.nonzero(ps <= alpha * ks / m)[0]
    if passing.size == 0:
        return np.empty(0, dtype=int)
    k_star = int(passing[-1]) + 1
    return np.nonzero(p <= alpha * k_star / m)[0]


def bh_report(pvalues, alpha: float, offset: int = 0, **extra) -> RejectionReport:
    rej = frozenset(int(i) + offset for i in bh(pvalues, alpha))
    return RejectionReport(rej, rej, offset=offset, pvalues=np.asarray(pvalues, dtype=float), **extra)


@dataclass(frozen=True)
class PruningTrace:
    """Uniforms and thresholds of the pruning pass (indexed by test position)."""

    epsilons: np.ndarray
    threshold_ratio: np.ndarray
    final_kept: frozenset


def _weights(pi, m: int) -> np.ndarray:
    if pi is None:
        return np.ones(m)
    w = np.broadcast_to(np.asarray(pi, dtype=float), (m,)).copy()
    if np.any(w <= 0) or np.any(~np.isfinite(w)):
        raise DomainError("null-proportion estimates must be positive and finite")
    return w


def r_sizes(modified: np.ndarray, alpha: float, pi=None) -> np.ndarray:
    """``|R_j| = |BH(pi_j * p~^(j), alpha)|`` for every row of the modified matrix."""
    mod = np.asarray(modified, dtype=float)
    m = mod.shape[0]
    if mod.shape != (m, m):
        raise DomainError("modified p-values must form an m x m matrix")
    w = _weights(pi, m)
    return np.array([bh(w[j] * mod[j], alpha).size for j in range(m)], dtype=int)


def conditional_calibration(pvalues, modified, alpha: float, seed=None, pi=None,
                            offset: int = 0, **extra) -> RejectionReport:
    """Conditional calibration with randomized pruning.

    Parameters
    ----------
    pvalues : array (m,)
        Conformal p-values ``p_j``.
    modified : array (m, m)
        Row ``j`` holds the modified p-values ``p~^(j)`` (zero on the diagonal).
    alpha : float
        Target FDR level.
    seed : int or SeedSequence, optional
        Seeds the pruning uniforms.  One uniform is drawn per test point, in
        ascending test order, and only when pruning is needed.
    pi : float or array (m,), optional
        Null-proportion estimates multiplying both ``p_j`` and ``p~^(j)``.
    offset : int
        Global index of the first test point.
    """
    p = np.asarray(pvalues, dtype=float)
    m = p.size
    if not 0 < alpha < 1:
        raise DomainError("alpha must lie in (0, 1)")
    w = _weights(pi, m)
    sizes = r_sizes(modified, alpha, w)
    init = np.nonzero(w * p <= alpha * sizes / m)[0]
    pi_est = None if pi is None else (float(w[0]) if np.ndim(pi) == 0 else None)
    common = dict(r_j_sizes=sizes, seed=_seed_int(seed), offset=offset, pvalues=p,
                  null_prop_estimate=pi_est, **extra)
    init_set = frozenset(int(j) + offset for j in init)
    if init.size == 0 or np.all(sizes[init] <= init.size):
        return RejectionReport(init_set, init_set, pruned=False, **common)
    eps = np.random.default_rng(seed).random(m)
    ratio = sizes[init] / init.size
    kept = init[bh(eps[init] * ratio, 1.0)]
    kept_set = frozenset(int(j) + offset for j in kept)
    trace = PruningTrace(eps, ratio, kept_set)
    return RejectionReport(kept_set, init_set, pruned=True, trace=trace, **common)


def _seed_int(seed):
    if seed is None:
        return None
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return None


# ---------------------------------------------------------------- null proportion


def storey_null_proportion(calib_scores, test_scores, j_position: int, lam: float = 0.5) -> float:
    """Storey-type estimate for hypothesis ``j`` from an auxiliary joint-symmetric score.

    Auxiliary modified p-values over the other test points use the reduced
    rank formula; the estimate ``(1 + #{l != j : p~_l >= lam}) / (m (1 - lam))``
    is not clipped at one.
    """
    return float(storey_null_proportions(calib_scores, test_scores, lam)[j_position])


def storey_null_proportions(calib_scores, test_scores, lam: float = 0.5) -> np.ndarray:
    if not 0 < lam < 1:
        raise DomainError("lambda must lie in (0, 1)")
    mod = modified_matrix(ScoreTable(np.asarray(calib_scores, dtype=float),
                                     np.asarray(test_scores, dtype=float)))
    m = mod.shape[0]
    big = mod >= lam
    np.fill_diagonal(big, False)
    return (1 + big.sum(axis=1)) / (m * (1 - lam))


def label_assisted_null_proportion(c0_size: int, c1_size: int) -> float:
    """``(1 + |C0|) / (1 + |C0| + |C1|)``."""
    if c0_size < 0 or c1_size < 0:
        raise DomainError("set sizes must be non-negative")
    if c0_size == 0 and c1_size == 0:
        raise ConfigurationError("need at least one labeled calibration point")
    return (1 + c0_size) / (1 + c0_size + c1_size)
