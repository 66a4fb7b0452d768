"""Data model shared by every other module.

All samples live in one global index space ``[0, n + m)`` ordered as
null-labeled rows, non-null-labeled rows, then unlabeled test rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np


class ECOTError(Exception):
    """Base class for all package errors."""


class DomainError(ECOTError, ValueError):
    """An argument lies outside the domain of an operation."""


class ConfigurationError(ECOTError, ValueError):
    """A method or learner is configured inconsistently with the data."""


class ContractViolation(ECOTError):
    """A score model does not honour the symmetry it declares."""


class BudgetExceeded(ECOTError):
    """A brute-force enumeration would exceed its permitted size."""


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 1)
    if arr.ndim != 2:
        raise DomainError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains missing or non-finite values")
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TestingProblem:
    """The three datasets of a conformal testing problem.

    ``null_features`` (D0) and ``nonnull_features`` (D1) are labeled;
    ``test_features`` (Du) is unlabeled.  Index sets are derived, never stored.
    """

    __test__ = False  # not a pytest class

    null_features: np.ndarray
    nonnull_features: np.ndarray
    test_features: np.ndarray

    def __post_init__(self):
        x0 = _as_matrix(self.null_features, "null_features")
        xu = _as_matrix(self.test_features, "test_features")
        d = x0.shape[1]
        x1 = np.asarray(self.nonnull_features, dtype=float)
        if x1.size == 0:
            x1 = np.empty((0, d))
        x1 = _as_matrix(x1, "nonnull_features")
        if x0.shape[0] < 1:
            raise DomainError("at least one null-labeled sample is required")
        if xu.shape[0] < 1:
            raise DomainError("at least one test sample is required")
        if not (x1.shape[1] == d and xu.shape[1] == d):
            raise DomainError(
                f"column counts differ: D0 has {d}, D1 has {x1.shape[1]}, Du has {xu.shape[1]}"
            )
        object.__setattr__(self, "null_features", x0)
        object.__setattr__(self, "nonnull_features", x1)
        object.__setattr__(self, "test_features", xu)

    @property
    def n0(self) -> int:
        return self.null_features.shape[0]

    @property
    def n1(self) -> int:
        return self.nonnull_features.shape[0]

    @property
    def n(self) -> int:
        return self.n0 + self.n1

    @property
    def m(self) -> int:
        return self.test_features.shape[0]

    @property
    def d(self) -> int:
        return self.null_features.shape[1]

    @property
    def size(self) -> int:
        return self.n + self.m

    @property
    def L0(self) -> np.ndarray:
        return np.arange(0, self.n0)

    @property
    def L1(self) -> np.ndarray:
        return np.arange(self.n0, self.n)

    @property
    def U(self) -> np.ndarray:
        return np.arange(self.n, self.n + self.m)

    @property
    def features(self) -> np.ndarray:
        """All rows stacked in global index order."""
        return np.vstack([self.null_features, self.nonnull_features, self.test_features])

    def rows(self, indices) -> np.ndarray:
        return self.features[np.asarray(indices, dtype=int)]

    def with_features(self, features: np.ndarray) -> "TestingProblem":
        """Same layout, new rows (used to build permuted datasets)."""
        features = np.asarray(features, dtype=float)
        if features.shape[0] != self.size:
            raise DomainError("row count does not match the problem layout")
        return TestingProblem(
            features[: self.n0], features[self.n0 : self.n], features[self.n :]
        )

    def without_nonnull(self) -> "TestingProblem":
        return TestingProblem(self.null_features, np.empty((0, self.d)), self.test_features)

    def local(self, global_index: int) -> int:
        """Position of a test index within ``U``."""
        if not self.n <= global_index < self.size:
            raise DomainError(f"index {global_index} is not a test index")
        return int(global_index - self.n)


class LabelSet(str, Enum):
    NULL = "null"
    LABELED = "labeled"


@dataclass(frozen=True)
class CalibrationSet:
    """Ordered, duplicate-free calibration indices drawn from a permitted label set."""

    indices: tuple

    def __init__(self, indices: Iterable[int], problem: Optional[TestingProblem] = None,
                 allowed: LabelSet = LabelSet.NULL):
        idx = tuple(int(i) for i in indices)
        if len(set(idx)) != len(idx):
            raise DomainError("calibration indices contain duplicates")
        if problem is not None:
            limit = problem.n0 if allowed is LabelSet.NULL else problem.n
            bad = [i for i in idx if not 0 <= i < limit]
            if bad:
                raise DomainError(f"calibration indices {bad[:5]} are outside the {allowed.value} set")
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=int)


class Reduction(str, Enum):
    FULL_PERMUTATION = "full-permutation"
    CALIBRATION_SYMMETRIC = "calibration-symmetric"
    JOINT_SYMMETRIC = "joint-symmetric"
    JACKKNIFE = "jackknife"
    PSEUDO_LABEL = "pseudo-label"


@dataclass(frozen=True)
class PValueVector:
    values: np.ndarray
    reduction_tag: Reduction

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(v <= 0) or np.any(v > 1):
            raise DomainError("conformal p-values must lie in (0, 1]")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "reduction_tag", Reduction(self.reduction_tag))

    def __len__(self):
        return len(self.values)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True)
class RejectionReport:
    """Outcome of a testing procedure.

    ``rejected`` and ``r_init`` hold global test indices.  ``r_j_sizes`` is
    indexed by test position (``j - offset``); it is ``None`` for plain BH runs.
    """

    rejected: frozenset
    r_init: frozenset
    r_j_sizes: Optional[np.ndarray] = None
    pruned: bool = False
    null_prop_estimate: Optional[float] = None
    seed: Optional[int] = None
    offset: int = 0
    pvalues: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None
    selected: Optional[np.ndarray] = None
    fits: int = 0
    trace: Optional[object] = None

    def __post_init__(self):
        rej = frozenset(int(i) for i in self.rejected)
        init = frozenset(int(i) for i in self.r_init)
        if not rej <= init:
            raise DomainError("rejected must be a subset of r_init")
        if not self.pruned and rej != init:
            raise DomainError("an unpruned report must reject exactly r_init")
        object.__setattr__(self, "rejected", rej)
        object.__setattr__(self, "r_init", init)

    def positions(self) -> list:
        """Sorted rejected test positions (0-based within the test set)."""
        return sorted(i - self.offset for i in self.rejected)

    def __len__(self):
        return len(self.rejected)


@dataclass(frozen=True)
class MonteCarloReport:
    replicates: int
    fdr_mean: float
    fdr_se: float
    power_mean: float
    power_se: float
    per_replicate: tuple = field(default_factory=tuple)

    @classmethod
    def from_pairs(cls, pairs: Sequence) -> "MonteCarloReport":
        pairs = tuple((float(f), float(t)) for f, t in pairs)
        if not pairs:
            raise DomainError("at least one replicate is required")
        arr = np.array(pairs)
        r = len(pairs)
        se = (lambda x: float(np.std(x, ddof=1) / math.sqrt(r)) if r > 1 else 0.0)
        return cls(
            replicates=r,
            fdr_mean=float(np.mean(arr[:, 0])),
            fdr_se=se(arr[:, 0]),
            power_mean=float(np.mean(arr[:, 1])),
            power_se=se(arr[:, 1]),
            per_replicate=pairs,
        )

    def to_dict(self, include_replicates: bool = False) -> dict:
        out = {
            "replicates": self.replicates,
            "fdr_mean": self.fdr_mean,
            "fdr_se": self.fdr_se,
            "power_mean": self.power_mean,
            "power_se": self.power_se,
        }
        if include_replicates:
            out["per_replicate"] = [list(p) for p in self.per_replicate]
        return out


def fdp_and_power(rejected, true_labels, offset: int = 0) -> tuple:
    """False discovery proportion and true positive proportion.

    ``rejected`` holds global indices, ``true_labels`` is the 0/1 vector over
    the test set and ``offset`` is the global index of the first test row.
    """
    labels = np.asarray(true_labels, dtype=int)
    m = labels.shape[0]
    pos = np.fromiter((int(i) - offset for i in rejected), dtype=int)
    if pos.size and (pos.min() < 0 or pos.max() >= m):
        raise DomainError("rejection set contains an index outside the test set")
    if np.unique(pos).size != pos.size:
        raise DomainError("rejection set contains duplicate indices")
    hits = labels[pos]
    false = int(np.sum(hits == 0))
    true = int(np.sum(hits == 1))
    fdp = false / max(1, pos.size)
    tpp = true / max(1, int(np.sum(labels == 1)))
    return fdp, tpp


def derive_seed(seed, *keys) -> int:
    """Independent 64-bit seed for a named sub-stream of ``seed``."""
    # the key count is mixed in because SeedSequence ignores trailing zeros
    ss = np.random.SeedSequence([int(seed), len(keys), *[int(k) for k in keys]])
    return int(ss.generate_state(1, np.uint64)[0])
