"""Score functions with declared symmetry, and the built-in learners.

Every learner sorts its training rows into a canonical (lexicographic) order
before fitting, so refitting on any permutation of the same rows yields a
bit-identical model.  Scores are computed row by row, so the value for a
point never depends on its position inside an evaluation batch.

Orientation: larger score means more evidence against the null.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import expit, logsumexp

from .core import ConfigurationError, DomainError, TestingProblem

_CHUNK = 2048


class SymmetryClass(str, Enum):
    GENERAL = "general"
    CALIBRATION = "calibration-symmetric"
    JOINT = "joint-symmetric"
    JACKKNIFE = "jackknife-type"
    LABEL_MONOTONE = "label-monotone"

    @property
    def calibration_symmetric(self) -> bool:
        # joint symmetry is a special case of calibration symmetry
        return self in (SymmetryClass.CALIBRATION, SymmetryClass.JOINT)


@dataclass(frozen=True)
class LearnerConfig:
    """Learner name plus hyperparameters, as read from a run config."""

    name: str = "logistic"
    params: Mapping = field(default_factory=dict)

    BINARY = ("logistic", "lda")
    ONE_CLASS = ("knn", "kde")

    @classmethod
    def from_dict(cls, d) -> "LearnerConfig":
        if d is None:
            return cls()
        if isinstance(d, str):
            return cls(d)
        d = dict(d)
        name = d.pop("name", "logistic")
        return cls(name, d)

    def to_dict(self) -> dict:
        return {"name": self.name, **dict(self.params)}

    def get(self, key, default=None):
        return self.params.get(key, default)


def canonical_rows(X: np.ndarray) -> np.ndarray:
    """Rows sorted lexicographically; any row permutation maps to the same array."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] <= 1:
        return np.ascontiguousarray(X)
    order = np.lexsort(X.T[::-1])
    return np.ascontiguousarray(X[order])


def _rows(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    return np.ascontiguousarray(X)


class ScoreModel:
    """A fitted non-conformity score ``x -> S(x)``."""

    symmetry: SymmetryClass = SymmetryClass.GENERAL
    fit_spec: dict

    def __init__(self, symmetry: SymmetryClass = SymmetryClass.GENERAL, fit_spec: Optional[dict] = None):
        self.symmetry = SymmetryClass(symmetry)
        self.fit_spec = dict(fit_spec or {})

    def score(self, X) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, X) -> np.ndarray:
        return self.score(X)

    def __repr__(self):
        return f"{type(self).__name__}(symmetry={self.symmetry.value})"


class ConstantModel(ScoreModel):
    def __init__(self, value: float = 0.5, **kw):
        super().__init__(**kw)
        self.value = float(value)

    def score(self, X):
        return np.full(_rows(X).shape[0], self.value)


class FunctionModel(ScoreModel):
    """Wrap a fixed row-wise function; it has no fitted state."""

    def __init__(self, fn, symmetry=SymmetryClass.JOINT, fit_spec=None):
        super().__init__(symmetry, fit_spec)
        self.fn = fn

    def score(self, X):
        return np.asarray(self.fn(_rows(X)), dtype=float)


# ---------------------------------------------------------------- binary


class _Standardizer:
    def __init__(self, X):
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.sd = np.where(sd > 0, sd, 1.0)

    def __call__(self, X):
        return (X - self.mean) / self.sd


class LogisticModel(ScoreModel):
    """L2-regularised logistic regression fitted by full-batch gradient descent."""

    def __init__(self, weights, intercept, standardizer, **kw):
        super().__init__(**kw)
        self.weights = weights
        self.intercept = float(intercept)
        self._std = standardizer

    def decision(self, X):
        Z = self._std(_rows(X))
        return (Z * self.weights).sum(axis=1) + self.intercept

    def score(self, X):
        return expit(self.decision(X))


class LDAModel(ScoreModel):
    """Gaussian linear discriminant with pooled covariance."""

    def __init__(self, weights, intercept, **kw):
        super().__init__(**kw)
        self.weights = weights
        self.intercept = float(intercept)

    def decision(self, X):
        return (_rows(X) * self.weights).sum(axis=1) + self.intercept

    def score(self, X):
        return expit(self.decision(X))


def _fit_logistic(X0, X1, l2: float, iterations: int):
    X = np.vstack([X0, X1])
    y = np.concatenate([np.zeros(len(X0)), np.ones(len(X1))])
    std = _Standardizer(X)
    Z = std(X)
    n, d = Z.shape
    lipschitz = np.linalg.norm(Z, 2) ** 2 / (4.0 * n) + l2
    step = 1.0 / lipschitz if lipschitz > 0 else 1.0
    w = np.zeros(d)
    b = 0.0
    for _ in range(iterations):
        resid = expit(Z @ w + b) - y
        w -= step * (Z.T @ resid / n + l2 * w)
        b -= step * resid.mean()
    return w, b, std


def _fit_lda(X0, X1, ridge: float):
    mu0, mu1 = X0.mean(axis=0), X1.mean(axis=0)
    R = np.vstack([X0 - mu0, X1 - mu1])
    dof = max(1, R.shape[0] - 2)
    cov = R.T @ R / dof
    d = cov.shape[0]
    cov = cov + ridge * (np.trace(cov) / d + 1e-12) * np.eye(d)
    w = np.linalg.solve(cov, mu1 - mu0)
    b = -0.5 * float((mu0 + mu1) @ w) + math.log(len(X1) / len(X0))
    return w, b


def fit_binary(class0, class1, spec: LearnerConfig | str | None = None,
               symmetry: SymmetryClass = SymmetryClass.GENERAL) -> ScoreModel:
    """Fit a classifier whose score is the fitted probability of ``class1``.

    The caller declares the symmetry class, because it depends on which
    samples were pooled into each class, not on the learner.
    """
    spec = spec if isinstance(spec, LearnerConfig) else LearnerConfig.from_dict(spec)
    X0, X1 = _rows(class0), _rows(class1)
    if X0.shape[0] == 0 or X1.shape[0] == 0:
        raise DomainError("both classes need at least one row")
    if X0.shape[1] != X1.shape[1]:
        raise DomainError("classes have different column counts")
    X0, X1 = canonical_rows(X0), canonical_rows(X1)
    info = {"learner": spec.name, "n_class0": len(X0), "n_class1": len(X1), **dict(spec.params)}
    allrows = np.vstack([X0, X1])
    if np.all(allrows == allrows[0]):
        info["degenerate"] = True
        return ConstantModel(0.5, symmetry=symmetry, fit_spec=info)
    if spec.name == "logistic":
        w, b, std = _fit_logistic(X0, X1, float(spec.get("l2", 1e-3)), int(spec.get("iterations", 500)))
        return LogisticModel(w, b, std, symmetry=symmetry, fit_spec=info)
    if spec.name == "lda":
        w, b = _fit_lda(X0, X1, float(spec.get("ridge", 1e-6)))
        return LDAModel(w, b, symmetry=symmetry, fit_spec=info)
    raise ConfigurationError(f"unknown binary learner {spec.name!r}; choose from {LearnerConfig.BINARY}")


# ---------------------------------------------------------------- one-class


class KNNModel(ScoreModel):
    """Average Euclidean distance to the ``k`` nearest pool rows."""

    def __init__(self, pool, k, **kw):
        super().__init__(**kw)
        self.pool = pool
        self.k = int(k)

    def score(self, X):
        X = _rows(X)
        out = np.empty(X.shape[0])
        k = self.k
        for start in range(0, X.shape[0], _CHUNK):
            D = cdist(X[start : start + _CHUNK], self.pool)
            if k < D.shape[1]:
                D = np.partition(D, k - 1, axis=1)[:, :k]
            D.sort(axis=1)
            out[start : start + _CHUNK] = D.mean(axis=1)
        return out


class KDEModel(ScoreModel):
    """Negative log of a Gaussian kernel density estimate (unnormalised)."""

    def __init__(self, pool, bandwidth, **kw):
        super().__init__(**kw)
        self.pool = pool
        self.bandwidth = float(bandwidth)

    def score(self, X):
        X = _rows(X)
        out = np.empty(X.shape[0])
        h2 = 2.0 * self.bandwidth**2
        for start in range(0, X.shape[0], _CHUNK):
            D2 = cdist(X[start : start + _CHUNK], self.pool, "sqeuclidean")
            E = np.sort(-D2 / h2, axis=1)
            out[start : start + _CHUNK] = -logsumexp(E, axis=1)
        return out


def median_pairwise_distance(X) -> float:
    X = canonical_rows(_rows(X))
    if X.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(X)))
    return med if med > 0 else 1.0


def fit_one_class(pool, spec: LearnerConfig | str | None = None,
                  symmetry: SymmetryClass = SymmetryClass.GENERAL) -> ScoreModel:
    """Fit a one-class non-conformity score on ``pool`` (larger = more anomalous)."""
    spec = spec if isinstance(spec, LearnerConfig) else LearnerConfig.from_dict(spec or "knn")
    P = canonical_rows(_rows(pool))
    if P.shape[0] < 2:
        raise DomainError("a one-class pool needs at least two rows")
    info = {"learner": spec.name, "pool_size": P.shape[0]}
    if spec.name == "knn":
        k = spec.get("k")
        # default k = ceil(sqrt(pool size)), capped so it never covers the whole pool
        k = min(int(math.ceil(math.sqrt(P.shape[0]))), P.shape[0] - 1) if k is None else int(k)
        if k < 1 or k >= P.shape[0]:
            raise DomainError(f"k={k} must satisfy 1 <= k < pool size ({P.shape[0]})")
        info["k"] = k
        return KNNModel(P, k, symmetry=symmetry, fit_spec=info)
    if spec.name == "kde":
        h = spec.get("bandwidth")
        h = median_pairwise_distance(P) if h is None else float(h)
        if h <= 0:
            raise DomainError("bandwidth must be positive")
        info["bandwidth"] = h
        return KDEModel(P, h, symmetry=symmetry, fit_spec=info)
    raise ConfigurationError(f"unknown one-class learner {spec.name!r}; choose from {LearnerConfig.ONE_CLASS}")


def fit_learner(class0, class1, spec: LearnerConfig, symmetry=SymmetryClass.GENERAL) -> ScoreModel:
    """Dispatch on learner kind: one-class learners only see ``class0``."""
    if spec.name in LearnerConfig.ONE_CLASS:
        return fit_one_class(class0, spec, symmetry)
    return fit_binary(class0, class1, spec, symmetry)


# ---------------------------------------------------------------- integrative


def lower_counts(reference_sorted: np.ndarray, values) -> np.ndarray:
    """``#{r in reference : r <= v}`` for each value."""
    return np.searchsorted(reference_sorted, values, side="right")


def split_indices(indices, train_fraction: float, seed) -> tuple:
    """Seeded shuffle split into (train, calibration), both non-empty when len >= 2."""
    idx = np.asarray(indices, dtype=int)
    if not 0 < train_fraction < 1:
        raise ConfigurationError("split ratios must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(idx.size)
    n_train = int(round(train_fraction * idx.size))
    n_train = min(max(n_train, 1), idx.size - 1) if idx.size >= 2 else idx.size
    return np.sort(idx[perm[:n_train]]), np.sort(idx[perm[n_train:]])


class IntegrativeModel(ScoreModel):
    """Ratio of two rank functions built from one-class scores.

    With ``s0`` and ``s1`` non-conformity scores (larger = less typical of the
    training rows), ``u0(x)`` is the fraction of the null reference scores at
    or below ``s0(x)`` and ``u1(x)`` the (+1 smoothed) fraction of the
    non-null reference scores at or below ``s1(x)``.  Equivalently these are
    the upper-tail ranks of the conformity scores ``-s0`` and ``-s1``.  The
    ratio ``u0 / u1`` is large for points that look atypical of the nulls
    but typical of the non-nulls.
    """

    def __init__(self, s0, ref0, s1, ref1, smooth1: bool = True, **kw):
        super().__init__(**kw)
        self.s0, self.s1 = s0, s1
        self.ref0 = np.sort(np.asarray(ref0, dtype=float))
        self.ref1 = np.sort(np.asarray(ref1, dtype=float))
        self.smooth1 = smooth1

    def u0(self, X):
        # ref0 already holds the test point's own score, so its size is n0 + 1
        return lower_counts(self.ref0, self.s0(X)) / self.ref0.size

    def u1(self, X):
        c = lower_counts(self.ref1, self.s1(X))
        return (c + (1 if self.smooth1 else 0)) / (self.ref1.size + 1)

    def score(self, X):
        return self.u0(X) / self.u1(X)


@dataclass
class IntegrativeComponents:
    """One-class models shared by every per-test integrative score.

    ``s0`` is fitted on ``null_pool`` and ranked against ``null_ref`` plus the
    test point; ``s1`` is fitted on ``t1`` and ranked against ``ref1``.
    """

    s0: ScoreModel
    s1: ScoreModel
    null_ref: np.ndarray  # global indices whose s0 scores form the null reference
    ref1_scores: np.ndarray
    s0_scores: np.ndarray  # s0 evaluated at every global index
    t1: np.ndarray
    smooth1: bool = True

    def for_test(self, j: int) -> IntegrativeModel:
        ref0 = np.concatenate([self.s0_scores[self.null_ref], self.s0_scores[[j]]])
        model = IntegrativeModel(
            self.s0, ref0, self.s1, self.ref1_scores, self.smooth1,
            symmetry=SymmetryClass.CALIBRATION,
            fit_spec={"kind": "integrative", "test_index": int(j), "t1": self.t1.tolist()},
        )
        return model


def integrative_components(problem: TestingProblem, split_seed, spec: LearnerConfig | str | None = None,
                           train_fraction: float = 0.5) -> IntegrativeComponents:
    """Fit ``s0`` on D0 and Du pooled, ``s1`` on the training half of D1."""
    spec = spec if isinstance(spec, LearnerConfig) else LearnerConfig.from_dict(spec or "knn")
    if problem.n1 < 2:
        raise ConfigurationError("the integrative score needs at least two non-null labeled samples")
    Z = problem.features
    t1, _ = split_indices(problem.L1, train_fraction, split_seed)
    pool0 = np.concatenate([problem.L0, problem.U])
    s0 = fit_one_class(Z[pool0], spec, SymmetryClass.JOINT)
    s1 = fit_one_class(Z[t1], clip_k(spec, len(t1)), SymmetryClass.GENERAL)
    return IntegrativeComponents(
        s0=s0, s1=s1, null_ref=problem.L0, ref1_scores=s1(Z[t1]), s0_scores=s0(Z), t1=t1,
    )


def clip_k(spec: LearnerConfig, pool_size: int) -> LearnerConfig:
    """Lower an explicit kNN ``k`` that does not fit a small training pool."""
    if spec.name == "knn" and spec.get("k") is not None and int(spec.get("k")) >= pool_size:
        params = dict(spec.params)
        params["k"] = max(1, pool_size - 1)
        return LearnerConfig("knn", params)
    return spec


def fit_integrative(problem: TestingProblem, j: int, split_seed, spec=None,
                    train_fraction: float = 0.5) -> IntegrativeModel:
    """Per-test integrative score for test index ``j`` (global)."""
    problem.local(j)
    return integrative_components(problem, split_seed, spec, train_fraction).for_test(j)


# ---------------------------------------------------------------- localized


class LocalizedModel(ScoreModel):
    """Kernel-weighted empirical CDF of a base score over reference points."""

    def __init__(self, base, ref_rows, bandwidth, **kw):
        super().__init__(**kw)
        self.base = base
        self.ref_rows = canonical_rows(ref_rows)
        self.ref_scores = base(self.ref_rows)
        self.bandwidth = float(bandwidth)

    def kernel(self, X):
        return np.exp(-cdist(_rows(X), self.ref_rows, "sqeuclidean") / (2.0 * self.bandwidth**2))

    def score(self, X):
        X = _rows(X)
        H = self.kernel(X)
        ind = (self.base(X)[:, None] >= self.ref_scores[None, :]).astype(float)
        mass = H.sum(axis=1)
        weighted = (H * ind).sum(axis=1)
        out = np.empty(X.shape[0])
        ok = mass > 0
        out[ok] = weighted[ok] / mass[ok]
        if not np.all(ok):
            self.fit_spec["unweighted_fallback"] = True
            out[~ok] = ind[~ok].mean(axis=1)
        return out


def fit_localized(problem: TestingProblem, j: int, bandwidth: float, spec=None,
                  train: Optional[np.ndarray] = None, calibration: Optional[np.ndarray] = None,
                  base: Optional[ScoreModel] = None) -> LocalizedModel:
    """Localized score for test ``j``: base score fitted on the training part of D0,
    kernel weights over the calibration rows plus ``X_j``."""
    if bandwidth <= 0:
        raise DomainError("bandwidth must be positive")
    problem.local(j)
    if train is None or calibration is None:
        train, calibration = split_indices(problem.L0, 0.5, 0)
    Z = problem.features
    if base is None:
        base = fit_one_class(Z[train], spec or "knn")
    ref = Z[np.concatenate([np.asarray(calibration, dtype=int), [j]])]
    return LocalizedModel(base, ref, bandwidth, symmetry=SymmetryClass.CALIBRATION,
                          fit_spec={"kind": "localized", "test_index": int(j), "bandwidth": bandwidth})


# ---------------------------------------------------------------- enhanced AdaDetect


def fit_enhanced_adadetect(problem: TestingProblem, j: int, spec=None) -> ScoreModel:
    """Classifier of D0 plus ``X_j`` against the remaining test rows."""
    jl = problem.local(j)
    rest = np.delete(problem.test_features, jl, axis=0)
    class0 = np.vstack([problem.null_features, problem.test_features[[jl]]])
    if rest.shape[0] == 0:
        raise ConfigurationError("needs at least two test samples")
    return fit_binary(class0, rest, spec or "lda", SymmetryClass.CALIBRATION)


# ---------------------------------------------------------------- oracle ratio


class GaussianRatioModel(ScoreModel):
    """Posterior non-null probability for N(0, I) against N(mu, I)."""

    def __init__(self, mu, pi, **kw):
        super().__init__(**kw)
        self.mu = np.asarray(mu, dtype=float)
        self.pi = float(pi)
        self._offset = math.log((1 - self.pi) / self.pi) - 0.5 * float(self.mu @ self.mu)

    def score(self, X):
        return expit((_rows(X) * self.mu).sum(axis=1) + self._offset)


def oracle_gaussian_ratio(mu, pi: float) -> GaussianRatioModel:
    if not 0 < pi < 1:
        raise DomainError("the null proportion must lie strictly between 0 and 1")
    return GaussianRatioModel(mu, pi, symmetry=SymmetryClass.JOINT, fit_spec={"kind": "oracle"})


# ---------------------------------------------------------------- label-monotone


class LabelMonotoneModel(ScoreModel):
    """``S(x, y)`` with ``S(x, 0) = base(x)`` and ``S(x, 1) = base(x) - shift``.

    The default infinite shift scores every non-null-labeled point at -inf.
    """

    def __init__(self, base: ScoreModel, shift: float = math.inf, symmetry=SymmetryClass.LABEL_MONOTONE):
        super().__init__(symmetry, {"kind": "label-monotone", "shift": shift, "base": base.fit_spec})
        if shift < 0:
            raise DomainError("shift must be non-negative to keep S(x,0) >= S(x,1)")
        self.base = base
        self.shift = float(shift)

    def score(self, X, labels=None):
        s = self.base(X).astype(float)
        if labels is None:
            return s
        labels = np.asarray(labels, dtype=int)
        if np.isinf(self.shift):
            return np.where(labels == 1, -np.inf, s)
        return s - self.shift * (labels == 1)
