"""Conformal p-values: the full-permutation definition and its reduced forms.

Reduced forms are computed from rank counts, so every p-value is an exact
integer divided by ``|C| + 1``.  The full-permutation form averages over all
arrangements of the free indices ``C + {j}`` and is capped at a small number
of free indices.

A *score factory* is a callable ``factory(problem, j) -> ScoreModel`` that
builds ``S^(j)`` from the rows of ``problem``.  The full-permutation routines
call it once per arrangement with the rows of ``C + {j}`` permuted.
"""
from __future__ import annotations

import inspect
import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import (
    BudgetExceeded,
    CalibrationSet,
    ContractViolation,
    DomainError,
    PValueVector,
    Reduction,
    TestingProblem,
)
from .scorers import ScoreModel, SymmetryClass

ENUMERATION_CAP = 8

ScoreFactory = Callable[[TestingProblem, int], ScoreModel]


def _calib_array(C) -> np.ndarray:
    if isinstance(C, CalibrationSet):
        return C.array()
    return np.asarray(list(C), dtype=int)


def upper_count(sorted_ref: np.ndarray, values) -> np.ndarray:
    """``#{r : r >= v}`` for each ``v`` given an ascending reference array."""
    return sorted_ref.size - np.searchsorted(sorted_ref, values, side="left")


# ---------------------------------------------------------------- reduced forms


def pvalue_reduced_calibration_symmetric(scores, j_position: int) -> float:
    """Rank p-value of ``scores[j_position]`` among all entries of ``scores``.

    ``scores`` holds ``S^(j)`` evaluated on ``C + {j}``; ties count against the
    test point, and the self term always contributes.

    Examples
    --------
    >>> pvalue_reduced_calibration_symmetric([0.1, 0.5, 0.9, 0.5], 3)
    0.75
    """
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise DomainError("need at least the test point's own score")
    return int(np.sum(s[j_position] <= s)) / s.size


def pvalue_joint_symmetric(model: ScoreModel, problem: TestingProblem, C, j: int) -> float:
    """Basic conformal p-value with one shared score function."""
    if model.symmetry is not SymmetryClass.JOINT:
        raise ContractViolation(f"expected a joint-symmetric model, got {model.symmetry.value}")
    c = _calib_array(C)
    s = model(problem.rows(np.concatenate([c, [j]])))
    return pvalue_reduced_calibration_symmetric(s, c.size)


def modified_pvalues_reduced(scores_u, calib_scores, j_position: int, plus_one: bool = False) -> np.ndarray:
    """Modified p-values ``p~_l^(j)`` over the test set under one function ``S^(j)``.

    Parameters
    ----------
    scores_u : array (m,)
        ``S^(j)`` at every test point.
    calib_scores : array (|C|,)
        ``S^(j)`` on the calibration set (the test point's own score is taken
        from ``scores_u``).
    j_position : int
        Position of ``j`` within the test set.
    plus_one : bool
        Add one to numerator and denominator (the stabilised variant).
    """
    su = np.asarray(scores_u, dtype=float)
    ref = np.sort(np.asarray(calib_scores, dtype=float))
    counts = upper_count(ref, su) + (su[j_position] >= su)
    out = (counts + 1) / (ref.size + 2) if plus_one else counts / (ref.size + 1)
    out[j_position] = 0.0
    return out


@dataclass(frozen=True)
class ScoreTable:
    """Scores needed by the reduced path, for every test position ``j``.

    ``calib[j, i] = S^(j)(X_{C_i})`` and ``test[j, l] = S^(j)(X_{U_l})``.  When
    one function is shared by every ``j`` the leading axis is dropped.
    """

    calib: np.ndarray
    test: np.ndarray
    symmetry: SymmetryClass = SymmetryClass.CALIBRATION

    def __post_init__(self):
        calib = np.asarray(self.calib, dtype=float)
        test = np.asarray(self.test, dtype=float)
        if test.ndim not in (1, 2) or calib.ndim != test.ndim:
            raise DomainError("calib and test must both be shared (1-D) or per-test (2-D)")
        if test.ndim == 2 and (test.shape[0] != test.shape[1] or calib.shape[0] != test.shape[0]):
            raise DomainError("per-test tables need shapes (m, |C|) and (m, m)")
        object.__setattr__(self, "calib", calib)
        object.__setattr__(self, "test", test)
        object.__setattr__(self, "symmetry", SymmetryClass(self.symmetry))

    @property
    def shared(self) -> bool:
        return self.test.ndim == 1

    @property
    def m(self) -> int:
        return self.test.shape[-1]

    @property
    def n_calib(self) -> int:
        return self.calib.shape[-1]

    def calib_row(self, j: int) -> np.ndarray:
        return self.calib if self.shared else self.calib[j]

    def test_row(self, j: int) -> np.ndarray:
        return self.test if self.shared else self.test[j]

    @classmethod
    def from_shared(cls, model: ScoreModel, problem: TestingProblem, C) -> "ScoreTable":
        c = _calib_array(C)
        return cls(model(problem.rows(c)) if c.size else np.empty(0), model(problem.test_features),
                   SymmetryClass.JOINT if model.symmetry is SymmetryClass.JOINT else model.symmetry)

    @classmethod
    def from_models(cls, models, problem: TestingProblem, C) -> "ScoreTable":
        """One model per test position, in test order."""
        c = _calib_array(C)
        rows_c = problem.rows(c)
        calib = np.empty((problem.m, c.size))
        test = np.empty((problem.m, problem.m))
        for jl, model in enumerate(models):
            if not model.symmetry.calibration_symmetric:
                raise ContractViolation(
                    f"model for test {jl} is tagged {model.symmetry.value}, not calibration-symmetric")
            if c.size:
                calib[jl] = model(rows_c)
            test[jl] = model(problem.test_features)
        return cls(calib, test, SymmetryClass.CALIBRATION)


def reduced_pvalues(table: ScoreTable) -> PValueVector:
    """``p_j = (1 + #{i in C : S^(j)(X_i) >= S^(j)(X_j)}) / (|C| + 1)`` for every ``j``."""
    c = table.n_calib
    if table.shared:
        counts = upper_count(np.sort(table.calib), table.test)
    else:
        counts = np.array([upper_count(np.sort(table.calib[j]), table.test[j, j]) for j in range(table.m)])
    tag = Reduction.JOINT_SYMMETRIC if table.symmetry is SymmetryClass.JOINT else Reduction.CALIBRATION_SYMMETRIC
    return PValueVector((counts + 1) / (c + 1), tag)


def modified_matrix(table: ScoreTable, plus_one: bool = False) -> np.ndarray:
    """Row ``j`` holds ``p~^(j)`` over the test set; the diagonal is zero."""
    m = table.m
    out = np.empty((m, m))
    if table.shared:
        ref = np.sort(table.calib)
        base = upper_count(ref, table.test)
        su = table.test
        counts = base[None, :] + (su[:, None] >= su[None, :])
        out = (counts + 1) / (ref.size + 2) if plus_one else counts / (ref.size + 1)
        np.fill_diagonal(out, 0.0)
        return out
    for j in range(m):
        out[j] = modified_pvalues_reduced(table.test[j], table.calib[j], j, plus_one)
    return out


# ---------------------------------------------------------------- full permutation


@dataclass(frozen=True)
class PermutationFamily:
    """All arrangements of ``free_indices``; every other index stays fixed."""

    free_indices: tuple
    cap: int = ENUMERATION_CAP
    reverse: bool = False

    def __post_init__(self):
        free = tuple(sorted(int(i) for i in self.free_indices))
        if len(free) > self.cap:
            raise BudgetExceeded(
                f"{len(free)} free indices give {math.factorial(len(free))} permutations; "
                f"the cap is {self.cap} free indices, use a reduced form instead")
        object.__setattr__(self, "free_indices", free)

    def __len__(self):
        return math.factorial(len(self.free_indices))

    def __iter__(self):
        """Yield images ``(sigma(f_0), sigma(f_1), ...)`` in lexicographic order."""
        perms = itertools.permutations(self.free_indices)
        if self.reverse:
            perms = reversed(list(perms))
        return iter(perms)

    def apply(self, features: np.ndarray, image) -> np.ndarray:
        """Permuted data: the row at position ``f_t`` becomes ``X_{sigma(f_t)}``."""
        Z = np.array(features, copy=True)
        Z[list(self.free_indices)] = features[list(image)]
        return Z


def _enumerate(problem: TestingProblem, C, j: int, factory: ScoreFactory, cap: int, reverse: bool):
    """Scores ``S_sigma(X_sigma(j))`` and ``S_sigma`` on the test rows, for every sigma."""
    c = _calib_array(C)
    problem.local(j)
    fam = PermutationFamily(tuple(c) + (j,), cap, reverse)
    Z = problem.features
    XU = problem.test_features
    at_j = np.empty(len(fam))
    on_u = np.empty((len(fam), problem.m))
    identity = None
    for s, image in enumerate(fam):
        Zs = fam.apply(Z, image)
        model = factory(problem.with_features(Zs), j)
        vals = model(np.vstack([Zs[[j]], XU]))
        at_j[s] = vals[0]
        on_u[s] = vals[1:]
        if image == fam.free_indices:
            identity = s
    return at_j, on_u, identity


def lower_median(values, axis=0) -> np.ndarray:
    """Lower of the two central order statistics, so the result is an attained value."""
    v = np.sort(np.asarray(values, dtype=float), axis=axis)
    return np.take(v, (v.shape[axis] - 1) // 2, axis=axis)


def full_permutation(problem: TestingProblem, C, j: int, factory: ScoreFactory,
                     cap: int = ENUMERATION_CAP, reverse: bool = False) -> tuple:
    """Full-permutation ``p_j`` and the modified vector ``p~^(j)`` over the test set.

    The modified values use the lower median of ``S_sigma(X_l)`` over sigma
    as the stable score for ``X_l``.
    """
    at_j, on_u, identity = _enumerate(problem, C, j, factory, cap, reverse)
    k = at_j.size
    p = int(np.sum(at_j[identity] <= at_j)) / k
    tilde = lower_median(on_u, axis=0)
    mod = np.array([int(np.sum(t <= at_j)) for t in tilde]) / k
    mod[problem.local(j)] = 0.0
    return p, mod


def pvalue_full_permutation(problem, C, j, factory, cap=ENUMERATION_CAP, reverse=False) -> float:
    return full_permutation(problem, C, j, factory, cap, reverse)[0]


def modified_pvalues_full(problem, C, j, factory, cap=ENUMERATION_CAP, reverse=False) -> np.ndarray:
    return full_permutation(problem, C, j, factory, cap, reverse)[1]


# ---------------------------------------------------------------- jackknife


LeaveOneOutFactory = Callable[[TestingProblem, int, np.ndarray], ScoreModel]


@dataclass(frozen=True)
class JackknifeScores:
    """Self-scores ``S^(k)(X_k)`` for ``k`` in ``C`` (``calib``) and in ``U`` (``test``)."""

    calib: np.ndarray
    test: np.ndarray
    fits: int

    def pvalues(self) -> PValueVector:
        counts = upper_count(np.sort(self.calib), self.test)
        return PValueVector((counts + 1) / (self.calib.size + 1), Reduction.JACKKNIFE)

    def modified(self) -> np.ndarray:
        """``p~_l^(j) = (1/(|C|+1)) sum over C + {j} of 1{S^(l)(X_l) <= S^(i)(X_i)}``."""
        return modified_matrix(ScoreTable(self.calib, self.test, SymmetryClass.JOINT))


def jackknife_scores(problem: TestingProblem, C, factory: LeaveOneOutFactory, probe: bool = True) -> JackknifeScores:
    """Fit ``S^(k)`` on the pool ``C + U`` minus ``k`` for every ``k`` in ``C + U``.

    ``factory(problem, k, pool)`` receives the pool as global indices.  With
    ``probe`` set, the first fit is repeated on the reversed pool and must
    give bit-identical scores.
    """
    c = _calib_array(C)
    everything = np.concatenate([c, problem.U])
    self_scores = np.empty(everything.size)
    for t, k in enumerate(everything):
        pool = everything[everything != k]
        model = factory(problem, int(k), pool)
        self_scores[t] = model(problem.rows([k]))[0]
        if probe and t == 0:
            again = factory(problem, int(k), pool[::-1])
            probe_rows = problem.rows(everything)
            if not np.array_equal(model(probe_rows), again(probe_rows)):
                raise ContractViolation("leave-one-out model depends on the order of its pool")
    return JackknifeScores(self_scores[: c.size], self_scores[c.size :], everything.size)


def jackknife_pvalues(problem: TestingProblem, C, factory: LeaveOneOutFactory, probe: bool = True) -> PValueVector:
    return jackknife_scores(problem, C, factory, probe).pvalues()


# ---------------------------------------------------------------- pseudo-label


def _pseudo_labels(problem: TestingProblem, c: np.ndarray) -> np.ndarray:
    return (c >= problem.n0).astype(int)


def _check_label_monotone(model):
    if model.symmetry is not SymmetryClass.LABEL_MONOTONE:
        raise ContractViolation("pseudo-label p-values need a label-monotone model")
    if "labels" not in inspect.signature(model.score).parameters:
        raise ContractViolation("model does not accept a label argument")


def pseudolabel_pvalues(problem: TestingProblem, C01, model) -> PValueVector:
    """Pseudo-label p-values for every test point.

    Calibration points keep their observed labels and the test point is
    labeled null: ``p_j = (1/(|C01|+1)) sum over C01 + {j} of 1{S(X_j,0) <= S(X_i,Y~_i)}``.
    """
    c = _calib_array(C01)
    if c.size and (c.min() < 0 or c.max() >= problem.n):
        raise DomainError("pseudo-label calibration indices must be labeled")
    _check_label_monotone(model)
    ref = np.sort(model.score(problem.rows(c), labels=_pseudo_labels(problem, c))) if c.size else np.empty(0)
    st = model.score(problem.test_features, labels=np.zeros(problem.m, dtype=int))
    return PValueVector((upper_count(ref, st) + 1) / (c.size + 1), Reduction.PSEUDO_LABEL)


def pvalue_pseudolabel(problem: TestingProblem, C01, j: int, model) -> float:
    return float(pseudolabel_pvalues(problem, C01, model).values[problem.local(j)])
