"""End-to-end testing methods, each returning a :class:`RejectionReport`.

Every method addresses samples by global index and reports rejections as
global test indices (``offset = n``).  Randomness (data splits and pruning
uniforms) comes from independent sub-streams of ``MethodSpec.seed``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from .core import (
    BudgetExceeded,
    ConfigurationError,
    RejectionReport,
    TestingProblem,
    derive_seed,
)
from .procedures import (
    bh,
    bh_report,
    conditional_calibration,
    label_assisted_null_proportion,
    r_sizes,
    storey_null_proportions,
)
from .pvalues import ScoreTable, modified_matrix, reduced_pvalues
from .scorers import (
    LearnerConfig,
    ScoreModel,
    SymmetryClass,
    fit_binary,
    fit_enhanced_adadetect,
    clip_k,
    fit_one_class,
    lower_counts,
    split_indices,
)

METHODS = ("ecot-bi", "ecot-oc", "ecot-as", "ecot-as-joint", "cp-oc", "cp-bi", "adadetect", "fullnd", "integ")
CANDIDATE_NAMES = ("ecot-bi", "ecot-oc", "fullnd")
NULL_PROP = (None, "storey", "label-assisted")
TESTING = ("default", "bh", "cc")

# sub-stream keys under the method seed
_PRUNE, _SPLIT0, _SPLIT1 = 0, 1, 2


@dataclass(frozen=True)
class MethodSpec:
    """Configuration of one testing method.

    ``learner`` is the binary learner and ``one_class`` the one-class learner;
    each method uses whichever it needs.  ``train_fraction`` splits D0 for the
    split baselines and ``d1_train_fraction`` splits D1 where needed.

    ``testing`` picks the final step of the ECOT methods: ``"default"`` is BH
    for ecot-bi and conditional calibration for ecot-oc and ecot-as; ``"bh"``
    and ``"cc"`` force one or the other.
    """

    name: str = "ecot-bi"
    learner: LearnerConfig = field(default_factory=lambda: LearnerConfig("logistic"))
    one_class: LearnerConfig = field(default_factory=lambda: LearnerConfig("knn"))
    train_fraction: float = 0.5
    d1_train_fraction: float = 0.5
    alpha: float = 0.1
    seed: int = 0
    null_prop: Optional[str] = None
    storey_lambda: float = 0.5
    testing: str = "default"
    plus_one: bool = False
    candidates: tuple = CANDIDATE_NAMES
    mk_rule: str = "intent"

    def __post_init__(self):
        if self.name not in METHODS:
            raise ConfigurationError(f"unknown method {self.name!r}; choose from {METHODS}")
        for key in ("train_fraction", "d1_train_fraction", "alpha", "storey_lambda"):
            v = getattr(self, key)
            if not 0 < v < 1:
                raise ConfigurationError(f"{key} must lie in (0, 1), got {v}")
        if self.null_prop not in NULL_PROP:
            raise ConfigurationError(f"null_prop must be one of {NULL_PROP}")
        if self.testing not in TESTING:
            raise ConfigurationError(f"testing must be one of {TESTING}")
        if self.mk_rule not in ("intent", "verbatim"):
            raise ConfigurationError("mk_rule must be 'intent' or 'verbatim'")
        if not self.candidates:
            raise ConfigurationError("the candidate list is empty")
        for key in ("learner", "one_class"):
            v = getattr(self, key)
            if not isinstance(v, LearnerConfig):
                object.__setattr__(self, key, LearnerConfig.from_dict(v))
        if self.learner.name not in LearnerConfig.BINARY:
            raise ConfigurationError(f"binary learner must be one of {LearnerConfig.BINARY}")
        if self.one_class.name not in LearnerConfig.ONE_CLASS:
            raise ConfigurationError(f"one-class learner must be one of {LearnerConfig.ONE_CLASS}")
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "seed", int(self.seed))

    @classmethod
    def from_dict(cls, d: dict) -> "MethodSpec":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown method keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["learner"] = self.learner.to_dict()
        out["one_class"] = self.one_class.to_dict()
        out["candidates"] = [c if isinstance(c, str) else repr(c) for c in self.candidates]
        return out

    def with_seed(self, seed: int) -> "MethodSpec":
        return replace(self, seed=int(seed))

    @property
    def prune_seed(self) -> int:
        return derive_seed(self.seed, _PRUNE)


def _need(problem: TestingProblem, name: str, n1: int = 0, n0: int = 1):
    if problem.n1 < n1:
        raise ConfigurationError(f"{name} needs at least {n1} non-null labeled samples, got {problem.n1}")
    if problem.n0 < n0:
        raise ConfigurationError(f"{name} needs at least {n0} null labeled samples, got {problem.n0}")


def requirements(spec: MethodSpec) -> tuple:
    """Minimum (n0, n1) a method needs; checked before any Monte Carlo run."""
    need = {
        "ecot-bi": (1, 1), "ecot-oc": (1, 2), "ecot-as-joint": (1, 1), "cp-oc": (2, 0),
        "cp-bi": (2, 1), "adadetect": (2, 0), "fullnd": (1, 0), "integ": (2, 2),
    }
    if spec.name == "ecot-as":
        n0s, n1s = zip(*[need[c] for c in spec.candidates if isinstance(c, str)] or [(1, 0)])
        return max(n0s), max(n1s)
    return need[spec.name]


def check_requirements(spec: MethodSpec, n0: int, n1: int):
    r0, r1 = requirements(spec)
    if n0 < r0 or n1 < r1:
        raise ConfigurationError(f"{spec.name} needs n0 >= {r0} and n1 >= {r1}; got n0={n0}, n1={n1}")


# ---------------------------------------------------------------- score tables


def ecot_bi_model(problem: TestingProblem, spec: MethodSpec) -> ScoreModel:
    """Binary classifier of D1 against the pooled D0 and Du (one fit)."""
    _need(problem, "ecot-bi", n1=1)
    pool = np.vstack([problem.null_features, problem.test_features])
    return fit_binary(pool, problem.nonnull_features, spec.learner, SymmetryClass.JOINT)


def fullnd_model(problem: TestingProblem, spec: MethodSpec) -> ScoreModel:
    """One-class model fitted on the pooled D0 and Du."""
    pool = np.vstack([problem.null_features, problem.test_features])
    return fit_one_class(pool, spec.one_class, SymmetryClass.JOINT)


def integrative_table(s0_all, s1_all, null_ref, calib, test, ref1) -> ScoreTable:
    """Per-test ratio scores ``u0_j(x) / u1(x)`` for the calibration and test rows.

    ``s0_all`` and ``s1_all`` hold one-class scores at every global index.
    ``u0_j`` is the fraction of ``null_ref`` plus ``j`` whose ``s0`` is at or
    below ``s0(x)``; ``u1`` is the +1 smoothed fraction of ``ref1`` whose
    ``s1`` is at or below ``s1(x)``.
    """
    ref0 = np.sort(s0_all[null_ref])
    n_ref = ref0.size + 1
    r1 = np.sort(s1_all[ref1])
    u1 = (lower_counts(r1, s1_all) + 1) / (r1.size + 1)
    base = lower_counts(ref0, s0_all)
    s0_test = s0_all[test]

    def block(idx):
        counts = base[idx][None, :] + (s0_test[:, None] <= s0_all[idx][None, :])
        return (counts / n_ref) / u1[idx][None, :]

    return ScoreTable(block(calib), block(test), SymmetryClass.CALIBRATION)


def ecot_oc_table(problem: TestingProblem, spec: MethodSpec) -> tuple:
    """Integrative score with ``s0`` on D0 and Du pooled and ``s1`` on half of D1."""
    _need(problem, "ecot-oc", n1=2)
    Z = problem.features
    t1, _ = split_indices(problem.L1, spec.d1_train_fraction, derive_seed(spec.seed, _SPLIT1))
    s0 = fit_one_class(Z[np.concatenate([problem.L0, problem.U])], spec.one_class, SymmetryClass.JOINT)
    s1 = fit_one_class(Z[t1], clip_k(spec.one_class, t1.size))
    table = integrative_table(s0(Z), s1(Z), problem.L0, problem.L0, problem.U, t1)
    return table, 2


def candidate_table(problem: TestingProblem, spec: MethodSpec, candidate) -> tuple:
    """Score table with ``C = L0`` for a named candidate, a model or a prebuilt table."""
    if isinstance(candidate, ScoreTable):
        return candidate, 0
    if isinstance(candidate, ScoreModel):
        return ScoreTable.from_shared(candidate, problem, problem.L0), 0
    if candidate == "ecot-bi":
        return ScoreTable.from_shared(ecot_bi_model(problem, spec), problem, problem.L0), 1
    if candidate == "fullnd":
        return ScoreTable.from_shared(fullnd_model(problem, spec), problem, problem.L0), 1
    if candidate == "ecot-oc":
        return ecot_oc_table(problem, spec)
    if callable(candidate):
        return candidate(problem, spec), 1
    raise ConfigurationError(f"unknown candidate {candidate!r}; choose from {CANDIDATE_NAMES}")


# ---------------------------------------------------------------- null proportion


def null_proportion(problem: TestingProblem, spec: MethodSpec, join_table: Optional[ScoreTable] = None):
    """Estimate per the spec: ``None``, per-test Storey values, or the label-assisted scalar."""
    if spec.null_prop is None:
        return None
    if spec.null_prop == "label-assisted":
        return label_assisted_null_proportion(problem.n0, problem.n1)
    if join_table is None or not join_table.shared:
        model = ecot_bi_model(problem, spec) if problem.n1 >= 1 else fullnd_model(problem, spec)
        join_table = ScoreTable.from_shared(model, problem, problem.L0)
    return storey_null_proportions(join_table.calib, join_table.test, spec.storey_lambda)


def _calibrate(table: ScoreTable, problem: TestingProblem, spec: MethodSpec, pi=None, **extra) -> RejectionReport:
    p = reduced_pvalues(table).values
    if spec.testing == "bh":
        return _weighted_bh(p, spec.alpha, pi, problem.n, **extra)
    mod = modified_matrix(table, spec.plus_one)
    return conditional_calibration(p, mod, spec.alpha, spec.prune_seed, pi=pi, offset=problem.n, **extra)


def _weighted_bh(p, alpha, pi, offset, **extra) -> RejectionReport:
    w = 1.0 if pi is None else np.asarray(pi, dtype=float)
    report = bh_report(w * p, alpha, offset=offset, **extra)
    return replace(report, pvalues=p)


def _scores(table: ScoreTable) -> np.ndarray:
    return table.test if table.shared else np.diag(table.test).copy()


# ---------------------------------------------------------------- methods


def run_ecot_bi(problem: TestingProblem, spec: MethodSpec) -> RejectionReport:
    """Binary classifier of D1 against D0 and Du, calibrated on L0.

    The score is joint-symmetric, so plain BH is the exact testing step.
    ``testing="cc"`` (or a null-proportion estimate) routes through
    conditional calibration instead.
    """
    _need(problem, "ecot-bi", n1=1)
    model = ecot_bi_model(problem, spec)
    table = ScoreTable.from_shared(model, problem, problem.L0)
    pi = null_proportion(problem, spec, table)
    if spec.testing == "cc" or pi is not None:
        return _calibrate(table, problem, spec, pi, scores=table.test, fits=1)
    p = reduced_pvalues(table).values
    return bh_report(p, spec.alpha, offset=problem.n, scores=table.test, fits=1)


def run_ecot_oc(problem: TestingProblem, spec: MethodSpec) -> RejectionReport:
    """Integrative one-class ratio score with conditional calibration."""
    table, fits = ecot_oc_table(problem, spec)
    pi = null_proportion(problem, spec)
    return _calibrate(table, problem, spec, pi, scores=_scores(table), fits=fits)


def select_and_calibrate(tables: Sequence[ScoreTable], alpha: float, seed, pi=None, offset: int = 0,
                         plus_one: bool = False, fits: int = 0, testing: str = "cc") -> RejectionReport:
    """Adjusted approach selection followed by conditional calibration.

    For each test position ``j`` the candidate maximising
    ``|BH(p~^(j),k)|`` is selected (lowest index on ties); the p-value and
    modified p-values of ``j`` then come from that candidate.  With
    ``testing="bh"`` the selected p-values go through plain BH instead; this
    skips the randomized pruning and carries no finite-sample guarantee.
    """
    if not tables:
        raise ConfigurationError("the candidate list is empty")
    sizes_c = {t.n_calib for t in tables}
    if len(sizes_c) != 1 or len({t.m for t in tables}) != 1:
        raise ConfigurationError("candidates must share one calibration set and test set")
    ps = np.stack([reduced_pvalues(t).values for t in tables])
    mods = np.stack([modified_matrix(t, plus_one) for t in tables])
    w = None if pi is None else np.broadcast_to(np.asarray(pi, dtype=float), (tables[0].m,))
    sizes = np.stack([r_sizes(mods[k], alpha, w) for k in range(len(tables))])
    chosen = np.argmax(sizes, axis=0)
    m = tables[0].m
    rows = np.arange(m)
    p = ps[chosen, rows]
    mod = mods[chosen, rows]
    if testing == "bh":
        return _weighted_bh(p, alpha, pi, offset, selected=chosen, fits=fits)
    return conditional_calibration(p, mod, alpha, seed, pi=pi, offset=offset, selected=chosen, fits=fits)


def run_ecot_as(problem: TestingProblem, spec: MethodSpec, candidates=None) -> RejectionReport:
    """Adjusted adaptive approach selection over score candidates sharing ``C = L0``."""
    cands = spec.candidates if candidates is None else tuple(candidates)
    if not cands:
        raise ConfigurationError("the candidate list is empty")
    built = [candidate_table(problem, spec, c) for c in cands]
    tables = [t for t, _ in built]
    fits = sum(f for _, f in built)
    pi = null_proportion(problem, spec)
    return select_and_calibrate(tables, spec.alpha, spec.prune_seed, pi, problem.n, spec.plus_one, fits,
                                testing="bh" if spec.testing == "bh" else "cc")


def run_naive_selection(problem: TestingProblem, spec: MethodSpec, candidates=None) -> RejectionReport:
    """Unadjusted selection: pick the candidate with the most BH rejections and reuse the data.

    This does not control FDR in general; it exists to demonstrate the
    effect of double dipping.
    """
    cands = spec.candidates if candidates is None else tuple(candidates)
    tables = [candidate_table(problem, spec, c)[0] for c in cands]
    ps = [reduced_pvalues(t).values for t in tables]
    counts = [bh(p, spec.alpha).size for p in ps]
    k = int(np.argmax(counts))
    return bh_report(ps[k], spec.alpha, offset=problem.n, selected=np.array([k]))


def mk_criterion(scores_l1, scores_pool) -> float:
    """Average over the pool of the fraction of L1 scores at or below each pool score."""
    l1 = np.sort(np.asarray(scores_l1, dtype=float))
    if l1.size == 0:
        raise ConfigurationError("the criterion needs non-null labeled samples")
    counts = np.searchsorted(l1, np.asarray(scores_pool, dtype=float), side="right")
    return float(np.mean(counts / l1.size))


def run_ecot_as_joint(problem: TestingProblem, spec: MethodSpec, candidates=None) -> RejectionReport:
    """Selection among joint-symmetric scores by the labeled-separation criterion, then BH.

    Small criterion values mean non-null scores sit high relative to the
    pooled null and test scores, so the default rule picks the minimum;
    ``mk_rule='verbatim'`` picks the maximum instead.
    """
    _need(problem, "ecot-as-joint", n1=1)
    cands = tuple(c for c in (spec.candidates if candidates is None else candidates) if c != "ecot-oc")
    if not cands:
        raise ConfigurationError("the candidate list is empty")
    models = []
    for c in cands:
        if isinstance(c, ScoreModel):
            model = c
        elif c == "ecot-bi":
            model = ecot_bi_model(problem, spec)
        elif c == "fullnd":
            model = fullnd_model(problem, spec)
        else:
            raise ConfigurationError(f"candidate {c!r} is not a joint-symmetric score")
        if model.symmetry is not SymmetryClass.JOINT:
            raise ConfigurationError(f"candidate {c!r} is not tagged joint-symmetric")
        models.append(model)
    pool = np.concatenate([problem.L0, problem.U])
    Z = problem.features
    crit = np.array([mk_criterion(mdl(Z[problem.L1]), mdl(Z[pool])) for mdl in models])
    k = int(np.argmin(crit) if spec.mk_rule == "intent" else np.argmax(crit))
    table = ScoreTable.from_shared(models[k], problem, problem.L0)
    p = reduced_pvalues(table).values
    return bh_report(p, spec.alpha, offset=problem.n, scores=table.test, selected=np.array([k]),
                     fits=len(models))


# ---------------------------------------------------------------- baselines


def _split0(problem: TestingProblem, spec: MethodSpec):
    return split_indices(problem.L0, spec.train_fraction, derive_seed(spec.seed, _SPLIT0))


def run_cp_oc(problem, spec):
    """Split conformal: one-class model on the training half of D0, calibrated on the rest."""
    _need(problem, "cp-oc", n0=2)
    dt, dc = _split0(problem, spec)
    model = fit_one_class(problem.rows(dt), clip_k(spec.one_class, dt.size), SymmetryClass.JOINT)
    table = ScoreTable.from_shared(model, problem, dc)
    return bh_report(reduced_pvalues(table).values, spec.alpha, offset=problem.n, scores=table.test, fits=1)


def run_adadetect(problem, spec):
    """Binary classifier of the D0 training half against calibration plus test rows."""
    _need(problem, "adadetect", n0=2)
    dt, dc = _split0(problem, spec)
    class1 = np.vstack([problem.rows(dc), problem.test_features])
    model = fit_binary(problem.rows(dt), class1, spec.learner, SymmetryClass.JOINT)
    table = ScoreTable.from_shared(model, problem, dc)
    return bh_report(reduced_pvalues(table).values, spec.alpha, offset=problem.n, scores=table.test, fits=1)


def run_cp_bi(problem, spec):
    """Binary classifier of the D0 training half against D1, calibrated on the rest of D0."""
    _need(problem, "cp-bi", n1=1, n0=2)
    dt, dc = _split0(problem, spec)
    model = fit_binary(problem.rows(dt), problem.nonnull_features, spec.learner, SymmetryClass.JOINT)
    table = ScoreTable.from_shared(model, problem, dc)
    return bh_report(reduced_pvalues(table).values, spec.alpha, offset=problem.n, scores=table.test, fits=1)


def run_fullnd(problem, spec):
    """One-class model on D0 and Du pooled, calibrated on all of L0."""
    table = ScoreTable.from_shared(fullnd_model(problem, spec), problem, problem.L0)
    return bh_report(reduced_pvalues(table).values, spec.alpha, offset=problem.n, scores=table.test, fits=1)


def run_integ(problem, spec):
    """Integrative conformal testing with split D0 and split D1."""
    _need(problem, "integ", n1=2, n0=2)
    dt, dc = _split0(problem, spec)
    t1, c1 = split_indices(problem.L1, spec.d1_train_fraction, derive_seed(spec.seed, _SPLIT1))
    Z = problem.features
    s0 = fit_one_class(Z[dt], clip_k(spec.one_class, dt.size))
    s1 = fit_one_class(Z[t1], clip_k(spec.one_class, t1.size))
    table = integrative_table(s0(Z), s1(Z), dc, dc, problem.U, c1)
    return _calibrate(table, problem, spec, None, scores=_scores(table), fits=2)


def run_baseline(problem: TestingProblem, spec: MethodSpec) -> RejectionReport:
    runners = {"cp-oc": run_cp_oc, "adadetect": run_adadetect, "cp-bi": run_cp_bi,
               "fullnd": run_fullnd, "integ": run_integ}
    if spec.name not in runners:
        raise ConfigurationError(f"{spec.name} is not a baseline")
    return runners[spec.name](problem, spec)


def run_enhanced_adadetect(problem: TestingProblem, spec: MethodSpec, max_m: int = 20) -> RejectionReport:
    """Per-test refits of D0 plus ``X_j`` against the other test rows (small ``m`` only)."""
    if problem.m > max_m:
        raise BudgetExceeded(f"enhanced AdaDetect refits once per test point; m={problem.m} exceeds {max_m}")
    models = [fit_enhanced_adadetect(problem, int(j), spec.learner) for j in problem.U]
    table = ScoreTable.from_models(models, problem, problem.L0)
    return _calibrate(table, problem, spec, None, scores=_scores(table), fits=len(models))


RUNNERS: dict = {
    "ecot-bi": run_ecot_bi,
    "ecot-oc": run_ecot_oc,
    "ecot-as": run_ecot_as,
    "ecot-as-joint": run_ecot_as_joint,
    "cp-oc": run_cp_oc,
    "cp-bi": run_cp_bi,
    "adadetect": run_adadetect,
    "fullnd": run_fullnd,
    "integ": run_integ,
}


def run_method(problem: TestingProblem, spec: MethodSpec) -> RejectionReport:
    return RUNNERS[spec.name](problem, spec)
