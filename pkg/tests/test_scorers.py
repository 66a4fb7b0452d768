import math

import numpy as np
import pytest

from ecot.core import ConfigurationError, DomainError, TestingProblem
from ecot.scorers import (
    KNNModel,
    LabelMonotoneModel,
    LearnerConfig,
    SymmetryClass,
    canonical_rows,
    fit_binary,
    fit_integrative,
    fit_localized,
    fit_one_class,
    integrative_components,
    oracle_gaussian_ratio,
    split_indices,
)
from ecot.methods import MethodSpec, ecot_oc_table
from ecot.sim import ScenarioConfig, generate, mean_vector


def auc(pos, neg):
    """Probability a positive scores above a negative, ties counted half."""
    pos, neg = np.asarray(pos), np.asarray(neg)
    gt = (pos[:, None] > neg[None, :]).mean()
    eq = (pos[:, None] == neg[None, :]).mean()
    return gt + 0.5 * eq


def test_canonical_rows_ignores_order(rng):
    X = rng.standard_normal((7, 3))
    assert np.array_equal(canonical_rows(X), canonical_rows(X[::-1]))


def test_knn_distance_examples():
    model = fit_one_class(np.zeros((3, 1)), {"name": "knn", "k": 1})
    assert model([[5.0]])[0] == 5.0
    assert model([[0.0]])[0] == 0.0


def test_knn_k_must_fit_pool():
    with pytest.raises(DomainError):
        fit_one_class(np.zeros((3, 1)), {"name": "knn", "k": 3})


def test_unknown_learner():
    with pytest.raises(ConfigurationError):
        fit_one_class(np.zeros((3, 1)), "forest")
    with pytest.raises(ConfigurationError):
        fit_binary(np.zeros((3, 1)), np.ones((3, 1)), "forest")


@pytest.mark.parametrize("spec", ["logistic", "lda"])
def test_binary_fit_is_bit_exact_under_row_shuffles(rng, spec):
    X0 = rng.standard_normal((40, 3))
    X1 = rng.standard_normal((30, 3)) + 1
    probe = rng.standard_normal((10, 3))
    a = fit_binary(X0, X1, spec)(probe)
    b = fit_binary(X0[rng.permutation(40)], X1[rng.permutation(30)], spec)(probe)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("spec", ["knn", "kde"])
def test_one_class_fit_is_bit_exact_under_row_shuffles(rng, spec):
    P = rng.standard_normal((40, 3))
    probe = rng.standard_normal((10, 3))
    assert np.array_equal(fit_one_class(P, spec)(probe), fit_one_class(P[rng.permutation(40)], spec)(probe))


def test_logistic_slope_is_positive():
    rng = np.random.default_rng(1)
    X0 = rng.standard_normal((1000, 1))
    X1 = rng.standard_normal((1000, 1)) + 2
    model = fit_binary(X0, X1, "logistic")
    grid = np.linspace(-3, 5, 50).reshape(-1, 1)
    assert np.all(np.diff(model(grid)) > 0)


def test_identical_classes_give_flat_scores(rng):
    X = rng.standard_normal((200, 2))
    model = fit_binary(X, X.copy(), "logistic")
    grid = rng.uniform(-3, 3, size=(100, 2))
    s = model(grid)
    assert s.max() - s.min() <= 0.1


def test_lda_recovers_mean_direction():
    cfg = ScenarioConfig(d=50, a=1.0, n0=2000, n1=2000, m=10, seed=3)
    prob, _ = generate(cfg)
    model = fit_binary(prob.null_features, prob.nonnull_features, "lda")
    assert np.corrcoef(model.weights, mean_vector(cfg))[0, 1] >= 0.5


def test_knn_separates_variance_shift():
    cfg = ScenarioConfig("variance-shift", d=20, a=6.0, n0=1000, n1=1000, m=10, seed=4)
    prob, _ = generate(cfg)
    model = fit_one_class(prob.null_features[:500], "knn")
    assert model(prob.nonnull_features).mean() > model(prob.null_features[500:]).mean()


def test_integrative_bounds_and_typical_point(rng):
    prob = TestingProblem(rng.standard_normal((10, 2)), rng.standard_normal((6, 2)) + 3,
                          rng.standard_normal((3, 2)))
    model = fit_integrative(prob, prob.n, split_seed=0)
    X = np.vstack([prob.features, rng.standard_normal((50, 2)) * 5])
    u1 = model.u1(X)
    t1 = model.ref1.size
    assert np.all(u1 >= 1 / (t1 + 1)) and np.all(u1 <= 1)
    assert np.all(np.isfinite(model(X)))
    # the rank is at least one (the test point's own score) out of n0 + 1
    u0 = model.u0(X)
    assert u0.min() >= 1 / (prob.n0 + 1) - 1e-15
    # a point exactly at the test row's own s0 level with the lowest s0 gets the minimum
    s0 = model.ref0
    j_score = model.s0(prob.rows([prob.n]))[0]
    if j_score == s0.min():
        assert model.u0(prob.rows([prob.n]))[0] == 1 / (prob.n0 + 1)


def test_integrative_minimum_rank_is_attained():
    # two coincident test rows are each other's nearest neighbours, so the
    # test row has the smallest s0 of all and ranks first among n0 + 1
    x0 = 2.0 * np.arange(8.0).reshape(-1, 1)
    prob = TestingProblem(x0, np.array([[0.0], [0.1], [0.2], [0.3]]), np.array([[7.0], [7.0]]))
    model = fit_integrative(prob, prob.n, split_seed=0, spec={"name": "knn", "k": 2})
    assert model.u0(prob.rows([prob.n]))[0] == 1 / (prob.n0 + 1)


def test_integrative_needs_two_nonnulls(rng):
    prob = TestingProblem(rng.standard_normal((5, 2)), rng.standard_normal((1, 2)), rng.standard_normal((2, 2)))
    with pytest.raises(ConfigurationError):
        integrative_components(prob, 0)


def test_integrative_beats_logistic_on_variance_shift():
    cfg = ScenarioConfig("variance-shift", d=50, a=6.0, n0=160, n1=40, m=1000, pi=0.9, seed=11)
    prob, labels = generate(cfg)
    table, _ = ecot_oc_table(prob, MethodSpec("ecot-oc"))
    ratio = np.diag(table.test)
    logit = fit_binary(prob.null_features, prob.nonnull_features, "logistic")(prob.test_features)
    assert auc(ratio[labels == 1], ratio[labels == 0]) >= auc(logit[labels == 1], logit[labels == 0])


def test_localized_constant_kernel_is_plain_ecdf(rng):
    prob = TestingProblem(rng.standard_normal((8, 2)), [], rng.standard_normal((2, 2)))
    train, calib = split_indices(prob.L0, 0.5, 0)
    model = fit_localized(prob, prob.n, bandwidth=1e9, train=train, calibration=calib)
    ref = model.ref_scores
    X = rng.standard_normal((5, 2))
    expected = (model.base(X)[:, None] >= ref[None, :]).mean(axis=1)
    assert np.allclose(model(X), expected)


def test_localized_self_term_counts(rng):
    prob = TestingProblem(rng.standard_normal((8, 2)), [], rng.standard_normal((2, 2)))
    model = fit_localized(prob, prob.n, bandwidth=0.5)
    top = model.ref_rows[np.argmax(model.ref_scores)]
    assert model(top)[0] == pytest.approx(1.0)


def test_localized_small_instance_by_hand():
    x0 = np.array([[0.0], [1.0], [2.0], [3.0], [4.0], [6.0], [7.0], [9.0]])
    prob = TestingProblem(x0, [], np.array([[5.0]]))
    train = np.array([0, 1, 2, 3])
    calib = np.array([4, 5, 6, 7])
    h = 1.5
    model = fit_localized(prob, prob.n, h, {"name": "knn", "k": 1}, train=train, calibration=calib)
    ref_x = np.array([4.0, 6.0, 7.0, 9.0, 5.0])
    base = lambda x: np.min(np.abs(x - np.array([0.0, 1.0, 2.0, 3.0])))  # noqa: E731
    x = 6.5
    w = np.exp(-((x - ref_x) ** 2) / (2 * h * h))
    ind = np.array([base(x) >= base(r) for r in ref_x], dtype=float)
    assert model([[x]])[0] == pytest.approx((w * ind).sum() / w.sum())


def test_gaussian_ratio_examples():
    mu = np.array([2.0, 0.0, 1.0])
    r = oracle_gaussian_ratio(mu, 0.5)
    assert r(mu / 2)[0] == pytest.approx(0.5)
    assert r(-100 * mu)[0] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DomainError):
        oracle_gaussian_ratio(mu, 1.0)


def test_label_monotone_model():
    base = KNNModel(np.zeros((2, 1)), 1)
    model = LabelMonotoneModel(base)
    s = model.score(np.array([[1.0], [2.0]]), labels=[0, 1])
    assert s[0] == 1.0 and s[1] == -math.inf
    finite = LabelMonotoneModel(base, shift=0.5).score(np.array([[1.0]]), labels=[1])
    assert finite[0] == 0.5
    with pytest.raises(DomainError):
        LabelMonotoneModel(base, shift=-1)


def test_learner_config_roundtrip():
    cfg = LearnerConfig.from_dict({"name": "knn", "k": 3})
    assert cfg.get("k") == 3 and LearnerConfig.from_dict(cfg.to_dict()) == cfg
    assert SymmetryClass.JOINT.calibration_symmetric
    assert not SymmetryClass.JACKKNIFE.calibration_symmetric
