import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ecot.core import (
    CalibrationSet,
    DomainError,
    LabelSet,
    MonteCarloReport,
    PValueVector,
    Reduction,
    RejectionReport,
    TestingProblem,
    derive_seed,
    fdp_and_power,
)


def test_index_sets_partition_the_global_range():
    prob = TestingProblem(np.zeros((3, 2)), np.ones((2, 2)), np.full((4, 2), 2.0))
    assert prob.n0 == 3 and prob.n1 == 2 and prob.n == 5 and prob.m == 4 and prob.d == 2
    assert prob.L0.tolist() == [0, 1, 2]
    assert prob.L1.tolist() == [3, 4]
    assert prob.U.tolist() == [5, 6, 7, 8]
    assert prob.features.shape == (9, 2)
    assert prob.local(7) == 2


def test_nonnull_data_is_optional():
    prob = TestingProblem(np.zeros((2, 3)), np.empty((0, 3)), np.ones((1, 3)))
    assert prob.n1 == 0 and prob.L1.size == 0
    assert TestingProblem(np.zeros((2, 3)), [], np.ones((1, 3))).n1 == 0


@pytest.mark.parametrize("x0, x1, xu", [
    (np.zeros((0, 2)), np.zeros((1, 2)), np.zeros((1, 2))),
    (np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((0, 2))),
    (np.zeros((1, 2)), np.zeros((1, 3)), np.zeros((1, 2))),
    (np.zeros((1, 2)), np.zeros((1, 2)), np.array([[0.0, np.nan]])),
])
def test_problem_rejects_bad_shapes(x0, x1, xu):
    with pytest.raises(DomainError):
        TestingProblem(x0, x1, xu)


def test_problem_arrays_are_read_only():
    prob = TestingProblem(np.zeros((2, 1)), [], np.ones((1, 1)))
    with pytest.raises(ValueError):
        prob.null_features[0, 0] = 1.0


def test_local_rejects_non_test_index():
    prob = TestingProblem(np.zeros((2, 1)), [], np.ones((1, 1)))
    with pytest.raises(DomainError):
        prob.local(1)


def test_calibration_set_checks_membership():
    prob = TestingProblem(np.zeros((3, 1)), np.ones((2, 1)), np.ones((1, 1)))
    assert len(CalibrationSet([0, 2], prob)) == 2
    with pytest.raises(DomainError):
        CalibrationSet([0, 0])
    with pytest.raises(DomainError):
        CalibrationSet([3], prob)
    assert CalibrationSet([3, 4], prob, LabelSet.LABELED).array().tolist() == [3, 4]


def test_pvalue_vector_range():
    v = PValueVector([0.25, 1.0], Reduction.CALIBRATION_SYMMETRIC)
    assert v.reduction_tag is Reduction.CALIBRATION_SYMMETRIC
    with pytest.raises(DomainError):
        PValueVector([0.0], "joint-symmetric")
    with pytest.raises(DomainError):
        PValueVector([1.5], "joint-symmetric")


def test_report_invariants():
    RejectionReport({5}, {5, 6}, pruned=True)
    with pytest.raises(DomainError):
        RejectionReport({5, 7}, {5})
    with pytest.raises(DomainError):
        RejectionReport({5}, {5, 6}, pruned=False)
    assert RejectionReport({7, 5}, {5, 7}, offset=5).positions() == [0, 2]


def test_fdp_empty_rejection():
    assert fdp_and_power(set(), [0, 1, 1]) == (0.0, 0.0)


def test_fdp_mixed():
    assert fdp_and_power({10, 11}, [0, 1, 0], offset=10) == (0.5, 1.0)


def test_fdp_all_false():
    assert fdp_and_power({0, 1, 2}, [0, 0, 0]) == (1.0, 0.0)


def test_fdp_rejects_outside_index():
    with pytest.raises(DomainError):
        fdp_and_power({3}, [0, 1, 0])


@given(st.lists(st.integers(0, 1), min_size=1, max_size=30), st.data())
def test_fdp_bounds_and_order_invariance(labels, data):
    m = len(labels)
    rej = data.draw(st.sets(st.integers(0, m - 1)))
    fdp, tpp = fdp_and_power(rej, labels)
    assert 0 <= fdp <= 1 and 0 <= tpp <= 1
    perm = data.draw(st.permutations(range(m)))
    inv = {p: i for i, p in enumerate(perm)}
    relabeled = [labels[perm[i]] for i in range(m)]
    assert fdp_and_power({inv[j] for j in rej}, relabeled) == (fdp, tpp)


def test_monte_carlo_report_from_pairs():
    rep = MonteCarloReport.from_pairs([(0.1, 0.5), (0.3, 0.7)])
    assert rep.fdr_mean == pytest.approx(0.2)
    assert rep.power_mean == pytest.approx(0.6)
    assert rep.fdr_se == pytest.approx(np.std([0.1, 0.3], ddof=1) / np.sqrt(2))
    one = MonteCarloReport.from_pairs([(0.25, 0.5)])
    assert (one.fdr_mean, one.power_mean, one.fdr_se) == (0.25, 0.5, 0.0)
    assert "per_replicate" in one.to_dict(include_replicates=True)


def test_derive_seed_is_stable_and_keyed():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert derive_seed(1, 2) != derive_seed(1, 3)
    assert derive_seed(1, 2, 0) != derive_seed(1, 2)
    assert 0 <= derive_seed(2**64 - 1, 5) < 2**64
