import numpy as np
import pytest

from ecot.core import BudgetExceeded, ConfigurationError, DomainError
from ecot.methods import select_and_calibrate
from ecot.oracle import (
    GRID,
    NULL_FAMILIES,
    Candidate,
    OracleBudget,
    broken_knn_pvalue,
    fingerprint,
    full_permutation_counts,
    knn_factory,
    null_sampler,
    oracle_full_ecot,
    oracle_selection_full,
    oracle_superuniformity,
    order_sensitive,
    order_sensitive_factory,
    random_instance,
    run_oracle_checks,
    run_suite,
    selection_pvalue,
    superuniformity_report,
)
from ecot.pvalues import ScoreTable, reduced_pvalues

from conftest import make_problem


def test_budget_validation():
    assert OracleBudget().allows(5, 8)
    assert not OracleBudget().allows(7, 1)
    with pytest.raises(BudgetExceeded):
        OracleBudget(3, 3).check(4, 1)
    with pytest.raises(ConfigurationError):
        OracleBudget(10, 8)


def test_fingerprint_ignores_row_order(rng):
    X = rng.standard_normal((5, 2))
    assert fingerprint(X) == fingerprint(X[::-1])
    assert fingerprint(X) != fingerprint(X + 1)


def test_order_sensitivity_probe(small_problem):
    j = small_problem.n
    assert not order_sensitive(small_problem, small_problem.L0, j, knn_factory())
    assert order_sensitive(small_problem, small_problem.L0, j, order_sensitive_factory())


def test_empty_calibration_rejects_nothing(small_problem):
    f = knn_factory()
    full = full_permutation_counts(small_problem, [], f)
    assert np.all(full.pvalues == 1.0)
    assert oracle_full_ecot(small_problem, [], f, 0.5, seed=0).rejected == frozenset()


def test_full_counts_reverse_enumeration(rng):
    prob = make_problem(rng, n0=3, n1=1, m=2)
    f = order_sensitive_factory()
    a = full_permutation_counts(prob, prob.L0, f)
    b = full_permutation_counts(prob, prob.L0, f, reverse=True)
    assert np.array_equal(a.counts, b.counts) and np.array_equal(a.modified_counts, b.modified_counts)


@pytest.mark.parametrize("name", ["reduction", "bh-collapse", "jackknife"])
def test_suites_pass(name):
    res = run_suite(name, instances=25, seed=1)
    assert res.status == "pass" and res.instances == 25 and res.failures == 0


def test_broken_factory_fails_reduction():
    res = run_suite("reduction", instances=20, seed=1, broken=True)
    assert res.status == "fail" and res.failures > 0


def test_zero_budget_skips_everything():
    results = run_oracle_checks(instances=5, budget=OracleBudget(0, 8))
    assert [r.status for r in results] == ["skipped"] * 3


def test_unknown_suite():
    with pytest.raises(ConfigurationError):
        run_suite("nope")


def test_random_instance_respects_bounds():
    rng = np.random.default_rng(0)
    for _ in range(30):
        prob = random_instance(rng, 4, 5, min_calib=1)
        assert 1 <= prob.n0 <= 4 and 1 <= prob.m <= 5


def _candidates(prob):
    return [Candidate(knn_factory(k=1), prob.L0), Candidate(knn_factory(k=2), prob.L0)]


def test_selection_single_candidate_is_full_ecot():
    prob = make_problem(np.random.default_rng(3), n0=3, n1=2, m=3)
    cand = Candidate(knn_factory(), prob.L0)
    a = oracle_selection_full(prob, [cand], 0.3, seed=1)
    b = oracle_full_ecot(prob, prob.L0, knn_factory(), 0.3, seed=1)
    assert a.rejected == b.rejected and np.array_equal(a.pvalues, b.pvalues)


def test_selection_inner_counts_agree():
    prob = make_problem(np.random.default_rng(4), n0=3, n1=2, m=2)
    a = oracle_selection_full(prob, _candidates(prob), 0.3, seed=0, inner="full")
    b = oracle_selection_full(prob, _candidates(prob), 0.3, seed=0, inner="reduced")
    assert np.array_equal(a.pvalues, b.pvalues) and a.rejected == b.rejected


def test_selection_matches_reduced_path_when_choice_is_stable():
    rng = np.random.default_rng(5)
    compared = 0
    for _ in range(15):
        prob = random_instance(rng, 3, 3, min_calib=1)
        cands = _candidates(prob)
        rep = oracle_selection_full(prob, cands, 0.3, seed=0, inner="reduced")
        if not rep.trace.constant:
            continue
        k = rep.trace.k_star
        models = [cands[k].factory(prob, int(j)) for j in prob.U]
        p = reduced_pvalues(ScoreTable.from_models(models, prob, prob.L0)).values
        assert np.array_equal(rep.pvalues, p)
        compared += 1
    assert compared >= 5


def test_selection_pvalue_single():
    prob = make_problem(np.random.default_rng(6), n0=3, n1=2, m=2)
    p = selection_pvalue(prob, _candidates(prob), 0.3)
    assert 0 < p <= 1


def test_checker_accepts_uniform_draws():
    u = np.random.default_rng(0).random(10_000)
    rep = superuniformity_report(u)
    assert not rep.violated and rep.max_deviation <= 3 * rep.se_at_max + 1e-12
    assert rep.grid.size == 100 and GRID[0] == 0.01 and GRID[-1] == 1.0


def test_checker_flags_anti_conservative_draws():
    u = np.random.default_rng(0).random(5_000) ** 1.3
    assert superuniformity_report(u).violated


def test_reduced_family_is_super_uniform():
    sampler, op = NULL_FAMILIES["reduced"]
    assert not oracle_superuniformity(op, sampler, 2_000, seed=3).violated


def test_broken_scorer_is_flagged():
    rep = oracle_superuniformity(broken_knn_pvalue, null_sampler(n0=6, m=1), 2_000, seed=3)
    assert rep.violated


def test_superuniformity_needs_enough_draws():
    sampler, op = NULL_FAMILIES["reduced"]
    with pytest.raises(DomainError):
        oracle_superuniformity(op, sampler, 100)


@pytest.mark.slow
def test_selected_pvalues_are_super_uniform():
    sampler = null_sampler(n0=3, n1=2, m=4)

    def op(prob):
        return selection_pvalue(prob, _candidates(prob), 0.3)

    assert not oracle_superuniformity(op, sampler, 5_000, seed=11).violated


def test_selection_and_calibrate_agrees_with_oracle_on_single_candidate():
    prob = make_problem(np.random.default_rng(7), n0=3, n1=2, m=3)
    models = [knn_factory()(prob, int(j)) for j in prob.U]
    table = ScoreTable.from_models(models, prob, prob.L0)
    a = select_and_calibrate([table], 0.3, 2, offset=prob.n)
    b = oracle_full_ecot(prob, prob.L0, knn_factory(), 0.3, seed=2)
    assert a.rejected == b.rejected
