import math

import numpy as np
import pytest

from ecot.core import ConfigurationError, derive_seed, fdp_and_power
from ecot.methods import MethodSpec, run_method
from ecot.sim import (
    ScenarioConfig,
    anchor_set,
    generate,
    generate_mean_shift,
    generate_variance_shift,
    mean_vector,
    monte_carlo,
    monte_carlo_many,
    paired_se,
)

QUICK = ScenarioConfig(d=10, a=1.5, pi=0.9, n0=40, n1=10, m=30, seed=2)


def test_default_scenario():
    cfg = ScenarioConfig()
    assert (cfg.d, cfg.n0, cfg.n1, cfg.m) == (50, 400, 100, 1000)
    assert cfg.n0 == 4 * cfg.n1


def test_mean_vector_entries():
    mu = mean_vector(ScenarioConfig(d=50, a=1.0))
    assert mu[0] == math.sqrt(math.log(50))
    assert mu[0] == pytest.approx(1.9777, abs=5e-4)
    assert np.all(mu[:5] == mu[0]) and np.all(mu[5:] == 0)
    assert np.all(mean_vector(ScenarioConfig(d=50, a=0.0)) == 0)


def test_nonnull_test_count():
    prob, labels = generate(ScenarioConfig(d=10, pi=0.9, m=200))
    assert labels.sum() == 20 and prob.m == 200
    assert ScenarioConfig(pi=0.95, m=1000).n_nonnull_test == 50


@pytest.mark.parametrize("kwargs", [
    {"scenario": "x"}, {"a": -1}, {"pi": 1.5}, {"d": 3}, {"n0": 0}, {"m": 0},
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        ScenarioConfig(**kwargs)


def test_config_from_dict():
    assert ScenarioConfig.from_dict({"d": 10}).d == 10
    with pytest.raises(ConfigurationError):
        ScenarioConfig.from_dict({"dim": 10})


def test_generation_is_deterministic():
    a, la = generate(QUICK, 3)
    b, lb = generate(QUICK, 3)
    c, _ = generate(QUICK, 4)
    assert np.array_equal(a.features, b.features) and np.array_equal(la, lb)
    assert not np.array_equal(a.features, c.features)


def test_mean_shift_moments():
    cfg = ScenarioConfig(d=10, a=1.0, pi=0.5, n0=20000, n1=20000, m=10)
    prob, _ = generate_mean_shift(cfg)
    mu = mean_vector(cfg)
    assert np.allclose(prob.nonnull_features.mean(axis=0), mu, atol=0.05)
    assert np.allclose(prob.null_features.mean(axis=0), 0, atol=0.05)


def test_variance_shift_moments():
    cfg = ScenarioConfig("variance-shift", d=5, a=6.0, n0=10, n1=100_000, m=10, seed=1)
    prob, _ = generate_variance_shift(cfg)
    anchors = anchor_set(cfg)
    # total variance = (1 + a) + spread of the uniformly chosen anchor
    anchor_spread = anchors.var(axis=0)
    assert np.allclose(prob.nonnull_features.var(axis=0) - anchor_spread, 1 + cfg.a, rtol=0.05)


def test_variance_shift_global_null_is_identical():
    cfg = ScenarioConfig("variance-shift", d=5, a=0.0, n0=20000, n1=20000, m=10, seed=1)
    prob, _ = generate(cfg)
    assert np.allclose(prob.null_features.var(axis=0), prob.nonnull_features.var(axis=0), rtol=0.05)


def test_anchors_are_per_replicate():
    cfg = ScenarioConfig("variance-shift", d=5)
    a0, a1 = anchor_set(cfg, 0), anchor_set(cfg, 1)
    assert a0.shape == (5, 5) and not np.array_equal(a0, a1)
    assert np.all(np.abs(a0) <= 3)


def test_high_dimensional_variance_shift():
    prob, _ = generate(ScenarioConfig("variance-shift", d=1000, n0=20, n1=5, m=10))
    assert prob.d == 1000


def test_single_replicate_report():
    spec = MethodSpec("ecot-bi")
    rep = monte_carlo(spec, QUICK, 1, seed=5)
    prob, labels = generate(ScenarioConfig(**{**QUICK.to_dict(), "seed": 5}), 0)
    report = run_method(prob, spec.with_seed(derive_seed(5, 0, 7)))
    assert (rep.fdr_mean, rep.power_mean) == fdp_and_power(report.rejected, labels, report.offset)
    assert rep.fdr_se == 0.0


def test_monte_carlo_is_deterministic_and_thread_independent():
    specs = [MethodSpec("ecot-bi"), MethodSpec("ecot-oc")]
    a = monte_carlo_many(specs, QUICK, 6, seed=1)
    b = monte_carlo_many(specs, QUICK, 6, seed=1, threads=2)
    assert [r.to_dict(True) for r in a] == [r.to_dict(True) for r in b]


def test_monte_carlo_checks_requirements_up_front():
    with pytest.raises(ConfigurationError):
        monte_carlo(MethodSpec("ecot-oc"), ScenarioConfig(d=10, n1=1), 2)
    with pytest.raises(ConfigurationError):
        monte_carlo(MethodSpec("ecot-bi"), QUICK, 0)


def test_paired_se():
    specs = [MethodSpec("ecot-bi"), MethodSpec("cp-bi")]
    a, b = monte_carlo_many(specs, QUICK, 8, seed=3)
    x = np.array([p[1] for p in a.per_replicate]) - np.array([p[1] for p in b.per_replicate])
    assert paired_se(a, b) == pytest.approx(np.std(x, ddof=1) / math.sqrt(8))
    assert paired_se(a, a) == 0.0


def test_global_null_keeps_fdr():
    cfg = ScenarioConfig(d=10, a=0.0, pi=0.9, n0=80, n1=20, m=60, seed=4)
    rep = monte_carlo(MethodSpec("ecot-bi"), cfg, 100, seed=4)
    assert rep.fdr_mean <= 0.1 + 3 * rep.fdr_se
