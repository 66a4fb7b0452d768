"""Synthetic scenarios and the Monte Carlo FDR/power harness.

Random streams: replicate ``r`` of a scenario with seed ``s`` draws its data
from ``SeedSequence([s, r, 0])`` (and the variance-shift anchor set from
``SeedSequence([s, r, 1])``) with numpy's PCG64 generator.  Gaussian draws
use numpy's ziggurat sampler.  Method seeds are derived per replicate from
a separate key, so data and pruning streams never overlap.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np

from .core import ConfigurationError, MonteCarloReport, TestingProblem, derive_seed, fdp_and_power
from .methods import MethodSpec, check_requirements, run_method

SCENARIOS = ("mean-shift", "variance-shift")
_DATA, _ANCHOR = 0, 1
_METHOD_KEY = 7


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "mean-shift"
    d: int = 50
    a: float = 1.0
    pi: float = 0.95
    n0: int = 400
    n1: int = 100
    m: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if self.a < 0:
            raise ConfigurationError("signal strength a must be non-negative")
        if not 0 <= self.pi <= 1:
            raise ConfigurationError("pi must lie in [0, 1]")
        if self.d < 1 or (self.scenario == "mean-shift" and self.d < 5):
            raise ConfigurationError("mean-shift needs d >= 5")
        if self.n0 < 1 or self.m < 1 or self.n1 < 0:
            raise ConfigurationError("need n0 >= 1, m >= 1 and n1 >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def n_nonnull_test(self) -> int:
        # round half up, so the count does not depend on banker's rounding
        return int(math.floor((1 - self.pi) * self.m + 0.5 + 1e-9))


def _rng(config: ScenarioConfig, rep: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(config.seed), int(rep), stream]))


def _test_labels(config: ScenarioConfig, rng) -> np.ndarray:
    labels = np.zeros(config.m, dtype=int)
    labels[: config.n_nonnull_test] = 1
    return labels[rng.permutation(config.m)]


def mean_vector(config: ScenarioConfig) -> np.ndarray:
    """First five coordinates equal ``sqrt(a log d)``, the rest zero."""
    mu = np.zeros(config.d)
    mu[:5] = math.sqrt(config.a * math.log(config.d))
    return mu


def generate_mean_shift(config: ScenarioConfig, rep: int = 0):
    """N(0, I) nulls against N(mu, I) non-nulls; returns (problem, test labels)."""
    if config.scenario != "mean-shift":
        config = replace(config, scenario="mean-shift")
    rng = _rng(config, rep, _DATA)
    mu = mean_vector(config)
    x0 = rng.standard_normal((config.n0, config.d))
    x1 = rng.standard_normal((config.n1, config.d)) + mu
    labels = _test_labels(config, rng)
    xu = rng.standard_normal((config.m, config.d)) + labels[:, None] * mu
    return TestingProblem(x0, x1, xu), labels


def anchor_set(config: ScenarioConfig, rep: int = 0) -> np.ndarray:
    """The ``d`` anchor points of one replicate, uniform on ``[-3, 3]^d``."""
    return _rng(config, rep, _ANCHOR).uniform(-3.0, 3.0, size=(config.d, config.d))


def _variance_rows(rng, anchors, count, scale):
    v = rng.standard_normal((count, anchors.shape[1]))
    w = anchors[rng.integers(0, anchors.shape[0], size=count)]
    return np.asarray(scale).reshape(-1, 1) * v + w


def generate_variance_shift(config: ScenarioConfig, rep: int = 0):
    """``X = sqrt(1 + a Y) V + W`` with ``W`` drawn from the replicate's anchor set."""
    anchors = anchor_set(config, rep)
    rng = _rng(config, rep, _DATA)
    s1 = math.sqrt(1 + config.a)
    x0 = _variance_rows(rng, anchors, config.n0, 1.0)
    x1 = _variance_rows(rng, anchors, config.n1, s1)
    labels = _test_labels(config, rng)
    xu = _variance_rows(rng, anchors, config.m, np.where(labels == 1, s1, 1.0))
    return TestingProblem(x0, x1, xu), labels


def generate(config: ScenarioConfig, rep: int = 0):
    if config.scenario == "mean-shift":
        return generate_mean_shift(config, rep)
    return generate_variance_shift(config, rep)


def _replicate(args):
    specs, config, rep, seed = args
    problem, labels = generate(config, rep)
    out = []
    for spec in specs:
        report = run_method(problem, spec.with_seed(derive_seed(seed, rep, _METHOD_KEY)))
        out.append(fdp_and_power(report.rejected, labels, report.offset))
    return out


def monte_carlo_many(specs: Sequence[MethodSpec], config: ScenarioConfig, replicates: int,
                     seed: int = 0, threads: int = 1) -> list:
    """Run several methods on the same replicate datasets.

    Returns one :class:`MonteCarloReport` per method, in input order.  Sharing
    the data lets paired differences use a joint standard error.
    """
    if replicates < 1:
        raise ConfigurationError("replicates must be at least 1")
    specs = list(specs)
    for spec in specs:
        check_requirements(spec, config.n0, config.n1)
    config = replace(config, seed=int(seed))
    jobs = [(specs, config, r, int(seed)) for r in range(replicates)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_replicate, jobs, chunksize=max(1, replicates // (4 * threads))))
    else:
        results = [_replicate(job) for job in jobs]
    return [MonteCarloReport.from_pairs([res[k] for res in results]) for k in range(len(specs))]


def monte_carlo(spec: MethodSpec, config: ScenarioConfig, replicates: int, seed: int = 0,
                threads: int = 1) -> MonteCarloReport:
    return monte_carlo_many([spec], config, replicates, seed, threads)[0]


def paired_se(a: MonteCarloReport, b: MonteCarloReport, metric: str = "power") -> float:
    """Standard error of the mean paired difference ``a - b`` over shared replicates."""
    col = 1 if metric == "power" else 0
    x = np.array([p[col] for p in a.per_replicate]) - np.array([p[col] for p in b.per_replicate])
    if x.size < 2:
        return 0.0
    return float(np.std(x, ddof=1) / math.sqrt(x.size))
