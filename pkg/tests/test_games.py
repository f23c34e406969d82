"""Statistical comparison helpers and the partitioned-proxy control."""

import numpy as np
import pytest

from shortstack.sim.games import (
    count_histogram_test,
    fisher_combined,
    ind_cdfa_verdict,
    skew_pair,
    strawman_verdict,
    uniformity_pvalue,
)
from shortstack.sim.scenario import ScenarioConfig
from shortstack.sim.strawman import run_partitioned_proxies
from shortstack.workload import WorkloadSpec, zipf_probs


def test_uniformity_pvalue():
    rng = np.random.default_rng(0)
    assert uniformity_pvalue(rng.multinomial(100_000, np.ones(200) / 200)) > 0.01
    assert uniformity_pvalue(rng.multinomial(100_000, zipf_probs(200, 1.0))) < 1e-6
    assert uniformity_pvalue([0, 0, 0]) == 1.0


def test_histogram_test_same_and_different_sources():
    rng = np.random.default_rng(1)
    a, b = rng.poisson(150, 2000), rng.poisson(150, 2000)
    assert count_histogram_test(a, b) > 0.01
    assert count_histogram_test(a, rng.poisson(165, 2000)) < 1e-6
    assert count_histogram_test([3] * 50, [3] * 50) == 1.0


def test_fisher_combination():
    assert fisher_combined([1.0, 1.0]) == pytest.approx(1.0)
    assert fisher_combined([1e-5] * 5) < 1e-10
    assert fisher_combined([0.0]) < 1e-100


def test_identical_distributions_are_indistinguishable():
    cfg = ScenarioConfig(workload=WorkloadSpec(n=100, q=3000), f=1)
    c0, c1 = skew_pair(cfg, 0.99, 0.99)
    assert ind_cdfa_verdict(c0, c1, [0, 1]).indistinguishable


def test_single_proxy_strawman_is_smooth():
    p = zipf_probs(300, 0.99)
    res = run_partitioned_proxies(p, p, 30_000, 1, np.random.default_rng(0))
    assert uniformity_pvalue(res.counts) > 0.01
    assert len(res.counts) == 600


def test_partitioned_proxies_leak_the_distribution():
    rep = strawman_verdict(300, 0.99, 0.0, 30_000, 4, [0, 1])
    assert not rep.indistinguishable and rep.combined_p < 1e-6
    assert "distinguishable" in rep.summary()
