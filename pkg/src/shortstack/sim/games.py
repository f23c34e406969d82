"""Desk-scale indistinguishability games with statistical verdicts.

Labels are fresh pseudorandom strings in every run, so the only thing an
observer can compare across runs is the multiset of per-label access
counts. Two runs are compared through their count-of-counts histograms
with a two-sample chi-square test.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Sequence

import numpy as np
from scipy import stats

from ..cluster import FailureInjection
from ..workload import zipf_probs
from .scenario import RunResult, ScenarioConfig, run_scenario
from .strawman import run_partitioned_proxies

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.01
MIN_BIN = 10
# Bit-1 runs use ``seed + BIT1_SEED_OFFSET`` so the two samples are independent;
# sharing random streams would correlate them and inflate the p-values.
BIT1_SEED_OFFSET = 1_000_003


def label_count_vector(result: RunResult) -> np.ndarray:
    """Access count of every stored label (zeros included), sorted."""
    counts = result.transcript.access_counts()
    labels = result.cluster.gens[0].labels
    return np.sort(np.array([counts.get(lbl, 0) for lbl in labels], dtype=np.int64))


def uniformity_pvalue(counts: Sequence[int]) -> float:
    """Pearson chi-square of label counts against the uniform distribution."""
    c = np.asarray(counts, dtype=float)
    if c.sum() == 0:
        return 1.0
    return float(stats.chisquare(c).pvalue)


def count_histogram_test(a: Sequence[int], b: Sequence[int], min_bin: int = MIN_BIN) -> float:
    """Two-sample chi-square on count-of-counts histograms.

    Adjacent count values are merged left to right until every column holds
    at least ``min_bin`` labels across both samples. Returns the p-value.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    hi = int(max(a.max(initial=0), b.max(initial=0)))
    ha = np.bincount(a, minlength=hi + 1)
    hb = np.bincount(b, minlength=hi + 1)
    cols_a, cols_b = [], []
    acc_a = acc_b = 0
    for x, y in zip(ha.tolist(), hb.tolist()):
        acc_a += x
        acc_b += y
        if acc_a + acc_b >= min_bin:
            cols_a.append(acc_a)
            cols_b.append(acc_b)
            acc_a = acc_b = 0
    if acc_a or acc_b:
        if cols_a:
            cols_a[-1] += acc_a
            cols_b[-1] += acc_b
        else:
            cols_a.append(acc_a)
            cols_b.append(acc_b)
    table = np.array([cols_a, cols_b])
    table = table[:, table.sum(axis=0) > 0]
    if table.shape[1] < 2 or (table.sum(axis=1) == 0).any():
        return 1.0
    return float(stats.chi2_contingency(table, correction=False)[1])


def fisher_combined(pvalues: Sequence[float]) -> float:
    ps = np.clip(np.asarray(pvalues, dtype=float), 1e-300, 1.0)
    return float(stats.combine_pvalues(ps, method="fisher")[1])


@dataclass
class GameReport:
    """Outcome of matched runs under the two hidden-bit values."""

    pair_pvalues: List[float]
    combined_p: float
    alpha: float = DEFAULT_ALPHA
    notes: Dict[str, object] = field(default_factory=dict)

    @property
    def indistinguishable(self) -> bool:
        return self.combined_p > self.alpha

    @property
    def verdict(self) -> str:
        return "indistinguishable" if self.indistinguishable else "distinguishable"

    def summary(self) -> str:
        passing = sum(p > self.alpha for p in self.pair_pvalues)
        return (f"{self.verdict}: combined p={self.combined_p:.3g} over {len(self.pair_pvalues)} pairs "
                f"({passing} individually above {self.alpha})")


def ind_cdfa_verdict(cfg0: ScenarioConfig, cfg1: ScenarioConfig, seeds: Sequence[int],
                     schedule: Sequence[FailureInjection] = (), alpha: float = DEFAULT_ALPHA,
                     runner: Callable[..., RunResult] = run_scenario) -> GameReport:
    """Run ``cfg0`` (hidden bit 0) and ``cfg1`` (bit 1) under the same failure
    schedule for every seed, then compare their sorted count vectors.

    The two runs of a pair use independent random streams.
    """
    ps = []
    for seed in seeds:
        v0 = label_count_vector(runner(cfg0, seed, schedule))
        v1 = label_count_vector(runner(cfg1, seed + BIT1_SEED_OFFSET, schedule))
        p = count_histogram_test(v0, v1)
        log.info("seed %d: p=%.3g", seed, p)
        ps.append(p)
    return GameReport(ps, fisher_combined(ps), alpha)


def skew_pair(cfg: ScenarioConfig, skew0: float, skew1: float) -> tuple:
    """Configs for bit 0 and bit 1 that differ only in the (perfectly
    estimated) access distribution."""
    c0 = replace(cfg, workload=replace(cfg.workload, skew=skew0), estimate_skew=None)
    c1 = replace(cfg, workload=replace(cfg.workload, skew=skew1), estimate_skew=None)
    return c0, c1


def strawman_verdict(n: int, skew0: float, skew1: float, q: int, proxies: int, seeds: Sequence[int],
                     batch_size: int = 3, alpha: float = DEFAULT_ALPHA) -> GameReport:
    """The same comparison against independently partitioned proxies."""
    ps = []
    for seed in seeds:
        vecs = []
        for bit, skew in enumerate((skew0, skew1)):
            rng = np.random.default_rng([seed, 7, bit])
            p = zipf_probs(n, skew)
            res = run_partitioned_proxies(p, p, q, proxies, rng, batch_size)
            vecs.append(np.sort(res.counts))
        ps.append(count_histogram_test(*vecs))
    return GameReport(ps, fisher_combined(ps), alpha)
