"""Throughput, utilization and changepoint statistics over simulated runs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import ndimage, stats

from .nodes import L1Replica, L2Replica, L3Server
from .scenario import RunResult


def throughput_series(completions: Sequence[int], bucket: int, start: int = 0,
                      end: Optional[int] = None) -> np.ndarray:
    """Completions per bucket of ``bucket`` ticks over ``[start, end)``."""
    t = np.asarray(completions, dtype=np.int64)
    if end is None:
        end = int(t.max()) + 1 if t.size else start
    t = t[(t >= start) & (t < end)]
    nb = max(1, -(-(end - start) // bucket))
    return np.bincount((t - start) // bucket, minlength=nb)[:nb]


def steady_throughput(completions: Sequence[int], lo: float = 0.2, hi: float = 0.8,
                      ticks_per_second: int = 1_000_000) -> float:
    """Operations per second between the ``lo`` and ``hi`` completion quantiles."""
    t = np.sort(np.asarray(completions, dtype=np.int64))
    if t.size < 10:
        return 0.0
    i, j = int(lo * (t.size - 1)), int(hi * (t.size - 1))
    span = t[j] - t[i]
    return float((j - i) / span * ticks_per_second) if span > 0 else 0.0


def layer_utilization(result: RunResult) -> Dict[str, float]:
    """Busiest instance's busy fraction per layer over the run."""
    cl = result.cluster
    end = max(cl.sim.now, 1)
    util = {"L1": 0.0, "L2": 0.0, "L3": 0.0}
    for node in cl.nodes.values():
        if isinstance(node, L1Replica):
            util["L1"] = max(util["L1"], node.busy_total / end)
        elif isinstance(node, L2Replica):
            util["L2"] = max(util["L2"], node.busy_total / end)
        elif isinstance(node, L3Server):
            util["L3"] = max(util["L3"], node.issued * cl.config.l3_service / end)
    return util


def locate_dip(series: Sequence[float], width: int = 1, context: int = 5) -> int:
    """Index of the most pronounced throughput dip.

    Each bucket is compared with the median of its neighbourhood; the dip is
    where the running sum of shortfalls over ``width`` buckets is largest.
    """
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        return 0
    baseline = ndimage.median_filter(x, size=2 * context + 1, mode="nearest")
    short = np.maximum(baseline - x, 0.0)
    score = np.convolve(short, np.ones(width), mode="same")
    return int(np.argmax(score))


@dataclass
class LocalizationReport:
    hits_failure: int
    trials_failure: int
    hits_control: int
    trials_control: int
    p_value: float

    @property
    def better_than_chance(self) -> bool:
        return self.p_value <= 0.01


def localization_test(fail_guess: Sequence[int], fail_truth: Sequence[int],
                      ctrl_guess: Sequence[int], ctrl_truth: Sequence[int], tol: int = 1) -> LocalizationReport:
    """One-sided Fisher exact test: does the detector hit the true failure
    bucket more often than it hits the same bucket in failure-free runs?"""
    hf = sum(abs(g - t) <= tol for g, t in zip(fail_guess, fail_truth))
    hc = sum(abs(g - t) <= tol for g, t in zip(ctrl_guess, ctrl_truth))
    nf, nc = len(fail_guess), len(ctrl_guess)
    table = [[hf, nf - hf], [hc, nc - hc]]
    p = float(stats.fisher_exact(table, alternative="greater")[1])
    return LocalizationReport(hf, nf, hc, nc, p)


def chain_recovery_gap(result: RunResult, server: str, fire: int) -> Optional[int]:
    """Pause in the affected chain's store traffic around a proxy failure.

    Measured on the ticks at which L3 servers first receive requests that
    passed through the failed replica's chain: the gap between the last
    receipt before ``fire`` and the first one after it.
    """
    layer, chain = server.split(".")[0], int(server.split(".")[1])
    batches = result.audit.batches
    ticks = []
    for tick, l2_chain, batch_id in result.audit.receipts:
        mine = l2_chain == chain if layer == "L2" else batches[batch_id][0] == chain
        if mine:
            ticks.append(tick)
    t = np.sort(np.asarray(ticks, dtype=np.int64))
    i = int(np.searchsorted(t, fire))
    if i == 0 or i >= t.size:
        return None
    return int(t[i] - t[i - 1])
