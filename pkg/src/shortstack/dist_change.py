"""Access-distribution monitoring, change detection and replica swapping.

A transition runs in two atomic steps. The first switches every proxy to a
swap phase in which keys that gain replicas only serve real accesses from
the replicas they already had, while fakes follow a temporary distribution
that keeps every label at ``1/(2n)``. Once every gained replica holds its
key's value, a second step switches to the final plan.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from scipy import stats

from .layers import Generation
from .pancake import DUMMY_KEY, AccessDistribution, Replica, SmoothingPlan, plan_smoothing

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 10_000
DEFAULT_ALPHA = 1e-3
MIN_EXPECTED = 5.0


# ---------------------------------------------------------------------------
# Monitoring


def pooled_chi_square(counts: np.ndarray, probs: np.ndarray, min_expected: float = MIN_EXPECTED) -> Tuple[float, float]:
    """Pearson goodness-of-fit with low-expectation cells pooled.

    Cells are sorted by expected count and merged greedily until each pooled
    cell expects at least ``min_expected`` observations. Returns
    ``(statistic, p_value)``.
    """
    total = counts.sum()
    if total == 0:
        return 0.0, 1.0
    expected = probs * total
    order = np.argsort(expected, kind="stable")
    obs_bins, exp_bins = [], []
    acc_o = acc_e = 0.0
    for i in order:
        acc_o += counts[i]
        acc_e += expected[i]
        if acc_e >= min_expected:
            obs_bins.append(acc_o)
            exp_bins.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 or acc_o > 0:
        if exp_bins:
            obs_bins[-1] += acc_o
            exp_bins[-1] += acc_e
        else:
            obs_bins.append(acc_o)
            exp_bins.append(acc_e)
    if len(obs_bins) < 2:
        return 0.0, 1.0
    o = np.asarray(obs_bins)
    e = np.asarray(exp_bins)
    stat = float(((o - e) ** 2 / e).sum())
    return stat, float(stats.chi2.sf(stat, len(o) - 1))


@dataclass
class DistributionMonitor:
    """Tumbling window of plaintext keys observed by the leader."""

    keys: List[str]
    estimate: np.ndarray
    window: int = DEFAULT_WINDOW
    alpha: float = DEFAULT_ALPHA
    counts: np.ndarray = field(init=False)
    filled: int = 0
    candidate: Optional[np.ndarray] = None
    tests_run: int = 0

    def __post_init__(self) -> None:
        self._index = {k: i for i, k in enumerate(self.keys)}
        self.estimate = np.asarray(self.estimate, dtype=float)
        self.counts = np.zeros(len(self.keys), dtype=np.int64)

    def reset(self, estimate: Optional[np.ndarray] = None) -> None:
        if estimate is not None:
            self.estimate = np.asarray(estimate, dtype=float)
        self.counts[:] = 0
        self.filled = 0
        self.candidate = None


def observe_key(monitor: DistributionMonitor, key: str) -> Optional[np.ndarray]:
    """Record one key; returns the new estimate when a change is detected."""
    monitor.counts[monitor._index[key]] += 1
    monitor.filled += 1
    if monitor.filled < monitor.window:
        return None
    found = detect_change(monitor)
    monitor.counts[:] = 0
    monitor.filled = 0
    return found


def detect_change(monitor: DistributionMonitor) -> Optional[np.ndarray]:
    """Chi-square test of the full window against the current estimate.

    On rejection the candidate estimate is the add-one smoothed window.
    """
    if monitor.filled < monitor.window or monitor.filled == 0:
        return None
    monitor.tests_run += 1
    _, p = pooled_chi_square(monitor.counts, monitor.estimate)
    if p >= monitor.alpha:
        return None
    smoothed = (monitor.counts + 1.0) / (monitor.counts.sum() + len(monitor.counts))
    monitor.candidate = smoothed
    log.info("distribution change detected (p=%.3g)", p)
    return smoothed


# ---------------------------------------------------------------------------
# Swap planning


class PhasePlan:
    """Batch sampler used while replicas are being swapped.

    Exposes the same sampling interface as :class:`SmoothingPlan`.
    """

    def __init__(self, dist: AccessDistribution, replica_count: Dict[str, int], dummy_count: int,
                 fake_dist: np.ndarray, batch_size: int):
        self.dist = dist
        self.replica_count = dict(replica_count)
        self.dummy_count = dummy_count
        self.batch_size = batch_size
        self.replicas = [Replica(k, j) for k in dist.keys for j in range(1, replica_count[k] + 1)]
        self.replicas += [Replica(DUMMY_KEY, j) for j in range(1, dummy_count + 1)]
        self.fake_dist = np.asarray(fake_dist, dtype=float)
        self._fake_cdf = np.cumsum(self.fake_dist)
        self._fake_cdf[-1] = 1.0
        self._key_cdf = np.cumsum(dist.vector())
        self._key_cdf[-1] = 1.0
        self._keys = dist.keys

    @property
    def n(self) -> int:
        return self.dist.n

    def sample_fake(self, u: float) -> Replica:
        return self.replicas[int(np.searchsorted(self._fake_cdf, u, side="right"))]

    def sample_key(self, u: float) -> str:
        return self._keys[int(np.searchsorted(self._key_cdf, u, side="right"))]


@dataclass
class SwapPlan:
    """Everything the leader piggybacks on the first prepare message."""

    old_plan: SmoothingPlan
    new_plan: SmoothingPlan
    pairs: List[Tuple[Replica, Replica]]  # (replica losing its label, replica gaining it)
    read_counts: Dict[str, int]
    real_prob: float
    temp_fake: np.ndarray  # aligned with the swap-phase replica list
    label_map: Dict[Replica, bytes]  # same in the swap phase and afterwards

    @property
    def gains(self) -> List[Replica]:
        return [g for _, g in self.pairs]

    @property
    def losses(self) -> List[Replica]:
        return [l for l, _ in self.pairs]

    def phase_plan(self) -> PhasePlan:
        p = self.new_plan
        return PhasePlan(p.dist, p.replica_count, p.dummy_count, self.temp_fake, p.batch_size)

    def swap_generation(self, number: int) -> Generation:
        gained: Dict[str, List[int]] = {}
        for rep in self.gains:
            if rep.key != DUMMY_KEY:
                gained.setdefault(rep.key, []).append(rep.index)
        return Generation(number, self.phase_plan(), dict(self.label_map), self.real_prob,
                          dict(self.read_counts), dict(self.new_plan.replica_count),
                          {k: tuple(v) for k, v in gained.items()}, final=False)

    def final_generation(self, number: int) -> Generation:
        return Generation(number, self.new_plan, dict(self.label_map))

    def to_json(self) -> str:
        doc = {
            "format": "shortstack-swap",
            "version": 1,
            "new_plan": json.loads(self.new_plan.to_json()),
            "pairs": [[[l.key, l.index], [g.key, g.index]] for l, g in self.pairs],
            "read_counts": self.read_counts,
            "real_prob": self.real_prob,
            "temp_fake": self.temp_fake.tolist(),
            "label_map": [[r.key, r.index, lbl.hex()] for r, lbl in self.label_map.items()],
        }
        return json.dumps(doc)


def build_swap_plan(old: SmoothingPlan, new_dist: AccessDistribution,
                    old_map: Mapping[Replica, bytes]) -> SwapPlan:
    """Pair every lost replica with a gained one and derive the swap phase.

    A gained replica inherits the label of the replica it is paired with,
    so the set of labels in the store never changes. During the swap phase a
    real access to key ``k`` targets one of its first
    ``min(R(k), R'(k))`` replicas. The real probability ``rho`` is the
    largest value (at most 1/2) that keeps every label's real share at or
    below ``1/(2n)``; the temporary fake distribution fills the rest.
    """
    if new_dist.keys != old.dist.keys:
        raise ValueError("new distribution must cover the same keys in the same order")
    new = plan_smoothing(new_dist, old.batch_size)
    n = old.n
    keys = new_dist.keys + [DUMMY_KEY]
    losses: List[Replica] = []
    gains: List[Replica] = []
    for k in keys:
        r_old, r_new = old.count(k), new.count(k)
        losses += [Replica(k, j) for j in range(r_new + 1, r_old + 1)]
        gains += [Replica(k, j) for j in range(r_old + 1, r_new + 1)]
    assert len(losses) == len(gains), "replica totals must match"
    pairs = list(zip(losses, gains))

    final_map: Dict[Replica, bytes] = {}
    for rep in new.replicas:
        if rep in old_map:
            final_map[rep] = old_map[rep]
    for lost, gained in pairs:
        final_map[gained] = old_map[lost]
    assert len(final_map) == 2 * n and len(set(final_map.values())) == 2 * n

    probs = new_dist.probs
    read_counts = {k: min(old.replica_count[k], new.replica_count[k]) for k in new_dist.keys}
    rho = 0.5
    for k in new_dist.keys:
        if probs[k] > 0:
            rho = min(rho, read_counts[k] / (2 * n * probs[k]))
    temp = np.empty(len(new.replicas))
    for i, rep in enumerate(new.replicas):
        real = 0.0
        if rep.key != DUMMY_KEY and rep.index <= read_counts[rep.key]:
            real = probs[rep.key] / read_counts[rep.key]
        temp[i] = max(0.0, (1.0 / (2 * n) - rho * real) / (1.0 - rho))
    temp = temp / temp.sum()
    return SwapPlan(old, new, pairs, read_counts, rho, temp, final_map)


def label_share(gen: Generation) -> Dict[bytes, float]:
    """Probability that one batch slot of ``gen`` touches each label.

    Analytic: real slots spread over the first ``real_targets(k)`` replicas
    of each key, fake slots follow the sampler's fake distribution.
    """
    s = gen.sampler
    share: Dict[bytes, float] = {lbl: 0.0 for lbl in gen.label_map.values()}
    probs = s.dist.probs
    for rep, fp in zip(s.replicas, s.fake_dist):
        lbl = gen.label_map[rep]
        share[lbl] += (1 - gen.real_prob) * float(fp)
        if rep.key != DUMMY_KEY and rep.index <= gen.real_targets(rep.key):
            share[lbl] += gen.real_prob * probs[rep.key] / gen.real_targets(rep.key)
    return share


# ---------------------------------------------------------------------------
# Transition bookkeeping

PHASE_IDLE = "idle"
PHASE_PREPARE = "prepare"
PHASE_COMMIT = "commit"
_NEXT_PHASE = {PHASE_IDLE: PHASE_PREPARE, PHASE_PREPARE: PHASE_COMMIT, PHASE_COMMIT: PHASE_IDLE}


class TransitionError(RuntimeError):
    pass


@dataclass
class TransitionState:
    """Leader-side view of one two-phase switch."""

    phase: str = PHASE_IDLE
    target_gen: Optional[int] = None
    prepare_acks: set = field(default_factory=set)
    commit_acks: set = field(default_factory=set)
    history: List[str] = field(default_factory=lambda: [PHASE_IDLE])

    def advance(self, to: str) -> None:
        if _NEXT_PHASE[self.phase] != to:
            raise TransitionError(f"illegal transition {self.phase} -> {to}")
        self.phase = to
        self.history.append(to)
        if to == PHASE_PREPARE:
            self.prepare_acks.clear()
            self.commit_acks.clear()
