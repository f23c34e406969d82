"""Negative control: a single layer of independent proxies, each smoothing
only the keys of its own partition.

Every proxy makes its own labels uniform, but the share of traffic each
proxy receives follows the popularity of its partition, so label
frequencies across proxies still depend on the input distribution.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import List

import numpy as np

from ..hashing import PlaintextRouter
from ..pancake import AccessDistribution, plan_smoothing
from ..workload import key_name


@dataclass
class StrawmanResult:
    counts: np.ndarray  # access count per label, all proxies concatenated
    proxy_of_label: np.ndarray


def run_partitioned_proxies(true_probs: np.ndarray, estimate: np.ndarray, q: int, proxies: int,
                            rng: np.random.Generator, batch_size: int = 3,
                            real_prob: float = 0.5) -> StrawmanResult:
    """Simulate ``q`` client requests through ``proxies`` partitioned proxies.

    Keys are split by a plaintext hash. Each request goes to the proxy owning
    its key, which emits one batch of ``batch_size`` slots: with probability
    ``real_prob`` a slot serves the oldest queued request of that proxy (or,
    when the queue is empty, a key drawn from the proxy's estimate), otherwise
    it samples the proxy's fake distribution.
    """
    n = len(true_probs)
    keys = [key_name(i) for i in range(n)]
    router = PlaintextRouter(list(range(proxies)), b"strawman")
    owner = np.array([router.route(k) for k in keys])
    req_keys = rng.choice(n, size=q, p=true_probs)
    counts: List[np.ndarray] = []
    proxy_ids: List[np.ndarray] = []
    for p in range(proxies):
        members = np.flatnonzero(owner == p)
        if members.size == 0:
            continue
        est = estimate[members]
        est = est / est.sum() if est.sum() > 0 else np.full(members.size, 1.0 / members.size)
        dist = AccessDistribution({keys[i]: float(w) for i, w in zip(members, est)})
        plan = plan_smoothing(dist, batch_size)
        index = {rep: j for j, rep in enumerate(plan.replicas)}
        local = {int(m): keys[m] for m in members}
        mine = [local[int(k)] for k in req_keys if owner[k] == p]
        c = np.zeros(len(plan.replicas), dtype=np.int64)
        slots = len(mine) * batch_size
        real = rng.random(slots) < real_prob
        u = rng.random(slots)
        v = rng.random(slots)
        fake_cdf = np.cumsum(plan.fake_dist)
        fake_cdf[-1] = 1.0
        key_cdf = np.cumsum(dist.vector())
        key_cdf[-1] = 1.0
        queue: deque = deque()
        s = 0
        for key_in in mine:
            queue.append(key_in)
            for _ in range(batch_size):
                if real[s]:
                    if queue:
                        key = queue.popleft()
                    else:
                        key = dist.keys[min(int(np.searchsorted(key_cdf, u[s], side="right")), dist.n - 1)]
                    r = plan.replica_count[key]
                    j = 1 + min(int(v[s] * r), r - 1)
                    c[index[(key, j)]] += 1
                else:
                    c[min(int(np.searchsorted(fake_cdf, u[s], side="right")), len(c) - 1)] += 1
                s += 1
        counts.append(c)
        proxy_ids.append(np.full(len(c), p))
    return StrawmanResult(np.concatenate(counts), np.concatenate(proxy_ids))
