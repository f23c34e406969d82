"""Frequency smoothing on one proxy, step by step.

Run with ``python3 demos/01_smoothing.py``. Builds a replica plan for a
skewed distribution, draws batches, and shows that every label in the store
is touched equally often.
"""

# %% A skewed access distribution over four keys
import numpy as np
from collections import deque

from shortstack.crypto import CryptoSuite
from shortstack.pancake import AccessDistribution, ClientOp, OpKind, UniformStream, generate_batch, plan_smoothing
from shortstack.sim.games import uniformity_pvalue

dist = AccessDistribution.from_weights(["a", "b", "c", "d"], [0.7, 0.1, 0.1, 0.1])
plan = plan_smoothing(dist)
print("replicas per key:", plan.replica_count, "dummies:", plan.dummy_count)

# %% Each replica's real share plus its fake share equals 1/n
for rep, fake in zip(plan.replicas, plan.fake_dist):
    real = 0.0 if rep.is_dummy else dist.probs[rep.key] / plan.replica_count[rep.key]
    print(f"{rep.key}#{rep.index}: real {real:.3f}  fake {fake:.3f}")

# %% Labels are fixed-length PRF outputs, unlinkable without the key
crypto = CryptoSuite()
labels = plan.labels(crypto)
print("label length:", {len(x) for x in labels}, "distinct:", len(set(labels)))

# %% Draw batches from a client stream that follows the skewed distribution
rng = np.random.default_rng(0)
stream = UniformStream(rng)
pending = deque()
counts = np.zeros(plan.total_labels, dtype=int)
for i in range(20_000):
    pending.append(ClientOp(key=plan.sample_key(stream.next()), kind=OpKind.READ, op_id=(0, i)))
    for slot in generate_batch(pending, plan, stream):
        counts[plan.index_of(slot.replica)] += 1
print("per-label counts:", counts.tolist())
print(f"uniformity p-value: {uniformity_pvalue(counts):.3f}")
