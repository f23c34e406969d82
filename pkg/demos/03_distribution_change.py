"""Switching to a new access distribution while the cluster keeps serving.

Run with ``python3 demos/03_distribution_change.py``. Clients flip key
popularity partway through; a forced change installs a swap generation and
then the final one. The store never gains or loses a label, and every label
keeps the same share of batch slots in each generation.
"""

# %% The swap plan between a Zipf estimate and its reverse
import numpy as np

from shortstack.crypto import CryptoSuite
from shortstack.dist_change import build_swap_plan, label_share
from shortstack.layers import Generation
from shortstack.pancake import AccessDistribution, plan_smoothing
from shortstack.sim.checks import check_cut_points, check_replica_total
from shortstack.sim.scenario import ScenarioConfig, run_scenario
from shortstack.workload import WorkloadSpec, zipf_probs

keys = [f"k{i}" for i in range(30)]
old = plan_smoothing(AccessDistribution.from_weights(keys, zipf_probs(30, 0.99)))
new_dist = AccessDistribution.from_weights(keys, zipf_probs(30, 0.99)[::-1])
current = Generation.initial(old, CryptoSuite())
swap = build_swap_plan(old, new_dist, current.label_map)
print(f"{len(swap.pairs)} replicas change key; real-slot probability during the swap: {swap.real_prob:.3f}")
for gen in (current, swap.swap_generation(1), swap.final_generation(2)):
    share = np.array(list(label_share(gen).values()))
    print(f"generation {gen.number}: {share.size} labels, share min {share.min():.5f} max {share.max():.5f}")

# %% The same switch inside a running cluster
cfg = ScenarioConfig(workload=WorkloadSpec(n=30, q=1500), f=1, l3_servers=3, shift_at_op=500,
                     shift_reverse=True, force_change_tick=20000)
result = run_scenario(cfg, seed=1)
for step in result.audit.protocol:
    print("protocol:", step)
print("generations:", sorted(result.cluster.gens))
print(check_cut_points(result).line())
print(check_replica_total(result).line())
