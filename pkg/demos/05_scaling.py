"""Throughput as layers grow, with store access as the costly step.

Run with ``python3 demos/05_scaling.py`` (about a minute). Closed-loop
clients keep the cluster busy. First every layer grows together and
throughput grows linearly. Then L1 work is made expensive and only L1 grows,
so the bottleneck moves from L1 to L3.
"""

# %% Every layer scaled together
from shortstack.sim.metrics import layer_utilization, steady_throughput
from shortstack.sim.scenario import ScenarioConfig, run_scenario
from shortstack.workload import WorkloadSpec

for k in (1, 2, 4):
    cfg = ScenarioConfig(workload=WorkloadSpec(n=1000, q=10_000 * k, clients=128 * k), f=0, l1_chains=k,
                         l2_chains=k, l3_servers=k, client_mode="closed", vnodes=1024, l1_cost=1, l2_cost=1)
    res = run_scenario(cfg, 5)
    print(f"k={k}: {steady_throughput(res.audit.completions):9.0f} ops/s, "
          f"L3 utilization {layer_utilization(res)['L3']:.2f}")

# %% Only L1 scaled, with a costly L1 step
for l1 in (1, 2, 4, 8):
    cfg = ScenarioConfig(workload=WorkloadSpec(n=1000, q=20_000, clients=512), f=0, l1_chains=l1, l2_chains=4,
                         l3_servers=4, client_mode="closed", vnodes=1024, l1_cost=8, l2_cost=1)
    res = run_scenario(cfg, 5)
    util = layer_utilization(res)
    print(f"L1 chains {l1}: {steady_throughput(res.audit.completions):9.0f} ops/s, "
          f"L1 {util['L1']:.2f}, L2 {util['L2']:.2f}, L3 {util['L3']:.2f}")
