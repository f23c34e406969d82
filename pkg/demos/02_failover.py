"""Failures in every layer of a simulated cluster.

Run with ``python3 demos/02_failover.py``. One L1 replica, one L2 replica
and one L3 server fail during a run. Afterwards every invariant still holds
and the dead L3 server's labels have moved to their new ring owners.
"""

# %% Configure a small cluster and a failure schedule
from collections import Counter

from shortstack.cluster import format_schedule, parse_schedule
from shortstack.sim.checks import invariant_suite
from shortstack.sim.scenario import ScenarioConfig, run_scenario
from shortstack.workload import WorkloadSpec

cfg = ScenarioConfig(workload=WorkloadSpec(n=100, q=5000, read_fraction=0.5), f=1, l3_servers=3)
schedule = parse_schedule("""
# server  fire_time  gamma  r   (r "-" means heartbeat detection)
L1.0.0     20000      0            300
L2.1.1     40000      200          -
L3.2       60000      300          500
""")
print(format_schedule(schedule))

# %% Simulate
result = run_scenario(cfg, seed=7, schedule=schedule)
print({k: result.metrics[k] for k in ("ops", "ops_completed", "batches", "end_tick")})

# %% Membership changes as the master announced them
for tick, change in result.audit.epochs:
    print(f"tick {tick}: epoch {change.epoch} removes {change.server}")

# %% Store traffic per L3 server before and after the L3 failure
before = Counter(r.server for r in result.transcript if r.op == "get" and r.tick < 60000)
after = Counter(r.server for r in result.transcript if r.op == "get" and r.tick > 62000)
print("before:", dict(sorted(before.items())))
print("after: ", dict(sorted(after.items())))

# %% Every invariant checker on this run
for res in invariant_suite(result):
    print(res.line())
