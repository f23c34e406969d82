"""Can an observer of the store tell a skewed workload from a uniform one?

Run with ``python3 demos/04_games.py`` (about a minute). For each
seed the cluster runs once under Zipf 0.99 and once under uniform access
with an L3 server crashing mid-run. The sorted per-label count vectors are
compared; the per-seed p-values are combined with Fisher's method. A design
with independent proxies over disjoint key ranges serves as the contrast.
"""

# %% Configs that differ only in the access distribution
from shortstack.cluster import FailureInjection
from shortstack.sim.games import ind_cdfa_verdict, skew_pair, strawman_verdict
from shortstack.sim.scenario import ScenarioConfig
from shortstack.workload import WorkloadSpec

base = ScenarioConfig(workload=WorkloadSpec(n=200, q=10_000), f=1, l3_servers=3)
zipf, uniform = skew_pair(base, 0.99, 0.0)
schedule = [FailureInjection("L3.1", 100_000, 500, None)]
seeds = range(5)

# %% The replicated, layered cluster
report = ind_cdfa_verdict(zipf, uniform, seeds, schedule)
print("cluster:    ", report.summary())

# %% Four proxies that each smooth only their own key range
straw = strawman_verdict(200, 0.99, 0.0, 10_000, 4, seeds)
print("partitioned:", straw.summary())
