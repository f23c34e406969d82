"""Scenario configuration and the end-to-end simulation driver."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..cluster import (
    MODE_KILL,
    FailureInjection,
    Membership,
    chain_of,
    l1_name,
    l2_name,
    l3_name,
    layer_of,
)
from ..crypto import CryptoSuite
from ..dist_change import DistributionMonitor
from ..layers import Generation, LayerTopology
from ..pancake import DUMMY_KEY, AccessDistribution, plan_smoothing
from ..storage import InMemoryKVStore, Transcript
from ..workload import ConfigError, WorkloadSpec, generate_ops, zipf_probs
from .engine import Network, Simulator
from .nodes import (
    Audit,
    ClientPool,
    KVNode,
    L1Replica,
    L2Replica,
    L3Server,
    Leader,
    Master,
)

log = logging.getLogger(__name__)


class ScheduleError(ConfigError):
    """A failure schedule that cannot be applied to the configured cluster."""


@dataclass
class ScenarioConfig:
    """Everything that determines a run besides the seed and failure schedule.

    All times are ticks (one tick is a microsecond).
    """

    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    l1_chains: int = 2
    l2_chains: int = 2
    l3_servers: int = 2
    f: int = 1
    vnodes: int = 64
    batch_size: int = 3
    estimate_skew: Optional[float] = None  # None: the estimate equals the workload distribution
    proxy_delay: Tuple[int, int] = (100, 300)
    kv_delay: Tuple[int, int] = (100, 300)
    client_delay: Tuple[int, int] = (100, 300)
    l1_cost: int = 0
    l2_cost: int = 0
    l3_service: int = 10
    client_mode: str = "open"  # open | closed
    arrival_gap: int = 20  # mean inter-arrival in open-loop mode
    client_timeout: Optional[int] = None
    idle_flush: int = 1000  # ticks a non-empty L1 queue may wait before a flush batch; 0 disables
    heartbeat_interval: int = 1000
    heartbeat_misses: int = 3
    drain_wait: Optional[int] = None  # None: twice the largest hop delay plus one
    shift_at_op: Optional[int] = None  # op index where clients switch distribution
    shift_skew: Optional[float] = None
    shift_reverse: bool = False  # reverse key popularity at the shift
    monitor_window: int = 0  # 0 disables change detection
    monitor_alpha: float = 1e-3
    force_change_tick: Optional[int] = None
    max_transitions: int = 1
    l1_unbuffered: bool = False  # test double: no L1 chain buffering
    unbuffered_spacing: int = 50
    metrics_bucket: int = 10_000
    queue_sample_interval: int = 0
    max_ticks: Optional[int] = None

    def __post_init__(self) -> None:
        if isinstance(self.workload, dict):
            self.workload = WorkloadSpec.from_dict(self.workload)
        for name in ("proxy_delay", "kv_delay", "client_delay"):
            setattr(self, name, tuple(getattr(self, name)))

    def validate(self) -> None:
        self.workload.validate()
        for name in ("l1_chains", "l2_chains", "l3_servers", "batch_size", "vnodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.f < 0:
            raise ConfigError("f: must be >= 0")
        if self.l3_servers < self.f + 1:
            raise ConfigError("l3_servers: need at least f+1")
        for name in ("proxy_delay", "kv_delay", "client_delay"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ConfigError(f"{name}: need 0 <= lo <= hi")
        if self.l3_service < 1:
            raise ConfigError("l3_service: must be >= 1")
        if self.client_mode not in ("open", "closed"):
            raise ConfigError("client_mode: must be 'open' or 'closed'")
        if self.arrival_gap < 0:
            raise ConfigError("arrival_gap: must be >= 0")

    def to_dict(self) -> dict:
        doc = asdict(self)
        for name in ("proxy_delay", "kv_delay", "client_delay"):
            doc[name] = list(doc[name])
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"scenario: unknown field(s) {sorted(extra)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("scenario: top level must be an object")
        return cls.from_dict(doc)


@dataclass
class RunResult:
    transcript: Transcript
    audit: Audit
    metrics: Dict[str, object]
    cluster: "Cluster"


def initial_value(key: str) -> bytes:
    return b"init:" + key.encode()


def server_names(cfg: ScenarioConfig) -> List[str]:
    names = [l1_name(c, i) for c in range(cfg.l1_chains) for i in range(cfg.f + 1)]
    names += [l2_name(c, i) for c in range(cfg.l2_chains) for i in range(cfg.f + 1)]
    names += [l3_name(s) for s in range(cfg.l3_servers)]
    return names


def validate_schedule(cfg: ScenarioConfig, schedule: Sequence[FailureInjection]) -> None:
    """Reject unknown servers and schedules no configuration could survive."""
    known = set(server_names(cfg))
    per_chain: Dict[Tuple[str, int], int] = {}
    seen = set()
    l3_down = 0
    for inj in schedule:
        if inj.server not in known:
            raise ScheduleError(f"schedule references unknown server {inj.server!r}")
        if inj.server in seen:
            raise ScheduleError(f"server {inj.server} fails more than once")
        seen.add(inj.server)
        layer = layer_of(inj.server)
        if layer == "L3":
            l3_down += 1
        else:
            k = (layer, chain_of(inj.server))
            per_chain[k] = per_chain.get(k, 0) + 1
            if per_chain[k] > cfg.f:
                raise ScheduleError(f"more than f={cfg.f} failures in {layer} chain {k[1]}")
    if l3_down >= cfg.l3_servers:
        raise ScheduleError("schedule fails every L3 server")


def client_ops(cfg: ScenarioConfig, sim: Simulator) -> List[Tuple[str, str]]:
    """The client operation stream, switching distribution at ``shift_at_op``."""
    spec = cfg.workload
    rng = sim.rng("workload")
    base = zipf_probs(spec.n, spec.skew)
    if cfg.shift_at_op is None:
        return list(generate_ops(spec, rng, base))
    cut = max(0, min(cfg.shift_at_op, spec.q))
    after = shifted_probs(cfg)
    first = WorkloadSpec(**{**spec.to_dict(), "q": cut}) if cut else None
    second = WorkloadSpec(**{**spec.to_dict(), "q": spec.q - cut}) if spec.q - cut else None
    ops = list(generate_ops(first, rng, base)) if first else []
    if second:
        ops += list(generate_ops(second, rng, after))
    return ops


def shifted_probs(cfg: ScenarioConfig) -> np.ndarray:
    spec = cfg.workload
    p = zipf_probs(spec.n, spec.skew if cfg.shift_skew is None else cfg.shift_skew)
    return p[::-1].copy() if cfg.shift_reverse else p


class Cluster:
    """Wires the simulated processes together for one run."""

    def __init__(self, cfg: ScenarioConfig, seed: int, schedule: Sequence[FailureInjection] = ()):
        cfg.validate()
        validate_schedule(cfg, schedule)
        self.config = cfg
        self.seed = seed
        self.sim = Simulator(seed)
        self.net = Network(self.sim, {"proxy": cfg.proxy_delay, "kv": cfg.kv_delay, "client": cfg.client_delay})
        self.drain_wait = cfg.drain_wait if cfg.drain_wait is not None else 2 * self.net.max_delay + 1
        self.audit = Audit()
        self._batch_ids = 0
        spec = cfg.workload
        self.crypto = CryptoSuite.from_seed(int(self.sim.rng("keys").integers(1 << 62)), value_size=spec.value_size)
        keys = spec.keys
        self.true_dist = AccessDistribution.from_weights(keys, zipf_probs(spec.n, spec.skew))
        est_skew = spec.skew if cfg.estimate_skew is None else cfg.estimate_skew
        self.estimate = AccessDistribution.from_weights(keys, zipf_probs(spec.n, est_skew))
        self.plan = plan_smoothing(self.estimate, cfg.batch_size)
        self.gens: Dict[int, Generation] = {0: Generation.initial(self.plan, self.crypto)}

        self.l1_ids = list(range(cfg.l1_chains))
        self.l2_ids = list(range(cfg.l2_chains))
        l3 = [l3_name(s) for s in range(cfg.l3_servers)]
        self.topo = LayerTopology(self.l1_ids, self.l2_ids, l3, cfg.f, cfg.vnodes)
        self.initial_ring = self.topo.ring()
        self.view = Membership(
            {c: [l1_name(c, i) for i in range(cfg.f + 1)] for c in self.l1_ids},
            {c: [l2_name(c, i) for i in range(cfg.f + 1)] for c in self.l2_ids},
            l3, self.initial_ring)

        self.transcript = Transcript()
        sim = self.sim
        self.store = InMemoryKVStore(self.transcript, clock=lambda: sim.now)
        self._populate()

        self.nodes: Dict[str, object] = {}
        self.kv = KVNode(self, self.store)
        self.master = Master(self)
        monitor = None
        if cfg.monitor_window:
            monitor = DistributionMonitor(keys, self.estimate.vector(), cfg.monitor_window, cfg.monitor_alpha)
        self.leader = Leader(self, monitor, cfg.max_transitions)
        for c in self.l1_ids:
            for i in range(cfg.f + 1):
                self._add(L1Replica(self, c, i))
        for c in self.l2_ids:
            for i in range(cfg.f + 1):
                self._add(L2Replica(self, c, i))
        for s in l3:
            self._add(L3Server(self, s))
        self.ops = client_ops(cfg, sim)
        arrivals = None
        if cfg.client_mode == "open":
            gaps = sim.rng("arrivals").exponential(cfg.arrival_gap, size=len(self.ops)) if cfg.arrival_gap else np.zeros(len(self.ops))
            arrivals = np.floor(np.cumsum(gaps)).astype(np.int64).tolist()
        self.clients = ClientPool(self, self.ops, arrivals, spec.clients, cfg.client_timeout)
        self.schedule = list(schedule)
        for inj in self.schedule:
            self.master.schedule(inj)
        if cfg.force_change_tick is not None:
            sim.at(cfg.force_change_tick, self._force_change, None)
        if cfg.queue_sample_interval:
            sim.at(0, self._sample_queues, None)

    # -- helpers used by the nodes ------------------------------------------
    def _add(self, node) -> None:
        self.nodes[node.name] = node

    def node(self, name: str):
        return self.nodes[name]

    def next_batch_id(self) -> int:
        self._batch_ids += 1
        return self._batch_ids

    def all_labels(self) -> List[bytes]:
        return self.gens[0].labels

    def notify_targets(self) -> Iterable:
        yield from self.nodes.values()
        yield self.clients
        yield self.leader

    def _populate(self) -> None:
        items = []
        for rep, label in self.gens[0].label_map.items():
            value = b"" if rep.key == DUMMY_KEY else initial_value(rep.key)
            items.append((label, self.crypto.encrypt_value(value, label)))
        self.store.bulk_insert(items)

    def _force_change(self, _) -> None:
        keys = self.config.workload.keys
        self.leader.start(AccessDistribution.from_weights(keys, shifted_probs(self.config)))

    def _sample_queues(self, _) -> None:
        l1 = sum(len(n.pending) for n in self.nodes.values() if isinstance(n, L1Replica) and not n.dead)
        l2 = sum(len(n.buffer) for n in self.nodes.values() if isinstance(n, L2Replica) and not n.dead)
        l3 = sum(sum(len(q) for q in n.queues.values()) for n in self.nodes.values()
                 if isinstance(n, L3Server) and not n.dead)
        self.audit.queue_samples.append((self.sim.now, l1, l2, l3))
        if self.clients.done < len(self.ops):
            self.sim.at(self.sim.now + self.config.queue_sample_interval, self._sample_queues, None)

    def kill_after_event(self, index: int, server: str, r: int = 300) -> None:
        """Kill ``server`` right after the ``index``-th event; the master
        declares it ``r`` ticks later."""

        def fire() -> None:
            inj = FailureInjection(server, self.sim.now, 0, r)
            self.schedule.append(inj)
            self.master.schedule(inj)

        self.sim.after_event(index, fire)

    # -- driving -----------------------------------------------------------
    def run(self) -> RunResult:
        self.clients.start()
        self.sim.run(until=self.config.max_ticks)
        return RunResult(self.transcript, self.audit, self.metrics(), self)

    def metrics(self) -> Dict[str, object]:
        a = self.audit
        done = a.completions
        bucket = self.config.metrics_bucket
        if done:
            counts = np.bincount(np.asarray(done) // bucket).tolist()
        else:
            counts = []
        return {
            "ops": len(self.ops),
            "ops_completed": len(done),
            "end_tick": self.sim.now,
            "events": self.sim.events,
            "messages": self.net.sent,
            "batches": len(a.batches),
            "throughput_buckets": counts,
            "bucket_ticks": bucket,
            "generations": sorted(self.gens),
            "transitions": list(self.leader.log),
            "failures": [asdict(f) for f in a.failures],
            "epochs": [(t, c.server) for t, c in a.epochs],
            "recovery_gaps": recovery_gaps(self.schedule, a),
            "l2_generation_faults": len(a.l2_generation_faults),
        }


def recovery_gaps(schedule: Sequence[FailureInjection], audit: Audit) -> Dict[str, int]:
    """Longest pause between client completions spanning each failure."""
    done = np.asarray(audit.completions, dtype=np.int64)
    out = {}
    for inj in schedule:
        if inj.mode != MODE_KILL or done.size == 0:
            continue
        i = int(np.searchsorted(done, inj.fire_time))
        if 0 < i < done.size:
            out[inj.server] = int(done[i] - done[i - 1])
    return out


def run_scenario(cfg: ScenarioConfig, seed: int, schedule: Sequence[FailureInjection] = ()) -> RunResult:
    """Simulate one full run and return the store transcript plus the audit log."""
    return Cluster(cfg, seed, schedule).run()
