"""Deterministic lockstep run loop and metrics export.

Per tick and per agent (ascending id): sense, integrate, maintain the graph,
emit deltas; then one network flush; then, at the partition cadence,
allocate + plan + broadcast intents; then motion; then metrics sampling.
(config, seed) fully determines coverage and communication output.
"""

from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import comms, dtg as dtg_mod, planner as planner_mod
from .comms import (
    GraphDelta,
    MsgKind,
    NetworkSim,
    ProtocolError,
    apply_message,
    canonical_state,
    encode_map_chunks,
    encode_message,
    encode_uav_links,
    encode_intent,
    replica_diff,
)
from .dtg import EroiState, MrDtg, connect_eroi, expand_uav_dijkstra, maybe_spawn_history_node, refresh_uav_links, update_erois
from .gridsearch import _shift
from .planner import (
    AgentContext,
    ExplorationTarget,
    MotionState,
    PeerIntent,
    PlanOutcome,
    advance_motion,
    plan,
    target_reached,
)
from .scenario import ScenarioConfig
from .partition import build_global_graph, global_partition, local_partition, multi_source_dijkstra
from .world import GroundTruthWorld, OccupancyState, VoxelGrid, integrate_scan, simulate_scan


@dataclass
class AgentState:
    id: int
    pose: object
    grid: VoxelGrid
    dtg: MrDtg
    field: object = None
    intents: PeerIntent = field(default_factory=PeerIntent)
    target: ExplorationTarget | None = None
    motion: MotionState | None = None
    finished: bool = False
    needs_replan: bool = True
    known_in_denom: int = 0
    seq: itertools.count = field(default_factory=itertools.count)
    last_links: dict | None = None


@dataclass
class RunMetrics:
    n_agents: int
    coverage_rows: list = field(default_factory=list)  # (t, union, per-agent...)
    comm_rows: list = field(default_factory=list)  # (t, cooperation, mapping)
    timing: dict = field(default_factory=dict)  # op -> [ms]
    termination: str = ""
    exploration_time: float | None = None
    cooperation_bytes: int = 0
    mapping_bytes: int = 0
    cooperation_bytes_single: int = 0
    mapping_bytes_single: int = 0
    dropped_messages: int = 0
    protocol_errors: int = 0
    illegal_transitions: int = 0
    allocation_violations: int = 0
    consistency_failures: int = 0
    final_divergence: list = field(default_factory=list)
    dropped_elements: list = field(default_factory=list)

    def record_time(self, op: str, ms: float):
        self.timing.setdefault(op, []).append(ms)


def ground_truth_occupancy(world: GroundTruthWorld, grid: VoxelGrid) -> np.ndarray:
    """True voxel states: a voxel counts Occupied when its center is inside
    any obstacle box."""
    dims = tuple(grid.dims)
    occ = np.zeros(dims, dtype=bool)
    res = grid.resolution
    for ob in world.obstacles:
        lo = (np.asarray(ob.lo) - grid.origin) / res - 0.5
        hi = (np.asarray(ob.hi) - grid.origin) / res - 0.5
        i0 = np.maximum(np.ceil(lo - 1e-9), 0).astype(int)
        i1 = np.minimum(np.floor(hi + 1e-9), grid.dims - 1).astype(int)
        if np.all(i1 >= i0):
            occ[i0[0]:i1[0] + 1, i0[1]:i1[1] + 1, i0[2]:i1[2] + 1] = True
    return occ


def coverage_denominator(world: GroundTruthWorld, grid: VoxelGrid, starts) -> np.ndarray:
    """Voxels that can actually become known: free space reachable from the
    agent starts plus the obstacle-surface shell around it. Enclosed interior
    voxels are excluded since no scan can ever observe them."""
    occ = ground_truth_occupancy(world, grid)
    free = ~occ
    dims = tuple(grid.dims)
    frontier = np.zeros(dims, dtype=bool)
    for pose in starts:
        ijk = grid.voxel_of(pose.position)
        frontier[tuple(ijk)] = True
    frontier &= free
    reach = frontier.copy()
    while frontier.any():
        grown = np.zeros(dims, dtype=bool)
        for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            grown |= _shift(frontier, d)
        frontier = grown & free & ~reach
        reach |= frontier
    shell = np.zeros(dims, dtype=bool)
    for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
        shell |= _shift(reach, d)
    shell &= occ
    return reach | shell


class Simulation:
    """One seeded run; everything downstream of the config is deterministic."""

    def __init__(self, cfg: ScenarioConfig):
        cfg.validate()
        self.cfg = cfg
        self.world = cfg.world
        self.net = NetworkSim(cfg.n_agents, latency=cfg.latency, jitter=cfg.jitter,
                              drop=cfg.drop, seed=cfg.seed, keep_log=cfg.keep_msg_log)
        self.agents: list[AgentState] = []
        for i, pose in enumerate(cfg.starts):
            grid = VoxelGrid.for_world(self.world, cfg.resolution)
            replica = MrDtg(grid, self.world.bounds, cfg.dtg)
            self.agents.append(AgentState(id=i, pose=pose, grid=grid, dtg=replica))
        self.denom = coverage_denominator(self.world, self.agents[0].grid, cfg.starts).reshape(-1)
        self.denom_total = int(np.count_nonzero(self.denom))
        self.union_known = np.zeros(self.agents[0].grid.n_voxels, dtype=bool)
        self.union_count = 0
        self.metrics = RunMetrics(n_agents=cfg.n_agents)
        steps = max(1, round(1.0 / (cfg.partition_hz * cfg.dt)))
        self.partition_every = steps

    # -- helpers ---------------------------------------------------------------

    def union_coverage(self) -> float:
        return self.union_count / self.denom_total if self.denom_total else 1.0

    def agent_coverage(self, a: AgentState) -> float:
        return a.known_in_denom / self.denom_total if self.denom_total else 1.0

    def _broadcast(self, sender: int, kind: int, payload: bytes, now: float):
        a = self.agents[sender]
        raw = encode_message(kind, sender, next(a.seq), payload)
        self.net.broadcast(sender, raw, now)

    def _emit_delta(self, a: AgentState, now: float):
        delta = GraphDelta.from_changelog(a.dtg.drain_changelog())
        if delta.empty():
            return
        for raw in delta.to_messages(a.id, a.seq):
            self.net.broadcast(a.id, raw, now)

    def _emit_links(self, a: AgentState, links: dict, now: float):
        if links == a.last_links:
            return
        a.last_links = dict(links)
        self._broadcast(a.id, MsgKind.UAV_LINKS, encode_uav_links(links), now)

    def _maintain(self, a: AgentState, now: float, is_partition_tick: bool):
        scan = simulate_scan(self.world, a.pose, self.cfg.sensor)
        changed = integrate_scan(a.grid, a.pose, scan)
        if changed.size:
            in_denom = changed[self.denom[changed]]
            a.known_in_denom += int(in_denom.size)
            fresh = in_denom[~self.union_known[in_denom]]
            self.union_known[fresh] = True
            self.union_count += int(fresh.size)

        a.field = expand_uav_dijkstra(a.grid, a.pose, self.cfg.dtg)
        maybe_spawn_history_node(a.field, a.pose, a.dtg, self.cfg.dtg, a.id)
        update_erois(a.dtg, a.grid, changed, self.cfg.sensor, self.cfg.dtg)
        for eid in sorted(a.dtg.erois):
            if a.dtg.erois[eid].state == EroiState.ACTIVE:
                connect_eroi(a.dtg, eid, a.id)
        links = refresh_uav_links(a.dtg, a.id, a.field)

        self._emit_delta(a, now)
        if is_partition_tick:
            self._emit_links(a, links, now)
        if self.cfg.baseline and changed.size:
            states = a.grid.states.reshape(-1)[changed]
            for chunk in encode_map_chunks(changed, states):
                self._broadcast(a.id, MsgKind.MAP_CHUNK, chunk, now)

    def _deliver(self, now: float):
        for recipient, msg in self.net.flush(now):
            a = self.agents[recipient]
            if msg.kind == MsgKind.MAP_CHUNK:
                continue  # baseline volume only; receivers discard content
            if msg.kind == MsgKind.TARGET_INTENT:
                eid, node, t = comms.decode_intent(msg.payload)
                a.intents.update(msg.sender, msg.sequence, eid, node, t, now)
                continue
            try:
                apply_message(a.dtg, msg)
            except ProtocolError:
                self.metrics.protocol_errors += 1

    def _plan_agent(self, a: AgentState, now: float):
        t0 = time.perf_counter()
        local = local_partition(a.dtg, a.id)
        global_alloc = global_partition(a.dtg, a.id)
        self.metrics.record_time("partition", (time.perf_counter() - t0) * 1e3)

        ctx = AgentContext(agent=a.id, pose=a.pose, grid=a.grid, field=a.field, dtg=a.dtg)
        t0 = time.perf_counter()
        outcome = plan(ctx, local, global_alloc, a.intents, self.cfg.planner, now)
        self.metrics.record_time("planning", (time.perf_counter() - t0) * 1e3)

        a.needs_replan = False
        if isinstance(outcome, ExplorationTarget):
            a.finished = False
            a.target = outcome
            vp = a.dtg.erois[outcome.eroi_id].viewpoints[outcome.viewpoint_index]
            a.motion = MotionState(path=outcome.path, target_yaw=vp.yaw)
            self._broadcast(a.id, MsgKind.TARGET_INTENT,
                            encode_intent(outcome.eroi_id, outcome.node_key, outcome.t_arrival), now)
        elif outcome is PlanOutcome.FINISHED:
            a.finished = True
            a.target = None
            a.motion = None
        else:  # IDLE: hold position, retry next tick
            a.finished = False
            a.target = None
            a.motion = None
            a.needs_replan = True
        return local, global_alloc

    def _check_allocations(self, allocations):
        local_sets = [alloc.erois for alloc, _ in allocations]
        for i in range(len(local_sets)):
            for j in range(i + 1, len(local_sets)):
                if local_sets[i] & local_sets[j]:
                    self.metrics.allocation_violations += 1
        global_sets = [alloc.history_nodes for _, alloc in allocations]
        seen = set()
        for s in global_sets:
            if seen & s:
                self.metrics.allocation_violations += 1
            seen |= s
        base = multi_source_dijkstra(build_global_graph(self.agents[0].dtg))
        reachable = {k for k in base.owner if k[0] == "h"}
        if seen != reachable:
            self.metrics.allocation_violations += 1

    def _check_consistency(self):
        states = {canonical_state(a.dtg) for a in self.agents}
        if len(states) > 1:
            self.metrics.consistency_failures += 1

    def tick(self, i: int):
        now = i * self.cfg.dt
        is_partition_tick = i % self.partition_every == 0

        for a in self.agents:
            self._maintain(a, now, is_partition_tick)
        self._deliver(now)
        if self.cfg.consistency_checks and self.cfg.drop == 0.0 and self.cfg.jitter == 0.0:
            self._check_consistency()

        if is_partition_tick:
            allocations = [self._plan_agent(a, now) for a in self.agents]
            if self.cfg.consistency_checks and self.cfg.drop == 0.0 and self.cfg.jitter == 0.0:
                self._check_allocations(allocations)
        else:
            for a in self.agents:
                if a.needs_replan:
                    self._plan_agent(a, now)

        for a in self.agents:
            if a.target is not None:
                if a.dtg.erois[a.target.eroi_id].state == EroiState.DEAD:
                    a.target = None
                    a.motion = None
                    a.needs_replan = True
            if a.motion is not None:
                a.pose = advance_motion(a.pose, a.motion, self.cfg.dt, self.cfg.planner)
                if a.target is not None and target_reached(a.pose, a.target, a.dtg, self.cfg.planner):
                    a.target = None
                    a.motion = None
                    a.needs_replan = True

        t_row = now + self.cfg.dt  # state after this tick
        self.metrics.coverage_rows.append(
            (t_row, self.union_coverage(), *(self.agent_coverage(a) for a in self.agents)))
        self.metrics.comm_rows.append(
            (t_row, self.net.ledger.cooperation, self.net.ledger.mapping))
        if self.metrics.exploration_time is None and self.union_coverage() >= self.cfg.coverage_target:
            self.metrics.exploration_time = t_row

    def _no_active_regions(self) -> bool:
        return all(
            all(e.state != EroiState.ACTIVE for e in a.dtg.erois.values()) for a in self.agents
        )

    def run(self) -> RunMetrics:
        cfg = self.cfg
        n_ticks = int(math.ceil(cfg.time_limit / cfg.dt))
        self.metrics.termination = "time-limit"
        for i in range(n_ticks):
            self.tick(i)
            if self.union_coverage() >= cfg.coverage_target:
                self.metrics.termination = "coverage"
                break
            if all(a.finished for a in self.agents) and self._no_active_regions():
                self.metrics.termination = "finished"
                break
        self._finalize()
        return self.metrics

    def _finalize(self):
        m = self.metrics
        led = self.net.ledger
        m.cooperation_bytes = led.cooperation
        m.mapping_bytes = led.mapping
        m.cooperation_bytes_single = led.cooperation_single
        m.mapping_bytes_single = led.mapping_single
        m.dropped_messages = len(self.net.dropped)
        m.dropped_elements = list(self.net.dropped)
        m.illegal_transitions = sum(len(a.dtg.recorder.violations) for a in self.agents)
        if self.cfg.drop > 0 or self.cfg.jitter > 0:
            base = self.agents[0].dtg
            for other in self.agents[1:]:
                m.final_divergence.extend(replica_diff(base, other.dtg))


def run(cfg: ScenarioConfig) -> RunMetrics:
    return Simulation(cfg).run()


def export_metrics(metrics: RunMetrics, out_dir) -> list[Path]:
    """Write coverage.csv, comm.csv, timing.csv, summary.csv into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    p = out / "coverage.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "union_coverage"] + [f"agent_{i}" for i in range(metrics.n_agents)])
        for row in metrics.coverage_rows:
            w.writerow([repr(float(v)) for v in row])
    written.append(p)

    p = out / "comm.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "cooperation_bytes", "mapping_bytes"])
        for t, coop, mapping in metrics.comm_rows:
            w.writerow([repr(float(t)), int(coop), int(mapping)])
    written.append(p)

    p = out / "timing.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["op", "mean_ms", "std_ms", "max_ms"])
        for op in sorted(metrics.timing):
            vals = np.asarray(metrics.timing[op])
            w.writerow([op, f"{vals.mean():.6f}", f"{vals.std():.6f}", f"{vals.max():.6f}"])
    written.append(p)

    p = out / "summary.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([
            "exploration_time", "termination_reason", "cooperation_bytes", "mapping_bytes",
            "cooperation_bytes_single", "mapping_bytes_single",
            "dropped_messages", "protocol_errors", "illegal_transitions",
        ])
        et = "" if metrics.exploration_time is None else repr(float(metrics.exploration_time))
        w.writerow([
            et, metrics.termination, metrics.cooperation_bytes, metrics.mapping_bytes,
            metrics.cooperation_bytes_single, metrics.mapping_bytes_single,
            metrics.dropped_messages, metrics.protocol_errors, metrics.illegal_transitions,
        ])
    written.append(p)
    return written
