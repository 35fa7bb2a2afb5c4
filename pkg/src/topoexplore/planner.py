"""Hierarchical exploration planning and simple waypoint motion.

Target choice runs in three tiers: closest locally allocated region, then the
closest region hanging off an owned history node, then the history node with
the best crowd-discounted gain anywhere in the graph. Motion follows the
planned polyline at constant speed; trajectory smoothing is out of scope.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .dtg import EroiState, MrDtg, ViewpointState, agent_key, eroi_key
from .gridsearch import GridField
from .partition import GlobalAllocation, LocalAllocation
from .world import AgentPose, OccupancyState, VoxelGrid, normalize_yaw


@dataclass
class PlannerConfig:
    n_tau: float = 0.2  # regions a peer clears per second
    g_l: float = 0.08  # residual pull toward contested nodes
    lam: float = 0.1  # path-cost discount rate, 1/s
    vel_max: float = 1.5  # m/s
    arrival_dist: float = 0.5  # m
    arrival_yaw_deg: float = 10.0
    intent_stale_s: float = 5.0
    astar_max_pops: int = 60000

    def __post_init__(self):
        if min(self.n_tau, self.g_l, self.lam) < 0 or self.vel_max <= 0:
            raise ValueError("planner parameters out of range")


@dataclass
class ExplorationTarget:
    eroi_id: int
    viewpoint_index: int
    node_key: tuple | None  # history node the region hangs off, if any
    t_arrival: float  # heuristic arrival estimate, seconds
    path: np.ndarray  # (K, 3) waypoints from agent position to the viewpoint


class PlanOutcome(Enum):
    FINISHED = "finished"
    IDLE = "idle"


@dataclass
class PeerIntent:
    """Latest claimed target per peer, newest sequence wins."""

    entries: dict = field(default_factory=dict)  # agent -> (seq, eroi, node_key, t, recv_time)

    def update(self, agent: int, seq: int, eroi_id: int, node_key, t: float, now: float):
        cur = self.entries.get(agent)
        if cur is None or seq >= cur[0]:
            self.entries[agent] = (seq, eroi_id, node_key, t, now)

    def fresh(self, now: float, stale_s: float):
        return {
            a: (eroi, node, t)
            for a, (seq, eroi, node, t, rx) in sorted(self.entries.items())
            if now - rx <= stale_s
        }


@dataclass
class AgentContext:
    """Everything the planner may read about its own agent."""

    agent: int
    pose: AgentPose
    grid: VoxelGrid
    field: GridField
    dtg: MrDtg


def graph_distances(dtg: MrDtg, agent: int) -> dict:
    """Single-source distances from the agent over links plus graph edges."""
    adjacency: dict = {}

    def add(a, b, w):
        adjacency.setdefault(a, []).append((b, w))
        adjacency.setdefault(b, []).append((a, w))

    me = agent_key(agent)
    for key, w in sorted(dtg.uav_links.get(agent, {}).items()):
        if key[0] == "h" and key not in dtg.nodes:
            continue
        add(me, key, max(float(w), 1e-9))
    for edge in dtg.edges.values():
        add(edge.key[0], edge.key[1], edge.weight)
    for lst in adjacency.values():
        lst.sort()

    dist = {me: 0.0}
    heap = [(0.0, me)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist.get(u, math.inf):
            continue
        for v, w in adjacency.get(u, ()):
            nd = d + w
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def node_eroi_edges(dtg: MrDtg, nkey) -> list:
    out = []
    for e in dtg.edges.values():
        if e.is_eroi_edge and nkey in e.key and dtg.erois[e.eroi_id].state == EroiState.ACTIVE:
            out.append(e)
    return sorted(out, key=lambda e: (e.weight, e.eroi_id))


def estimate_time_cost(ctx: AgentContext, nkey, cfg: PlannerConfig,
                       dist_map: dict | None = None) -> float:
    """Heuristic seconds to reach a node and clear its nearest region:
    (graph distance to the node + its cheapest region edge) / vel_max."""
    dist_map = dist_map if dist_map is not None else graph_distances(ctx.dtg, ctx.agent)
    d = dist_map.get(nkey)
    if d is None:
        return math.inf
    eroi_edges = node_eroi_edges(ctx.dtg, nkey)
    d_eroi = eroi_edges[0].weight if eroi_edges else 0.0
    return (d + d_eroi) / cfg.vel_max


def history_gain(nkey, dtg: MrDtg, intents: dict, t_i: float, cfg: PlannerConfig) -> float:
    """Crowd-discounted worth of relocating to a history node.

    `intents` maps peer -> (eroi_id, node_key, t_j); peers already heading to
    this node eat into the region budget they will clear before we arrive.
    """
    n_e = len(node_eroi_edges(dtg, nkey))
    if n_e == 0:
        return 0.0
    peers = [(a, t_j) for a, (eroi, node, t_j) in sorted(intents.items()) if node == nkey]
    n_u = len(peers)
    eaten = sum(max(t_i - t_j, 0.0) * cfg.n_tau for _, t_j in peers)
    numer = max(n_e - eaten, 0.0) + n_e * cfg.g_l
    return numer / (n_u + 1) * math.exp(-cfg.lam * t_i)


def _closest_active_eroi(dtg: MrDtg, eroi_ids, dist_map) -> list:
    """Candidate regions ordered by graph distance, ties by id."""
    ranked = []
    for eid in sorted(eroi_ids):
        if dtg.erois[eid].state != EroiState.ACTIVE:
            continue
        d = dist_map.get(eroi_key(eid), math.inf)
        ranked.append((d, eid))
    ranked.sort()
    return [(eid, d) for d, eid in ranked if math.isfinite(d)]


def _target_viewpoint(ctx: AgentContext, eid: int) -> tuple[int, tuple | None] | None:
    """Pick the viewpoint to visit: the field-closest active one when the
    agent links the region directly, else the one its connecting edge ends at."""
    dtg = ctx.dtg
    eroi = dtg.erois[eid]
    best = None
    for vi, vp in enumerate(eroi.viewpoints):
        if vp.state != ViewpointState.ACTIVE:
            continue
        f = ctx.grid.flat_of_point(vp.position)
        if f is not None and ctx.field.contains(f):
            cand = (ctx.field.cost(f), vi)
            if best is None or cand < best:
                best = cand
    if best is not None:
        return best[1], _connected_node(dtg, eid)
    if eroi.connecting_edge is not None:
        edge = dtg.edges[eroi.connecting_edge]
        if edge.viewpoint_index is not None:
            return edge.viewpoint_index, _connected_node(dtg, eid)
        # Peer-created edge: head for the viewpoint whose voxel matches the
        # path end next to the region.
        end = edge.path[-1] if edge.key[1][0] == "e" else edge.path[0]
        fend = ctx.grid.flat_of_point(end)
        for vi, vp in enumerate(eroi.viewpoints):
            if vp.state != ViewpointState.ACTIVE:
                continue
            if ctx.grid.flat_of_point(vp.position) == fend:
                return vi, _connected_node(dtg, eid)
        for vi, vp in enumerate(eroi.viewpoints):
            if vp.state == ViewpointState.ACTIVE:
                return vi, _connected_node(dtg, eid)
    return None


def _connected_node(dtg: MrDtg, eid: int):
    key = dtg.erois[eid].connecting_edge
    if key is None:
        return None
    a, b = dtg.edges[key].key
    return b if a[0] == "e" else a


def plan(ctx: AgentContext, local: LocalAllocation, global_alloc: GlobalAllocation,
         intents: PeerIntent, cfg: PlannerConfig, now: float):
    """Choose the next target (or Finished/Idle) for one agent.

    Local allocation always preempts global relocation; within a tier,
    candidates are tried closest-first and unreachable ones are skipped.
    """
    dtg = ctx.dtg
    dist_map = graph_distances(dtg, ctx.agent)
    fresh = intents.fresh(now, cfg.intent_stale_s)

    if local.erois:
        # Local allocation preempts everything; exhausted candidates mean a
        # retry next tick, never a fall-through to global relocation.
        ranked = _closest_active_eroi(dtg, local.erois, dist_map)
        return _try_candidates(ctx, ranked, dist_map, cfg) or PlanOutcome.IDLE

    owned_with_eroi = [
        (d, nk)
        for nk in sorted(global_alloc.history_nodes)
        if node_eroi_edges(dtg, nk) and math.isfinite(d := dist_map.get(nk, math.inf))
    ]
    if owned_with_eroi:
        owned_with_eroi.sort()
        candidates = []
        for _, nk in owned_with_eroi:
            for e in node_eroi_edges(dtg, nk):
                candidates.append((e.eroi_id, dist_map.get(eroi_key(e.eroi_id), math.inf)))
        return _try_candidates(ctx, candidates, dist_map, cfg) or PlanOutcome.IDLE

    gains = []
    for nk in sorted(dtg.nodes):
        t_i = estimate_time_cost(ctx, nk, cfg, dist_map)
        if not math.isfinite(t_i):
            continue
        g = history_gain(nk, dtg, fresh, t_i, cfg)
        if g > 0.0:
            gains.append((-g, nk, t_i))
    if not gains:
        return PlanOutcome.FINISHED
    gains.sort()
    candidates = []
    for _, nk, _ in gains:
        for e in node_eroi_edges(dtg, nk):
            candidates.append((e.eroi_id, dist_map.get(eroi_key(e.eroi_id), math.inf)))
    return _try_candidates(ctx, candidates, dist_map, cfg) or PlanOutcome.IDLE


def _try_candidates(ctx: AgentContext, candidates, dist_map, cfg: PlannerConfig):
    seen = set()
    for eid, _ in candidates:
        if eid in seen:
            continue
        seen.add(eid)
        picked = _target_viewpoint(ctx, eid)
        if picked is None:
            continue
        vi, nkey = picked
        path = retrieve_path(ctx, eid, vi, cfg.astar_max_pops)
        if path is None:
            continue
        if nkey is not None:
            t_i = estimate_time_cost(ctx, nkey, cfg, dist_map)
        else:
            t_i = float(np.linalg.norm(np.diff(path, axis=0), axis=1).sum()) / cfg.vel_max
        return ExplorationTarget(eroi_id=eid, viewpoint_index=vi, node_key=nkey,
                                 t_arrival=t_i, path=path)
    return None


# -- path retrieval -----------------------------------------------------------


def _astar_grid(grid: VoxelGrid, start: int, goal: int, max_pops: int):
    """Integer-cost A* over Free voxels, 6-connected, Manhattan heuristic."""
    if start == goal:
        return [start]
    dims = grid.dims
    ny, nz = int(dims[1]), int(dims[2])
    gi, rem = divmod(goal, ny * nz)
    gj, gk = divmod(rem, nz)

    def h(f):
        i, r = divmod(f, ny * nz)
        j, k = divmod(r, nz)
        return abs(i - gi) + abs(j - gj) + abs(k - gk)

    states = grid.states.reshape(-1)
    best = {start: 0}
    parent = {start: -1}
    heap = [(h(start), 0, start)]
    pops = 0
    while heap:
        f_score, g, u = heapq.heappop(heap)
        pops += 1
        if pops > max_pops:
            return None
        if u == goal:
            chain = [u]
            while parent[chain[-1]] >= 0:
                chain.append(parent[chain[-1]])
            chain.reverse()
            return chain
        if g > best.get(u, 1 << 60):
            continue
        ui, r = divmod(u, ny * nz)
        uj, uk = divmod(r, nz)
        for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            vi, vj, vk = ui + di, uj + dj, uk + dk
            if not (0 <= vi < dims[0] and 0 <= vj < ny and 0 <= vk < nz):
                continue
            v = (vi * ny + vj) * nz + vk
            if states[v] != OccupancyState.FREE:
                continue
            ng = g + 1
            if ng < best.get(v, 1 << 60):
                best[v] = ng
                parent[v] = u
                heapq.heappush(heap, (ng + h(v), ng, v))
    return None


def _dedupe(points: list[np.ndarray]) -> np.ndarray:
    out = [points[0]]
    for p in points[1:]:
        if not np.array_equal(p, out[-1]):
            out.append(p)
    return np.asarray(out, float)


def retrieve_path(ctx: AgentContext, eid: int, vi: int, max_pops: int = 60000) -> np.ndarray | None:
    """Waypoints from the agent to a region viewpoint.

    Prefers a direct grid path through the agent's own known-Free space;
    otherwise concatenates graph edge paths (agent -> entry node -> ... ->
    region) with junction duplicates removed.
    """
    dtg = ctx.dtg
    grid = ctx.grid
    vp = dtg.erois[eid].viewpoints[vi]
    start = grid.flat_of_point(ctx.pose.position)
    goal = grid.flat_of_point(vp.position)

    if start is not None and goal is not None and grid.is_free(goal) and grid.is_free(start):
        chain = _astar_grid(grid, start, goal, max_pops)
        if chain is not None:
            pts = [ctx.pose.position] + [grid.center(f) for f in chain] + [vp.position]
            return _dedupe(pts)

    return _graph_route(ctx, eid, vp)


def _graph_route(ctx: AgentContext, eid: int, vp) -> np.ndarray | None:
    dtg = ctx.dtg
    grid = ctx.grid
    me = agent_key(ctx.agent)
    target = eroi_key(eid)

    adjacency: dict = {}

    def add(a, b, w, payload):
        adjacency.setdefault(a, []).append((b, w, payload))
        adjacency.setdefault(b, []).append((a, w, payload))

    for key, w in sorted(dtg.uav_links.get(ctx.agent, {}).items()):
        add(me, key, max(float(w), 1e-9), ("link", key))
    for edge in dtg.edges.values():
        add(edge.key[0], edge.key[1], edge.weight, ("edge", edge))
    for lst in adjacency.values():
        lst.sort(key=lambda e: (e[1], e[0]))

    dist = {me: 0.0}
    back = {}
    heap = [(0.0, me)]
    while heap:
        d, u = heapq.heappop(heap)
        if u == target:
            break
        if d > dist.get(u, math.inf):
            continue
        for v, w, payload in adjacency.get(u, ()):
            nd = d + w
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                back[v] = (u, payload)
                heapq.heappush(heap, (nd, v))
    if target not in back:
        return None

    hops = []
    cur = target
    while cur != me:
        prev, payload = back[cur]
        hops.append((prev, cur, payload))
        cur = prev
    hops.reverse()

    pts = [ctx.pose.position]
    for a, b, payload in hops:
        if payload[0] == "link":
            f = _link_voxel(ctx, payload[1])
            if f is None:
                return None
            chain = ctx.field.path_to(f)  # rooted at the agent's voxel
            pts.extend(grid.center(v) for v in chain)
        else:
            edge = payload[1]
            wp = edge.path if edge.key[0] == a else edge.path[::-1]
            pts.extend(np.asarray(p, float) for p in wp)
    pts.append(vp.position)
    return _dedupe(pts)


def _link_voxel(ctx: AgentContext, key) -> int | None:
    """Voxel the agent's direct link actually points at, within its field."""
    grid = ctx.grid
    if key[0] == "h":
        f = grid.flat_of_point(ctx.dtg.nodes[key].position)
        return f if f is not None and ctx.field.contains(f) else None
    eroi = ctx.dtg.erois[key[1]]
    best = None
    for vi, v in enumerate(eroi.viewpoints):
        if v.state != ViewpointState.ACTIVE:
            continue
        f = grid.flat_of_point(v.position)
        if f is not None and ctx.field.contains(f):
            cand = (ctx.field.cost(f), vi, f)
            if best is None or cand < best:
                best = cand
    return best[2] if best is not None else None


# -- motion --------------------------------------------------------------------


@dataclass
class MotionState:
    path: np.ndarray
    target_yaw: float
    s: float = 0.0  # arc length progressed

    @property
    def length(self) -> float:
        if len(self.path) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.path, axis=0), axis=1).sum())


def advance_motion(pose: AgentPose, motion: MotionState, dt: float, cfg: PlannerConfig) -> AgentPose:
    """Move vel_max*dt along the polyline; yaw follows travel, snapping to the
    target yaw on arrival. Clamps at the path end."""
    if motion.length == 0.0:
        return AgentPose(motion.path[-1] if len(motion.path) else pose.position, motion.target_yaw)
    motion.s = min(motion.s + cfg.vel_max * dt, motion.length)
    pos, heading = _point_at(motion.path, motion.s)
    if motion.s >= motion.length:
        return AgentPose(pos, motion.target_yaw)
    return AgentPose(pos, heading)


def _point_at(path: np.ndarray, s: float):
    acc = 0.0
    heading = 0.0
    for a, b in zip(path, path[1:]):
        seg = float(np.linalg.norm(b - a))
        if seg == 0.0:
            continue
        if acc + seg >= s:
            frac = (s - acc) / seg
            p = a + frac * (b - a)
            d = b - a
            if abs(d[0]) > 1e-12 or abs(d[1]) > 1e-12:
                heading = math.atan2(d[1], d[0])
            return p, normalize_yaw(heading)
        acc += seg
        d = b - a
        if abs(d[0]) > 1e-12 or abs(d[1]) > 1e-12:
            heading = math.atan2(d[1], d[0])
    return path[-1].copy(), normalize_yaw(heading)


def target_reached(pose: AgentPose, target: ExplorationTarget, dtg: MrDtg, cfg: PlannerConfig) -> bool:
    vp = dtg.erois[target.eroi_id].viewpoints[target.viewpoint_index]
    if float(np.linalg.norm(pose.position - vp.position)) > cfg.arrival_dist:
        return False
    dyaw = abs(normalize_yaw(pose.yaw - vp.yaw))
    return math.degrees(dyaw) <= cfg.arrival_yaw_deg
