"""The shared dynamic topological graph.

History nodes sampled from each agent's trajectory carry shortest-path
fields over free space; pre-partitioned explorable regions (cubes with
sampled candidate viewpoints) attach to the node web through their best
viewpoint. Every agent holds a replica; only the lightweight elements
(node positions, edges, region/viewpoint states) are ever synchronized,
path fields stay with their creator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gridsearch import GridField, bfs_field, dijkstra_field_26, grow_field
from .world import (
    AgentPose,
    Box,
    OccupancyState,
    SensorModel,
    VoxelGrid,
    directions_from_angles,
    normalize_yaw,
    raycast_known_batch,
)


class AgentStateError(RuntimeError):
    """Agent is in a state the graph maintenance cannot work from."""


class EroiState:
    INACTIVE = 0
    ACTIVE = 1
    DEAD = 2


class ViewpointState:
    INACTIVE = 0
    ACTIVE = 1
    DEAD = 2


# Graph element keys: ("h", agent, seq) history node, ("e", id) region,
# ("u", agent) appears only in search graphs. Tuples sort and hash naturally.
NodeKey = tuple
EdgeKey = tuple


def history_key(agent: int, seq: int) -> NodeKey:
    return ("h", int(agent), int(seq))


def eroi_key(eroi_id: int) -> NodeKey:
    return ("e", int(eroi_id))


def agent_key(agent: int) -> NodeKey:
    return ("u", int(agent))


def edge_key(a: NodeKey, b: NodeKey) -> EdgeKey:
    return tuple(sorted((a, b)))


def f32(x: float) -> float:
    return float(np.float32(x))


def f32_vec(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float32).astype(np.float64)


@dataclass
class DtgConfig:
    d_max: float = 10.0  # Manhattan bound of the per-tick search field, m
    p_th: float = 5.5  # node spawn threshold, m (<= d_max)
    g_th: float = 1.3  # viewpoint gain threshold, m^2
    e_th: float = 0.85  # region coverage fraction considered explored
    eroi_side: float = 5.0  # region cube side, m
    vp_azimuths: int = 8
    vp_radius_fractions: tuple = (0.35, 0.7)
    connectivity: int = 6

    def __post_init__(self):
        if not (0 < self.p_th <= self.d_max):
            raise ValueError("require 0 < p_th <= d_max")
        if not (0 < self.e_th <= 1):
            raise ValueError("require 0 < e_th <= 1")
        if self.g_th < 0:
            raise ValueError("require g_th >= 0")
        if self.connectivity not in (6, 26):
            raise ValueError("connectivity must be 6 or 26")


@dataclass
class Viewpoint:
    position: np.ndarray
    yaw: float
    state: int = ViewpointState.INACTIVE
    gain: float = 0.0


@dataclass
class Eroi:
    id: int
    cube: Box
    state: int = EroiState.INACTIVE
    viewpoints: list = field(default_factory=list)
    known_voxels: int = 0
    total_voxels: int = 0
    connecting_edge: EdgeKey | None = None

    @property
    def coverage(self) -> float:
        return self.known_voxels / self.total_voxels if self.total_voxels else 1.0


@dataclass
class HistoryNode:
    key: NodeKey
    position: np.ndarray  # f32-exact values
    tree: GridField | None = None  # only on the creating agent


@dataclass
class TopoEdge:
    key: EdgeKey
    path: np.ndarray  # (K, 3) waypoints, f32-exact values
    weight: float  # float64 sum of segment lengths over `path`
    origin: int  # creating agent, used for deterministic merge tie-breaks
    viewpoint_index: int | None = None  # local sidecar, never synchronized

    @property
    def is_eroi_edge(self) -> bool:
        return self.key[0][0] == "e" or self.key[1][0] == "e"

    @property
    def eroi_id(self) -> int | None:
        for ep in self.key:
            if ep[0] == "e":
                return ep[1]
        return None


def path_weight(path: np.ndarray) -> float:
    if len(path) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(path, axis=0), axis=1).sum())


def make_edge(a: NodeKey, b: NodeKey, waypoints: np.ndarray, origin: int,
              viewpoint_index: int | None = None) -> TopoEdge:
    """Canonical edge: key-sorted endpoints, path oriented key[0] -> key[1]."""
    key = edge_key(a, b)
    path = f32_vec(waypoints)
    if key[0] != a:
        path = path[::-1].copy()
    return TopoEdge(key=key, path=path, weight=path_weight(path), origin=origin,
                    viewpoint_index=viewpoint_index)


class TransitionRecorder:
    """Watches every applied state change; anything non-forward is illegal."""

    def __init__(self):
        self.count = 0
        self.violations = []

    def observe(self, kind: str, ident, old: int, new: int):
        self.count += 1
        if new <= old:
            self.violations.append((kind, ident, old, new))


def build_erois(grid: VoxelGrid, bounds: Box, cfg: DtgConfig) -> dict[int, Eroi]:
    """Pre-partition the arena into cubes with sampled candidate viewpoints.

    Deterministic given (bounds, resolution, config), so every agent builds an
    identical id space with no coordination. Cubes are clipped at the bounds;
    a clipped sliver holding no voxel centers is born dead.
    """
    lo = np.asarray(bounds.lo)
    ext = bounds.extent
    side = cfg.eroi_side
    counts = np.maximum(np.ceil(ext / side - 1e-9).astype(int), 1)
    erois = {}
    for ex in range(counts[0]):
        for ey in range(counts[1]):
            for ez in range(counts[2]):
                eid = (ex * counts[1] + ey) * counts[2] + ez
                clo = lo + np.array([ex, ey, ez]) * side
                chi = np.minimum(clo + side, np.asarray(bounds.hi))
                cube = Box(tuple(clo), tuple(chi))
                total = _voxel_count_in_cube(grid, clo, chi)
                eroi = Eroi(id=eid, cube=cube, total_voxels=total)
                if total == 0:
                    eroi.state = EroiState.DEAD
                else:
                    eroi.viewpoints = _sample_viewpoints(cube, cfg)
                erois[eid] = eroi
    return erois


def _voxel_count_in_cube(grid: VoxelGrid, clo, chi) -> int:
    n = 1
    for ax in range(3):
        i_lo = int(math.ceil((clo[ax] - grid.origin[ax]) / grid.resolution - 0.5 - 1e-9))
        i_hi = int(math.floor((chi[ax] - grid.origin[ax]) / grid.resolution - 0.5 + 1e-9))
        i_lo = max(i_lo, 0)
        i_hi = min(i_hi, int(grid.dims[ax]) - 1)
        if i_hi < i_lo:
            return 0
        n *= i_hi - i_lo + 1
    return n


def _sample_viewpoints(cube: Box, cfg: DtgConfig) -> list[Viewpoint]:
    center = cube.center
    half = min(cube.extent[0], cube.extent[1]) / 2.0
    vps = []
    for frac in cfg.vp_radius_fractions:
        r = frac * half
        for a in range(cfg.vp_azimuths):
            ang = 2.0 * math.pi * a / cfg.vp_azimuths
            pos = center + np.array([r * math.cos(ang), r * math.sin(ang), 0.0])
            yaw = normalize_yaw(ang + math.pi)  # toward the cube center
            vps.append(Viewpoint(position=pos, yaw=yaw))
    return vps


class EroiTiling:
    """Voxel -> region id lookup shared by all agents."""

    def __init__(self, grid: VoxelGrid, bounds: Box, cfg: DtgConfig):
        self.lo = np.asarray(bounds.lo)
        self.side = cfg.eroi_side
        ext = bounds.extent
        self.counts = np.maximum(np.ceil(ext / self.side - 1e-9).astype(int), 1)
        self.grid = grid

    @property
    def n_erois(self) -> int:
        return int(self.counts.prod())

    def ids_of_flats(self, flats: np.ndarray) -> np.ndarray:
        centers = self.grid.centers(flats)
        e = np.floor((centers - self.lo) / self.side).astype(np.int64)
        e = np.clip(e, 0, self.counts - 1)
        return (e[:, 0] * self.counts[1] + e[:, 1]) * self.counts[2] + e[:, 2]


class MrDtg:
    """One agent's replica of the shared graph."""

    def __init__(self, grid: VoxelGrid, bounds: Box, cfg: DtgConfig):
        self.cfg = cfg
        self.grid = grid
        self.tiling = EroiTiling(grid, bounds, cfg)
        self.nodes: dict[NodeKey, HistoryNode] = {}
        self.erois: dict[int, Eroi] = build_erois(grid, bounds, cfg)
        self.edges: dict[EdgeKey, TopoEdge] = {}
        self.uav_links: dict[int, dict[NodeKey, float]] = {}
        self.recorder = TransitionRecorder()
        self.changelog: list = []
        self._node_seq = 0

    # -- element mutation with convergent merge rules ----------------------

    def next_node_key(self, agent: int) -> NodeKey:
        key = history_key(agent, self._node_seq)
        self._node_seq += 1
        return key

    def add_node(self, node: HistoryNode, record: bool = True) -> bool:
        if node.key in self.nodes:
            return False
        self.nodes[node.key] = node
        if record:
            self.changelog.append(("node_add", node.key, node.position))
        return True

    @staticmethod
    def _better(new: TopoEdge, cur: TopoEdge) -> bool:
        return (new.weight, new.origin, new.key) < (cur.weight, cur.origin, cur.key)

    def add_edge(self, edge: TopoEdge, record: bool = True) -> bool:
        for ep in edge.key:
            if ep[0] == "h" and ep not in self.nodes:
                return False  # creator's node never arrived (drops only)
        if edge.weight <= 0.0:
            return False
        eid = edge.eroi_id
        if eid is not None:
            eroi = self.erois[eid]
            if eroi.state == EroiState.DEAD:
                return False
            cur_key = eroi.connecting_edge
            if cur_key is not None:
                cur = self.edges[cur_key]
                if not self._better(edge, cur):
                    return False
                del self.edges[cur_key]
            self.edges[edge.key] = edge
            eroi.connecting_edge = edge.key
        else:
            cur = self.edges.get(edge.key)
            if cur is not None and not self._better(edge, cur):
                return False
            self.edges[edge.key] = edge
        if record:
            self.changelog.append(("edge_add", edge))
        return True

    def del_edge(self, key: EdgeKey, record: bool = True) -> bool:
        edge = self.edges.pop(key, None)
        if edge is None:
            return False
        eid = edge.eroi_id
        if eid is not None and self.erois[eid].connecting_edge == key:
            self.erois[eid].connecting_edge = None
        if record:
            self.changelog.append(("edge_del", key))
        return True

    def set_eroi_state(self, eid: int, new: int, record: bool = True) -> bool:
        eroi = self.erois[eid]
        if new <= eroi.state:
            return False  # merge is monotone: stale records are no-ops
        self.recorder.observe("eroi", eid, eroi.state, new)
        eroi.state = new
        if new == EroiState.DEAD and eroi.connecting_edge is not None:
            self.edges.pop(eroi.connecting_edge, None)
            eroi.connecting_edge = None
        if record:
            self.changelog.append(("eroi_state", eid, new))
        return True

    def set_vp_state(self, eid: int, index: int, new: int, record: bool = True) -> bool:
        vp = self.erois[eid].viewpoints[index]
        if new <= vp.state:
            return False
        self.recorder.observe("viewpoint", (eid, index), vp.state, new)
        vp.state = new
        if record:
            self.changelog.append(("vp_state", eid, index, new))
        return True

    def drain_changelog(self) -> list:
        out = self.changelog
        self.changelog = []
        return out

    # -- queries ------------------------------------------------------------

    def node_edges(self) -> list[TopoEdge]:
        return [e for e in self.edges.values() if not e.is_eroi_edge]

    def erois_of_node(self, nkey: NodeKey) -> list[int]:
        out = []
        for e in self.edges.values():
            if e.is_eroi_edge and nkey in e.key:
                out.append(e.eroi_id)
        return sorted(out)


# -- graph maintenance operations -------------------------------------------


def expand_uav_dijkstra(grid: VoxelGrid, pose: AgentPose, cfg: DtgConfig) -> GridField:
    """Shortest paths from the agent through free space, bounded to the
    Manhattan ball of radius d_max around the agent's voxel."""
    root_flat = grid.flat_of_point(pose.position)
    if root_flat is None or not grid.is_free(root_flat):
        raise AgentStateError("agent voxel is not known Free")
    root = grid.unflat(root_flat)
    radius = int(math.floor(cfg.d_max / grid.resolution + 1e-9))
    dims = tuple(grid.dims)
    ii = np.abs(np.arange(dims[0]) - root[0])[:, None, None]
    jj = np.abs(np.arange(dims[1]) - root[1])[None, :, None]
    kk = np.abs(np.arange(dims[2]) - root[2])[None, None, :]
    ball = (ii + jj + kk) <= radius
    allowed = grid.free_mask() & ball
    if cfg.connectivity == 6:
        return bfs_field(allowed, root, grid.resolution)
    return dijkstra_field_26(allowed, root, grid.resolution)


def absorb_field(node: HistoryNode, field: GridField, grid: VoxelGrid) -> int:
    """Grow the node's tree to cover everything the agent's field covers.

    Costs stay exact shortest-path lengths from the node within the union of
    absorbed regions. Returns the number of voxels added (0 = no-op).
    """
    if node.tree is None:
        raise AgentStateError("cannot absorb into a replica node without a tree")
    return grow_field(node.tree, field.mask().reshape(field.dims))


def maybe_spawn_history_node(field: GridField, pose: AgentPose, dtg: MrDtg,
                             cfg: DtgConfig, agent: int) -> HistoryNode | None:
    """Spawn a node at the agent when no node is within p_th by field cost;
    otherwise let the closest owned node absorb the field."""
    grid = dtg.grid
    in_field = []
    for key, node in sorted(dtg.nodes.items()):
        f = grid.flat_of_point(node.position)
        if f is not None and field.contains(f):
            in_field.append((field.cost(f), key))
    if in_field:
        best_cost, best_key = min(in_field)
        if best_cost <= cfg.p_th + 1e-9:
            closest = dtg.nodes[best_key]
            if closest.tree is not None:
                absorb_field(closest, field, grid)
            return None
    node = HistoryNode(
        key=dtg.next_node_key(agent),
        position=f32_vec(pose.position),
        tree=field.copy(),
    )
    dtg.add_node(node, record=True)
    connect_new_node(node, dtg, agent)
    return node


def connect_new_node(new: HistoryNode, dtg: MrDtg, agent: int) -> list[TopoEdge]:
    """Link a fresh node into the graph.

    Own nodes connect through the cheapest voxel both trees cover (the other
    node's own position counts, at cost zero on its side); replica stubs of
    peers' nodes connect when their position lies in the new tree.
    """
    grid = dtg.grid
    tree = new.tree
    added = []
    new_finite = np.isfinite(tree.costs)
    for key, other in sorted(dtg.nodes.items()):
        if key == new.key:
            continue
        if other.tree is not None:
            both = new_finite & np.isfinite(other.tree.costs)
            if not both.any():
                continue
            flats = np.nonzero(both)[0]
            total = tree.costs[flats] + other.tree.costs[flats]
            v = int(flats[np.argmin(total)])
            chain = tree.path_to(v) + other.tree.path_to(v)[::-1][1:]
        else:
            f = grid.flat_of_point(other.position)
            if f is None or not tree.contains(f):
                continue
            chain = tree.path_to(f)
        edge = make_edge(new.key, key, grid.centers(np.array(chain)), origin=agent)
        if dtg.add_edge(edge, record=True):
            added.append(edge)
    return added


# -- information gain ---------------------------------------------------------


def frontier_patch_area(r: float, polar: float, dtheta: float, dphi: float) -> float:
    """Closed-form surface patch subtended by one ray cell at range r.

    `polar` is the angle from vertical in radians; the closed form is the
    exact integral of r^2 sin(phi) over the (dtheta x dphi) cell centered on
    the ray.
    """
    return 2.0 * r * r * dtheta * math.sin(polar) * math.sin(dphi / 2.0)


def viewpoint_gains_batch(grid: VoxelGrid, vps: list[Viewpoint], sensor: SensorModel) -> np.ndarray:
    """Expected visible frontier area for several viewpoints in one sweep."""
    theta_off, pitch = sensor.ray_offsets()
    n_rays = theta_off.size
    dirs = np.empty((len(vps) * n_rays, 3))
    origins = np.empty((len(vps) * n_rays, 3))
    for i, vp in enumerate(vps):
        dirs[i * n_rays:(i + 1) * n_rays] = directions_from_angles(vp.yaw, theta_off, pitch)
        origins[i * n_rays:(i + 1) * n_rays] = vp.position
    ranges, states = raycast_known_batch(grid, origins, dirs, sensor.r_max)
    polar = math.pi / 2.0 - np.tile(pitch, len(vps))
    dtheta = math.radians(sensor.delta_theta)
    dphi = math.radians(sensor.delta_phi)
    ds = 2.0 * ranges * ranges * dtheta * np.sin(polar) * math.sin(dphi / 2.0)
    ds = np.where(states == OccupancyState.UNKNOWN, ds, 0.0)
    return ds.reshape(len(vps), n_rays).sum(axis=1)


def viewpoint_gain(grid: VoxelGrid, vp: Viewpoint, sensor: SensorModel) -> float:
    """Frontier area visible from one viewpoint; 0 if its voxel is not Free."""
    f = grid.flat_of_point(vp.position)
    if f is None or not grid.is_free(f):
        return 0.0
    return float(viewpoint_gains_batch(grid, [vp], sensor)[0])


# -- region lifecycle ----------------------------------------------------------


def update_erois(dtg: MrDtg, grid: VoxelGrid, changed_voxels: np.ndarray,
                 sensor: SensorModel, cfg: DtgConfig) -> list[int]:
    """Fold newly known voxels into region bookkeeping.

    Touched regions activate on first observation, their evaluable viewpoints
    are re-scored, and regions die at the coverage threshold or when every
    viewpoint is dead. Returns the ids of regions touched this call.
    """
    if len(changed_voxels) == 0:
        return []
    ids = dtg.tiling.ids_of_flats(np.asarray(changed_voxels))
    uniq, counts = np.unique(ids, return_counts=True)
    touched = []
    for eid, cnt in zip(uniq.tolist(), counts.tolist()):
        eroi = dtg.erois[eid]
        if eroi.state == EroiState.DEAD:
            continue
        eroi.known_voxels += int(cnt)
        if eroi.state == EroiState.INACTIVE:
            dtg.set_eroi_state(eid, EroiState.ACTIVE, record=True)
        touched.append(eid)

    for eid in touched:
        eroi = dtg.erois[eid]
        if eroi.state != EroiState.ACTIVE:
            continue
        _rescore_viewpoints(dtg, grid, eroi, sensor, cfg)
        all_dead = all(vp.state == ViewpointState.DEAD for vp in eroi.viewpoints)
        if eroi.coverage >= cfg.e_th - 1e-12 or all_dead:
            dtg.set_eroi_state(eid, EroiState.DEAD, record=True)
    return touched


def _rescore_viewpoints(dtg: MrDtg, grid: VoxelGrid, eroi: Eroi,
                        sensor: SensorModel, cfg: DtgConfig) -> None:
    evaluable = []
    for i, vp in enumerate(eroi.viewpoints):
        if vp.state == ViewpointState.DEAD:
            continue
        f = grid.flat_of_point(vp.position)
        if f is None or grid.state_at(f) == OccupancyState.OCCUPIED:
            dtg.set_vp_state(eroi.id, i, ViewpointState.DEAD, record=True)
        elif grid.state_at(f) == OccupancyState.FREE:
            evaluable.append(i)
        # Unknown voxel: not evaluable yet, stays inactive.
    if not evaluable:
        return
    gains = viewpoint_gains_batch(grid, [eroi.viewpoints[i] for i in evaluable], sensor)
    for i, gain in zip(evaluable, gains):
        vp = eroi.viewpoints[i]
        vp.gain = float(gain)
        if gain >= cfg.g_th:
            dtg.set_vp_state(eroi.id, i, ViewpointState.ACTIVE, record=True)
        else:
            dtg.set_vp_state(eroi.id, i, ViewpointState.DEAD, record=True)


def connect_eroi(dtg: MrDtg, eid: int, agent: int) -> None:
    """Keep the region's single connecting edge the cheapest available.

    Tries every (active viewpoint, owned tree) pair; deletes an own edge
    whose viewpoint died. Runs every maintenance tick so the edge follows
    tree growth and viewpoint state.
    """
    eroi = dtg.erois[eid]
    if eroi.state != EroiState.ACTIVE:
        return
    grid = dtg.grid
    cur = dtg.edges.get(eroi.connecting_edge) if eroi.connecting_edge else None
    if cur is not None and cur.origin == agent and cur.viewpoint_index is not None:
        if eroi.viewpoints[cur.viewpoint_index].state == ViewpointState.DEAD:
            dtg.del_edge(cur.key, record=True)

    best = None
    for nkey, node in sorted(dtg.nodes.items()):
        if node.tree is None:
            continue
        for vi, vp in enumerate(eroi.viewpoints):
            if vp.state != ViewpointState.ACTIVE:
                continue
            f = grid.flat_of_point(vp.position)
            if f is None or not node.tree.contains(f):
                continue
            w = node.tree.cost(f)
            if w <= 0.0:
                continue
            cand = (w, nkey, vi, f)
            if best is None or cand < best:
                best = cand
    if best is None:
        return
    _, nkey, vi, f = best
    chain = dtg.nodes[nkey].tree.path_to(f)
    edge = make_edge(nkey, eroi_key(eid), grid.centers(np.array(chain)),
                     origin=agent, viewpoint_index=vi)
    dtg.add_edge(edge, record=True)


def refresh_uav_links(dtg: MrDtg, agent: int, field: GridField) -> dict:
    """Rebuild the agent's direct-link map from its current search field."""
    grid = dtg.grid
    links = {}
    for nkey, node in sorted(dtg.nodes.items()):
        f = grid.flat_of_point(node.position)
        if f is not None and field.contains(f):
            links[nkey] = f32(field.cost(f))
    for eid, eroi in sorted(dtg.erois.items()):
        if eroi.state != EroiState.ACTIVE:
            continue
        best = None
        for vp in eroi.viewpoints:
            if vp.state != ViewpointState.ACTIVE:
                continue
            f = grid.flat_of_point(vp.position)
            if f is not None and field.contains(f):
                c = field.cost(f)
                if best is None or c < best:
                    best = c
        if best is not None:
            links[eroi_key(eid)] = f32(best)
    dtg.uav_links[agent] = links
    return links
