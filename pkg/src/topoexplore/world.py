"""Ground-truth environment, per-agent volumetric mapping, and simulated depth sensing.

The world is a set of axis-aligned boxes inside an axis-aligned arena. Each
agent owns a dense voxel grid over the arena and integrates ideal (noise-free)
depth scans into it. Voxel knowledge is monotone: a voxel goes Unknown->Free
or Unknown->Occupied exactly once and never reverts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np


class WorldParseError(ValueError):
    """Raised for malformed world/scenario files."""


class WorldValidationError(ValueError):
    """Raised when parsed geometry violates world invariants."""


class OccupancyState(IntEnum):
    UNKNOWN = 0
    FREE = 1
    OCCUPIED = 2


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, meters. lo strictly below hi on every axis."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        if not all(h > l for l, h in zip(self.lo, self.hi)):
            raise WorldValidationError(f"box extents must be strictly positive: {self.lo} .. {self.hi}")

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.hi, float) - np.asarray(self.lo, float)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lo, float) + np.asarray(self.hi, float))

    def contains_point(self, p) -> bool:
        return all(l <= c <= h for l, c, h in zip(self.lo, p, self.hi))

    def contains_box(self, other: "Box") -> bool:
        return all(sl <= ol and oh <= sh for sl, ol, oh, sh in zip(self.lo, other.lo, other.hi, self.hi))


@dataclass
class GroundTruthWorld:
    """Scene geometry: arena bounds plus box obstacles, all within bounds."""

    bounds: Box
    obstacles: list[Box] = field(default_factory=list)

    def __post_init__(self):
        for i, ob in enumerate(self.obstacles):
            if not self.bounds.contains_box(ob):
                raise WorldValidationError(f"obstacle {i} extends past bounds: {ob.lo} .. {ob.hi}")

    def point_in_obstacle(self, p) -> bool:
        return any(ob.contains_point(p) for ob in self.obstacles)


@dataclass(frozen=True)
class SensorModel:
    """Ideal depth camera: FoV limits in degrees, max range, angular ray pitch.

    Rays tile the FoV in floor(span/delta) cells per axis, one ray at each
    cell center.
    """

    fov_theta_left: float = 57.3
    fov_theta_right: float = -57.3
    fov_phi_up: float = 45.0
    fov_phi_down: float = -45.0
    r_max: float = 5.0
    delta_theta: float = 7.5
    delta_phi: float = 7.5

    def __post_init__(self):
        if self.fov_theta_left <= self.fov_theta_right:
            raise WorldValidationError("fov_theta_left must exceed fov_theta_right")
        if self.fov_phi_up <= self.fov_phi_down:
            raise WorldValidationError("fov_phi_up must exceed fov_phi_down")
        if self.r_max <= 0 or self.delta_theta <= 0 or self.delta_phi <= 0:
            raise WorldValidationError("r_max and angular pitches must be positive")

    @property
    def n_theta(self) -> int:
        return int(math.floor((self.fov_theta_left - self.fov_theta_right) / self.delta_theta + 1e-9))

    @property
    def n_phi(self) -> int:
        return int(math.floor((self.fov_phi_up - self.fov_phi_down) / self.delta_phi + 1e-9))

    def ray_offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-centered (yaw-offset, pitch) angle pairs in radians, theta-major."""
        th = np.deg2rad(self.fov_theta_right + (np.arange(self.n_theta) + 0.5) * self.delta_theta)
        ph = np.deg2rad(self.fov_phi_down + (np.arange(self.n_phi) + 0.5) * self.delta_phi)
        tt, pp = np.meshgrid(th, ph, indexing="ij")
        return tt.ravel(), pp.ravel()


def normalize_yaw(yaw: float) -> float:
    """Wrap into [-pi, pi)."""
    y = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if y < 0:
        y += 2.0 * math.pi
    return y - math.pi


@dataclass
class AgentPose:
    position: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, float)
        self.yaw = normalize_yaw(self.yaw)


@dataclass
class Scan:
    """One ray per FoV cell: world-frame unit directions, ranges, hit flags."""

    directions: np.ndarray  # (N, 3)
    ranges: np.ndarray  # (N,)
    hit: np.ndarray  # (N,) bool


class VoxelGrid:
    """Dense per-agent occupancy map covering the world bounds exactly."""

    def __init__(self, origin, resolution: float, dims):
        self.origin = np.asarray(origin, float)
        self.resolution = float(resolution)
        self.dims = np.asarray(dims, int)
        self.states = np.full(tuple(self.dims), OccupancyState.UNKNOWN, dtype=np.uint8)
        self.strides = np.array(
            [self.dims[1] * self.dims[2], self.dims[2], 1], dtype=np.int64
        )

    @classmethod
    def for_world(cls, world: GroundTruthWorld, resolution: float = 0.2) -> "VoxelGrid":
        ext = world.bounds.extent
        dims = np.maximum(np.ceil(ext / resolution - 1e-9).astype(int), 1)
        return cls(world.bounds.lo, resolution, dims)

    @property
    def n_voxels(self) -> int:
        return int(self.dims.prod())

    def voxel_of(self, p) -> np.ndarray:
        return np.floor((np.asarray(p, float) - self.origin) / self.resolution).astype(np.int64)

    def in_grid(self, ijk) -> bool:
        return bool(np.all(ijk >= 0) and np.all(ijk < self.dims))

    def flat(self, ijk) -> int:
        return int(ijk[0] * self.strides[0] + ijk[1] * self.strides[1] + ijk[2])

    def unflat(self, idx: int) -> tuple[int, int, int]:
        i, rem = divmod(int(idx), int(self.strides[0]))
        j, k = divmod(rem, int(self.strides[1]))
        return i, j, k

    def flat_of_point(self, p) -> int | None:
        ijk = self.voxel_of(p)
        if not self.in_grid(ijk):
            return None
        return self.flat(ijk)

    def center(self, idx: int) -> np.ndarray:
        ijk = np.asarray(self.unflat(idx), float)
        return self.origin + (ijk + 0.5) * self.resolution

    def centers(self, idxs) -> np.ndarray:
        idxs = np.asarray(idxs, np.int64)
        i, rem = np.divmod(idxs, self.strides[0])
        j, k = np.divmod(rem, self.strides[1])
        return self.origin + (np.stack([i, j, k], axis=-1) + 0.5) * self.resolution

    def state_at(self, idx: int) -> int:
        return int(self.states.flat[idx])

    def is_free(self, idx: int) -> bool:
        return self.states.flat[idx] == OccupancyState.FREE

    def free_mask(self) -> np.ndarray:
        return self.states == OccupancyState.FREE

    def known_count(self) -> int:
        return int(np.count_nonzero(self.states != OccupancyState.UNKNOWN))


def load_world(path) -> GroundTruthWorld:
    """Parse the line-oriented world format: `bounds` line, then `box` lines."""
    text = Path(path).read_text()
    return parse_world(text, name=str(path))


def parse_world(text: str, name: str = "<string>") -> GroundTruthWorld:
    bounds = None
    obstacles = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        kind = parts[0]
        if kind not in ("bounds", "box"):
            # Scenario files mix key=value parameters into the same file.
            if "=" in line:
                continue
            raise WorldParseError(f"{name}:{lineno}: unknown directive {kind!r}")
        if len(parts) != 7:
            raise WorldParseError(f"{name}:{lineno}: expected 6 numbers after {kind!r}")
        try:
            vals = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise WorldParseError(f"{name}:{lineno}: {exc}") from None
        box = Box(tuple(vals[:3]), tuple(vals[3:]))
        if kind == "bounds":
            if bounds is not None:
                raise WorldParseError(f"{name}:{lineno}: duplicate bounds line")
            bounds = box
        else:
            obstacles.append(box)
    if bounds is None:
        raise WorldParseError(f"{name}: missing bounds line")
    return GroundTruthWorld(bounds=bounds, obstacles=obstacles)


def _ray_box_entry(origins, dirs, lo, hi):
    """Slab-method entry/exit params for rays against one box.

    Returns (t_near, t_far) arrays; a ray misses when t_near > t_far or
    t_far <= 0.
    """
    d = np.where(np.abs(dirs) < 1e-30, 1e-30, dirs)
    t1 = (lo - origins) / d
    t2 = (hi - origins) / d
    t_near = np.minimum(t1, t2).max(axis=-1)
    t_far = np.maximum(t1, t2).min(axis=-1)
    return t_near, t_far


def directions_from_angles(yaw: float, theta_off: np.ndarray, pitch: np.ndarray) -> np.ndarray:
    th = yaw + theta_off
    cp = np.cos(pitch)
    return np.stack([cp * np.cos(th), cp * np.sin(th), np.sin(pitch)], axis=-1)


def simulate_scan(world: GroundTruthWorld, pose: AgentPose, sensor: SensorModel) -> Scan:
    """Cast one ideal ray per FoV cell against the ground-truth boxes.

    A ray reports the distance to the first obstacle surface (hit=True),
    capped at r_max; rays that would leave the arena truncate at the bounds
    with hit=False.
    """
    theta_off, pitch = sensor.ray_offsets()
    dirs = directions_from_angles(pose.yaw, theta_off, pitch)
    origin = pose.position[None, :]

    ranges = np.full(dirs.shape[0], sensor.r_max)
    hit = np.zeros(dirs.shape[0], dtype=bool)

    # Arena exit caps the ray without a hit.
    _, t_exit = _ray_box_entry(origin, dirs, np.asarray(world.bounds.lo), np.asarray(world.bounds.hi))
    ranges = np.minimum(ranges, np.maximum(t_exit, 0.0))

    for ob in world.obstacles:
        t_near, t_far = _ray_box_entry(origin, dirs, np.asarray(ob.lo), np.asarray(ob.hi))
        valid = (t_near <= t_far) & (t_far > 0.0)
        t_hit = np.where(valid, np.maximum(t_near, 0.0), np.inf)
        closer = t_hit < ranges
        ranges = np.where(closer, t_hit, ranges)
        hit = np.where(closer, True, hit)

    return Scan(directions=dirs, ranges=ranges, hit=hit)


def _dda_setup(grid: VoxelGrid, origins, dirs):
    """Per-ray stepping state for lockstep traversal (Amanatides-Woo)."""
    res = grid.resolution
    rel = (origins - grid.origin) / res
    voxel = np.floor(rel).astype(np.int64)
    d = np.where(np.abs(dirs) < 1e-30, 1e-30, dirs)
    step = np.where(d > 0, 1, -1).astype(np.int64)
    next_boundary = (voxel + (step > 0)) * res + grid.origin
    t_max = (next_boundary - origins) / d
    t_delta = res / np.abs(d)
    return voxel, step, t_max, t_delta


def raycast_known_batch(grid: VoxelGrid, origins, dirs, max_range: float):
    """For each ray: distance to the first non-Free voxel and its state.

    Returns (ranges, states); states hold OccupancyState values with -1 for
    rays that stayed Free through max_range (range then equals max_range).
    Rays leaving the grid while still Free also report (max_range, -1).
    """
    origins = np.atleast_2d(np.asarray(origins, float))
    dirs = np.atleast_2d(np.asarray(dirs, float))
    n = dirs.shape[0]
    if origins.shape[0] == 1 and n > 1:
        origins = np.broadcast_to(origins, (n, 3)).copy()

    voxel, step, t_max, t_delta = _dda_setup(grid, origins, dirs)
    t_enter = np.zeros(n)
    out_range = np.full(n, float(max_range))
    out_state = np.full(n, -1, dtype=np.int8)
    active = np.ones(n, dtype=bool)
    dims = grid.dims

    while active.any():
        idx = np.nonzero(active)[0]
        v = voxel[idx]
        inside = ((v >= 0) & (v < dims)).all(axis=1)

        # Rays outside the grid terminate as all-Free (the grid is convex).
        gone = idx[~inside]
        active[gone] = False

        idx = idx[inside]
        if idx.size:
            flat = voxel[idx, 0] * grid.strides[0] + voxel[idx, 1] * grid.strides[1] + voxel[idx, 2]
            st = grid.states.flat[flat]
            blocked = st != OccupancyState.FREE
            hit_idx = idx[blocked]
            out_range[hit_idx] = np.maximum(t_enter[hit_idx], 0.0)
            out_state[hit_idx] = st[blocked]
            active[hit_idx] = False

        idx = np.nonzero(active)[0]
        if not idx.size:
            break
        axis = np.argmin(t_max[idx], axis=1)
        t_next = t_max[idx, axis]
        over = t_next >= max_range
        active[idx[over]] = False
        adv = idx[~over]
        if adv.size:
            a = axis[~over]
            t_enter[adv] = t_next[~over]
            voxel[adv, a] += step[adv, a]
            t_max[adv, a] += t_delta[adv, a]

    return out_range, out_state


def raycast_known(grid: VoxelGrid, origin, direction, max_range: float):
    """Scalar wrapper over raycast_known_batch: (range, OccupancyState | None)."""
    r, s = raycast_known_batch(grid, np.asarray(origin, float), np.asarray(direction, float), max_range)
    state = None if s[0] < 0 else OccupancyState(int(s[0]))
    return float(r[0]), state


def integrate_scan(grid: VoxelGrid, pose: AgentPose, scan: Scan) -> np.ndarray:
    """Carve a scan into the grid; returns sorted flat indices that changed.

    A voxel becomes Free when a ray fully traverses it (exit param <= ray
    range); the voxel containing a hit endpoint becomes Occupied. Already
    known voxels never change. Occupied marks are applied before Free marks.
    """
    origins = np.broadcast_to(pose.position, scan.directions.shape).copy()
    dirs = scan.directions
    ranges = scan.ranges
    n = dirs.shape[0]

    voxel, step, t_max, t_delta = _dda_setup(grid, origins, dirs)
    active = np.ones(n, dtype=bool)
    dims = grid.dims

    free_chunks = []
    occ_chunks = []

    while active.any():
        idx = np.nonzero(active)[0]
        v = voxel[idx]
        inside = ((v >= 0) & (v < dims)).all(axis=1)
        active[idx[~inside]] = False
        idx = idx[inside]
        if not idx.size:
            break

        t_exit = t_max[idx].min(axis=1)
        flat = voxel[idx, 0] * grid.strides[0] + voxel[idx, 1] * grid.strides[1] + voxel[idx, 2]

        # Tolerance absorbs float noise when a hit lands exactly on a voxel
        # face: the face voxel counts as traversed, the surface voxel as hit.
        traversed = t_exit <= ranges[idx] + 1e-9
        free_chunks.append(flat[traversed])

        ended = ~traversed
        end_idx = idx[ended]
        if end_idx.size:
            occ_chunks.append(flat[ended][scan.hit[end_idx]])
            active[end_idx] = False

        adv = idx[traversed]
        if adv.size:
            a = np.argmin(t_max[adv], axis=1)
            voxel[adv, a] += step[adv, a]
            t_max[adv, a] += t_delta[adv, a]

    changed = []
    states = grid.states.reshape(-1)
    for chunks, value in ((occ_chunks, OccupancyState.OCCUPIED), (free_chunks, OccupancyState.FREE)):
        if not chunks:
            continue
        flat = np.unique(np.concatenate(chunks))
        fresh = flat[states[flat] == OccupancyState.UNKNOWN]
        states[fresh] = value
        changed.append(fresh)

    if not changed:
        return np.empty(0, dtype=np.int64)
    return np.sort(np.concatenate(changed))
