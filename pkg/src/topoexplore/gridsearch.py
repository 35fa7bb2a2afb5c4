"""Shortest-path fields over the voxel grid.

A GridField maps voxels to (cost from a root, parent voxel) and backs both
the per-agent local search field and each history node's path tree. With the
default 6-connectivity every step costs one resolution unit, so full builds
run as vectorized breadth-first level sweeps; growing an existing field by a
few voxels uses a decrease-only heap relaxation seeded at the boundary.
"""

from __future__ import annotations

import heapq
import math

import numpy as np

_DIRS6 = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))

# Below this many inserted voxels the seeded heap relaxation beats a full
# vectorized rebuild; the switch is deterministic either way.
FULL_REBUILD_THRESHOLD = 4000


class GridField:
    """Shortest-path costs (meters) and parent pointers rooted at one voxel."""

    __slots__ = ("costs", "parents", "root", "resolution", "dims")

    def __init__(self, costs, parents, root, resolution, dims):
        self.costs = costs  # flat float64, +inf where absent
        self.parents = parents  # flat int64, -1 at root / absent
        self.root = int(root)
        self.resolution = float(resolution)
        self.dims = tuple(int(d) for d in dims)

    def contains(self, flat: int) -> bool:
        return math.isfinite(self.costs[flat])

    def cost(self, flat: int) -> float:
        return float(self.costs[flat])

    def mask(self) -> np.ndarray:
        return np.isfinite(self.costs)

    def copy(self) -> "GridField":
        return GridField(self.costs.copy(), self.parents.copy(), self.root, self.resolution, self.dims)

    def path_to(self, flat: int) -> list[int]:
        """Voxel chain from the root to `flat` (inclusive)."""
        chain = [int(flat)]
        guard = self.costs.size + 1
        while chain[-1] != self.root:
            p = int(self.parents[chain[-1]])
            if p < 0 or len(chain) > guard:
                raise RuntimeError("broken parent chain in grid field")
            chain.append(p)
        chain.reverse()
        return chain


def _shift(mask: np.ndarray, d) -> np.ndarray:
    out = np.zeros_like(mask)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    for ax, dd in enumerate(d):
        if dd == 1:
            dst[ax] = slice(1, None)
            src[ax] = slice(None, -1)
        elif dd == -1:
            dst[ax] = slice(None, -1)
            src[ax] = slice(1, None)
    out[tuple(dst)] = mask[tuple(src)]
    return out


def bfs_field(allowed: np.ndarray, root_ijk, resolution: float) -> GridField:
    """Unit-step BFS over an allowed-region mask; exact for 6-connectivity."""
    dims = allowed.shape
    n = allowed.size
    strides = (dims[1] * dims[2], dims[2], 1)
    lvl = np.full(dims, -1, dtype=np.int32)
    par = np.full(n, -1, dtype=np.int64)
    root_ijk = tuple(int(v) for v in root_ijk)
    if not allowed[root_ijk]:
        raise ValueError("BFS root outside the allowed region")
    lvl[root_ijk] = 0
    flat3 = np.arange(n, dtype=np.int64).reshape(dims)
    frontier = np.zeros(dims, dtype=bool)
    frontier[root_ijk] = True
    level = 0
    while frontier.any():
        nxt = np.zeros(dims, dtype=bool)
        for d in _DIRS6:
            off = d[0] * strides[0] + d[1] * strides[1] + d[2]
            cand = _shift(frontier, d) & allowed & (lvl < 0)
            if cand.any():
                lvl[cand] = level + 1
                par[flat3[cand]] = flat3[cand] - off
                nxt |= cand
        frontier = nxt
        level += 1
    costs = np.where(lvl.reshape(-1) >= 0, lvl.reshape(-1).astype(np.float64) * resolution, np.inf)
    root_flat = int(flat3[root_ijk])
    return GridField(costs, par, root_flat, resolution, dims)


_DIRS26 = [
    (di, dj, dk)
    for di in (-1, 0, 1)
    for dj in (-1, 0, 1)
    for dk in (-1, 0, 1)
    if (di, dj, dk) != (0, 0, 0)
]


def dijkstra_field_26(allowed: np.ndarray, root_ijk, resolution: float) -> GridField:
    """Plain heap Dijkstra with diagonal steps (optional 26-connectivity)."""
    dims = allowed.shape
    n = allowed.size
    ny, nz = dims[1], dims[2]
    costs = np.full(n, np.inf)
    par = np.full(n, -1, dtype=np.int64)
    allowed_flat = allowed.reshape(-1)
    root = int((root_ijk[0] * ny + root_ijk[1]) * nz + root_ijk[2])
    if not allowed_flat[root]:
        raise ValueError("Dijkstra root outside the allowed region")
    steps = [((di * ny + dj) * nz + dk, resolution * math.sqrt(di * di + dj * dj + dk * dk), di, dj, dk)
             for di, dj, dk in _DIRS26]
    costs[root] = 0.0
    heap = [(0.0, root)]
    while heap:
        c, u = heapq.heappop(heap)
        if c > costs[u]:
            continue
        ui, rem = divmod(u, ny * nz)
        uj, uk = divmod(rem, nz)
        for off, w, di, dj, dk in steps:
            vi, vj, vk = ui + di, uj + dj, uk + dk
            if not (0 <= vi < dims[0] and 0 <= vj < ny and 0 <= vk < nz):
                continue
            v = u + off
            if not allowed_flat[v]:
                continue
            nc = c + w
            if nc < costs[v]:
                costs[v] = nc
                par[v] = u
                heapq.heappush(heap, (nc, v))
    return GridField(costs, par, root, resolution, dims)


def seeded_relax(field: GridField, allowed_flat: np.ndarray, seeds) -> None:
    """Decrease-only relaxation from already-costed seed voxels, in place.

    Exact for unit steps (6-connectivity): any improving path enters new
    territory through a seed, so seeding every costed voxel adjacent to the
    insertion region reproduces a full rebuild.
    """
    dims = field.dims
    ny, nz = dims[1], dims[2]
    res = field.resolution
    costs = field.costs
    par = field.parents
    heap = [(float(costs[s]), int(s)) for s in sorted(seeds)]
    heapq.heapify(heap)
    while heap:
        c, u = heapq.heappop(heap)
        if c > costs[u]:
            continue
        ui, rem = divmod(u, ny * nz)
        uj, uk = divmod(rem, nz)
        for di, dj, dk in _DIRS6:
            vi, vj, vk = ui + di, uj + dj, uk + dk
            if not (0 <= vi < dims[0] and 0 <= vj < ny and 0 <= vk < nz):
                continue
            v = (vi * ny + vj) * nz + vk
            if not allowed_flat[v]:
                continue
            nc = c + res
            if nc < costs[v]:
                costs[v] = nc
                par[v] = u
                heapq.heappush(heap, (nc, v))


def grow_field(field: GridField, region_mask: np.ndarray) -> int:
    """Extend a field to cover `region_mask`, keeping costs exact over the union.

    Returns the number of voxels newly inserted. Falls back to a full rebuild
    when the insertion is large.
    """
    dims = field.dims
    known = field.mask().reshape(dims)
    new_mask = region_mask & ~known
    n_new = int(np.count_nonzero(new_mask))
    if n_new == 0:
        return 0
    allowed = region_mask | known
    if n_new > FULL_REBUILD_THRESHOLD:
        rebuilt = bfs_field(allowed, np.unravel_index(field.root, dims), field.resolution)
        field.costs = rebuilt.costs
        field.parents = rebuilt.parents
        return n_new
    boundary = np.zeros(dims, dtype=bool)
    for d in _DIRS6:
        boundary |= _shift(new_mask, d)
    seeds = np.nonzero((boundary & known).reshape(-1))[0]
    seeded_relax(field, allowed.reshape(-1), seeds)
    return n_new
