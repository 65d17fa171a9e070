"""Point-goal planning: map voxelization, eikonal distance fields, action emission.

The gaussian map collapses to one point per splat, voxelized in 3D and
projected to a birds-eye grid whose obstacle layer keeps only the agent's
height band. A first-order fast-marching solver produces geodesic distance
fields; actions follow the local field minimum with a turn deadband.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .explore import NavGrid
from .geometry import bearing_deg, wrap_angle_deg
from .mapping import GaussianMap
from .world import (AGENT_RADIUS, FORWARD, STOP, STEP_FORWARD, TURN_DEG,
                    TURN_LEFT, TURN_RIGHT, AgentState)

OBSTACLE_BAND = (0.10, 1.41)
TURN_DEADBAND = TURN_DEG / 2.0
STOP_DISTANCE = 0.9
LOCAL_WINDOW = 1.0


class EmptyGridError(Exception):
    pass


class InvalidSourceError(Exception):
    pass


class NoPathError(Exception):
    """Agent cell unreachable in the distance field; caller should re-explore."""


@dataclass
class VoxelGrid:
    resolution: float
    origin: tuple[float, float, float]
    occupancy: np.ndarray      # (nx, ny, nz) bool


@dataclass
class DistanceField:
    values: np.ndarray         # (nx, ny) meters, +inf where unreachable
    resolution: float
    origin: tuple[float, float]


def build_nav_grid(gmap: GaussianMap, extent: tuple[float, float],
                   resolution: float = 0.05, z_top: float = 3.0):
    """Voxelize splat centers and project to a BEV NavGrid.

    Obstacle: any occupied voxel inside the height band. Explored: any occupied
    voxel in the column.
    """
    if len(gmap) == 0:
        raise EmptyGridError("cannot build navigation grids from an empty map")
    nx = int(round(extent[0] / resolution))
    ny = int(round(extent[1] / resolution))
    nz = int(round(z_top / resolution))
    occ = np.zeros((nx, ny, nz), dtype=bool)
    ijk = np.floor(gmap.means / resolution).astype(int)
    ok = ((ijk[:, 0] >= 0) & (ijk[:, 0] < nx) & (ijk[:, 1] >= 0) & (ijk[:, 1] < ny)
          & (ijk[:, 2] >= 0) & (ijk[:, 2] < nz))
    occ[ijk[ok, 0], ijk[ok, 1], ijk[ok, 2]] = True
    voxels = VoxelGrid(resolution, (0.0, 0.0, 0.0), occ)

    k0 = int(OBSTACLE_BAND[0] / resolution)
    k1 = int(math.ceil(OBSTACLE_BAND[1] / resolution))
    grid = NavGrid(resolution, (0.0, 0.0),
                   explored=occ.any(axis=2),
                   obstacle=occ[:, :, k0:k1].any(axis=2))
    return voxels, grid


def fmm_field(traversable: np.ndarray, sources: list[tuple[int, int]],
              resolution: float, source_values: list[float] | None = None,
              origin: tuple[float, float] = (0.0, 0.0)) -> DistanceField:
    """First-order fast-marching solution of |grad d| = 1 on free cells.

    Plain sources start at zero; source_values seeds them (used to anchor a
    field to a world point that is off the traversable set).
    """
    nx, ny = traversable.shape
    dist = np.full((nx, ny), np.inf)
    done = np.zeros((nx, ny), dtype=bool)
    pq = []
    vals = source_values if source_values is not None else [0.0] * len(sources)
    for (ix, iy), v in zip(sources, vals):
        if not (0 <= ix < nx and 0 <= iy < ny) or not traversable[ix, iy]:
            raise InvalidSourceError(f"source cell {(ix, iy)} is not traversable")
        if v < dist[ix, iy]:
            dist[ix, iy] = v
            heapq.heappush(pq, (v, ix, iy))
    h = resolution
    while pq:
        d, ix, iy = heapq.heappop(pq)
        if done[ix, iy] or d > dist[ix, iy]:
            continue
        done[ix, iy] = True
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            jx, jy = ix + dx, iy + dy
            if not (0 <= jx < nx and 0 <= jy < ny):
                continue
            if done[jx, jy] or not traversable[jx, jy]:
                continue
            a = min(dist[jx - 1, jy] if jx > 0 else np.inf,
                    dist[jx + 1, jy] if jx < nx - 1 else np.inf)
            b = min(dist[jx, jy - 1] if jy > 0 else np.inf,
                    dist[jx, jy + 1] if jy < ny - 1 else np.inf)
            if not np.isfinite(a) and not np.isfinite(b):
                continue
            if abs(a - b) >= h or not (np.isfinite(a) and np.isfinite(b)):
                nd = min(a, b) + h
            else:
                nd = 0.5 * (a + b + math.sqrt(2.0 * h * h - (a - b) ** 2))
            if nd < dist[jx, jy]:
                dist[jx, jy] = nd
                heapq.heappush(pq, (nd, jx, jy))
    return DistanceField(dist, resolution, origin)


def nearest_traversable(traversable: np.ndarray, cell: tuple[int, int],
                        max_r: int = 12):
    nx, ny = traversable.shape
    ix, iy = cell
    ix = min(max(ix, 0), nx - 1)
    iy = min(max(iy, 0), ny - 1)
    if traversable[ix, iy]:
        return (ix, iy)
    for r in range(1, max_r + 1):
        best, best_d = None, np.inf
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                if max(abs(dx), abs(dy)) != r:
                    continue
                jx, jy = ix + dx, iy + dy
                if 0 <= jx < nx and 0 <= jy < ny and traversable[jx, jy]:
                    d = dx * dx + dy * dy
                    if d < best_d:
                        best, best_d = (jx, jy), d
        if best is not None:
            return best
    return None


def goal_field(grid: NavGrid, goal_xy: tuple[float, float],
               source_radius: float = 1.0) -> DistanceField:
    """Distance-to-goal field: traversable cells near the goal are seeded with
    their euclidean offset so field values approximate distance to the goal
    point itself (the goal usually sits inside an object)."""
    trav = grid.traversable()
    nx, ny = trav.shape
    xs = grid.origin[0] + (np.arange(nx) + 0.5) * grid.resolution
    ys = grid.origin[1] + (np.arange(ny) + 0.5) * grid.resolution
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    euclid = np.hypot(gx - goal_xy[0], gy - goal_xy[1])
    near = (euclid <= source_radius) & trav
    if not near.any():
        cell = nearest_traversable(trav, grid.world_to_cell(goal_xy), max_r=40)
        if cell is None:
            return DistanceField(np.full(trav.shape, np.inf), grid.resolution,
                                 grid.origin)
        near = np.zeros_like(trav)
        near[cell] = True
    cells = [tuple(c) for c in np.argwhere(near)]
    values = [float(euclid[c]) for c in cells]
    return fmm_field(trav, cells, grid.resolution, source_values=values,
                     origin=grid.origin)


def plan_next_action(field: DistanceField, state: AgentState, grid: NavGrid,
                     stop_distance: float = STOP_DISTANCE,
                     window: float = LOCAL_WINDOW) -> str:
    """One discrete action toward the field minimum in the local window."""
    blocked = grid.inflated_obstacles(AGENT_RADIUS)
    trav = grid.explored & ~blocked
    ax, ay = state.position[0], state.position[1]
    cell = nearest_traversable(trav, grid.world_to_cell((ax, ay)), max_r=6)
    if cell is None or not np.isfinite(field.values[cell]):
        raise NoPathError("agent cell is unreachable in the distance field")
    if field.values[cell] < stop_distance:
        return STOP

    r = int(window / grid.resolution)
    nx, ny = trav.shape
    x0, x1 = max(0, cell[0] - r), min(nx, cell[0] + r + 1)
    y0, y1 = max(0, cell[1] - r), min(ny, cell[1] + r + 1)
    sub = field.values[x0:x1, y0:y1].copy()
    sub[~trav[x0:x1, y0:y1]] = np.inf
    j = np.unravel_index(np.argmin(sub), sub.shape)
    if not np.isfinite(sub[j]):
        raise NoPathError("no traversable field values in the local window")
    waypoint = (x0 + j[0], y0 + j[1])
    if waypoint == cell:
        return TURN_LEFT
    wx, wy = grid.cell_center(waypoint)
    err = wrap_angle_deg(bearing_deg((ax, ay), (wx, wy)) - state.heading)
    if abs(err) > TURN_DEADBAND:
        return TURN_LEFT if err > 0 else TURN_RIGHT
    # never step into an inflated obstacle cell (unexplored is fine to probe)
    hx = ax + STEP_FORWARD * math.cos(math.radians(state.heading))
    hy = ay + STEP_FORWARD * math.sin(math.radians(state.heading))
    for frac in (0.5, 1.0):
        px = ax + (hx - ax) * frac
        py = ay + (hy - ay) * frac
        c = grid.world_to_cell((px, py))
        if grid.in_bounds(*c) and blocked[c]:
            return TURN_LEFT if err >= 0 else TURN_RIGHT
    return FORWARD
