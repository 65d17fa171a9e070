"""Frontier-based exploration state: exploration / obstacle grids and frontiers.

The grids live on the scene's floor rectangle. Depth frames are swept into the
exploration layer column by column (free space up to the first blocking return)
and into the obstacle layer wherever returns fall inside the agent's height
band. Frontiers are explored free cells that border unexplored space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import camera_rotation, focal_from_vfov, pixel_rays
from .world import AGENT_RADIUS, AgentState, CameraIntrinsics, Observation

OBSTACLE_BAND = (0.10, 1.41)   # returns in this height band block the agent
FLOOR_BAND = 0.05              # returns below this are floor
MIN_FRONTIER_CELLS = 5


@dataclass
class NavGrid:
    resolution: float
    origin: tuple[float, float]
    explored: np.ndarray      # (nx, ny) bool
    obstacle: np.ndarray      # (nx, ny) bool

    @classmethod
    def create(cls, extent: tuple[float, float], resolution: float = 0.05,
               origin: tuple[float, float] = (0.0, 0.0)) -> "NavGrid":
        nx = int(round((extent[0] - origin[0]) / resolution))
        ny = int(round((extent[1] - origin[1]) / resolution))
        return cls(resolution, origin,
                   np.zeros((nx, ny), dtype=bool), np.zeros((nx, ny), dtype=bool))

    @property
    def shape(self):
        return self.explored.shape

    def world_to_cell(self, xy) -> tuple[int, int]:
        return (int((xy[0] - self.origin[0]) / self.resolution),
                int((xy[1] - self.origin[1]) / self.resolution))

    def cell_center(self, cell) -> tuple[float, float]:
        return (self.origin[0] + (cell[0] + 0.5) * self.resolution,
                self.origin[1] + (cell[1] + 0.5) * self.resolution)

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.explored.shape[0] and 0 <= iy < self.explored.shape[1]

    def inflated_obstacles(self, radius: float = AGENT_RADIUS) -> np.ndarray:
        r = int(math.ceil(radius / self.resolution))
        if r <= 0 or not self.obstacle.any():
            return self.obstacle.copy()
        yy, xx = np.ogrid[-r:r + 1, -r:r + 1]
        disk = xx * xx + yy * yy <= r * r
        return ndimage.binary_dilation(self.obstacle, structure=disk)

    def traversable(self, radius: float = AGENT_RADIUS) -> np.ndarray:
        return self.explored & ~self.inflated_obstacles(radius)

    def copy(self) -> "NavGrid":
        return NavGrid(self.resolution, self.origin,
                       self.explored.copy(), self.obstacle.copy())


def _mark_disk(mask: np.ndarray, grid: NavGrid, xy, radius: float):
    ix, iy = grid.world_to_cell(xy)
    r = int(math.ceil(radius / grid.resolution))
    nx, ny = mask.shape
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            if dx * dx + dy * dy <= r * r and 0 <= ix + dx < nx and 0 <= iy + dy < ny:
                mask[ix + dx, iy + dy] = True


def update_grids(grid: NavGrid, obs: Observation, pose: AgentState,
                 intr: CameraIntrinsics) -> NavGrid:
    """Fold one posed depth frame into the grids, in place (and returned)."""
    x, y, z = pose.position
    cam = np.array([x, y, z + intr.mount_height])
    f = focal_from_vfov(intr.height, intr.vertical_fov)
    rays = pixel_rays(intr.width, intr.height, f, f, intr.width / 2, intr.height / 2)
    rot = camera_rotation(pose.heading, intr.look_at_pitch)
    dirs = rays.reshape(-1, 3) @ rot
    depth = obs.depth.reshape(-1)
    valid = depth > 0
    pts = cam[None, :] + dirs * depth[:, None]
    heights = pts[:, 2] - 0.0
    rho = np.hypot(pts[:, 0] - x, pts[:, 1] - y)

    # obstacle returns
    band = valid & (heights >= OBSTACLE_BAND[0]) & (heights <= OBSTACLE_BAND[1])
    if band.any():
        ix = ((pts[band, 0] - grid.origin[0]) / grid.resolution).astype(int)
        iy = ((pts[band, 1] - grid.origin[1]) / grid.resolution).astype(int)
        ok = (ix >= 0) & (ix < grid.shape[0]) & (iy >= 0) & (iy < grid.shape[1])
        grid.obstacle[ix[ok], iy[ok]] = True
        grid.explored[ix[ok], iy[ok]] = True

    # directly observed floor cells count as explored even when the free-cone
    # sweep below stops earlier (floor seen past an occluder, tight gaps)
    floor_direct = valid & (heights < FLOOR_BAND)
    if floor_direct.any():
        ix = ((pts[floor_direct, 0] - grid.origin[0]) / grid.resolution).astype(int)
        iy = ((pts[floor_direct, 1] - grid.origin[1]) / grid.resolution).astype(int)
        ok = (ix >= 0) & (ix < grid.shape[0]) & (iy >= 0) & (iy < grid.shape[1])
        grid.explored[ix[ok], iy[ok]] = True

    # per-column free range along the column's azimuth
    H, W = obs.depth.shape
    rho_img = rho.reshape(H, W)
    h_img = heights.reshape(H, W)
    v_img = valid.reshape(H, W)
    blocking = v_img & (h_img >= FLOOR_BAND)
    floorhit = v_img & (h_img < FLOOR_BAND)
    rho_block = np.where(blocking, rho_img, np.inf).min(axis=0)
    rho_floor = np.where(floorhit, rho_img, 0.0).max(axis=0)
    margin = 0.5 * grid.resolution
    free_range = np.where(np.isfinite(rho_block),
                          np.maximum(rho_block - margin, 0.0), rho_floor)

    mid = dirs.reshape(H, W, 3)[H // 2]
    az = np.arctan2(mid[:, 1], mid[:, 0])
    step = grid.resolution * 0.5
    ix_all, iy_all = [], []
    for c in range(W):
        n = int(free_range[c] / step)
        if n <= 0:
            continue
        d = (np.arange(n) + 1) * step
        ix_all.append(x + math.cos(az[c]) * d)
        iy_all.append(y + math.sin(az[c]) * d)
    if ix_all:
        fx = np.concatenate(ix_all)
        fy = np.concatenate(iy_all)
        ix = ((fx - grid.origin[0]) / grid.resolution).astype(int)
        iy = ((fy - grid.origin[1]) / grid.resolution).astype(int)
        ok = (ix >= 0) & (ix < grid.shape[0]) & (iy >= 0) & (iy < grid.shape[1])
        grid.explored[ix[ok], iy[ok]] = True

    # the agent's own footprint is free by construction
    _mark_disk(grid.explored, grid, (x, y), AGENT_RADIUS + grid.resolution)
    return grid


def detect_frontiers(grid: NavGrid) -> list[tuple[int, int]]:
    """Explored free cells bordering unexplored space, away from obstacles."""
    unexplored = ~grid.explored
    border = ndimage.binary_dilation(unexplored, structure=np.ones((3, 3)))
    frontier = grid.explored & ~grid.obstacle & border
    frontier &= ~grid.inflated_obstacles(AGENT_RADIUS)
    if not frontier.any():
        return []
    labels, n = ndimage.label(frontier, structure=np.ones((3, 3)))
    keep = np.zeros_like(frontier)
    for comp in range(1, n + 1):
        m = labels == comp
        if m.sum() >= MIN_FRONTIER_CELLS:
            keep |= m
    return [tuple(c) for c in np.argwhere(keep)]


def select_frontier(frontiers: list[tuple[int, int]], pose: AgentState,
                    grid: NavGrid):
    """Nearest frontier by geodesic distance, or None when exploration is done."""
    if not frontiers:
        return None
    from .planner import fmm_field, nearest_traversable
    trav = grid.traversable()
    cell = nearest_traversable(trav, grid.world_to_cell(pose.position[:2]))
    if cell is None:
        return None
    field = fmm_field(trav, [cell], grid.resolution)
    best, best_d = None, np.inf
    for fx, fy in sorted(frontiers):   # ties resolve to the lowest cell index
        d = field.values[fx, fy]
        if d < best_d:
            best, best_d = (fx, fy), d
    if best is None or not np.isfinite(best_d):
        return None
    return best
