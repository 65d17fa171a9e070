"""Shared camera / pose math: rotations, pinhole projection, ray grids."""

from __future__ import annotations

import math

import numpy as np

WORLD_UP = np.array([0.0, 0.0, 1.0])


def heading_vector(heading_deg: float, pitch_deg: float = 0.0) -> np.ndarray:
    """Unit forward vector for a heading (CCW from +x) and pitch (positive up)."""
    h = math.radians(heading_deg)
    p = math.radians(pitch_deg)
    return np.array([math.cos(p) * math.cos(h), math.cos(p) * math.sin(h), math.sin(p)])


def wrap_angle_deg(a: float) -> float:
    """Wrap to (-180, 180]."""
    a = (a + 180.0) % 360.0 - 180.0
    return 180.0 if a == -180.0 else a


def camera_rotation(heading_deg: float, pitch_deg: float = 0.0) -> np.ndarray:
    """World->camera rotation. Camera axes: +x right, +y down, +z forward."""
    fwd = heading_vector(heading_deg, pitch_deg)
    right = np.cross(fwd, WORLD_UP)
    n = np.linalg.norm(right)
    if n < 1e-9:
        # looking straight up/down: derive right from heading alone
        right = np.array([math.sin(math.radians(heading_deg)),
                          -math.cos(math.radians(heading_deg)), 0.0])
    else:
        right = right / n
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd])


def focal_from_vfov(height_px: int, vertical_fov_deg: float) -> float:
    return height_px / (2.0 * math.tan(math.radians(vertical_fov_deg) / 2.0))


def pixel_rays(width: int, height: int, fx: float, fy: float,
               cx: float, cy: float) -> np.ndarray:
    """(H, W, 3) unit ray directions in camera frame through pixel centers."""
    u = np.arange(width) + 0.5
    v = np.arange(height) + 0.5
    uu, vv = np.meshgrid(u, v)
    d = np.stack([(uu - cx) / fx, (vv - cy) / fy, np.ones_like(uu)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def backproject(depth: np.ndarray, rays_cam: np.ndarray, rot_wc: np.ndarray,
                position: np.ndarray) -> np.ndarray:
    """Euclidean ray depths + camera rays -> (H, W, 3) world points."""
    pts_cam = rays_cam * depth[..., None]
    return pts_cam @ rot_wc + position  # rows of rot_wc are camera axes -> transpose mult


def bearing_deg(from_xy, to_xy) -> float:
    return math.degrees(math.atan2(to_xy[1] - from_xy[1], to_xy[0] - from_xy[0]))
