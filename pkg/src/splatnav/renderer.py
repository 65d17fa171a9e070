"""Isotropic gaussian splatting: projection, alpha compositing, analytic gradients.

Each splat carries eight scalars (rgb color, 3D centroid, radius, opacity) plus a
discrete class label. Rendering composites color, depth, silhouette and semantic
channels front to back. The tiled rasterizer is the fast path; a naive per-pixel
evaluator with identical cutoff / truncation semantics serves as the test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import camera_rotation, focal_from_vfov

# Footprint cutoff: weights are treated as exactly zero beyond CUTOFF_SIGMA * r2d.
CUTOFF_SIGMA = _kernels.CUTOFF_SIGMA
# Compositing stops once accumulated transmittance falls below this.
TRANSMITTANCE_EPS = _kernels.TRANSMITTANCE_EPS

TILE = _kernels.TILE


@dataclass
class Gaussian:
    """One splat. Opacity is stored unconstrained and clamped to [0,1] at evaluation."""
    color: tuple[float, float, float]
    center: tuple[float, float, float]
    radius: float
    opacity: float
    label: int = 0


@dataclass
class CameraModel:
    """Pinhole camera with world->camera extrinsics (q = R x + t)."""
    fx: float
    fy: float
    cx: float
    cy: float
    rot: np.ndarray       # (3,3) orthonormal, det +1
    trans: np.ndarray     # (3,)
    width: int
    height: int
    near: float = 0.05

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=float)
        self.trans = np.asarray(self.trans, dtype=float)
        if not np.allclose(self.rot @ self.rot.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if np.linalg.det(self.rot) < 0:
            raise ValueError("camera rotation has negative determinant")

    @property
    def focal(self) -> float:
        return self.fx

    @classmethod
    def from_pose(cls, position, heading_deg: float, pitch_deg: float,
                  width: int, height: int, vertical_fov_deg: float) -> "CameraModel":
        f = focal_from_vfov(height, vertical_fov_deg)
        rot = camera_rotation(heading_deg, pitch_deg)
        pos = np.asarray(position, dtype=float)
        return cls(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                   rot=rot, trans=-rot @ pos, width=width, height=height)


@dataclass
class Splat2D:
    center: tuple[float, float]
    radius_px: float
    depth: float
    index: int


@dataclass
class RenderedFrame:
    color: np.ndarray      # (H, W, 3)
    depth: np.ndarray      # (H, W)
    silhouette: np.ndarray  # (H, W) in [0, 1]
    semantic: np.ndarray   # (H, W) real-valued label composite

    def semantic_labels(self) -> np.ndarray:
        """Discretize the composited label channel (nearest integer)."""
        return np.rint(self.semantic).astype(np.int64)


def gaussian_weight(opacity: float, center2d, radius_px: float, pixel) -> float:
    """Opacity-weighted unnormalized gaussian, zero beyond the footprint cutoff."""
    dx = pixel[0] - center2d[0]
    dy = pixel[1] - center2d[1]
    rho2 = dx * dx + dy * dy
    if rho2 > (CUTOFF_SIGMA * radius_px) ** 2:
        return 0.0
    o = min(max(opacity, 0.0), 1.0)
    return o * float(np.exp(-rho2 / (2.0 * radius_px * radius_px)))


def project_gaussian(g: Gaussian, cam: CameraModel) -> Splat2D | None:
    """Project one splat to pixel space; None when culled (behind camera / off image)."""
    q = cam.rot @ np.asarray(g.center, dtype=float) + cam.trans
    d = q[2]
    if d <= cam.near:
        return None
    u = cam.fx * q[0] / d + cam.cx
    v = cam.fy * q[1] / d + cam.cy
    r2d = cam.focal * g.radius / d
    m = CUTOFF_SIGMA * r2d
    if u + m < 0 or u - m > cam.width or v + m < 0 or v - m > cam.height:
        return None
    return Splat2D(center=(u, v), radius_px=r2d, depth=d, index=0)


# ---------------------------------------------------------------------------
# array-of-parameters projection shared by the fast renderer and the backward
# ---------------------------------------------------------------------------

def _project_arrays(means, radii, cam: CameraModel):
    """Project (N,3) means. Returns (keep_idx, uv, r2d, depth, q_cam)."""
    q = means @ cam.rot.T + cam.trans
    d = q[:, 2]
    safe = np.where(d > cam.near, d, 1.0)
    u = cam.fx * q[:, 0] / safe + cam.cx
    v = cam.fy * q[:, 1] / safe + cam.cy
    r2d = cam.focal * radii / safe
    m = CUTOFF_SIGMA * r2d
    keep = (d > cam.near) & (u + m >= 0) & (u - m <= cam.width) \
        & (v + m >= 0) & (v - m <= cam.height)
    idx = np.flatnonzero(keep)
    return idx, np.stack([u[idx], v[idx]], axis=1), r2d[idx], d[idx], q[idx]


def render_frame(colors, means, radii, opacities, labels, cam: CameraModel) -> RenderedFrame:
    """Tiled front-to-back compositing of all channels. Empty input -> all-zero frame."""
    H, W = cam.height, cam.width
    out_c = np.zeros((H, W, 3))
    out_d = np.zeros((H, W))
    out_s = np.zeros((H, W))
    out_l = np.zeros((H, W))
    means = np.atleast_2d(np.asarray(means, dtype=float))
    n = 0 if means.size == 0 else means.shape[0]
    if n == 0:
        return RenderedFrame(out_c, out_d, out_s, out_l)
    colors = np.asarray(colors, dtype=float).reshape(n, 3)
    radii = np.asarray(radii, dtype=float).reshape(n)
    opacities = np.asarray(opacities, dtype=float).reshape(n)
    labels = np.asarray(labels, dtype=float).reshape(n)

    idx, uv, r2d, depth, _ = _project_arrays(means, radii, cam)
    if len(idx) == 0:
        return RenderedFrame(out_c, out_d, out_s, out_l)
    order = np.argsort(depth, kind="stable")
    uv, r2d, depth = uv[order], r2d[order], depth[order]
    sel = idx[order]
    csr_idx, csr_off, ntx = _kernels.tile_csr(uv, r2d, W, H)
    _kernels.forward_kernel(W, H, ntx, csr_idx, csr_off, uv, r2d, depth,
                            np.ascontiguousarray(colors[sel]),
                            np.ascontiguousarray(opacities[sel]),
                            np.ascontiguousarray(labels[sel]),
                            out_c, out_d, out_s, out_l)
    return RenderedFrame(out_c, out_d, out_s, out_l)


def render_frame_reference(colors, means, radii, opacities, labels,
                           cam: CameraModel) -> RenderedFrame:
    """Naive O(pixels x gaussians) direct evaluator; the oracle for the tiled path."""
    H, W = cam.height, cam.width
    out = RenderedFrame(np.zeros((H, W, 3)), np.zeros((H, W)),
                        np.zeros((H, W)), np.zeros((H, W)))
    means = np.atleast_2d(np.asarray(means, dtype=float))
    n = 0 if means.size == 0 else means.shape[0]
    if n == 0:
        return out
    colors = np.asarray(colors, dtype=float).reshape(n, 3)
    radii = np.asarray(radii, dtype=float).reshape(n)
    opacities = np.asarray(opacities, dtype=float).reshape(n)
    labels = np.asarray(labels, dtype=float).reshape(n)

    splats = []
    for i in range(n):
        g = Gaussian(tuple(colors[i]), tuple(means[i]), radii[i], opacities[i], int(labels[i]))
        s = project_gaussian(g, cam)
        if s is not None:
            splats.append((s.depth, i, s))
    splats.sort(key=lambda t: t[0])
    for vy in range(H):
        for vx in range(W):
            p = (vx + 0.5, vy + 0.5)
            trans = 1.0
            for d, i, s in splats:
                if trans < TRANSMITTANCE_EPS:
                    break
                f = gaussian_weight(opacities[i], s.center, s.radius_px, p)
                wgt = f * trans
                out.color[vy, vx] += wgt * colors[i]
                out.depth[vy, vx] += wgt * d
                out.silhouette[vy, vx] += wgt
                out.semantic[vy, vx] += wgt * labels[i]
                trans *= 1.0 - f
    return out


def render_backward(colors, means, radii, opacities, labels, cam: CameraModel,
                    grad_color, grad_depth, grad_sil):
    """Analytic gradients of the composited channels w.r.t. splat parameters.

    Recomputes the forward pass internally. Labels are discrete and receive no
    gradient. Returns (d_color (N,3), d_mean (N,3), d_radius (N,), d_opacity (N,)).
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    n = means.shape[0]
    colors = np.asarray(colors, dtype=float).reshape(n, 3)
    radii = np.asarray(radii, dtype=float).reshape(n)
    opacities = np.asarray(opacities, dtype=float).reshape(n)
    grad_color = np.asarray(grad_color, dtype=float)
    grad_depth = np.asarray(grad_depth, dtype=float)
    grad_sil = np.asarray(grad_sil, dtype=float)

    d_col = np.zeros((n, 3))
    d_mean = np.zeros((n, 3))
    d_rad = np.zeros(n)
    d_opa = np.zeros(n)
    if n == 0:
        return d_col, d_mean, d_rad, d_opa

    idx, uv, r2d, depth, q = _project_arrays(means, radii, cam)
    if len(idx) == 0:
        return d_col, d_mean, d_rad, d_opa
    order = np.argsort(depth, kind="stable")
    uv, r2d, depth, q = uv[order], r2d[order], depth[order], q[order]
    sel = idx[order]
    m = len(sel)

    # accumulators in sorted-projected space
    a_uv = np.zeros((m, 2))
    a_sig = np.zeros(m)
    a_dep = np.zeros(m)
    a_col = np.zeros((m, 3))
    a_opa = np.zeros(m)

    H, W = cam.height, cam.width
    inside = (opacities[sel] >= 0.0) & (opacities[sel] <= 1.0)  # clamp subgradient
    csr_idx, csr_off, ntx = _kernels.tile_csr(uv, r2d, W, H)
    longest = int(np.diff(csr_off).max()) if len(csr_off) > 1 else 0
    f_buf = np.zeros(max(longest, 1))
    _kernels.backward_kernel(W, H, ntx, csr_idx, csr_off, uv, r2d, depth,
                             np.ascontiguousarray(colors[sel]),
                             np.ascontiguousarray(opacities[sel]),
                             np.ascontiguousarray(grad_color),
                             np.ascontiguousarray(grad_depth),
                             np.ascontiguousarray(grad_sil),
                             a_uv, a_sig, a_dep, a_col, a_opa, f_buf)

    # chain pixel-space gradients through projection to camera then world space
    f_len = cam.focal
    dq = np.zeros((m, 3))
    dq[:, 0] = a_uv[:, 0] * cam.fx / depth
    dq[:, 1] = a_uv[:, 1] * cam.fy / depth
    dq[:, 2] = (-a_uv[:, 0] * cam.fx * q[:, 0] / depth ** 2
                - a_uv[:, 1] * cam.fy * q[:, 1] / depth ** 2
                - a_sig * f_len * radii[sel] / depth ** 2
                + a_dep)
    d_mean[sel] = dq @ cam.rot
    d_rad[sel] = a_sig * f_len / depth
    d_col[sel] = a_col
    d_opa[sel] = a_opa * inside
    return d_col, d_mean, d_rad, d_opa
