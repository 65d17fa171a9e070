"""Incremental semantic gaussian map construction.

A map is built per trajectory segment: the first frame seeds gaussians from a
back-projected point cloud, later frames add gaussians where the render is
under-covered or depth-inconsistent, and an adaptive first-order optimizer
refines color / position / radius / opacity against the keyframes. Segments
are fit independently and concatenated into one map for querying.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .geometry import camera_rotation, focal_from_vfov, pixel_rays
from .renderer import CameraModel, RenderedFrame, render_backward, render_frame
from .world import AgentState, CameraIntrinsics, Observation

SIL_DENSIFY_THRESH = 0.5
SIL_DEPTH_GATE = 0.99
MDE_FACTOR = 50.0


class EmptyMapError(Exception):
    pass


class OptimizationDivergedError(Exception):
    pass


class MapFormatError(Exception):
    pass


class MapVersionError(MapFormatError):
    pass


class MapTruncatedError(MapFormatError):
    pass


@dataclass
class GaussianMap:
    colors: np.ndarray       # (N, 3)
    means: np.ndarray        # (N, 3)
    radii: np.ndarray        # (N,)
    opacities: np.ndarray    # (N,) stored unconstrained, clamped at evaluation
    labels: np.ndarray       # (N,) uint8 in 0..6
    sub_map_ranges: list = field(default_factory=list)
    frame_log: list = field(default_factory=list)   # (x, y, z, heading, pitch)

    @classmethod
    def empty(cls) -> "GaussianMap":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0),
                   np.zeros(0, dtype=np.uint8), [], [])

    def __len__(self) -> int:
        return self.means.shape[0]

    def copy(self) -> "GaussianMap":
        return GaussianMap(self.colors.copy(), self.means.copy(), self.radii.copy(),
                           self.opacities.copy(), self.labels.copy(),
                           list(self.sub_map_ranges), list(self.frame_log))


def merge_maps(maps: list[GaussianMap]) -> GaussianMap:
    out = GaussianMap.empty()
    for m in maps:
        base = len(out)
        out.colors = np.concatenate([out.colors, m.colors])
        out.means = np.concatenate([out.means, m.means])
        out.radii = np.concatenate([out.radii, m.radii])
        out.opacities = np.concatenate([out.opacities, m.opacities])
        out.labels = np.concatenate([out.labels, m.labels])
        out.sub_map_ranges.append((base, len(out)))
        out.frame_log.extend(m.frame_log)
    return out


# ---------------------------------------------------------------------------
# camera plumbing
# ---------------------------------------------------------------------------

def camera_for(pose: AgentState, intr: CameraIntrinsics) -> CameraModel:
    x, y, z = pose.position
    return CameraModel.from_pose((x, y, z + intr.mount_height), pose.heading,
                                 intr.look_at_pitch, intr.width, intr.height,
                                 intr.vertical_fov)


@lru_cache(maxsize=16)
def _ray_z_grid(width: int, height: int, vfov: float) -> np.ndarray:
    """Per-pixel z-component of the unit camera ray (euclidean -> z-depth factor)."""
    f = focal_from_vfov(height, vfov)
    rays = pixel_rays(width, height, f, f, width / 2.0, height / 2.0)
    return rays[..., 2]


def zdepth_of(obs: Observation, intr: CameraIntrinsics) -> np.ndarray:
    """Observation depth is euclidean ray length; the splat depth channel is
    camera-frame z. Invalid pixels stay 0."""
    return obs.depth * _ray_z_grid(intr.width, intr.height, intr.vertical_fov)


def render_map(gmap: GaussianMap, pose: AgentState,
               intr: CameraIntrinsics) -> RenderedFrame:
    cam = camera_for(pose, intr)
    return render_frame(gmap.colors, gmap.means, gmap.radii, gmap.opacities,
                        gmap.labels, cam)


# ---------------------------------------------------------------------------
# initialization and densification
# ---------------------------------------------------------------------------

def _spawn_gaussians(obs: Observation, pose: AgentState, intr: CameraIntrinsics,
                     pick: np.ndarray, stride: int):
    """Back-project picked pixels into gaussians. pick is a (H, W) bool mask."""
    z = zdepth_of(obs, intr)
    valid = (obs.depth > 0) & pick
    if not valid.any():
        return None
    f = focal_from_vfov(intr.height, intr.vertical_fov)
    rays = pixel_rays(intr.width, intr.height, f, f, intr.width / 2.0, intr.height / 2.0)
    rot = camera_rotation(pose.heading, intr.look_at_pitch)
    x, y, zz = pose.position
    cam_pos = np.array([x, y, zz + intr.mount_height])
    vv, uu = np.nonzero(valid)
    pts = cam_pos + (rays[vv, uu] * obs.depth[vv, uu][:, None]) @ rot
    colors = obs.rgb[vv, uu]
    labels = obs.semantic[vv, uu].astype(np.uint8)
    radii = z[vv, uu] * stride / f
    opac = np.full(len(vv), 0.5)
    return colors.copy(), pts, np.maximum(radii, 1e-3), opac, labels


def _stride_mask(h: int, w: int, stride: int) -> np.ndarray:
    m = np.zeros((h, w), dtype=bool)
    m[stride // 2::stride, stride // 2::stride] = True
    return m


def init_from_pointcloud(obs: Observation, pose: AgentState, intr: CameraIntrinsics,
                         stride: int = 2) -> GaussianMap:
    """Seed a fresh sub-map from the first frame of a segment."""
    pick = _stride_mask(intr.height, intr.width, stride)
    spawned = _spawn_gaussians(obs, pose, intr, pick, stride)
    if spawned is None:
        raise EmptyMapError("first frame has no valid depth returns")
    c, m, r, o, l = spawned
    gmap = GaussianMap(c, m, r, o, l, [(0, len(m))], [])
    x, y, z = pose.position
    gmap.frame_log.append((x, y, z + intr.mount_height, pose.heading,
                           intr.look_at_pitch))
    return gmap


def densification_mask(obs: Observation, rendered: RenderedFrame,
                       intr: CameraIntrinsics) -> np.ndarray:
    """Pixels needing new gaussians: uncovered silhouette, or ground truth in
    front of the render with depth error above 50x the median depth error."""
    z = zdepth_of(obs, intr)
    valid = obs.depth > 0
    err = np.abs(rendered.depth - z)
    if valid.any():
        mde = float(np.median(err[valid]))
    else:
        mde = 0.0
    uncovered = rendered.silhouette < SIL_DENSIFY_THRESH
    in_front = (z < rendered.depth) & (err > MDE_FACTOR * mde)
    return (uncovered | in_front) & valid


def densify(gmap: GaussianMap, obs: Observation, pose: AgentState,
            mask: np.ndarray, intr: CameraIntrinsics, stride: int = 2) -> GaussianMap:
    """Append new gaussians at masked (sampled) pixels to the current sub-map."""
    pick = _stride_mask(intr.height, intr.width, stride) & mask
    spawned = _spawn_gaussians(obs, pose, intr, pick, stride)
    if spawned is None:
        return gmap
    c, m, r, o, l = spawned
    gmap.colors = np.concatenate([gmap.colors, c])
    gmap.means = np.concatenate([gmap.means, m])
    gmap.radii = np.concatenate([gmap.radii, r])
    gmap.opacities = np.concatenate([gmap.opacities, o])
    gmap.labels = np.concatenate([gmap.labels, l])
    if gmap.sub_map_ranges:
        s, _ = gmap.sub_map_ranges[-1]
        gmap.sub_map_ranges[-1] = (s, len(gmap))
    else:
        gmap.sub_map_ranges = [(0, len(gmap))]
    return gmap


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    lr_color: float = 2.5e-3
    lr_mean: float = 1e-4      # scaled by scene extent
    lr_radius: float = 1e-3
    lr_opacity: float = 5e-2
    lambda_depth: float = 0.5
    extent: float = 8.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def frame_loss_grads(gmap: GaussianMap, obs: Observation, pose: AgentState,
                     intr: CameraIntrinsics, cfg: OptimizerConfig):
    """L1 color + silhouette-gated L1 depth loss and its per-channel upstream grads."""
    cam = camera_for(pose, intr)
    fr = render_frame(gmap.colors, gmap.means, gmap.radii, gmap.opacities,
                      gmap.labels, cam)
    z = zdepth_of(obs, intr)
    valid = obs.depth > 0
    rc = fr.color - obs.rgb
    gate = valid & (fr.silhouette > SIL_DEPTH_GATE)
    rd = fr.depth - z
    loss = float(np.abs(rc[valid]).sum() + cfg.lambda_depth * np.abs(rd[gate]).sum())
    g_color = np.sign(rc) * valid[..., None]
    g_depth = cfg.lambda_depth * np.sign(rd) * gate
    g_sil = np.zeros_like(fr.depth)
    return loss, (cam, g_color, g_depth, g_sil)


def evaluate_loss(gmap: GaussianMap, keyframes, intr: CameraIntrinsics,
                  cfg: OptimizerConfig | None = None) -> float:
    cfg = cfg or OptimizerConfig()
    return sum(frame_loss_grads(gmap, obs, pose, intr, cfg)[0]
               for obs, pose in keyframes)


class _Adam:
    def __init__(self, shapes, cfg: OptimizerConfig):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0
        self.cfg = cfg

    def step(self, params, grads, lrs):
        c = self.cfg
        self.t += 1
        out = []
        for i, (p, g, lr) in enumerate(zip(params, grads, lrs)):
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
            mh = self.m[i] / (1 - c.beta1 ** self.t)
            vh = self.v[i] / (1 - c.beta2 ** self.t)
            out.append(p - lr * mh / (np.sqrt(vh) + c.eps))
        return out


def optimize(gmap: GaussianMap, keyframes, iters: int, intr: CameraIntrinsics,
             cfg: OptimizerConfig | None = None) -> GaussianMap:
    """Run full-batch adaptive gradient steps over the keyframes, in place.

    Only color / mean / radius / opacity move; labels and the gaussian count
    are preserved. Raises if the loss goes non-finite.
    """
    if not keyframes:
        raise ValueError("optimize requires at least one keyframe")
    if iters <= 0 or len(gmap) == 0:
        return gmap
    cfg = cfg or OptimizerConfig()
    adam = _Adam([gmap.colors.shape, gmap.means.shape, gmap.radii.shape,
                  gmap.opacities.shape], cfg)
    lrs = (cfg.lr_color, cfg.lr_mean * cfg.extent, cfg.lr_radius, cfg.lr_opacity)
    for it in range(iters):
        gc = np.zeros_like(gmap.colors)
        gm = np.zeros_like(gmap.means)
        gr = np.zeros_like(gmap.radii)
        go = np.zeros_like(gmap.opacities)
        total = 0.0
        for obs, pose in keyframes:
            loss, (cam, g_color, g_depth, g_sil) = frame_loss_grads(
                gmap, obs, pose, intr, cfg)
            total += loss
            dc, dm, dr, do = render_backward(
                gmap.colors, gmap.means, gmap.radii, gmap.opacities, gmap.labels,
                cam, g_color, g_depth, g_sil)
            gc += dc
            gm += dm
            gr += dr
            go += do
        if not math.isfinite(total):
            raise OptimizationDivergedError(f"non-finite loss at step {it}")
        new = adam.step([gmap.colors, gmap.means, gmap.radii, gmap.opacities],
                        [gc, gm, gr, go], lrs)
        gmap.colors, gmap.means, gmap.radii, gmap.opacities = new
        np.clip(gmap.colors, 0.0, 1.0, out=gmap.colors)
        np.maximum(gmap.radii, 1e-3, out=gmap.radii)
    return gmap


# ---------------------------------------------------------------------------
# trajectory division and whole-map building
# ---------------------------------------------------------------------------

def divide_trajectory(frames: list, segment_length: int) -> list[list]:
    """Contiguous order-preserving partition; each segment fits one sub-map."""
    if segment_length < 1:
        raise ValueError("segment_length must be >= 1")
    return [frames[i:i + segment_length]
            for i in range(0, len(frames), segment_length)]


@dataclass
class MapBuildConfig:
    stride: int = 2
    segment_length: int = 24
    iters_first: int = 60
    iters_per_frame: int = 16
    window: int = 3
    final_iters: int = 30
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)


def build_submap(frames: list, intr: CameraIntrinsics,
                 cfg: MapBuildConfig) -> GaussianMap:
    """Fit one segment: seed from the first frame, then densify + refine."""
    obs0, pose0 = frames[0]
    gmap = init_from_pointcloud(obs0, pose0, intr, cfg.stride)
    optimize(gmap, [frames[0]], cfg.iters_first, intr, cfg.optimizer)
    rng = np.random.default_rng(1234)
    for k in range(1, len(frames)):
        obs, pose = frames[k]
        rendered = render_map(gmap, pose, intr)
        mask = densification_mask(obs, rendered, intr)
        densify(gmap, obs, pose, mask, intr, cfg.stride)
        x, y, z = pose.position
        gmap.frame_log.append((x, y, z + intr.mount_height, pose.heading,
                               intr.look_at_pitch))
        window = [frames[k], frames[k - 1]]
        if k >= 2 and cfg.window > 2:
            window.append(frames[int(rng.integers(0, k - 1))])
        optimize(gmap, window, cfg.iters_per_frame, intr, cfg.optimizer)
    if cfg.final_iters > 0:
        step = max(1, len(frames) // 4)
        optimize(gmap, frames[::step], cfg.final_iters, intr, cfg.optimizer)
    return gmap


def build_map(frames: list, intr: CameraIntrinsics,
              cfg: MapBuildConfig | None = None) -> GaussianMap:
    """Divide the keyframe trajectory into segments and fit each independently."""
    cfg = cfg or MapBuildConfig()
    segments = divide_trajectory(frames, cfg.segment_length)
    return merge_maps([build_submap(seg, intr, cfg) for seg in segments])


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    mse = float(np.mean((img - ref) ** 2))
    if mse <= 0:
        return float("inf")
    return -10.0 * math.log10(mse)


def map_quality(gmap: GaussianMap, keyframes, intr: CameraIntrinsics):
    """Median training-view PSNR and median per-frame depth L1 (meters)."""
    psnrs, depth_l1 = [], []
    for obs, pose in keyframes:
        fr = render_map(gmap, pose, intr)
        valid = obs.depth > 0
        psnrs.append(psnr(fr.color[valid], obs.rgb[valid]))
        z = zdepth_of(obs, intr)
        gate = valid & (fr.silhouette > SIL_DEPTH_GATE)
        if gate.any():
            depth_l1.append(float(np.median(np.abs(fr.depth - z)[gate])))
    return float(np.median(psnrs)), float(np.median(depth_l1))


# ---------------------------------------------------------------------------
# persistence: versioned little-endian binary
# ---------------------------------------------------------------------------

MAP_MAGIC = b"SGMAP\n"
MAP_VERSION = 1
_REC_DTYPE = np.dtype([("params", "<f8", (8,)), ("label", "u1")])


def save_map(gmap: GaussianMap, path: str) -> None:
    n = len(gmap)
    header = bytearray()
    header += MAP_MAGIC
    header += np.uint32(MAP_VERSION).tobytes()
    header += np.uint64(n).tobytes()
    header += np.uint32(len(gmap.sub_map_ranges)).tobytes()
    for (s, e) in gmap.sub_map_ranges:
        header += np.uint64(s).tobytes() + np.uint64(e).tobytes()
    rec = np.empty(n, dtype=_REC_DTYPE)
    rec["params"][:, 0:3] = gmap.colors
    rec["params"][:, 3:6] = gmap.means
    rec["params"][:, 6] = gmap.radii
    rec["params"][:, 7] = gmap.opacities
    rec["label"] = gmap.labels
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(rec.tobytes())


def load_map(path: str) -> GaussianMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAP_MAGIC) + 4 + 8 + 4:
        raise MapTruncatedError("file shorter than the fixed header")
    if raw[:len(MAP_MAGIC)] != MAP_MAGIC:
        raise MapFormatError("bad magic; not a gaussian map file")
    off = len(MAP_MAGIC)
    version = int(np.frombuffer(raw, "<u4", 1, off)[0])
    off += 4
    if version != MAP_VERSION:
        raise MapVersionError(f"unsupported map version {version}")
    n = int(np.frombuffer(raw, "<u8", 1, off)[0])
    off += 8
    n_ranges = int(np.frombuffer(raw, "<u4", 1, off)[0])
    off += 4
    if len(raw) < off + 16 * n_ranges:
        raise MapTruncatedError("truncated sub-map table")
    ranges = []
    for _ in range(n_ranges):
        s = int(np.frombuffer(raw, "<u8", 1, off)[0])
        e = int(np.frombuffer(raw, "<u8", 1, off + 8)[0])
        ranges.append((s, e))
        off += 16
    body = raw[off:]
    if len(body) != n * _REC_DTYPE.itemsize:
        raise MapTruncatedError(
            f"expected {n} records ({n * _REC_DTYPE.itemsize} bytes), "
            f"found {len(body)} bytes")
    rec = np.frombuffer(body, dtype=_REC_DTYPE)
    return GaussianMap(colors=rec["params"][:, 0:3].copy(),
                       means=rec["params"][:, 3:6].copy(),
                       radii=rec["params"][:, 6].copy(),
                       opacities=rec["params"][:, 7].copy(),
                       labels=rec["label"].copy(),
                       sub_map_ranges=ranges, frame_log=[])


def map_stats(gmap: GaussianMap) -> dict:
    from .world import CLASS_NAMES
    hist = {"background": int((gmap.labels == 0).sum())}
    for i, name in enumerate(CLASS_NAMES):
        hist[name] = int((gmap.labels == i + 1).sum())
    return {
        "gaussians": len(gmap),
        "sub_maps": len(gmap.sub_map_ranges),
        "label_histogram": hist,
        "mean_radius": float(gmap.radii.mean()) if len(gmap) else 0.0,
        "bbox_min": gmap.means.min(axis=0).tolist() if len(gmap) else None,
        "bbox_max": gmap.means.max(axis=0).tolist() if len(gmap) else None,
    }
