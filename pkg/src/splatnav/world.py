"""Procedural desk-scale indoor worlds with an exact raycast sensor oracle.

Scenes are assemblies of analytic primitives (boxes, spheres, vertical
cylinders) on a rectangular floor. The sensor returns per-pixel RGB
(procedural albedo + lambertian shading), Euclidean ray depth, and a
semantic/instance label plane. Agent physics is a sliding cylinder.
"""

from __future__ import annotations

import colorsys
import heapq
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .geometry import camera_rotation, focal_from_vfov, pixel_rays

CLASS_NAMES = ("chair", "couch", "plant", "bed", "toilet", "television")
CLASS_IDS = {name: i + 1 for i, name in enumerate(CLASS_NAMES)}

AGENT_RADIUS = 0.17
AGENT_HEIGHT = 1.41
CAMERA_MOUNT = 1.31
STEP_FORWARD = 0.25
TURN_DEG = 25.0
SENSOR_RANGE = 12.0

STOP, FORWARD, TURN_RIGHT, TURN_LEFT = "STOP", "FORWARD", "TURN_RIGHT", "TURN_LEFT"
ACTIONS = (STOP, FORWARD, TURN_RIGHT, TURN_LEFT)

_LIGHT_DIR = np.array([0.45, 0.30, 0.84])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)
_AMBIENT, _DIFFUSE = 0.42, 0.58
_MISS_COLOR = np.array([0.08, 0.08, 0.10])


class SceneGenerationError(Exception):
    """Raised when rejection sampling cannot satisfy a generation constraint."""


class InvalidPoseError(Exception):
    pass


class EpisodeSamplingError(Exception):
    pass


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class CameraIntrinsics:
    width: int
    height: int
    vertical_fov: float
    mount_height: float
    look_at_pitch: float = 0.0

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        return replace(self, width=width, height=height)


def agent_intrinsics(width: int = 640, height: int = 480) -> CameraIntrinsics:
    return CameraIntrinsics(width, height, vertical_fov=60.0,
                            mount_height=CAMERA_MOUNT, look_at_pitch=0.0)


@dataclass
class AgentState:
    position: tuple[float, float, float]
    heading: float
    collided: bool = False


@dataclass
class Primitive:
    kind: str                 # box | sphere | cylinder
    params: tuple             # box: (lo3, hi3); sphere: (c3, r); cylinder: (cx, cy, z0, z1, r)


@dataclass
class Material:
    kind: str                 # plain | speckle | stripes | checker
    base: tuple[float, float, float]
    scale: float = 0.15
    seed: float = 0.0
    contrast: float = 0.7
    axis: tuple[float, float, float] = (1.0, 0.7, 0.2)


@dataclass
class ObjectInstance:
    id: int
    class_label: str
    centroid: tuple[float, float, float]
    yaw: int                  # degrees, multiple of 90
    prims: list[Primitive]
    material: Material

    @property
    def class_id(self) -> int:
        return CLASS_IDS[self.class_label]


@dataclass
class SceneSpec:
    seed: int
    extent: tuple[float, float]
    floor_height: float
    wall_height: float
    walls: list[tuple[float, float, float, float, float]]  # x0 y0 x1 y1 thickness
    obstacles: list[Primitive]                             # structural boxes
    instances: list[ObjectInstance]
    _compiled: object = field(default=None, repr=False, compare=False)

    def compiled(self) -> "_CompiledScene":
        if self._compiled is None:
            self._compiled = _compile(self)
        return self._compiled


@dataclass
class Observation:
    rgb: np.ndarray        # (H, W, 3) in [0, 1]
    depth: np.ndarray      # (H, W) euclidean meters, 0 = no return
    semantic: np.ndarray   # (H, W) uint8 class ids, 0 = background
    instance: np.ndarray   # (H, W) int32 instance ids, 0 = none


@dataclass
class EpisodeSpec:
    seed: int
    start: AgentState
    goal_image: np.ndarray
    goal_instance_id: int
    goal_class: str
    goal_position: tuple[float, float, float]
    shortest_path_length: float
    goal_camera_pose: tuple[float, float, float, float, float]  # x y z heading pitch
    goal_intrinsics: CameraIntrinsics


# ---------------------------------------------------------------------------
# instance templates (local frame, +x = facing direction)
# ---------------------------------------------------------------------------

def _box(cx, cy, z0, z1, hx, hy):
    return Primitive("box", ((cx - hx, cy - hy, z0), (cx + hx, cy + hy, z1)))


def _instance_prims(label: str, rng: np.random.Generator) -> list[Primitive]:
    if label == "chair":
        return [
            Primitive("cylinder", (0.0, 0.0, 0.0, 0.40, 0.06)),
            _box(0.0, 0.0, 0.40, 0.47, 0.22, 0.21),
            _box(-0.19, 0.0, 0.47, 0.92, 0.035, 0.21),
        ]
    if label == "couch":
        return [
            _box(0.0, 0.0, 0.0, 0.42, 0.38, 0.55),
            _box(-0.30, 0.0, 0.42, 0.78, 0.09, 0.55),
        ]
    if label == "plant":
        return [
            Primitive("cylinder", (0.0, 0.0, 0.0, 0.26, 0.12)),
            Primitive("sphere", ((0.0, 0.0, 0.54), 0.27)),
        ]
    if label == "bed":
        return [
            _box(0.0, 0.0, 0.05, 0.45, 0.72, 0.50),
            _box(-0.68, 0.0, 0.40, 0.92, 0.05, 0.50),
        ]
    if label == "toilet":
        return [
            Primitive("cylinder", (0.0, 0.0, 0.0, 0.41, 0.17)),
            _box(-0.23, 0.0, 0.35, 0.72, 0.07, 0.19),
        ]
    if label == "television":
        return [
            Primitive("cylinder", (0.0, 0.0, 0.0, 0.55, 0.05)),
            _box(0.0, 0.0, 0.55, 1.07, 0.035, 0.42),
        ]
    raise ValueError(f"unknown class label {label!r}")


_CLASS_HUE = {
    "chair": (0.00, 0.06),
    "couch": (0.55, 0.64),
    "plant": (0.26, 0.36),
    "bed": (0.10, 0.15),
    "toilet": (0.0, 1.0),       # desaturated, hue irrelevant
    "television": (0.50, 0.56),
}


def _instance_material(label: str, inst_id: int, rng: np.random.Generator) -> Material:
    h0, h1 = _CLASS_HUE[label]
    hue = rng.uniform(h0, h1) % 1.0
    if label == "toilet":
        sat, val, contrast = rng.uniform(0.02, 0.08), rng.uniform(0.82, 0.92), 0.35
    elif label == "television":
        sat, val, contrast = rng.uniform(0.55, 0.8), rng.uniform(0.45, 0.7), 1.0
    else:
        sat, val, contrast = rng.uniform(0.5, 0.8), rng.uniform(0.45, 0.75), 0.8
    base = colorsys.hsv_to_rgb(hue, sat, val)
    kind = "speckle" if (inst_id % 2 == 0) else "stripes"
    axis = tuple(rng.uniform(-1.0, 1.0, 3))
    return Material(kind=kind, base=base, scale=float(rng.uniform(0.09, 0.16)),
                    seed=float(inst_id * 17.0 + rng.uniform(0, 7)), contrast=contrast,
                    axis=axis)


def _rot_yaw(pt, yaw):
    c, s = {0: (1, 0), 90: (0, 1), 180: (-1, 0), 270: (0, -1)}[yaw % 360]
    return (c * pt[0] - s * pt[1], s * pt[0] + c * pt[1])


def _place_instance(label, inst_id, cx, cy, yaw, rng) -> ObjectInstance:
    prims = []
    for p in _instance_prims(label, rng):
        if p.kind == "box":
            lo, hi = p.params
            ctr = ((lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2)
            hx, hy = (hi[0] - lo[0]) / 2, (hi[1] - lo[1]) / 2
            rc = _rot_yaw(ctr, yaw)
            if yaw % 180 == 90:
                hx, hy = hy, hx
            prims.append(Primitive("box", ((cx + rc[0] - hx, cy + rc[1] - hy, lo[2]),
                                           (cx + rc[0] + hx, cy + rc[1] + hy, hi[2]))))
        elif p.kind == "sphere":
            c, r = p.params
            rc = _rot_yaw(c, yaw)
            prims.append(Primitive("sphere", ((cx + rc[0], cy + rc[1], c[2]), r)))
        else:
            px, py, z0, z1, r = p.params
            rc = _rot_yaw((px, py), yaw)
            prims.append(Primitive("cylinder", (cx + rc[0], cy + rc[1], z0, z1, r)))
    zs = [_prim_zspan(p) for p in prims]
    cz = (min(z[0] for z in zs) + max(z[1] for z in zs)) / 2
    mat = _instance_material(label, inst_id, rng)
    return ObjectInstance(inst_id, label, (cx, cy, cz), yaw, prims, mat)


def _prim_zspan(p: Primitive):
    if p.kind == "box":
        return p.params[0][2], p.params[1][2]
    if p.kind == "sphere":
        c, r = p.params
        return c[2] - r, c[2] + r
    return p.params[2], p.params[3]


def _prim_footprint(p: Primitive):
    """2D shape: ("rect", lo2, hi2) or ("disc", c2, r)."""
    if p.kind == "box":
        lo, hi = p.params
        return ("rect", (lo[0], lo[1]), (hi[0], hi[1]))
    if p.kind == "sphere":
        c, r = p.params
        return ("disc", (c[0], c[1]), r)
    cx, cy, _, _, r = p.params
    return ("disc", (cx, cy), r)


def _footprint_radius(prims) -> float:
    r = 0.0
    for p in prims:
        fp = _prim_footprint(p)
        if fp[0] == "rect":
            lo, hi = fp[1], fp[2]
            r = max(r, math.hypot(max(abs(lo[0]), abs(hi[0])), max(abs(lo[1]), abs(hi[1]))))
        else:
            c, rr = fp[1], fp[2]
            r = max(r, math.hypot(*c) + rr)
    return r


# ---------------------------------------------------------------------------
# compilation: scene -> primitive arrays + materials for the raycaster
# ---------------------------------------------------------------------------

class _CompiledScene:
    def __init__(self):
        self.prims: list[Primitive] = []
        self.materials: list[Material] = []
        self.class_ids: list[int] = []
        self.instance_ids: list[int] = []
        self.footprints: list = []   # shapes blocking the agent cylinder
        self._groups = None

    def add(self, prim, material, class_id=0, instance_id=0, blocks=True):
        self.prims.append(prim)
        self.materials.append(material)
        self.class_ids.append(class_id)
        self.instance_ids.append(instance_id)
        z0, z1 = _prim_zspan(prim)
        if blocks and z1 > 0.02 and z0 < AGENT_HEIGHT:
            self.footprints.append(_prim_footprint(prim))

    def groups(self):
        """Primitive parameters stacked per kind for batched intersection."""
        if self._groups is None:
            box_i = [i for i, p in enumerate(self.prims) if p.kind == "box"]
            sph_i = [i for i, p in enumerate(self.prims) if p.kind == "sphere"]
            cyl_i = [i for i, p in enumerate(self.prims) if p.kind == "cylinder"]
            self._groups = {
                "box": (np.array(box_i, dtype=int),
                        np.array([self.prims[i].params[0] for i in box_i], dtype=float).reshape(-1, 3),
                        np.array([self.prims[i].params[1] for i in box_i], dtype=float).reshape(-1, 3)),
                "sphere": (np.array(sph_i, dtype=int),
                           np.array([self.prims[i].params[0] for i in sph_i], dtype=float).reshape(-1, 3),
                           np.array([self.prims[i].params[1] for i in sph_i], dtype=float)),
                "cylinder": (np.array(cyl_i, dtype=int),
                             np.array([self.prims[i].params for i in cyl_i], dtype=float).reshape(-1, 5)),
            }
        return self._groups


def _compile(scene: SceneSpec) -> _CompiledScene:
    cs = _CompiledScene()
    ex, ey = scene.extent
    fh = scene.floor_height
    cs.add(Primitive("box", ((-0.5, -0.5, fh - 0.1), (ex + 0.5, ey + 0.5, fh))),
           Material("checker", (0.60, 0.56, 0.50), scale=0.5, contrast=0.25), blocks=False)
    wall_mat = Material("speckle", (0.77, 0.75, 0.70), scale=0.8, seed=3.0, contrast=0.12)
    for (x0, y0, x1, y1, th) in scene.walls:
        h = th / 2
        lo = (min(x0, x1) - h, min(y0, y1) - h, fh)
        hi = (max(x0, x1) + h, max(y0, y1) + h, fh + scene.wall_height)
        cs.add(Primitive("box", (lo, hi)), wall_mat)
    for i, ob in enumerate(scene.obstacles):
        cs.add(ob, Material("speckle", (0.45, 0.36, 0.26), scale=0.2,
                            seed=100.0 + i, contrast=0.4))
    for inst in scene.instances:
        for p in inst.prims:
            cs.add(p, inst.material, inst.class_id, inst.id)
    return cs


# ---------------------------------------------------------------------------
# procedural albedo
# ---------------------------------------------------------------------------

def _hash01(x, y, z, salt):
    v = np.sin(x * 12.9898 + y * 78.233 + z * 37.719 + salt * 4.1459) * 43758.5453
    return v - np.floor(v)


def _albedo(mat: Material, pts: np.ndarray) -> np.ndarray:
    base = np.asarray(mat.base)
    if mat.kind == "plain":
        return np.broadcast_to(base, pts.shape).copy()
    if mat.kind == "checker":
        c = np.floor(pts[:, 0] / mat.scale) + np.floor(pts[:, 1] / mat.scale)
        a = (c % 2.0)
        shade = 1.0 - mat.contrast * a
        return base[None, :] * shade[:, None]
    if mat.kind == "speckle":
        cell = np.floor(pts / mat.scale)
        h = _hash01(cell[:, 0], cell[:, 1], cell[:, 2], mat.seed)
        shade = 1.0 - mat.contrast / 2 + mat.contrast * h
        return np.clip(base[None, :] * shade[:, None], 0.0, 1.0)
    if mat.kind == "stripes":
        ax = np.asarray(mat.axis)
        ax = ax / (np.linalg.norm(ax) + 1e-9)
        s = np.sin(2.0 * np.pi * (pts @ ax) / mat.scale + mat.seed)
        a = np.clip(0.5 + 1.8 * s, 0.0, 1.0)
        shade = 1.0 - mat.contrast * 0.55 * a
        return np.clip(base[None, :] * shade[:, None], 0.0, 1.0)
    raise ValueError(f"unknown material kind {mat.kind!r}")


# ---------------------------------------------------------------------------
# raycasting
# ---------------------------------------------------------------------------

def _ray_boxes(origin, dirs, lo, hi):
    """Batched slab test. Returns (t (N,B), axis (N,B)); t=inf on miss."""
    par = np.abs(dirs) <= 1e-12                           # (N,3)
    with np.errstate(divide="ignore"):
        inv = np.where(par, np.inf, 1.0 / np.where(par, 1.0, dirs))
    t1 = (lo[None, :, :] - origin[None, None, :]) * inv[:, None, :]
    t2 = (hi[None, :, :] - origin[None, None, :]) * inv[:, None, :]
    inside = (origin[None, None, :] >= lo[None, :, :]) & (origin[None, None, :] <= hi[None, :, :])
    pp = par[:, None, :]
    tmin = np.where(pp, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(pp, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    axis = np.argmax(tmin, axis=2)
    tn = tmin.max(axis=2)
    tf = tmax.min(axis=2)
    hit = (tf >= np.maximum(tn, 0.0)) & (tn > 1e-6) & np.isfinite(tn)
    return np.where(hit, tn, np.inf), axis


def _ray_spheres(origin, dirs, centers, radii):
    oc = origin[None, :] - centers                        # (S,3)
    b = dirs @ oc.T                                       # (N,S)
    cc = np.einsum("ij,ij->i", oc, oc) - radii * radii    # (S,)
    disc = b * b - cc[None, :]
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = -b - sq
    return np.where(ok & (t > 1e-6), t, np.inf)


def _ray_cylinders(origin, dirs, params):
    """params (C,5): cx cy z0 z1 r. Returns (t (N,C), cap (N,C) in {-1,0,+1})."""
    cx, cy, z0, z1, r = (params[:, i] for i in range(5))
    ox, oy, oz = origin
    dx = dirs[:, 0:1]
    dy = dirs[:, 1:2]
    dz = dirs[:, 2:3]
    fx = ox - cx[None, :]
    fy = oy - cy[None, :]
    a = dx * dx + dy * dy                                 # (N,1)
    b = fx * dx + fy * dy
    c = fx * fx + fy * fy - (r * r)[None, :]
    disc = b * b - a * c
    ok = (disc >= 0) & (a > 1e-12)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = np.where(ok, (-b - sq) / np.where(a > 1e-12, a, 1.0), np.inf)
    z_at = oz + dz * t_side
    t_side = np.where((t_side > 1e-6) & (z_at >= z0[None, :]) & (z_at <= z1[None, :]),
                      t_side, np.inf)
    best = t_side
    cap = np.zeros_like(t_side)
    for zc, tag in ((z1, 1.0), (z0, -1.0)):
        with np.errstate(divide="ignore", invalid="ignore"):
            t_cap = (zc[None, :] - oz) / dz
        px = ox + dx * t_cap - cx[None, :]
        py = oy + dy * t_cap - cy[None, :]
        cap_ok = (t_cap > 1e-6) & np.isfinite(t_cap) & (px * px + py * py <= (r * r)[None, :])
        t_cap = np.where(cap_ok, t_cap, np.inf)
        better = t_cap < best
        best = np.where(better, t_cap, best)
        cap = np.where(better, tag, cap)
    return best, cap


_RAY_CHUNK = 24576


def _raycast(cs: _CompiledScene, origin, dirs):
    """Nearest hit over all primitives, chunked to bound memory.

    Returns (t, prim index, normal)."""
    n = len(dirs)
    if n > _RAY_CHUNK:
        t = np.empty(n)
        prim = np.empty(n, dtype=int)
        nrm = np.empty((n, 3))
        for s in range(0, n, _RAY_CHUNK):
            e = min(s + _RAY_CHUNK, n)
            t[s:e], prim[s:e], nrm[s:e] = _raycast_block(cs, origin, dirs[s:e])
        return t, prim, nrm
    return _raycast_block(cs, origin, dirs)


def _raycast_block(cs: _CompiledScene, origin, dirs):
    n_rays = len(dirs)
    best_t = np.full(n_rays, np.inf)
    best_prim = np.full(n_rays, -1, dtype=int)
    best_n = np.zeros((n_rays, 3))
    g = cs.groups()
    rows = np.arange(n_rays)

    idx, lo, hi = g["box"]
    if len(idx):
        t, axis = _ray_boxes(origin, dirs, lo, hi)
        j = np.argmin(t, axis=1)
        tb = t[rows, j]
        closer = tb < best_t
        best_t = np.where(closer, tb, best_t)
        best_prim[closer] = idx[j[closer]]
        ax = axis[rows, j][closer]
        nrm = np.zeros((closer.sum(), 3))
        nrm[np.arange(len(ax)), ax] = -np.sign(dirs[closer, ax])
        best_n[closer] = nrm

    idx, centers, radii = g["sphere"]
    if len(idx):
        t = _ray_spheres(origin, dirs, centers, radii)
        j = np.argmin(t, axis=1)
        tb = t[rows, j]
        closer = tb < best_t
        best_t = np.where(closer, tb, best_t)
        best_prim[closer] = idx[j[closer]]
        pts = origin[None, :] + dirs[closer] * tb[closer, None]
        best_n[closer] = (pts - centers[j[closer]]) / radii[j[closer], None]

    idx, params = g["cylinder"]
    if len(idx):
        t, cap = _ray_cylinders(origin, dirs, params)
        j = np.argmin(t, axis=1)
        tb = t[rows, j]
        closer = tb < best_t
        best_t = np.where(closer, tb, best_t)
        best_prim[closer] = idx[j[closer]]
        jc = j[closer]
        capc = cap[rows, j][closer]
        pts = origin[None, :] + dirs[closer] * tb[closer, None]
        side_n = np.zeros((closer.sum(), 3))
        side_n[:, 0] = (pts[:, 0] - params[jc, 0]) / params[jc, 4]
        side_n[:, 1] = (pts[:, 1] - params[jc, 1]) / params[jc, 4]
        cap_n = np.zeros_like(side_n)
        cap_n[:, 2] = capc
        best_n[closer] = np.where(capc[:, None] != 0.0, cap_n, side_n)
    return best_t, best_prim, best_n


def oracle_render(scene: SceneSpec, pose: AgentState, intr: CameraIntrinsics,
                  label_noise: float = 0.0,
                  noise_rng: np.random.Generator | None = None) -> Observation:
    """Exact sensor frame at a pose. Depth is Euclidean ray distance (0 = no hit)."""
    x, y, z = pose.position
    if not point_free(scene, (x, y), margin=0.01):
        raise InvalidPoseError(f"camera position ({x:.2f}, {y:.2f}) is inside geometry")
    cs = scene.compiled()
    cam_pos = np.array([x, y, z + intr.mount_height])
    f = focal_from_vfov(intr.height, intr.vertical_fov)
    rays_cam = pixel_rays(intr.width, intr.height, f, f,
                          intr.width / 2.0, intr.height / 2.0)
    rot = camera_rotation(pose.heading, intr.look_at_pitch)
    dirs = rays_cam.reshape(-1, 3) @ rot   # camera -> world
    t, prim, normal = _raycast(cs, cam_pos, dirs)
    hit = np.isfinite(t) & (t <= SENSOR_RANGE)

    rgb = np.tile(_MISS_COLOR, (len(dirs), 1))
    sem = np.zeros(len(dirs), dtype=np.uint8)
    inst = np.zeros(len(dirs), dtype=np.int32)
    depth = np.where(hit, t, 0.0)
    pts = cam_pos[None, :] + dirs * np.where(hit, t, 0.0)[:, None]
    lam = _AMBIENT + _DIFFUSE * np.clip(normal @ _LIGHT_DIR, 0.0, None)
    for pid in np.unique(prim[hit]):
        m = hit & (prim == pid)
        alb = _albedo(cs.materials[pid], pts[m])
        rgb[m] = np.clip(alb * lam[m, None], 0.0, 1.0)
        sem[m] = cs.class_ids[pid]
        inst[m] = cs.instance_ids[pid]
    sem_img = sem.reshape(intr.height, intr.width)
    if label_noise > 0.0:
        rng = noise_rng if noise_rng is not None else np.random.default_rng(0)
        flip = rng.random(sem_img.shape) < label_noise
        sem_img = np.where(flip, rng.integers(0, 7, sem_img.shape).astype(np.uint8), sem_img)
    return Observation(
        rgb=rgb.reshape(intr.height, intr.width, 3),
        depth=depth.reshape(intr.height, intr.width),
        semantic=sem_img,
        instance=inst.reshape(intr.height, intr.width),
    )


# ---------------------------------------------------------------------------
# agent physics
# ---------------------------------------------------------------------------

def _dist_to_shape(px, py, shape) -> float:
    if shape[0] == "rect":
        lo, hi = shape[1], shape[2]
        dx = max(lo[0] - px, 0.0, px - hi[0])
        dy = max(lo[1] - py, 0.0, py - hi[1])
        return math.hypot(dx, dy)
    c, r = shape[1], shape[2]
    return max(0.0, math.hypot(px - c[0], py - c[1]) - r)


def footprint_free(scene: SceneSpec, xy, radius: float = AGENT_RADIUS) -> bool:
    cs = scene.compiled()
    px, py = xy
    for shape in cs.footprints:
        if _dist_to_shape(px, py, shape) < radius:
            return False
    return True


def point_free(scene: SceneSpec, xy, margin: float = 0.0) -> bool:
    return footprint_free(scene, xy, radius=margin)


def _max_advance(scene, start, delta, radius):
    """Largest fraction of delta the footprint can travel without contact."""
    if footprint_free(scene, (start[0] + delta[0], start[1] + delta[1]), radius):
        return 1.0
    lo, hi = 0.0, 1.0
    steps = int(math.ceil(math.hypot(*delta) / 0.02)) + 1
    last_free = 0.0
    for i in range(1, steps + 1):
        t = i / steps
        if footprint_free(scene, (start[0] + delta[0] * t, start[1] + delta[1] * t), radius):
            last_free = t
        else:
            lo, hi = last_free, t
            break
    else:
        return last_free
    for _ in range(22):
        mid = (lo + hi) / 2
        if footprint_free(scene, (start[0] + delta[0] * mid, start[1] + delta[1] * mid), radius):
            lo = mid
        else:
            hi = mid
    return lo


def step_agent(scene: SceneSpec, state: AgentState, action: str) -> AgentState:
    """Apply one discrete action. Collisions slide along obstacles, never penetrate."""
    if action not in ACTIONS:
        raise ValueError(f"unknown action {action!r}")
    x, y, z = state.position
    if action == STOP:
        return AgentState((x, y, z), state.heading, False)
    if action in (TURN_LEFT, TURN_RIGHT):
        delta = TURN_DEG if action == TURN_LEFT else -TURN_DEG
        return AgentState((x, y, z), (state.heading + delta) % 360.0, False)

    h = math.radians(state.heading)
    dx, dy = STEP_FORWARD * math.cos(h), STEP_FORWARD * math.sin(h)
    t = _max_advance(scene, (x, y), (dx, dy), AGENT_RADIUS)
    nx, ny = x + dx * t, y + dy * t
    moved = t * STEP_FORWARD
    if t < 1.0:
        # slide the unused travel along the dominant free axis
        rx, ry = dx * (1.0 - t), dy * (1.0 - t)
        for ax_delta in sorted([(rx, 0.0), (0.0, ry)],
                               key=lambda d: -abs(d[0] + d[1])):
            if abs(ax_delta[0]) + abs(ax_delta[1]) < 1e-9:
                continue
            tt = _max_advance(scene, (nx, ny), ax_delta, AGENT_RADIUS)
            nx, ny = nx + ax_delta[0] * tt, ny + ax_delta[1] * tt
            moved += tt * math.hypot(*ax_delta)
    collided = moved < STEP_FORWARD - 1e-9
    return AgentState((nx, ny, z), state.heading, collided)


# ---------------------------------------------------------------------------
# floor-plan rasterization and shortest paths
# ---------------------------------------------------------------------------

def rasterize_plan(scene: SceneSpec, resolution: float = 0.05,
                   inflate: float = 0.0) -> np.ndarray:
    """(nx, ny) free-space mask; cell free iff its center clears all footprints."""
    ex, ey = scene.extent
    nx, ny = int(round(ex / resolution)), int(round(ey / resolution))
    xs = (np.arange(nx) + 0.5) * resolution
    ys = (np.arange(ny) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    free = np.ones((nx, ny), dtype=bool)
    for shape in scene.compiled().footprints:
        if shape[0] == "rect":
            lo, hi = shape[1], shape[2]
            ddx = np.maximum(np.maximum(lo[0] - gx, 0.0), gx - hi[0])
            ddy = np.maximum(np.maximum(lo[1] - gy, 0.0), gy - hi[1])
            d = np.hypot(ddx, ddy)
        else:
            c, r = shape[1], shape[2]
            d = np.maximum(0.0, np.hypot(gx - c[0], gy - c[1]) - r)
        free &= d > inflate
    return free


def dijkstra_grid(free: np.ndarray, sources: list[tuple[int, int]],
                  resolution: float) -> np.ndarray:
    """8-connected shortest-path distances (meters) from source cells; inf = unreachable."""
    nx, ny = free.shape
    dist = np.full((nx, ny), np.inf)
    pq = []
    for (ix, iy) in sources:
        if 0 <= ix < nx and 0 <= iy < ny and free[ix, iy]:
            dist[ix, iy] = 0.0
            heapq.heappush(pq, (0.0, ix, iy))
    diag = resolution * math.sqrt(2.0)
    while pq:
        d, ix, iy = heapq.heappop(pq)
        if d > dist[ix, iy]:
            continue
        for ddx in (-1, 0, 1):
            for ddy in (-1, 0, 1):
                if ddx == 0 and ddy == 0:
                    continue
                jx, jy = ix + ddx, iy + ddy
                if not (0 <= jx < nx and 0 <= jy < ny) or not free[jx, jy]:
                    continue
                nd = d + (diag if ddx and ddy else resolution)
                if nd < dist[jx, jy]:
                    dist[jx, jy] = nd
                    heapq.heappush(pq, (nd, jx, jy))
    return dist


def shortest_path_length(scene: SceneSpec, start_xy, goal_xy,
                         success_radius: float = 1.0,
                         resolution: float = 0.05) -> float:
    """Geodesic length from start to the closest traversable cell inside the
    success radius of the goal, on the agent-inflated plan."""
    free = rasterize_plan(scene, resolution, inflate=AGENT_RADIUS)
    six, siy = int(start_xy[0] / resolution), int(start_xy[1] / resolution)
    dist = dijkstra_grid(free, [(six, siy)], resolution)
    nx, ny = free.shape
    xs = (np.arange(nx) + 0.5) * resolution
    ys = (np.arange(ny) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    near = (np.hypot(gx - goal_xy[0], gy - goal_xy[1]) <= success_radius) & free
    if not near.any():
        return float("inf")
    return float(dist[near].min())


def free_space_connected(scene: SceneSpec, resolution: float = 0.05,
                         inflate: float = 0.0) -> bool:
    free = rasterize_plan(scene, resolution, inflate)
    if not free.any():
        return False
    labels, n = ndimage.label(free, structure=np.ones((3, 3)))
    return n == 1


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

DEFAULT_COUNTS = {"chair": 3, "couch": 1, "plant": 2, "bed": 1, "toilet": 1,
                  "television": 1}


@dataclass
class SceneParams:
    extent_x: tuple[float, float] = (6.5, 9.0)
    extent_y: tuple[float, float] = (5.0, 7.0)
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    n_obstacles: tuple[int, int] = (2, 4)
    n_interior_walls: tuple[int, int] = (1, 2)
    wall_height: tuple[float, float] = (2.2, 2.6)
    clearance: float = 0.55
    max_attempts: int = 80

    def validate(self):
        if self.extent_x[0] <= 0 or self.extent_y[0] <= 0:
            raise ValueError("extent bounds must be positive")
        if any(c < 0 for c in self.counts.values()):
            raise ValueError("instance counts must be >= 0")
        requested = {k: v for k, v in self.counts.items() if v > 0}
        if not requested:
            raise ValueError("at least one class must have count >= 1")
        for k in self.counts:
            if k not in CLASS_IDS:
                raise ValueError(f"unknown class {k!r}")


def generate_scene(seed: int, params: SceneParams | None = None) -> SceneSpec:
    """Deterministic rejection-sampled scene; free space is one connected component."""
    params = params or SceneParams()
    params.validate()
    last_issue = "unknown"
    for attempt in range(params.max_attempts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
        scene = _try_generate(rng, seed, params)
        if scene is None:
            last_issue = "instance placement (clearance)"
            continue
        if not free_space_connected(scene, inflate=AGENT_RADIUS):
            last_issue = "free-space connectivity"
            continue
        return scene
    raise SceneGenerationError(
        f"scene generation failed after {params.max_attempts} attempts; "
        f"last violated constraint: {last_issue}")


def _try_generate(rng, seed, params: SceneParams) -> SceneSpec | None:
    ex = float(rng.uniform(*params.extent_x))
    ey = float(rng.uniform(*params.extent_y))
    n_inst = sum(params.counts.values())
    # grow the floor if the manifest is crowded
    area_need = n_inst * 3.2 + 16.0
    while ex * ey < area_need:
        ex *= 1.06
        ey *= 1.06
    wh = float(rng.uniform(*params.wall_height))
    th = 0.10
    walls = [
        (0.0, 0.0, ex, 0.0, th), (0.0, ey, ex, ey, th),
        (0.0, 0.0, 0.0, ey, th), (ex, 0.0, ex, ey, th),
    ]
    for _ in range(rng.integers(params.n_interior_walls[0],
                                params.n_interior_walls[1] + 1)):
        horizontal = rng.random() < 0.5
        frac = float(rng.uniform(0.30, 0.55))
        if horizontal:
            y = float(rng.uniform(0.25 * ey, 0.75 * ey))
            if rng.random() < 0.5:
                walls.append((0.0, y, ex * frac, y, th))
            else:
                walls.append((ex * (1 - frac), y, ex, y, th))
        else:
            x = float(rng.uniform(0.25 * ex, 0.75 * ex))
            if rng.random() < 0.5:
                walls.append((x, 0.0, x, ey * frac, th))
            else:
                walls.append((x, ey * (1 - frac), x, ey, th))

    placed: list[tuple[float, float, float]] = []   # (x, y, clearance radius)

    def try_place(radius):
        for _ in range(400):
            x = float(rng.uniform(radius + th + 0.35, ex - radius - th - 0.35))
            y = float(rng.uniform(radius + th + 0.35, ey - radius - th - 0.35))
            ok = all(math.hypot(x - px, y - py) >= radius + pr + params.clearance
                     for px, py, pr in placed)
            if ok:
                # stay clear of interior walls
                for (x0, y0, x1, y1, wt) in walls[4:]:
                    ddx = max(min(x0, x1) - x, 0.0, x - max(x0, x1))
                    ddy = max(min(y0, y1) - y, 0.0, y - max(y0, y1))
                    if math.hypot(ddx, ddy) < radius + wt + params.clearance:
                        ok = False
                        break
            if ok:
                placed.append((x, y, radius))
                return x, y
        return None

    # ids follow class order; placement goes largest-first so big pieces fit
    order = []
    inst_id = 1
    for lbl in CLASS_NAMES:
        for _ in range(params.counts.get(lbl, 0)):
            order.append((inst_id, lbl, _footprint_radius(_instance_prims(lbl, rng))))
            inst_id += 1
    instances = []
    for iid, lbl, proto_r in sorted(order, key=lambda t: (-t[2], t[0])):
        pos = try_place(proto_r)
        if pos is None:
            return None
        yaw = int(rng.choice([0, 90, 180, 270]))
        instances.append(_place_instance(lbl, iid, pos[0], pos[1], yaw, rng))
    instances.sort(key=lambda i: i.id)

    obstacles = []
    n_obs = int(rng.integers(params.n_obstacles[0], params.n_obstacles[1] + 1))
    for _ in range(n_obs):
        hx, hy = float(rng.uniform(0.15, 0.32)), float(rng.uniform(0.15, 0.32))
        hz = float(rng.uniform(0.35, 0.85))
        pos = try_place(math.hypot(hx, hy))
        if pos is None:
            return None
        obstacles.append(Primitive("box", ((pos[0] - hx, pos[1] - hy, 0.0),
                                           (pos[0] + hx, pos[1] + hy, hz))))
    return SceneSpec(seed=seed, extent=(ex, ey), floor_height=0.0, wall_height=wh,
                     walls=walls, obstacles=obstacles, instances=instances)


def manifest(scene: SceneSpec) -> dict:
    counts = {name: 0 for name in CLASS_NAMES}
    for inst in scene.instances:
        counts[inst.class_label] += 1
    return counts


# ---------------------------------------------------------------------------
# episode sampling
# ---------------------------------------------------------------------------

def goal_intrinsics(rng: np.random.Generator) -> CameraIntrinsics:
    """Goal camera: fixed 512 px square, sampled height and field of view."""
    return CameraIntrinsics(width=512, height=512,
                            vertical_fov=float(rng.uniform(60.0, 90.0)),
                            mount_height=float(rng.uniform(0.8, 1.5)),
                            look_at_pitch=0.0)


MIN_GOAL_PIXEL_FRACTION = 0.02


def sample_episode(scene: SceneSpec, seed: int,
                   resolution: float = 0.05) -> EpisodeSpec:
    if not scene.instances:
        raise EpisodeSamplingError("scene has no instances")
    rng = np.random.default_rng(np.random.SeedSequence([scene.seed, seed, 77]))
    inst = scene.instances[int(rng.integers(0, len(scene.instances)))]
    gx, gy, gz = inst.centroid

    goal_img = None
    for _ in range(400):
        intr = goal_intrinsics(rng)
        d = float(rng.uniform(1.0, 2.2))
        b = float(rng.uniform(0.0, 360.0))
        px = gx + d * math.cos(math.radians(b))
        py = gy + d * math.sin(math.radians(b))
        ex, ey = scene.extent
        if not (0.2 < px < ex - 0.2 and 0.2 < py < ey - 0.2):
            continue
        if not point_free(scene, (px, py), margin=0.12):
            continue
        heading = math.degrees(math.atan2(gy - py, gx - px)) % 360.0
        pitch = math.degrees(math.atan2(gz - intr.mount_height, d))
        intr.look_at_pitch = pitch
        pose = AgentState((px, py, scene.floor_height), heading)
        # cheap low-res probe first; only render the full goal image on success
        probe = oracle_render(scene, pose, intr.scaled(128, 128))
        if probe.instance[64, 64] != inst.id:
            continue
        if float((probe.instance == inst.id).mean()) < MIN_GOAL_PIXEL_FRACTION:
            continue
        obs = oracle_render(scene, pose, intr)
        ch, cw = intr.height // 2, intr.width // 2
        if obs.instance[ch, cw] != inst.id:
            continue
        if float((obs.instance == inst.id).mean()) < MIN_GOAL_PIXEL_FRACTION:
            continue
        goal_img = obs.rgb
        goal_pose = (px, py, intr.mount_height, heading, pitch)
        goal_intr = intr
        break
    if goal_img is None:
        raise EpisodeSamplingError(
            f"no valid goal viewpoint for instance {inst.id} ({inst.class_label})")

    # one geodesic field from the goal region scores every candidate start
    free = rasterize_plan(scene, resolution, inflate=AGENT_RADIUS)
    nx, ny = free.shape
    xs = (np.arange(nx) + 0.5) * resolution
    ys = (np.arange(ny) + 0.5) * resolution
    gxx, gyy = np.meshgrid(xs, ys, indexing="ij")
    near_goal = (np.hypot(gxx - gx, gyy - gy) <= 1.0) & free
    field = dijkstra_grid(free, [tuple(c) for c in np.argwhere(near_goal)], resolution)
    cells = np.argwhere(free)
    for _ in range(400):
        ix, iy = cells[int(rng.integers(0, len(cells)))]
        length = float(field[ix, iy])
        if math.isfinite(length) and length >= 1.0:
            sx, sy = (ix + 0.5) * resolution, (iy + 0.5) * resolution
            start = AgentState((float(sx), float(sy), scene.floor_height),
                               float(rng.uniform(0.0, 360.0)))
            return EpisodeSpec(seed=seed, start=start, goal_image=goal_img,
                               goal_instance_id=inst.id, goal_class=inst.class_label,
                               goal_position=(gx, gy, gz),
                               shortest_path_length=length,
                               goal_camera_pose=goal_pose, goal_intrinsics=goal_intr)
    raise EpisodeSamplingError("no reachable start pose found")


# ---------------------------------------------------------------------------
# scene serialization (versioned structured text)
# ---------------------------------------------------------------------------

SCENE_FORMAT_VERSION = 1


class SceneFormatError(Exception):
    pass


def _fmt(v) -> str:
    # repr of a python float round-trips exactly
    return repr(float(v))


def save_scene(scene: SceneSpec, path: str) -> None:
    lines = [f"splatnav-scene {SCENE_FORMAT_VERSION}",
             f"seed {scene.seed}",
             f"extent {_fmt(scene.extent[0])} {_fmt(scene.extent[1])}",
             f"floor_height {_fmt(scene.floor_height)}",
             f"wall_height {_fmt(scene.wall_height)}"]
    for w in scene.walls:
        lines.append("wall " + " ".join(_fmt(v) for v in w))
    for ob in scene.obstacles:
        lo, hi = ob.params
        lines.append("obstacle " + " ".join(_fmt(v) for v in (*lo, *hi)))
    for inst in scene.instances:
        lines.append(f"instance {inst.id} {inst.class_label} "
                     + " ".join(_fmt(v) for v in inst.centroid) + f" {inst.yaw}")
        for p in inst.prims:
            if p.kind == "box":
                vals = (*p.params[0], *p.params[1])
            elif p.kind == "sphere":
                vals = (*p.params[0], p.params[1])
            else:
                vals = p.params
            lines.append(f"prim {inst.id} {p.kind} " + " ".join(_fmt(v) for v in vals))
        m = inst.material
        lines.append(f"material {inst.id} {m.kind} "
                     + " ".join(_fmt(v) for v in m.base)
                     + f" {_fmt(m.scale)} {_fmt(m.seed)} {_fmt(m.contrast)} "
                     + " ".join(_fmt(v) for v in m.axis))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_scene(path: str) -> SceneSpec:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("splatnav-scene "):
        raise SceneFormatError("missing scene header")
    version = int(lines[0].split()[1])
    if version != SCENE_FORMAT_VERSION:
        raise SceneFormatError(f"unsupported scene format version {version}")
    seed = extent = floor_h = wall_h = None
    walls, obstacles = [], []
    insts: dict[int, dict] = {}
    for ln in lines[1:]:
        tok = ln.split()
        key = tok[0]
        if key == "seed":
            seed = int(tok[1])
        elif key == "extent":
            extent = (float(tok[1]), float(tok[2]))
        elif key == "floor_height":
            floor_h = float(tok[1])
        elif key == "wall_height":
            wall_h = float(tok[1])
        elif key == "wall":
            walls.append(tuple(float(v) for v in tok[1:6]))
        elif key == "obstacle":
            v = [float(x) for x in tok[1:7]]
            obstacles.append(Primitive("box", (tuple(v[:3]), tuple(v[3:]))))
        elif key == "instance":
            iid = int(tok[1])
            insts[iid] = {"label": tok[2],
                          "centroid": tuple(float(v) for v in tok[3:6]),
                          "yaw": int(tok[6]), "prims": [], "material": None}
        elif key == "prim":
            iid, kind = int(tok[1]), tok[2]
            v = [float(x) for x in tok[3:]]
            if kind == "box":
                prim = Primitive("box", (tuple(v[:3]), tuple(v[3:6])))
            elif kind == "sphere":
                prim = Primitive("sphere", (tuple(v[:3]), v[3]))
            elif kind == "cylinder":
                prim = Primitive("cylinder", tuple(v[:5]))
            else:
                raise SceneFormatError(f"unknown primitive kind {kind!r}")
            insts[iid]["prims"].append(prim)
        elif key == "material":
            iid = int(tok[1])
            v = [float(x) for x in tok[3:]]
            insts[iid]["material"] = Material(
                kind=tok[2], base=tuple(v[0:3]), scale=v[3], seed=v[4],
                contrast=v[5], axis=tuple(v[6:9]))
        else:
            raise SceneFormatError(f"unknown record {key!r}")
    if None in (seed, extent, floor_h, wall_h):
        raise SceneFormatError("incomplete scene header fields")
    instances = [ObjectInstance(iid, d["label"], d["centroid"], d["yaw"],
                                d["prims"], d["material"])
                 for iid, d in sorted(insts.items())]
    return SceneSpec(seed=seed, extent=extent, floor_height=floor_h,
                     wall_height=wall_h, walls=walls, obstacles=obstacles,
                     instances=instances)
