"""Goal-image grounding: classify the goal, cluster map gaussians into
instance candidates, render descriptive views, score them by keypoint
matches against the goal image, and localize the winner on the map."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .explore import NavGrid
from .mapping import GaussianMap, render_map
from .world import CLASS_IDS, CLASS_NAMES, AgentState, CameraIntrinsics

DBSCAN_EPS = 0.25
DBSCAN_MIN_PTS = 10
RATIO_TEST = 0.8
VIEW_DISTANCE = (1.0, 2.0)


class ModelMissingError(Exception):
    pass


class GroundingFailedError(Exception):
    pass


# ---------------------------------------------------------------------------
# goal classification
# ---------------------------------------------------------------------------

def _goal_descriptor(img: np.ndarray) -> np.ndarray:
    """Color histogram + gradient orientation histogram over the center crop."""
    h, w = img.shape[:2]
    ch, cw = int(h * 0.15), int(w * 0.15)
    crop = img[ch:h - ch, cw:w - cw]
    bins = 3
    q = np.clip((crop * bins).astype(int), 0, bins - 1)
    flat = q[..., 0] * bins * bins + q[..., 1] * bins + q[..., 2]
    color = np.bincount(flat.ravel(), minlength=bins ** 3).astype(float)
    color /= max(color.sum(), 1.0)

    gray = crop.mean(axis=2)
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, 1:-1] = gray[:, 2:] - gray[:, :-2]
    gy[1:-1, :] = gray[2:, :] - gray[:-2, :]
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx) % np.pi
    obins = 8
    idx = np.minimum((ang / np.pi * obins).astype(int), obins - 1)
    orient = np.bincount(idx.ravel(), weights=mag.ravel(), minlength=obins)
    orient /= max(orient.sum(), 1.0)
    return np.concatenate([color, 0.5 * orient])


class GoalClassifier:
    """Nearest-centroid classifier over the joint color/gradient descriptor."""

    def __init__(self):
        self.centroids: dict[str, np.ndarray] = {}

    def fit(self, images, labels) -> "GoalClassifier":
        per_class: dict[str, list] = {}
        for img, lbl in zip(images, labels):
            per_class.setdefault(lbl, []).append(_goal_descriptor(img))
        self.centroids = {lbl: np.mean(descs, axis=0)
                          for lbl, descs in per_class.items()}
        return self

    def predict(self, image: np.ndarray) -> str:
        if not self.centroids:
            raise ModelMissingError("classifier has no fitted centroids")
        d = _goal_descriptor(image)
        return min(self.centroids,
                   key=lambda lbl: float(np.linalg.norm(d - self.centroids[lbl])))


def classify_goal(goal_image: np.ndarray, mode: str,
                  model: GoalClassifier | None = None,
                  true_label: str | None = None,
                  rng: np.random.Generator | None = None) -> str:
    if mode == "gt":
        if true_label is None:
            raise ValueError("gt mode needs the episode's true label")
        return true_label
    if mode == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        return CLASS_NAMES[int(rng.integers(0, len(CLASS_NAMES)))]
    if mode == "learned":
        if model is None:
            raise ModelMissingError("learned mode needs a fitted classifier")
        return model.predict(goal_image)
    raise ValueError(f"unknown classifier mode {mode!r}")


# ---------------------------------------------------------------------------
# instance clustering
# ---------------------------------------------------------------------------

@dataclass
class InstanceCandidate:
    id: int
    class_label: str
    members: np.ndarray          # indices into the gaussian arrays
    centroid: tuple[float, float, float]
    bbox_min: tuple[float, float, float]
    bbox_max: tuple[float, float, float]
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # grounded position: centroid refined by density filtering of the members'
    # 2D projections, so stray mislabeled gaussians cannot drag the estimate


@dataclass
class MatchScore:
    candidate_id: int
    per_view: list[int] = field(default_factory=list)

    @property
    def best(self) -> int:
        return max(self.per_view) if self.per_view else 0


def dbscan_labels(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density clustering: -1 marks noise. Core points are density-connected;
    border points join their nearest core point (ties: lowest core index), which
    makes the labeling independent of input order."""
    n = len(points)
    labels = np.full(n, -1, dtype=int)
    if n == 0:
        return labels
    tree = cKDTree(points)
    neighbors = tree.query_ball_point(points, eps)
    counts = np.array([len(nb) for nb in neighbors])
    core = counts >= min_pts
    core_idx = np.flatnonzero(core)
    if len(core_idx) == 0:
        return labels

    # connected components over core points
    comp = {}
    cid = 0
    for start in core_idx:
        if start in comp:
            continue
        stack = [start]
        comp[start] = cid
        while stack:
            u = stack.pop()
            for v in neighbors[u]:
                if core[v] and v not in comp:
                    comp[v] = cid
                    stack.append(v)
        cid += 1
    for i, c in comp.items():
        labels[i] = c

    # border points: nearest core neighbor within eps
    for i in range(n):
        if core[i]:
            continue
        best, best_d = -1, np.inf
        for v in neighbors[i]:
            if core[v]:
                d = float(np.linalg.norm(points[i] - points[v]))
                if d < best_d - 1e-15 or (abs(d - best_d) <= 1e-15 and v < best):
                    best, best_d = v, d
        if best >= 0:
            labels[i] = comp[best]
    return labels


def cluster_instances(gmap: GaussianMap, class_label: str,
                      eps: float = DBSCAN_EPS,
                      min_pts: int = DBSCAN_MIN_PTS) -> list[InstanceCandidate]:
    """One candidate per density cluster of same-label gaussians."""
    cid = CLASS_IDS[class_label]
    members = np.flatnonzero(gmap.labels == cid)
    if len(members) == 0:
        return []
    pts = gmap.means[members]
    labels = dbscan_labels(pts, eps, min_pts)
    cands = []
    for c in range(labels.max() + 1 if labels.size else 0):
        m = members[labels == c]
        if len(m) == 0:
            continue
        p = gmap.means[m]
        cand = InstanceCandidate(
            id=0, class_label=class_label, members=m,
            centroid=tuple(p.mean(axis=0)),
            bbox_min=tuple(p.min(axis=0)), bbox_max=tuple(p.max(axis=0)))
        cand.position = _refined_position(gmap, cand)
        cands.append(cand)
    cands.sort(key=lambda c: c.centroid)
    for i, c in enumerate(cands):
        c.id = i
    return cands


# ---------------------------------------------------------------------------
# descriptive views
# ---------------------------------------------------------------------------

def line_of_sight(grid: NavGrid, a_xy, b_xy, clear_radius: float = 0.3) -> bool:
    """True when the a->b segment crosses no obstacle cells, ignoring cells
    within clear_radius of b (the object itself)."""
    ax, ay = a_xy
    bx, by = b_xy
    n = max(2, int(math.hypot(bx - ax, by - ay) / (grid.resolution * 0.5)))
    for t in np.linspace(0.0, 1.0, n):
        x = ax + (bx - ax) * t
        y = ay + (by - ay) * t
        if math.hypot(x - bx, y - by) <= clear_radius:
            break
        c = grid.world_to_cell((x, y))
        if grid.in_bounds(*c) and grid.obstacle[c]:
            return False
    return True


def render_descriptive_views(gmap: GaussianMap, cand: InstanceCandidate,
                             grid: NavGrid, n_views: int = 3,
                             view_size: int = 256, vfov: float = 70.0):
    """Render the candidate from up to n_views navigable poses near training
    viewpoints, spread in bearing around the instance. Returns (views, reason);
    reason is set when the candidate has no reachable viewpoint."""
    cx, cy, cz = cand.centroid
    trav = grid.traversable()
    cells = np.argwhere(trav)
    if len(cells) == 0:
        return [], "no traversable cells in the map grid"
    centers = (cells + 0.5) * grid.resolution
    centers = centers + np.asarray(grid.origin)[None, :]
    d = np.hypot(centers[:, 0] - cx, centers[:, 1] - cy)
    near = (d >= VIEW_DISTANCE[0]) & (d <= VIEW_DISTANCE[1])
    if not near.any():
        return [], "no navigable viewpoint in range"

    poses = np.array(gmap.frame_log) if gmap.frame_log else None
    scored = []
    for (ix, iy), (x, y), dist in zip(cells[near], centers[near], d[near]):
        if not line_of_sight(grid, (x, y), (cx, cy)):
            continue
        score = abs(dist - 1.5)
        if poses is not None:
            score += 0.5 * float(np.min(np.hypot(poses[:, 0] - x,
                                                 poses[:, 1] - y)))
        bearing = math.degrees(math.atan2(y - cy, x - cx)) % 360.0
        scored.append((score, bearing, x, y))
    if not scored:
        return [], "candidate has no line-of-sight viewpoint"
    scored.sort()

    picked = []
    for score, bearing, x, y in scored:
        if any(abs((bearing - pb + 180.0) % 360.0 - 180.0) < 40.0
               for pb, _, _ in picked):
            continue
        picked.append((bearing, x, y))
        if len(picked) == n_views:
            break
    for score, bearing, x, y in scored:      # fill up if diversity ran out
        if len(picked) == n_views:
            break
        if any(abs(x - px) < 1e-9 and abs(y - py) < 1e-9 for _, px, py in picked):
            continue
        picked.append((bearing, x, y))

    views = []
    mount = 1.31
    for bearing, x, y in picked:
        heading = math.degrees(math.atan2(cy - y, cx - x)) % 360.0
        dist = math.hypot(cx - x, cy - y)
        pitch = math.degrees(math.atan2(cz - mount, dist))
        intr = CameraIntrinsics(view_size, view_size, vertical_fov=vfov,
                                mount_height=mount, look_at_pitch=pitch)
        pose = AgentState((float(x), float(y), 0.0), heading)
        fr = render_map(gmap, pose, intr)
        views.append(np.clip(fr.color, 0.0, 1.0))
    return views, None


# ---------------------------------------------------------------------------
# keypoint matching
# ---------------------------------------------------------------------------

def _to_gray(img: np.ndarray) -> np.ndarray:
    return img.mean(axis=2) if img.ndim == 3 else img


def detect_corners(gray: np.ndarray, max_corners: int = 400,
                   k: float = 0.06, rel_thresh: float = 0.01) -> np.ndarray:
    """Harris corner cells as (row, col) pairs, strongest first."""
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, 1:-1] = (gray[:, 2:] - gray[:, :-2]) * 0.5
    gy[1:-1, :] = (gray[2:, :] - gray[:-2, :]) * 0.5
    sxx = ndimage.uniform_filter(gx * gx, size=3)
    syy = ndimage.uniform_filter(gy * gy, size=3)
    sxy = ndimage.uniform_filter(gx * gy, size=3)
    resp = sxx * syy - sxy * sxy - k * (sxx + syy) ** 2
    local_max = resp == ndimage.maximum_filter(resp, size=5)
    peak = float(resp.max())
    if peak <= 0:
        return np.zeros((0, 2), dtype=int)
    cand = local_max & (resp > rel_thresh * peak)
    cand[:5, :] = cand[-5:, :] = False
    cand[:, :5] = cand[:, -5:] = False
    rows, cols = np.nonzero(cand)
    if len(rows) == 0:
        return np.zeros((0, 2), dtype=int)
    order = np.argsort(-resp[rows, cols], kind="stable")[:max_corners]
    return np.stack([rows[order], cols[order]], axis=1)


def _patch_descriptors(gray: np.ndarray, corners: np.ndarray,
                       half: int = 4) -> np.ndarray:
    descs = np.empty((len(corners), (2 * half + 1) ** 2))
    for i, (r, c) in enumerate(corners):
        patch = gray[r - half:r + half + 1, c - half:c + half + 1].ravel()
        patch = patch - patch.mean()
        n = np.linalg.norm(patch)
        descs[i] = patch / n if n > 1e-9 else patch
    return descs


def match_keypoints(img_a: np.ndarray, img_b: np.ndarray) -> int:
    """Mutual nearest-neighbor corner matches surviving the ratio test."""
    ga, gb = _to_gray(img_a), _to_gray(img_b)
    ca = detect_corners(ga)
    cb = detect_corners(gb)
    if len(ca) < 2 or len(cb) < 2:
        return 0
    da = _patch_descriptors(ga, ca)
    db = _patch_descriptors(gb, cb)
    d2 = np.maximum(
        (da * da).sum(1)[:, None] + (db * db).sum(1)[None, :] - 2.0 * (da @ db.T),
        0.0)
    ratio2 = RATIO_TEST * RATIO_TEST

    def forward_matches(dm):
        nn = np.argsort(dm, axis=1, kind="stable")[:, :2]
        first = dm[np.arange(len(dm)), nn[:, 0]]
        second = dm[np.arange(len(dm)), nn[:, 1]]
        ok = first <= ratio2 * np.maximum(second, 1e-12)
        return nn[:, 0], ok

    ab, ok_ab = forward_matches(d2)
    ba, ok_ba = forward_matches(d2.T)
    count = 0
    for i in range(len(ca)):
        j = ab[i]
        if ok_ab[i] and ok_ba[j] and ba[j] == i:
            count += 1
    return count


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsampling by an integer factor."""
    h, w = img.shape[:2]
    h2, w2 = (h // factor) * factor, (w // factor) * factor
    img = img[:h2, :w2]
    sh = (h2 // factor, factor, w2 // factor, factor) + img.shape[2:]
    return img.reshape(sh).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# selection and localization
# ---------------------------------------------------------------------------

def _refined_position(gmap: GaussianMap, cand: InstanceCandidate):
    """Candidate centroid after 2D density filtering of member projections."""
    pts = gmap.means[cand.members][:, :2]
    labels = dbscan_labels(pts, DBSCAN_EPS, min(DBSCAN_MIN_PTS, len(pts)))
    best, best_n = None, 0
    for c in range(labels.max() + 1 if labels.size else 0):
        n = int((labels == c).sum())
        if n > best_n:
            best, best_n = c, n
    if best is None:
        xy = pts.mean(axis=0)
    else:
        xy = pts[labels == best].mean(axis=0)
    cz = float(gmap.means[cand.members][:, 2].mean())
    return (float(xy[0]), float(xy[1]), cz)


def select_and_localize(candidates: list[InstanceCandidate], views: list,
                        goal_image: np.ndarray, mode: str,
                        true_goal_position=None,
                        rng: np.random.Generator | None = None):
    """Pick a candidate per the mode and return (goal position, candidate id).

    match     : argmax over candidates of the best per-view keypoint count.
    gt_match  : the candidate nearest the true goal (oracle re-identification).
    gt_goal   : the exact true goal position (no candidate needed).
    random    : uniform choice among candidates.
    """
    if mode == "gt_goal":
        if true_goal_position is None:
            raise ValueError("gt_goal mode needs the episode goal position")
        return tuple(true_goal_position), -1
    if not candidates:
        raise GroundingFailedError("no instance candidates for the goal class")

    if mode == "gt_match":
        if true_goal_position is None:
            raise ValueError("gt_match mode needs the episode goal position")
        gx, gy = true_goal_position[0], true_goal_position[1]
        best = min(candidates,
                   key=lambda c: (c.centroid[0] - gx) ** 2 + (c.centroid[1] - gy) ** 2)
        return best.position, best.id
    if mode == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = candidates[int(rng.integers(0, len(candidates)))]
        return pick.position, pick.id
    if mode == "match":
        goal = goal_image
        first_view = next((imgs[0] for imgs, _ in views if imgs), None)
        if first_view is not None and goal.shape[0] > first_view.shape[0]:
            factor = goal.shape[0] // first_view.shape[0]
            if factor > 1:
                goal = downsample(goal, factor)
        scores = []
        for cand, (imgs, _reason) in zip(candidates, views):
            scores.append(MatchScore(cand.id,
                                     [match_keypoints(v, goal) for v in imgs]))
        best_i = 0
        for i in range(1, len(scores)):
            if scores[i].best > scores[best_i].best:
                best_i = i
        chosen = candidates[best_i]
        return chosen.position, chosen.id
    raise ValueError(f"unknown match mode {mode!r}")
