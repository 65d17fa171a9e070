"""Episode protocol: first-visit exploration + map build, then grounded
point-goal navigation per episode, with Success / SPL accounting."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import yaml

from . import explore as E
from . import grounding as G
from . import mapping as M
from . import planner as P
from . import world as W


class EvaluationError(Exception):
    pass


@dataclass
class RunConfig:
    version: int = 1
    scene_seeds: list = field(default_factory=lambda: [101, 102, 103, 104, 105])
    episodes_per_scene: int = 10
    classifier_mode: str = "learned"      # learned | gt | random
    match_mode: str = "match"             # match | gt_match | random | gt_goal
    nav_step_budget: int = 500
    explore_step_budget: int = 2000
    rng_seed: int = 0
    nav_width: int = 112
    nav_height: int = 84
    map_width: int = 64
    map_height: int = 48
    keyframe_every: int = 5
    view_size: int = 256
    segment_length: int = 25
    iters_first: int = 60
    iters_per_frame: int = 12
    final_iters: int = 24
    train_scene_seeds: list = field(default_factory=lambda: [9001, 9002])
    train_episodes_per_scene: int = 12
    resolution: float = 0.05
    out_dir: str = "runs/out"
    map_dir: str = ""                     # when set, maps are cached here

    @classmethod
    def from_yaml(cls, path: str, overrides: dict | None = None) -> "RunConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        version = data.get("version", 1)
        if version != 1:
            raise ValueError(f"unsupported run config version {version}")
        cfg = cls()
        for k, v in data.items():
            if not hasattr(cfg, k):
                raise ValueError(f"unknown config key {k!r}")
            setattr(cfg, k, v)
        for k, v in (overrides or {}).items():
            if v is not None:
                setattr(cfg, k, v)
        return cfg

    def to_yaml(self, path: str) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(asdict(self), fh, sort_keys=True)

    def nav_intrinsics(self) -> W.CameraIntrinsics:
        return W.agent_intrinsics(self.nav_width, self.nav_height)

    def map_intrinsics(self) -> W.CameraIntrinsics:
        return W.agent_intrinsics(self.map_width, self.map_height)

    def build_config(self, extent: float) -> M.MapBuildConfig:
        opt = M.OptimizerConfig(extent=extent)
        return M.MapBuildConfig(segment_length=self.segment_length,
                                iters_first=self.iters_first,
                                iters_per_frame=self.iters_per_frame,
                                final_iters=self.final_iters, optimizer=opt)


@dataclass
class EpisodeRecord:
    episode_id: int
    scene_seed: int
    episode_seed: int
    start: tuple                      # (x, y, z, heading)
    goal_instance_id: int
    goal_class: str
    classifier_mode: str
    match_mode: str
    predicted_class: str
    chosen_candidate: int
    goal_estimate: tuple | None
    trajectory: list                  # (x, y, heading, action)
    final_position: tuple
    steps: int
    forward_count: int
    path_length: float
    shortest_length: float
    success: int
    spl_term: float
    stop_reason: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trajectory"] = [[round(x, 4), round(y, 4), round(h, 2), a]
                           for (x, y, h, a) in self.trajectory]
        return d


# ---------------------------------------------------------------------------
# exploration episode
# ---------------------------------------------------------------------------

@dataclass
class ExplorationResult:
    grid: E.NavGrid
    keyframes: list                   # (obs at map resolution, pose)
    steps: int
    complete: bool
    trajectory: list                  # (x, y, heading, action)


def explore_scene(scene: W.SceneSpec, start: W.AgentState, cfg: RunConfig,
                  budget: int | None = None) -> ExplorationResult:
    """Frontier exploration until no frontiers remain or the budget runs out."""
    nav_intr = cfg.nav_intrinsics()
    map_intr = cfg.map_intrinsics()
    grid = E.NavGrid.create(scene.extent, cfg.resolution)
    budget = budget if budget is not None else cfg.explore_step_budget
    state = start
    keyframes, trajectory = [], []
    banned = np.zeros(grid.shape, dtype=bool)
    steps = 0
    complete = False
    fieldv = None
    waypoint = None
    pursuit = 0
    recent_forward = 0

    def observe():
        obs = W.oracle_render(scene, state, nav_intr)
        E.update_grids(grid, obs, state, nav_intr)
        if steps % cfg.keyframe_every == 0:
            keyframes.append((W.oracle_render(scene, state, map_intr), state))

    def act(action):
        nonlocal state, steps, fieldv
        trajectory.append((state.position[0], state.position[1], state.heading,
                           action))
        state = W.step_agent(scene, state, action)
        steps += 1
        if state.collided:
            hx = state.position[0] + 0.3 * math.cos(math.radians(state.heading))
            hy = state.position[1] + 0.3 * math.sin(math.radians(state.heading))
            c = grid.world_to_cell((hx, hy))
            if grid.in_bounds(*c):
                grid.obstacle[c] = True
            fieldv = None

    # full spin to seed the grids
    for _ in range(int(360 // W.TURN_DEG) + 1):
        if steps >= budget:
            break
        observe()
        act(W.TURN_LEFT)

    while steps < budget:
        observe()
        if fieldv is None or pursuit > 60:
            if pursuit > 60 and waypoint is not None:
                _ban_region(banned, waypoint, grid, 0.3)
            frontiers = [c for c in E.detect_frontiers(grid) if not banned[c]]
            waypoint = E.select_frontier(frontiers, state, grid)
            if waypoint is None:
                complete = True
                break
            fieldv = P.fmm_field(grid.traversable(), [waypoint], cfg.resolution)
            pursuit = 0
            recent_forward = 0
        try:
            action = P.plan_next_action(fieldv, state, grid, stop_distance=0.35)
        except P.NoPathError:
            _ban_region(banned, waypoint, grid, 0.3)
            fieldv = None
            continue
        if action == W.STOP:   # waypoint reached; pick the next frontier
            fieldv = None
            continue
        if action == W.FORWARD:
            recent_forward = 0
        else:
            recent_forward += 1
            if recent_forward > 17:    # spinning in place: give up on waypoint
                _ban_region(banned, waypoint, grid, 0.3)
                fieldv = None
                recent_forward = 0
                continue
        act(action)
        pursuit += 1
    return ExplorationResult(grid, keyframes, steps, complete, trajectory)


def _ban_region(banned: np.ndarray, cell, grid: E.NavGrid, radius: float):
    r = int(math.ceil(radius / grid.resolution))
    nx, ny = banned.shape
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            jx, jy = cell[0] + dx, cell[1] + dy
            if 0 <= jx < nx and 0 <= jy < ny:
                banned[jx, jy] = True


def coverage_fraction(scene: W.SceneSpec, start: W.AgentState, grid: E.NavGrid,
                      resolution: float = 0.05) -> float:
    """Fraction of oracle free cells reachable from the start that are explored."""
    from scipy import ndimage
    free = W.rasterize_plan(scene, resolution, inflate=0.0)
    labels, _ = ndimage.label(free, structure=np.ones((3, 3)))
    comp = labels[int(start.position[0] / resolution),
                  int(start.position[1] / resolution)]
    reachable = labels == comp
    explored_free = grid.explored & ~grid.obstacle
    return float((reachable & explored_free).sum() / max(reachable.sum(), 1))


# ---------------------------------------------------------------------------
# map acquisition
# ---------------------------------------------------------------------------

def acquire_map(scene: W.SceneSpec, cfg: RunConfig):
    """Build the scene map by exploration, or load it from the cache dir."""
    path = None
    if cfg.map_dir:
        os.makedirs(cfg.map_dir, exist_ok=True)
        path = os.path.join(cfg.map_dir, f"scene_{scene.seed}.map")
        if os.path.exists(path):
            return M.load_map(path), None
    start = default_start(scene, cfg.resolution)
    result = explore_scene(scene, start, cfg)
    gmap = M.build_map(result.keyframes, cfg.map_intrinsics(),
                       cfg.build_config(extent=max(scene.extent)))
    if path:
        M.save_map(gmap, path)
    return gmap, result


def default_start(scene: W.SceneSpec, resolution: float = 0.05) -> W.AgentState:
    free = W.rasterize_plan(scene, resolution, inflate=W.AGENT_RADIUS)
    cells = np.argwhere(free)
    ix, iy = cells[len(cells) // 2]
    return W.AgentState((float((ix + 0.5) * resolution),
                         float((iy + 0.5) * resolution),
                         scene.floor_height), 0.0)


# ---------------------------------------------------------------------------
# goal episodes
# ---------------------------------------------------------------------------

class SceneContext:
    """Per-scene state shared by episodes: map, grids, candidate views."""

    def __init__(self, scene: W.SceneSpec, gmap: M.GaussianMap, cfg: RunConfig):
        self.scene = scene
        self.gmap = gmap
        self.cfg = cfg
        _, self.grid = P.build_nav_grid(gmap, scene.extent, cfg.resolution)
        self._index: dict[str, tuple] = {}

    def candidates_for(self, class_label: str):
        """Candidates and their descriptive views, cached per class."""
        if class_label not in self._index:
            cands = G.cluster_instances(self.gmap, class_label)
            views = [G.render_descriptive_views(self.gmap, c, self.grid,
                                                view_size=self.cfg.view_size)
                     for c in cands]
            self._index[class_label] = (cands, views)
        return self._index[class_label]


def run_episode(cfg: RunConfig, scene: W.SceneSpec, episode: W.EpisodeSpec,
                ctx: SceneContext, classifier: G.GoalClassifier | None,
                episode_id: int, class_rng: np.random.Generator,
                select_rng: np.random.Generator) -> EpisodeRecord:
    state = episode.start
    trajectory: list = []
    forwards = 0
    steps = 0
    stop_reason = "budget"
    stopped = False
    predicted = ""
    chosen = -1
    goal_est = None

    def act(action: str):
        nonlocal state, steps, forwards, stopped
        trajectory.append((state.position[0], state.position[1], state.heading,
                           action))
        if action == W.FORWARD:
            forwards += 1
        state = W.step_agent(scene, state, action)
        steps += 1

    try:
        predicted = G.classify_goal(episode.goal_image, cfg.classifier_mode,
                                    model=classifier,
                                    true_label=episode.goal_class,
                                    rng=class_rng)
        if cfg.match_mode == "gt_goal":
            candidates, views = [], []
        else:
            candidates, views = ctx.candidates_for(predicted)
        goal_est, chosen = G.select_and_localize(
            candidates, views, episode.goal_image, cfg.match_mode,
            true_goal_position=episode.goal_position, rng=select_rng)
    except G.GroundingFailedError:
        stop_reason = "grounding_failed"
        goal_est = None

    if goal_est is not None:
        fieldv = P.goal_field(ctx.grid, goal_est[:2])
        replan = 0
        while steps < cfg.nav_step_budget:
            try:
                action = P.plan_next_action(fieldv, state, ctx.grid)
            except P.NoPathError:
                stop_reason = "no_path"
                break
            if action == W.STOP:
                act(W.STOP)
                stopped = True
                stop_reason = "stopped"
                break
            act(action)
            replan += 1
            if state.collided:
                c = _front_cell(ctx.grid, state)
                if c is not None:
                    ctx.grid.obstacle[c] = True
                fieldv = P.goal_field(ctx.grid, goal_est[:2])
                replan = 0
            elif replan >= 40:
                fieldv = P.goal_field(ctx.grid, goal_est[:2])
                replan = 0

    if not stopped and stop_reason in ("grounding_failed", "no_path") \
            and steps < cfg.nav_step_budget:
        # fall back to live frontier exploration for the remaining budget
        result = explore_scene(scene, state, cfg,
                               budget=cfg.nav_step_budget - steps)
        for (x, y, h, a) in result.trajectory:
            trajectory.append((x, y, h, a))
            if a == W.FORWARD:
                forwards += 1
        steps += result.steps
        state = W.AgentState(
            (result.trajectory[-1][0], result.trajectory[-1][1],
             state.position[2]), result.trajectory[-1][2]) \
            if result.trajectory else state
        stop_reason += "+explored"

    gx, gy, _ = episode.goal_position
    dist = math.hypot(state.position[0] - gx, state.position[1] - gy)
    success = 1 if (stopped and dist <= 1.0) else 0
    p_len = W.STEP_FORWARD * forwards
    l_len = episode.shortest_path_length
    spl_term = success * l_len / max(p_len, l_len) if l_len > 0 else float(success)
    return EpisodeRecord(
        episode_id=episode_id, scene_seed=scene.seed, episode_seed=episode.seed,
        start=(episode.start.position[0], episode.start.position[1],
               episode.start.position[2], episode.start.heading),
        goal_instance_id=episode.goal_instance_id, goal_class=episode.goal_class,
        classifier_mode=cfg.classifier_mode, match_mode=cfg.match_mode,
        predicted_class=predicted, chosen_candidate=chosen,
        goal_estimate=tuple(round(v, 4) for v in goal_est) if goal_est else None,
        trajectory=trajectory,
        final_position=(round(state.position[0], 4), round(state.position[1], 4)),
        steps=steps, forward_count=forwards, path_length=p_len,
        shortest_length=l_len, success=success, spl_term=spl_term,
        stop_reason=stop_reason)


def _front_cell(grid: E.NavGrid, state: W.AgentState):
    hx = state.position[0] + 0.3 * math.cos(math.radians(state.heading))
    hy = state.position[1] + 0.3 * math.sin(math.radians(state.heading))
    c = grid.world_to_cell((hx, hy))
    return c if grid.in_bounds(*c) else None


def evaluate(records: list[EpisodeRecord]):
    """Success rate and SPL over the record set."""
    if not records:
        raise EvaluationError("no episode records to evaluate")
    succ = float(np.mean([r.success for r in records]))
    spl = float(np.mean([r.spl_term for r in records]))
    return succ, spl


# ---------------------------------------------------------------------------
# suite running
# ---------------------------------------------------------------------------

def fit_classifier(cfg: RunConfig) -> G.GoalClassifier:
    """Fit the goal classifier on episodes from held-out training scenes."""
    images, labels = [], []
    for seed in cfg.train_scene_seeds:
        scene = W.generate_scene(seed)
        for k in range(cfg.train_episodes_per_scene):
            ep = W.sample_episode(scene, 1000 + k)
            images.append(ep.goal_image)
            labels.append(ep.goal_class)
    clf = G.GoalClassifier()
    clf.fit(images, labels)
    return clf


def run_suite(cfg: RunConfig, contexts: dict | None = None,
              classifier: G.GoalClassifier | None = None,
              progress=None) -> list[EpisodeRecord]:
    """Run the configured episode suite; returns records (exploration episodes
    are not part of the Success/SPL aggregation)."""
    if classifier is None and cfg.classifier_mode == "learned":
        classifier = fit_classifier(cfg)
    class_rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 1]))
    select_rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 2]))
    records = []
    episode_id = 0
    for seed in cfg.scene_seeds:
        if contexts is not None and seed in contexts:
            ctx = contexts[seed]
        else:
            scene = W.generate_scene(seed)
            gmap, _ = acquire_map(scene, cfg)
            ctx = SceneContext(scene, gmap, cfg)
            if contexts is not None:
                contexts[seed] = ctx
        for k in range(cfg.episodes_per_scene):
            episode = W.sample_episode(ctx.scene, k)
            rec = run_episode(cfg, ctx.scene, episode, ctx, classifier,
                              episode_id, class_rng, select_rng)
            records.append(rec)
            episode_id += 1
            if progress:
                progress(rec)
    return records
