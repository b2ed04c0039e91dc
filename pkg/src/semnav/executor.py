"""Mission execution: decisions, buffered replanning, simulated following
and raw-planning collision gating."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from semnav.errors import (
    NoPathAfterBuffer,
    NoPathError,
    ParseError,
    ReplayError,
    SemnavError,
)
from semnav.grid import (
    DEFAULT_RESOLUTION_M,
    Goal,
    OccupancyGrid,
    Point2D,
    Pose2D,
    WorldModel,
    build_grid,
    inflate,
    world_to_cell,
)
from semnav.planner import (
    Path,
    PathCandidate,
    PlannerConfig,
    downsample,
    generate_candidates,
    plan_leg,
    polyline_length,
)
from semnav.semantic import (
    DEFAULT_ALLOWED_BUFFERS,
    Decision,
    MissionStage,
    Query,
    StageKind,
    WaypointPlan,
    build_raw_planning_prompt,
    build_selection_prompt,
    parse_decision,
    parse_waypoints,
)

log = logging.getLogger(__name__)

TRIAL_SCHEMA_VERSION = 1
ANY_GOAL = "any"


class DecisionFailed(SemnavError):
    """The provider never produced a usable answer within the attempt cap."""


@dataclass(frozen=True)
class NoiseConfig:
    sigma_m: float = 0.01
    step_m: float = 0.005

    def __post_init__(self) -> None:
        if self.sigma_m < 0:
            raise ValueError("sigma_m must be non-negative")
        if not self.step_m > 0:
            raise ValueError("step_m must be positive")


@dataclass(frozen=True)
class ExecutorConfig:
    goal_tolerance_m: float = 0.03
    speed_mps: float = 0.05
    max_attempts: int = 3
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    allowed_buffers: tuple[int, ...] = DEFAULT_ALLOWED_BUFFERS
    planner: PlannerConfig = field(default_factory=PlannerConfig)

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        if not self.speed_mps > 0:
            raise ValueError("speed_mps must be positive")


@dataclass(frozen=True)
class MissionSpec:
    stages: tuple[MissionStage, ...]
    world: WorldModel
    buffers_offered: tuple[int, ...] = (0,)
    resolution_m: float = DEFAULT_RESOLUTION_M

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "buffers_offered", tuple(int(b) for b in self.buffers_offered))
        kinds = [s.kind for s in self.stages]
        if StageKind.RAW_PLANNING in kinds:
            if len(kinds) != 1:
                raise ValueError("a raw planning mission has exactly one stage")
        elif not 1 <= len(kinds) <= 2:
            raise ValueError("selection missions have one or two stages")
        if not self.buffers_offered:
            raise ValueError("buffers_offered must be non-empty")


@dataclass(frozen=True)
class ExecutionTrace:
    poses: tuple[Pose2D, ...]
    times_s: tuple[float, ...]
    collided: bool = False
    collision_point: Point2D | None = None
    distance_travelled_m: float = 0.0

    @property
    def final_pose(self) -> Pose2D:
        return self.poses[-1]

    def to_dict(self) -> dict:
        return {
            "poses": [[p.x, p.y, p.heading] for p in self.poses],
            "times_s": list(self.times_s),
            "collided": self.collided,
            "collision_point": None if self.collision_point is None else list(self.collision_point),
            "distance_travelled_m": self.distance_travelled_m,
        }


@dataclass(frozen=True)
class StageResult:
    stage_kind: StageKind
    decision: Decision | WaypointPlan | None
    replanned_with_buffer: int | None
    trace: ExecutionTrace
    reached_goal: bool
    provider_latency_s: float
    goal_label: str | None = None
    buffer_used: int | None = None
    path: Path | None = None
    attempts: int = 0
    error: str | None = None
    # length of the plan handed to the follower, excluding noise
    planned_length_m: float = 0.0

    def to_dict(self) -> dict:
        if isinstance(self.decision, Decision):
            decision = {"selected_candidate": self.decision.selected_candidate, "buffer": self.decision.buffer}
        elif isinstance(self.decision, WaypointPlan):
            decision = {"waypoints": [list(p) for p in self.decision.waypoints]}
        else:
            decision = None
        return {
            "stage_kind": self.stage_kind.value,
            "decision": decision,
            "replanned_with_buffer": self.replanned_with_buffer,
            "buffer_used": self.buffer_used,
            "goal_label": self.goal_label,
            "reached_goal": self.reached_goal,
            "provider_latency_s": self.provider_latency_s,
            "attempts": self.attempts,
            "error": self.error,
            "planned_length_m": self.planned_length_m,
            "trace": self.trace.to_dict(),
        }


@dataclass(frozen=True)
class TrialResult:
    stage_results: tuple[StageResult, ...]
    overall_success: bool
    semantic_compliance: bool
    total_time_s: float
    seed: int = 0

    @property
    def first_goal_label(self) -> str | None:
        for sr in self.stage_results:
            if sr.reached_goal:
                return sr.goal_label
        return None

    @property
    def collided(self) -> bool:
        return any(sr.trace.collided for sr in self.stage_results)

    @property
    def provider_latency_s(self) -> float:
        return math.fsum(sr.provider_latency_s for sr in self.stage_results)

    @property
    def path_length_m(self) -> float:
        return math.fsum(sr.planned_length_m for sr in self.stage_results)

    @property
    def error(self) -> str | None:
        return next((sr.error for sr in self.stage_results if sr.error), None)

    def to_dict(self) -> dict:
        return {
            "schema": TRIAL_SCHEMA_VERSION,
            "seed": self.seed,
            "overall_success": self.overall_success,
            "semantic_compliance": self.semantic_compliance,
            "total_time_s": self.total_time_s,
            "stages": [sr.to_dict() for sr in self.stage_results],
        }


# -- geometry -------------------------------------------------------------------


def _segment_box_distance(p: Point2D, q: Point2D, box) -> float:
    x0, y0, x1, y1 = box
    # Liang-Barsky clip: any overlap means contact
    dx, dy = q[0] - p[0], q[1] - p[1]
    t0, t1 = 0.0, 1.0
    hit = True
    for denom, num in ((-dx, p[0] - x0), (dx, x1 - p[0]), (-dy, p[1] - y0), (dy, y1 - p[1])):
        if denom == 0.0:
            if num < 0.0:
                hit = False
                break
            continue
        t = num / denom
        if denom < 0.0:
            t0 = max(t0, t)
        else:
            t1 = min(t1, t)
        if t0 > t1:
            hit = False
            break
    if hit:
        return 0.0

    def point_box(pt):
        ex = max(x0 - pt[0], 0.0, pt[0] - x1)
        ey = max(y0 - pt[1], 0.0, pt[1] - y1)
        return math.hypot(ex, ey)

    def point_seg(pt):
        seg2 = dx * dx + dy * dy
        t = 0.0 if seg2 == 0.0 else min(max(((pt[0] - p[0]) * dx + (pt[1] - p[1]) * dy) / seg2, 0.0), 1.0)
        return math.hypot(p[0] + t * dx - pt[0], p[1] + t * dy - pt[1])

    corners = ((x0, y0), (x0, y1), (x1, y0), (x1, y1))
    return min(point_box(p), point_box(q), *(point_seg(c) for c in corners))


def segment_clearance(world: WorldModel, p: Point2D, q: Point2D) -> float:
    """Distance from segment ``pq`` to the nearest obstacle rectangle."""
    if not world.obstacles:
        return math.inf
    return min(_segment_box_distance(p, q, ob.bounds) for ob in world.obstacles)


def _as_points(path) -> list[Point2D]:
    if isinstance(path, Path):
        return list(downsample(path))
    if isinstance(path, WaypointPlan):
        return list(path.waypoints)
    return [(float(x), float(y)) for x, y in path]


def simulate_follow(
    world: WorldModel,
    path,
    noise: NoiseConfig = NoiseConfig(),
    seed=0,
    speed_mps: float = 0.05,
) -> ExecutionTrace:
    """Move a disc of ``world.robot_radius_m`` along the downsampled
    waypoints in steps of ``noise.step_m``. Each intermediate pose gets an
    independent lateral Gaussian offset; the final waypoint is hit exactly.
    Contact is tested on the swept segment between consecutive poses
    against the continuous obstacle rectangles."""
    pts = _as_points(path)
    if not pts:
        raise ValueError("path has no waypoints")
    rng = np.random.default_rng(seed)
    radius = world.robot_radius_m

    nominal: list[tuple[Point2D, float, tuple[float, float]]] = []
    for a, b in zip(pts, pts[1:]):
        seg = math.hypot(b[0] - a[0], b[1] - a[1])
        if seg == 0.0:
            continue
        ux, uy = (b[0] - a[0]) / seg, (b[1] - a[1]) / seg
        heading = math.atan2(uy, ux)
        n = max(1, math.ceil(seg / noise.step_m - 1e-9))
        for k in range(1, n + 1):
            f = k / n
            nominal.append(((a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])), heading, (-uy, ux)))

    offsets = rng.normal(0.0, noise.sigma_m, len(nominal)) if noise.sigma_m > 0 else np.zeros(len(nominal))
    first_heading = nominal[0][1] if nominal else 0.0
    poses = [Pose2D(pts[0][0], pts[0][1], first_heading)]
    times = [0.0]
    travelled = 0.0
    prev = pts[0]
    if any(ob.distance_to(prev) < radius for ob in world.obstacles):
        return ExecutionTrace(tuple(poses), tuple(times), True, prev, 0.0)
    for i, ((nx, ny), heading, (lx, ly)) in enumerate(nominal):
        if i == len(nominal) - 1:
            cur = pts[-1]
        else:
            off = float(offsets[i])
            cur = (nx + off * lx, ny + off * ly)
        step = math.hypot(cur[0] - prev[0], cur[1] - prev[1])
        travelled += step
        poses.append(Pose2D(cur[0], cur[1], heading))
        times.append(travelled / speed_mps)
        if segment_clearance(world, prev, cur) < radius:
            return ExecutionTrace(tuple(poses), tuple(times), True, cur, travelled)
        prev = cur
    return ExecutionTrace(tuple(poses), tuple(times), False, None, travelled)


@dataclass(frozen=True)
class PredictedCollision:
    segment_index: int
    start: Point2D
    end: Point2D


def supercover_cells(p: Point2D, q: Point2D, grid: OccupancyGrid) -> np.ndarray:
    """All in-bounds cells whose closed square touches segment ``pq``, as
    an ``(n, 2)`` array of ``(row, col)``."""
    res = grid.resolution_m
    # work in cell units: cell (r, c) spans [c, c+1] x [r, r+1]
    ax, ay = p[0] / res, p[1] / res
    bx, by = q[0] / res, q[1] / res
    c0 = max(math.floor(min(ax, bx)) - 1, 0)
    c1 = min(math.floor(max(ax, bx)) + 1, grid.cols - 1)
    r0 = max(math.floor(min(ay, by)) - 1, 0)
    r1 = min(math.floor(max(ay, by)) + 1, grid.rows - 1)
    if c0 > c1 or r0 > r1:
        return np.empty((0, 2), dtype=int)
    rr, cc = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    # bounding-box axes
    keep = (cc <= max(ax, bx)) & (cc + 1 >= min(ax, bx)) & (rr <= max(ay, by)) & (rr + 1 >= min(ay, by))
    # segment normal axis
    nx, ny = -(by - ay), bx - ax
    centre = nx * (cc + 0.5 - ax) + ny * (rr + 0.5 - ay)
    reach = 0.5 * (abs(nx) + abs(ny))
    keep &= np.abs(centre) <= reach + 1e-12 * max(1.0, reach)
    return np.stack([rr[keep], cc[keep]], axis=1)


def _dilated(grid: OccupancyGrid, cells: int) -> np.ndarray:
    if cells <= 0:
        return np.asarray(grid.cells)
    return ndimage.maximum_filter(grid.cells, size=2 * cells + 1, mode="constant", cval=False)


def collision_check(
    plan: WaypointPlan | list[Point2D],
    grid: OccupancyGrid,
    robot_radius_m: float,
) -> PredictedCollision | None:
    """First segment whose supercover cells, dilated by the robot radius,
    touch occupancy; None when the whole plan is clear."""
    pts = list(plan.waypoints) if isinstance(plan, WaypointPlan) else [tuple(p) for p in plan]
    if not pts:
        raise ValueError("plan must contain at least one waypoint")
    body = math.ceil(robot_radius_m / grid.resolution_m - 1e-9)
    blocked = _dilated(grid, body)
    segments = list(zip(pts, pts[1:])) or [(pts[0], pts[0])]
    for i, (a, b) in enumerate(segments):
        cells = supercover_cells(a, b, grid)
        if cells.size and blocked[cells[:, 0], cells[:, 1]].any():
            return PredictedCollision(i, a, b)
    return None


# -- stages -----------------------------------------------------------------------


def _eligible_goals(world: WorldModel, stage: MissionStage, visited) -> list[Goal]:
    if stage.goal_labels is not None:
        goals = [g for g in world.goals if g.label in stage.goal_labels]
    else:
        goals = [g for g in world.goals if g not in visited]
    if not goals:
        raise ValueError(f"stage {stage.kind.value} has no eligible goals")
    return goals


def _failed(stage: MissionStage, start: Pose2D, error: Exception, latency: float = 0.0, attempts: int = 0) -> StageResult:
    trace = ExecutionTrace((start,), (0.0,))
    return StageResult(
        stage.kind, None, None, trace, False, latency, attempts=attempts, error=f"{type(error).__name__}: {error}"
    )


def _reached(trace: ExecutionTrace, goal: Goal, tol: float) -> bool:
    if trace.collided:
        return False
    p = trace.final_pose
    return math.hypot(p.x - goal.position[0], p.y - goal.position[1]) <= tol


def run_stage(
    world: WorldModel,
    stage: MissionStage,
    provider,
    config: ExecutorConfig = ExecutorConfig(),
    *,
    start: Pose2D | None = None,
    buffers=(0,),
    resolution_m: float = DEFAULT_RESOLUTION_M,
    visited=(),
    seed=0,
) -> StageResult:
    """Run one selection stage. Planning and decision errors propagate."""
    if stage.kind is StageKind.RAW_PLANNING:
        return run_raw_stage(world, stage, provider, config, start=start, resolution_m=resolution_m, seed=seed)
    start = start or world.robot_start
    goals = _eligible_goals(world, stage, visited)
    candidates = generate_candidates(world, goals, buffers, resolution_m, start.point, config.planner)
    prompt = build_selection_prompt(stage, candidates, config.allowed_buffers)
    query = Query(prompt, stage, tuple(candidates), world, start.point, None, resolution_m)

    decision, latency, attempts = _ask(
        provider, query, config.max_attempts, lambda text: parse_decision(text, len(candidates), config.allowed_buffers)
    )
    chosen: PathCandidate = candidates[decision.selected_candidate]
    path = chosen.path
    replanned = None
    if decision.buffer != chosen.buffer_used:
        raw = build_grid(world, resolution_m)
        try:
            path = plan_leg(world, start.point, chosen.goal_ref, inflate(raw, decision.buffer))
        except NoPathError as exc:
            raise NoPathAfterBuffer(
                f"goal {chosen.goal_ref.label!r} unreachable at buffer {decision.buffer}: {exc}"
            ) from exc
        replanned = decision.buffer
    trace = simulate_follow(world, path, config.noise, seed, config.speed_mps)
    return StageResult(
        stage.kind,
        decision,
        replanned,
        trace,
        _reached(trace, chosen.goal_ref, config.goal_tolerance_m),
        latency,
        goal_label=chosen.goal_ref.label,
        buffer_used=decision.buffer,
        path=path,
        attempts=attempts,
        planned_length_m=polyline_length(_as_points(path)),
    )


def _ask(provider, query: Query, max_attempts: int, parse):
    latency = 0.0
    last: Exception | None = None
    for attempt in range(1, max_attempts + 1):
        reply = provider.respond(query)
        latency += reply.latency_s
        try:
            return parse(reply.text), latency, attempt
        except ParseError as exc:
            log.info("attempt %d: unusable response (%s)", attempt, exc)
            last = exc
    raise DecisionFailed(f"no valid response in {max_attempts} attempts; last error: {last}")


def run_raw_stage(
    world: WorldModel,
    stage: MissionStage,
    provider,
    config: ExecutorConfig = ExecutorConfig(),
    *,
    start: Pose2D | None = None,
    resolution_m: float = DEFAULT_RESOLUTION_M,
    seed=0,
) -> StageResult:
    """Provider proposes waypoints; each proposal is collision-checked and
    re-queried on a predicted collision or parse error."""
    start = start or world.robot_start
    goals = _eligible_goals(world, stage, ())
    if len(goals) != 1:
        raise ValueError("raw planning needs exactly one goal")
    goal = goals[0]
    grid = build_grid(world, resolution_m)
    prompt = build_raw_planning_prompt(grid, world_to_cell(start.point, grid), world_to_cell(goal.position, grid), stage)
    query = Query(prompt, stage, (), world, start.point, goal, resolution_m)
    latency = 0.0
    reason = "no attempts made"
    for attempt in range(1, config.max_attempts + 1):
        reply = provider.respond(query)
        latency += reply.latency_s
        try:
            plan = parse_waypoints(reply.text, world)
        except ParseError as exc:
            reason = f"unusable response ({exc})"
            continue
        full = [start.point, *plan.waypoints]
        hit = collision_check(full, grid, world.robot_radius_m)
        if hit is not None:
            reason = f"predicted collision on segment {hit.segment_index}"
            log.info("attempt %d: %s", attempt, reason)
            continue
        trace = simulate_follow(world, full, config.noise, seed, config.speed_mps)
        return StageResult(
            stage.kind,
            plan,
            None,
            trace,
            _reached(trace, goal, config.goal_tolerance_m),
            latency,
            goal_label=goal.label,
            attempts=attempt,
            planned_length_m=polyline_length(full),
        )
    raise DecisionFailed(f"raw planning failed after {config.max_attempts} attempts: {reason}")


def _stage_seed(seed, index: int):
    return np.random.SeedSequence([int(seed), index])


def run_mission(
    spec: MissionSpec,
    provider,
    seed: int = 0,
    config: ExecutorConfig = ExecutorConfig(),
    correct_goal_label: str | None = ANY_GOAL,
) -> TrialResult:
    """Run stages in order, each from the previous stage's final pose.
    Stage errors end the mission with a failed result; transcript replay
    errors propagate because they signal a broken recording."""
    world = spec.world
    pose = world.robot_start
    visited: list[Goal] = []
    results: list[StageResult] = []
    for i, stage in enumerate(spec.stages):
        try:
            sr = run_stage(
                world,
                stage,
                provider,
                config,
                start=pose,
                buffers=spec.buffers_offered,
                resolution_m=spec.resolution_m,
                visited=visited,
                seed=_stage_seed(seed, i),
            )
        except ReplayError:
            raise
        except (SemnavError, ValueError) as exc:
            log.info("stage %d failed: %s", i, exc)
            results.append(_failed(stage, pose, exc))
            break
        results.append(sr)
        if not sr.reached_goal:
            break
        pose = sr.trace.final_pose
        visited.extend(g for g in world.goals if g.label == sr.goal_label)

    complete = len(results) == len(spec.stages) and all(r.reached_goal for r in results)
    first = next((r.goal_label for r in results if r.reached_goal), None)
    if correct_goal_label in (None, ANY_GOAL):
        compliant = first is not None
    else:
        compliant = first == correct_goal_label
    total = math.fsum(r.planned_length_m / config.speed_mps + r.provider_latency_s for r in results)
    return TrialResult(tuple(results), complete, compliant, total, int(seed))
