"""A* search and candidate-path generation with decision metrics."""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from semnav.errors import NoCandidatesError, NoPathError
from semnav.grid import (
    CellIndex,
    ClearanceField,
    Goal,
    OccupancyGrid,
    Point2D,
    WorldModel,
    build_grid,
    cell_to_world,
    clearance_field,
    inflate,
    obstacle_cell_span,
    world_to_cell,
)

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)

# (drow, dcol, straight count, diagonal count)
_MOVES = (
    (-1, 0, 1, 0),
    (1, 0, 1, 0),
    (0, -1, 1, 0),
    (0, 1, 1, 0),
    (-1, -1, 0, 1),
    (-1, 1, 0, 1),
    (1, -1, 0, 1),
    (1, 1, 0, 1),
)

PAYLOAD_FIELDS = ("index", "path_length", "obstacle_count", "min_clearance", "avg_clearance")


@dataclass(frozen=True)
class PlannerConfig:
    proximity_radius_m: float = 0.15
    descriptor_radius_m: float = 0.30
    skinny_ratio: float = 3.0
    crowd_count: int = 3


@dataclass(frozen=True)
class Path:
    cells: tuple[CellIndex, ...]
    waypoints: tuple[Point2D, ...]
    length_m: float

    @classmethod
    def from_cells(
        cls,
        cells: list[CellIndex] | tuple[CellIndex, ...],
        grid: OccupancyGrid,
        start_point: Point2D | None = None,
        goal_point: Point2D | None = None,
    ) -> Path:
        """Build a path through cell centers. ``start_point``/``goal_point``
        replace the first/last center with the exact metric position."""
        cells = tuple((int(r), int(c)) for r, c in cells)
        pts = [cell_to_world(c, grid) for c in cells]
        if start_point is not None:
            pts[0] = (float(start_point[0]), float(start_point[1]))
        if goal_point is not None:
            if len(pts) == 1:
                pts.append((float(goal_point[0]), float(goal_point[1])))
            else:
                pts[-1] = (float(goal_point[0]), float(goal_point[1]))
        return cls(cells, tuple(pts), polyline_length(pts))

    @property
    def moves(self) -> tuple[int, int]:
        """``(straight, diagonal)`` move counts between consecutive cells."""
        straight = diagonal = 0
        for (r0, c0), (r1, c1) in zip(self.cells, self.cells[1:]):
            if r0 != r1 and c0 != c1:
                diagonal += 1
            else:
                straight += 1
        return straight, diagonal

    def cost_cells(self) -> float:
        straight, diagonal = self.moves
        return straight + diagonal * SQRT2


@dataclass(frozen=True)
class PathMetrics:
    path_length: float
    obstacle_count: int
    turn_count: int
    min_clearance: float
    avg_clearance: float
    descriptors: tuple[str, ...] = ()
    near_goal_count: int = 0


@dataclass(frozen=True)
class PathCandidate:
    index: int
    goal_ref: Goal
    buffer_used: int
    path: Path
    metrics: PathMetrics

    def to_payload(self) -> dict:
        m = self.metrics
        return {
            "index": self.index,
            "path_length": m.path_length,
            "obstacle_count": m.obstacle_count,
            "min_clearance": m.min_clearance,
            "avg_clearance": m.avg_clearance,
        }


def polyline_length(points) -> float:
    return math.fsum(math.hypot(b[0] - a[0], b[1] - a[1]) for a, b in zip(points, points[1:]))


def _octile_pair(a: CellIndex, b: CellIndex) -> tuple[int, int]:
    dr, dc = abs(a[0] - b[0]), abs(a[1] - b[1])
    lo, hi = min(dr, dc), max(dr, dc)
    return hi - lo, lo


def octile(a: CellIndex, b: CellIndex) -> float:
    s, d = _octile_pair(a, b)
    return s + d * SQRT2


def astar(grid: OccupancyGrid, start: CellIndex, goal: CellIndex) -> Path:
    """Shortest 8-connected path from ``start`` to ``goal``.

    Diagonal moves are refused when either orthogonal neighbour they would
    squeeze past is occupied. Costs are kept as exact (straight, diagonal)
    move counts so equal f-costs really compare equal; ties go to the lower
    heuristic, then row-major cell order, which makes results reproducible
    bit for bit. Raises :class:`NoPathError` with ``reason`` set.
    """
    start = (int(start[0]), int(start[1]))
    goal = (int(goal[0]), int(goal[1]))
    if not grid.in_bounds(start) or not grid.in_bounds(goal):
        raise NoPathError("out_of_bounds", f"{start} -> {goal}")
    occ = grid.cells
    if occ[start]:
        raise NoPathError("start_occupied", str(start))
    if occ[goal]:
        raise NoPathError("goal_occupied", str(goal))

    rows, cols = grid.rows, grid.cols
    blocked = occ.tolist()
    g_cost: dict[CellIndex, tuple[int, int]] = {start: (0, 0)}
    parent: dict[CellIndex, CellIndex] = {}
    closed: set[CellIndex] = set()
    hs, hd = _octile_pair(start, goal)
    h0 = hs + hd * SQRT2
    heap = [(h0, h0, start[0], start[1])]
    while heap:
        _, _, r, c = heapq.heappop(heap)
        node = (r, c)
        if node in closed:
            continue
        if node == goal:
            cells = [node]
            while node in parent:
                node = parent[node]
                cells.append(node)
            cells.reverse()
            return Path.from_cells(cells, grid)
        closed.add(node)
        gs, gd = g_cost[node]
        for dr, dc, ms, md in _MOVES:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < rows and 0 <= nc < cols) or blocked[nr][nc]:
                continue
            if dr and dc and (blocked[r][nc] or blocked[nr][c]):
                continue
            nxt = (nr, nc)
            if nxt in closed:
                continue
            ns, nd = gs + ms, gd + md
            old = g_cost.get(nxt)
            if old is None or ns + nd * SQRT2 < old[0] + old[1] * SQRT2:
                g_cost[nxt] = (ns, nd)
                parent[nxt] = node
                hs, hd = _octile_pair(nxt, goal)
                heapq.heappush(
                    heap, ((ns + hs) + (nd + hd) * SQRT2, hs + hd * SQRT2, nr, nc)
                )
    raise NoPathError("unreachable", f"{start} -> {goal}")


def _direction(a: CellIndex, b: CellIndex) -> tuple[int, int]:
    return (int(np.sign(b[0] - a[0])), int(np.sign(b[1] - a[1])))


def turn_count(cells) -> int:
    """Number of changes in quantized move direction along ``cells``."""
    dirs = [_direction(a, b) for a, b in zip(cells, cells[1:]) if a != b]
    return sum(1 for d0, d1 in zip(dirs, dirs[1:]) if d0 != d1)


def downsample(path: Path) -> tuple[Point2D, ...]:
    """Keep only the endpoints of collinear runs."""
    cells = path.cells
    if len(cells) <= 2:
        return path.waypoints
    keep = [0]
    for i in range(1, len(cells) - 1):
        if _direction(cells[i - 1], cells[i]) != _direction(cells[i], cells[i + 1]):
            keep.append(i)
    keep.append(len(cells) - 1)
    return tuple(path.waypoints[i] for i in keep)


def _obstacle_spans(world: WorldModel, grid: OccupancyGrid):
    return [obstacle_cell_span(ob, grid.resolution_m, grid.rows, grid.cols) for ob in world.obstacles]


def count_obstacles_near(
    path: Path, world: WorldModel, grid: OccupancyGrid, radius_m: float
) -> int:
    """Distinct obstacles with an occupied cell within ``radius_m`` of a path cell."""
    if not path.cells:
        return 0
    pr = np.array([c[0] for c in path.cells])
    pc = np.array([c[1] for c in path.cells])
    count = 0
    for ob, span in zip(world.obstacles, _obstacle_spans(world, grid)):
        if span is None:
            dist = min(ob.distance_to(p) for p in path.waypoints)
        else:
            r0, r1, c0, c1 = span
            dr = np.maximum(np.maximum(r0 - pr, pr - r1), 0)
            dc = np.maximum(np.maximum(c0 - pc, pc - c1), 0)
            dist = float(np.sqrt(dr * dr + dc * dc).min()) * grid.resolution_m
        if dist <= radius_m:
            count += 1
    return count


def path_metrics(
    path: Path,
    world: WorldModel,
    clearance: ClearanceField,
    proximity_radius: float = PlannerConfig.proximity_radius_m,
    grid: OccupancyGrid | None = None,
) -> PathMetrics:
    """Metric block for one path. ``clearance`` must come from the uninflated grid."""
    if grid is None:
        grid = build_grid(world, clearance.resolution_m)
    # an obstacle-free grid has unbounded clearance; report the arena diagonal
    cap = math.hypot(world.arena_width_m, world.arena_height_m)
    values = [min(clearance.at(c), cap) for c in path.cells]
    min_c = min(values)
    avg_c = math.fsum(values) / len(values)
    # mean of identical floats can drift by an ulp; keep min <= avg exact
    avg_c = max(avg_c, min_c)
    return PathMetrics(
        path_length=path.length_m,
        obstacle_count=count_obstacles_near(path, world, grid, proximity_radius),
        turn_count=turn_count(path.cells),
        min_clearance=min_c,
        avg_clearance=avg_c,
    )


def obstacles_near_goal(world: WorldModel, goal: Goal, radius: float):
    near = [(ob.distance_to(goal.position), i, ob) for i, ob in enumerate(world.obstacles)]
    return [ob for d, _, ob in sorted(near, key=lambda t: (t[0], t[1])) if d <= radius]


def describe_obstacles(
    world: WorldModel,
    goal: Goal,
    radius: float = PlannerConfig.descriptor_radius_m,
    skinny_ratio: float = PlannerConfig.skinny_ratio,
    crowd_count: int = PlannerConfig.crowd_count,
) -> list[str]:
    near = obstacles_near_goal(world, goal, radius)
    out: list[str] = []
    if len(near) == 1:
        kind = "skinny obstacle" if near[0].aspect_ratio >= skinny_ratio else "obstacle"
        out.append(f"a single {kind} near the goal")
    elif len(near) >= crowd_count:
        out.append("multiple clustered obstacles near the goal")
    elif near:
        out.append(f"{len(near)} obstacles near the goal")
    for ob in near:
        if ob.label:
            out.append(f'obstacle labeled "{ob.label}" near the goal')
    return out


@dataclass
class _GridCache:
    """Per-call cache of the raw grid, its clearance and inflated variants."""

    world: WorldModel
    resolution_m: float
    raw: OccupancyGrid = field(init=False)
    clearance: ClearanceField = field(init=False)
    inflated: dict[int, OccupancyGrid] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.raw = build_grid(self.world, self.resolution_m)
        self.clearance = clearance_field(self.raw)

    def at_buffer(self, buffer_cells: int) -> OccupancyGrid:
        if buffer_cells not in self.inflated:
            self.inflated[buffer_cells] = inflate(self.raw, buffer_cells)
        return self.inflated[buffer_cells]


def plan_leg(
    world: WorldModel,
    start_point: Point2D,
    goal: Goal,
    grid: OccupancyGrid,
) -> Path:
    """A* between metric points on ``grid``, with exact endpoints attached."""
    start_cell = world_to_cell(start_point, grid)
    goal_cell = world_to_cell(goal.position, grid)
    found = astar(grid, start_cell, goal_cell)
    return Path.from_cells(found.cells, grid, start_point, goal.position)


def generate_candidates(
    world: WorldModel,
    goals,
    buffers,
    resolution: float,
    start: Point2D | None = None,
    config: PlannerConfig = PlannerConfig(),
) -> list[PathCandidate]:
    """One candidate per reachable (goal, buffer) pair, indexed in
    goal-major then buffer order."""
    goals = list(goals)
    buffers = list(buffers)
    if not goals or not buffers:
        raise ValueError("goals and buffers must be non-empty")
    start_point = world.robot_start.point if start is None else start
    cache = _GridCache(world, resolution)
    out: list[PathCandidate] = []
    for goal in goals:
        descriptors = tuple(
            describe_obstacles(world, goal, config.descriptor_radius_m, config.skinny_ratio, config.crowd_count)
        )
        near_goal = len(obstacles_near_goal(world, goal, config.descriptor_radius_m))
        for buffer in buffers:
            try:
                path = plan_leg(world, start_point, goal, cache.at_buffer(int(buffer)))
            except NoPathError as exc:
                log.info("no candidate for goal %s at buffer %s: %s", goal.label, buffer, exc)
                continue
            metrics = path_metrics(path, world, cache.clearance, config.proximity_radius_m, cache.raw)
            metrics = replace(metrics, descriptors=descriptors, near_goal_count=near_goal)
            out.append(PathCandidate(len(out), goal, int(buffer), path, metrics))
    if not out:
        raise NoCandidatesError("no (goal, buffer) pair is reachable")
    return out
