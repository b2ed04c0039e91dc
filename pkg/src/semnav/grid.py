"""World model and occupancy grids.

Coordinates are metric with the origin at the lower-left arena corner.
Cells are indexed ``(row, col)``: row grows with ``y`` and col with ``x``,
so ``grid.cells[row, col]`` is the cell whose center sits at
``((col + 0.5) * res, (row + 0.5) * res)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from semnav.errors import InvalidWorld

DEFAULT_RESOLUTION_M = 0.01
DEFAULT_ROBOT_RADIUS_M = 0.05

# boundary ties count as occupied
_EDGE_EPS = 1e-12

Point2D = tuple[float, float]
CellIndex = tuple[int, int]


def _wrap_heading(theta: float) -> float:
    wrapped = (theta + math.pi) % (2.0 * math.pi) - math.pi
    return wrapped


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.x, self.y, self.heading)):
            raise InvalidWorld(f"non-finite pose {self}")
        object.__setattr__(self, "heading", _wrap_heading(self.heading))

    @property
    def point(self) -> Point2D:
        return (self.x, self.y)


@dataclass(frozen=True)
class Obstacle:
    """Axis-aligned rectangle with an optional semantic label."""

    center: Point2D
    width_m: float
    height_m: float
    label: str | None = None

    def __post_init__(self) -> None:
        if not (self.width_m > 0 and self.height_m > 0):
            raise InvalidWorld(f"obstacle dimensions must be positive: {self}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """``(x_min, y_min, x_max, y_max)``."""
        cx, cy = self.center
        hw, hh = self.width_m / 2.0, self.height_m / 2.0
        return (cx - hw, cy - hh, cx + hw, cy + hh)

    @property
    def aspect_ratio(self) -> float:
        return max(self.width_m, self.height_m) / min(self.width_m, self.height_m)

    def distance_to(self, point: Point2D) -> float:
        x0, y0, x1, y1 = self.bounds
        dx = max(x0 - point[0], 0.0, point[0] - x1)
        dy = max(y0 - point[1], 0.0, point[1] - y1)
        return math.hypot(dx, dy)


@dataclass(frozen=True)
class Goal:
    position: Point2D
    label: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))


@dataclass(frozen=True)
class WorldModel:
    arena_width_m: float
    arena_height_m: float
    obstacles: tuple[Obstacle, ...] = ()
    goals: tuple[Goal, ...] = ()
    robot_start: Pose2D = field(default_factory=lambda: Pose2D(0.0, 0.0))
    robot_radius_m: float = DEFAULT_ROBOT_RADIUS_M

    def __post_init__(self) -> None:
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "goals", tuple(self.goals))
        self.validate()

    def validate(self) -> None:
        w, h = self.arena_width_m, self.arena_height_m
        if not (w > 0 and h > 0 and math.isfinite(w) and math.isfinite(h)):
            raise InvalidWorld(f"arena dimensions must be positive, got {w} x {h}")
        if not self.robot_radius_m >= 0:
            raise InvalidWorld("robot radius must be non-negative")
        for i, ob in enumerate(self.obstacles):
            x0, y0, x1, y1 = ob.bounds
            if x0 < -_EDGE_EPS or y0 < -_EDGE_EPS or x1 > w + _EDGE_EPS or y1 > h + _EDGE_EPS:
                raise InvalidWorld(f"obstacle {i} extends outside the arena")
        for i, goal in enumerate(self.goals):
            if not self.contains(goal.position):
                raise InvalidWorld(f"goal {i} lies outside the arena")
        if not self.contains(self.robot_start.point):
            raise InvalidWorld("robot start lies outside the arena")
        for i, ob in enumerate(self.obstacles):
            if ob.distance_to(self.robot_start.point) == 0.0:
                raise InvalidWorld(f"robot start lies inside obstacle {i}")

    def contains(self, point: Point2D) -> bool:
        x, y = point
        return 0.0 <= x <= self.arena_width_m and 0.0 <= y <= self.arena_height_m

    def goal_by_label(self, label: str) -> Goal:
        for goal in self.goals:
            if goal.label == label:
                return goal
        raise KeyError(label)


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    resolution_m: float
    cells: np.ndarray
    width_m: float
    height_m: float
    buffer_cells: int = 0

    @property
    def rows(self) -> int:
        return int(self.cells.shape[0])

    @property
    def cols(self) -> int:
        return int(self.cells.shape[1])

    def in_bounds(self, cell: CellIndex) -> bool:
        return 0 <= cell[0] < self.rows and 0 <= cell[1] < self.cols

    def is_free(self, cell: CellIndex) -> bool:
        return self.in_bounds(cell) and not bool(self.cells[cell])

    def occupied_count(self) -> int:
        return int(self.cells.sum())

    def same_cells(self, other: OccupancyGrid) -> bool:
        return self.cells.shape == other.cells.shape and bool(np.array_equal(self.cells, other.cells))


@dataclass(frozen=True, eq=False)
class ClearanceField:
    """Distance in meters from each cell center to the nearest occupied
    cell center. On an obstacle-free grid every entry is ``math.inf``."""

    values: np.ndarray
    resolution_m: float

    def at(self, cell: CellIndex) -> float:
        return float(self.values[cell])

    @property
    def unbounded(self) -> bool:
        return bool(np.isinf(self.values).all())


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def grid_shape(width_m: float, height_m: float, resolution_m: float) -> tuple[int, int]:
    # guard against 1.0 / 0.01 style rounding adding a phantom column
    cols = math.ceil(width_m / resolution_m - 1e-9)
    rows = math.ceil(height_m / resolution_m - 1e-9)
    return rows, cols


def obstacle_cell_span(
    obstacle: Obstacle, resolution_m: float, rows: int, cols: int
) -> tuple[int, int, int, int] | None:
    """Inclusive ``(row_min, row_max, col_min, col_max)`` of cells whose
    centers fall inside ``obstacle``, or None when it covers no center."""
    x0, y0, x1, y1 = obstacle.bounds
    col_min = max(math.ceil((x0 - _EDGE_EPS) / resolution_m - 0.5), 0)
    col_max = min(math.floor((x1 + _EDGE_EPS) / resolution_m - 0.5), cols - 1)
    row_min = max(math.ceil((y0 - _EDGE_EPS) / resolution_m - 0.5), 0)
    row_max = min(math.floor((y1 + _EDGE_EPS) / resolution_m - 0.5), rows - 1)
    if col_min > col_max or row_min > row_max:
        return None
    return row_min, row_max, col_min, col_max


def build_grid(world: WorldModel, resolution_m: float = DEFAULT_RESOLUTION_M) -> OccupancyGrid:
    """Rasterize ``world`` by cell-center containment."""
    if not (resolution_m > 0 and math.isfinite(resolution_m)):
        raise ValueError(f"resolution must be positive and finite, got {resolution_m}")
    rows, cols = grid_shape(world.arena_width_m, world.arena_height_m, resolution_m)
    if rows <= 0 or cols <= 0:
        raise ValueError(f"resolution {resolution_m} yields an empty grid")
    cells = np.zeros((rows, cols), dtype=bool)
    for ob in world.obstacles:
        span = obstacle_cell_span(ob, resolution_m, rows, cols)
        if span is not None:
            r0, r1, c0, c1 = span
            cells[r0 : r1 + 1, c0 : c1 + 1] = True
    grid = OccupancyGrid(resolution_m, _frozen(cells), world.arena_width_m, world.arena_height_m, 0)
    start = world_to_cell(world.robot_start.point, grid)
    if cells[start]:
        raise InvalidWorld(f"robot start cell {start} is occupied at resolution {resolution_m}")
    return grid


def inflate(grid: OccupancyGrid, buffer_cells: int) -> OccupancyGrid:
    """Occupy every cell within Chebyshev distance ``buffer_cells`` of an
    occupied cell."""
    if buffer_cells < 0:
        raise ValueError("buffer_cells must be non-negative")
    if grid.buffer_cells != 0:
        raise ValueError("inflate expects an uninflated grid")
    if buffer_cells == 0:
        return grid
    size = 2 * int(buffer_cells) + 1
    dilated = ndimage.maximum_filter(grid.cells, size=size, mode="constant", cval=False)
    return OccupancyGrid(
        grid.resolution_m, _frozen(dilated.astype(bool)), grid.width_m, grid.height_m, int(buffer_cells)
    )


def clearance_field(grid: OccupancyGrid) -> ClearanceField:
    if grid.buffer_cells != 0:
        raise ValueError("clearance is defined against the uninflated grid")
    if not grid.cells.any():
        values = np.full(grid.cells.shape, math.inf)
    else:
        values = ndimage.distance_transform_edt(~grid.cells) * grid.resolution_m
    return ClearanceField(_frozen(values), grid.resolution_m)


def world_to_cell(point: Point2D, grid: OccupancyGrid) -> CellIndex:
    x, y = point
    if not (0.0 <= x <= grid.width_m and 0.0 <= y <= grid.height_m):
        raise ValueError(f"point {point} lies outside the arena")
    col = min(int(math.floor(x / grid.resolution_m)), grid.cols - 1)
    row = min(int(math.floor(y / grid.resolution_m)), grid.rows - 1)
    return (row, col)


def cell_to_world(cell: CellIndex, grid: OccupancyGrid) -> Point2D:
    if not grid.in_bounds(cell):
        raise ValueError(f"cell {cell} lies outside the {grid.rows}x{grid.cols} grid")
    row, col = cell
    return ((col + 0.5) * grid.resolution_m, (row + 0.5) * grid.resolution_m)
