"""Debug renderings of worlds and paths."""

from __future__ import annotations

import numpy as np

from semnav.executor import supercover_cells
from semnav.grid import DEFAULT_RESOLUTION_M, WorldModel, build_grid, world_to_cell
from semnav.planner import Path

FREE, OBSTACLE, START, GOAL = ".", "#", "S", "G"
PATH_GLYPHS = "0123456789"

_PGM_LEVELS = {FREE: 255, OBSTACLE: 0, START: 64, GOAL: 64}
_PGM_PATH = 160


def _path_cells(path, grid) -> list[tuple[int, int]]:
    if isinstance(path, Path):
        return list(path.cells)
    pts = [tuple(p) for p in path]
    cells: list[tuple[int, int]] = []
    for a, b in zip(pts, pts[1:]) if len(pts) > 1 else [(pts[0], pts[0])]:
        cells.extend((int(r), int(c)) for r, c in supercover_cells(a, b, grid))
    return cells


def _canvas(world: WorldModel, paths, resolution_m: float) -> np.ndarray:
    grid = build_grid(world, resolution_m)
    canvas = np.full(grid.cells.shape, FREE, dtype="<U1")
    canvas[grid.cells] = OBSTACLE
    for k, path in enumerate(paths):
        glyph = PATH_GLYPHS[k % len(PATH_GLYPHS)]
        for r, c in _path_cells(path, grid):
            if canvas[r, c] == FREE:
                canvas[r, c] = glyph
    for goal in world.goals:
        canvas[world_to_cell(goal.position, grid)] = GOAL
    canvas[world_to_cell(world.robot_start.point, grid)] = START
    return canvas


def render_world(world: WorldModel, paths=(), fmt: str = "ascii", resolution_m: float = DEFAULT_RESOLUTION_M):
    """ASCII text (one character per cell, north up) or a binary PGM image.
    Path ``k`` is drawn with glyph ``k % 10`` and never over an obstacle."""
    canvas = _canvas(world, list(paths), resolution_m)
    north_up = canvas[::-1]
    if fmt == "ascii":
        border = "+" + "-" * north_up.shape[1] + "+"
        body = ["|" + "".join(row) + "|" for row in north_up]
        return "\n".join([border, *body, border]) + "\n"
    if fmt in ("pgm", "image"):
        levels = np.full(north_up.shape, _PGM_PATH, dtype=np.uint8)
        for glyph, value in _PGM_LEVELS.items():
            levels[north_up == glyph] = value
        rows, cols = levels.shape
        return f"P5\n{cols} {rows}\n255\n".encode("ascii") + levels.tobytes()
    raise ValueError(f"unknown render format {fmt!r}")
