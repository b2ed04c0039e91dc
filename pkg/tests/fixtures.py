"""Worlds and providers shared by several test modules."""

from __future__ import annotations

from dataclasses import dataclass, field

from semnav.grid import Goal, Obstacle, Pose2D, WorldModel
from semnav.semantic import Query, Reply


def narrow_gap_world() -> WorldModel:
    """A 0.2 m corridor between two 0.5 m walls. A disc of radius 0.05
    on the centre line has 5 cm to spare on each side; with a 20-cell
    buffer the corridor closes and the route goes around the walls."""
    walls = (
        Obstacle((0.75, 0.3525), 0.5, 0.105, "lower wall"),
        Obstacle((0.75, 0.6575), 0.5, 0.105, "upper wall"),
    )
    return WorldModel(1.5, 1.0, walls, (Goal((1.4, 0.505), "far"),), Pose2D(0.1, 0.505), 0.05)


def corridor_world(gap_cells: int = 10, res: float = 0.01) -> WorldModel:
    """A full-height wall with a single opening ``gap_cells`` wide."""
    gap = gap_cells * res
    lo, hi = 0.5 - gap / 2, 0.5 + gap / 2
    walls = (
        Obstacle((0.5, lo / 2), 0.1, lo, "wall south"),
        Obstacle((0.5, (hi + 1.0) / 2), 0.1, 1.0 - hi, "wall north"),
    )
    return WorldModel(1.0, 1.0, walls, (Goal((0.9, 0.5), "goal"),), Pose2D(0.1, 0.5), 0.03)


@dataclass
class ScriptedProvider:
    """Returns canned texts in order, repeating the last one; records the
    queries it saw."""

    texts: list[str]
    kind: str = "scripted"
    queries: list[Query] = field(default_factory=list)

    def respond(self, query: Query) -> Reply:
        self.queries.append(query)
        i = min(len(self.queries) - 1, len(self.texts) - 1)
        return Reply(self.texts[i], 0.125)
