"""Scenario files: loading, validation with line diagnostics, and jitter."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path as FsPath

import numpy as np
import yaml

from semnav.errors import InvalidWorld, ScenarioError
from semnav.executor import ANY_GOAL, ExecutorConfig, MissionSpec
from semnav.grid import Goal, Obstacle, Pose2D, WorldModel, build_grid, world_to_cell
from semnav.planner import PlannerConfig
from semnav.semantic import MissionStage, StageKind

BUILTIN_NAMES = ("course1", "course2", "course3", "toxic", "battery", "crowded", "sequential")
FIXTURE_NAMES = ("reference",)
_MAX_JITTER_DRAWS = 100


@dataclass(frozen=True)
class JitterBounds:
    obstacles_m: float = 0.0
    goals_m: float = 0.0


@dataclass(frozen=True)
class Scenario:
    name: str
    world: WorldModel
    mission: MissionSpec
    correct_goal_label: str
    trials_default: int = 10
    jitter: JitterBounds = field(default_factory=JitterBounds)
    config: ExecutorConfig = field(default_factory=ExecutorConfig)
    description: str = ""

    def fingerprint(self) -> dict:
        """Plain data covering everything that can change a run's outcome."""
        return {
            "name": self.name,
            "mission": asdict(self.mission),
            "correct_goal": self.correct_goal_label,
            "jitter": asdict(self.jitter),
            "config": asdict(self.config),
        }

    def with_overrides(self, resolution_m: float | None = None, buffers=None) -> Scenario:
        mission = self.mission
        if resolution_m is not None:
            mission = replace(mission, resolution_m=float(resolution_m))
        if buffers is not None:
            mission = replace(mission, buffers_offered=tuple(int(b) for b in buffers))
        return replace(self, mission=mission)

    def with_world(self, world: WorldModel) -> Scenario:
        return replace(self, world=world, mission=replace(self.mission, world=world))


# -- YAML walking with source marks ----------------------------------------------


class _Reader:
    def __init__(self, source: str) -> None:
        self.source = source

    def fail(self, node, path: str, message: str):
        line = node.start_mark.line + 1 if node is not None else 1
        raise ScenarioError(f"{self.source}:{line}: field '{path}': {message}")

    def mapping(self, node, path: str) -> dict:
        if not isinstance(node, yaml.MappingNode):
            self.fail(node, path, "expected a mapping")
        out = {}
        for key, value in node.value:
            out[key.value] = value
        return out

    def get(self, mapping: dict, key: str, parent, path: str, required: bool = True):
        if key not in mapping:
            if required:
                self.fail(parent, f"{path}.{key}" if path else key, "missing required field")
            return None
        return mapping[key]

    def seq(self, node, path: str) -> list:
        if not isinstance(node, yaml.SequenceNode):
            self.fail(node, path, "expected a list")
        return list(node.value)

    def scalar(self, node, path: str):
        if not isinstance(node, yaml.ScalarNode):
            self.fail(node, path, "expected a scalar")
        return yaml.safe_load(yaml.serialize(node))

    def number(self, node, path: str, *, positive: bool = False, non_negative: bool = False) -> float:
        value = self.scalar(node, path)
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            self.fail(node, path, f"expected a finite number, got {value!r}")
        if positive and not value > 0:
            self.fail(node, path, "must be positive")
        if non_negative and value < 0:
            self.fail(node, path, "must be non-negative")
        return float(value)

    def integer(self, node, path: str, minimum: int = 0) -> int:
        value = self.scalar(node, path)
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(node, path, f"expected an integer, got {value!r}")
        if value < minimum:
            self.fail(node, path, f"must be at least {minimum}")
        return value

    def text(self, node, path: str) -> str:
        value = self.scalar(node, path)
        if not isinstance(value, str) or not value.strip():
            self.fail(node, path, "expected non-empty text")
        return value

    def pair(self, node, path: str, positive: bool = False) -> tuple[float, float]:
        items = self.seq(node, path)
        if len(items) != 2:
            self.fail(node, path, "expected [x, y]")
        return (
            self.number(items[0], f"{path}[0]", positive=positive),
            self.number(items[1], f"{path}[1]", positive=positive),
        )


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    r = _Reader(source)
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ScenarioError(f"{source}:{line}: not valid YAML: {exc}") from exc
    if root is None:
        raise ScenarioError(f"{source}:1: empty scenario file")
    top = r.mapping(root, "<root>")

    name = r.text(r.get(top, "name", root, ""), "name")
    arena_node = r.get(top, "arena", root, "")
    arena = r.mapping(arena_node, "arena")
    width = r.number(r.get(arena, "width_m", arena_node, "arena"), "arena.width_m", positive=True)
    height = r.number(r.get(arena, "height_m", arena_node, "arena"), "arena.height_m", positive=True)
    res_node = r.get(top, "resolution_m", root, "", required=False)
    resolution = 0.01 if res_node is None else r.number(res_node, "resolution_m", positive=True)

    robot_node = r.get(top, "robot", root, "")
    robot = r.mapping(robot_node, "robot")
    start = r.pair(r.get(robot, "start", robot_node, "robot"), "robot.start")
    heading_node = r.get(robot, "heading_rad", robot_node, "robot", required=False)
    heading = 0.0 if heading_node is None else r.number(heading_node, "robot.heading_rad")
    radius_node = r.get(robot, "radius_m", robot_node, "robot", required=False)
    radius = 0.05 if radius_node is None else r.number(radius_node, "robot.radius_m", non_negative=True)

    obstacles = []
    obs_node = r.get(top, "obstacles", root, "", required=False)
    for i, node in enumerate(r.seq(obs_node, "obstacles") if obs_node is not None else []):
        path = f"obstacles[{i}]"
        m = r.mapping(node, path)
        center = r.pair(r.get(m, "center", node, path), f"{path}.center")
        size = r.pair(r.get(m, "size", node, path), f"{path}.size", positive=True)
        label_node = r.get(m, "label", node, path, required=False)
        label = None if label_node is None else r.text(label_node, f"{path}.label")
        obstacles.append(Obstacle(center, size[0], size[1], label))

    goals_node = r.get(top, "goals", root, "")
    goal_items = r.seq(goals_node, "goals")
    if not goal_items:
        r.fail(goals_node, "goals", "at least one goal is required")
    goals = []
    for i, node in enumerate(goal_items):
        path = f"goals[{i}]"
        m = r.mapping(node, path)
        position = r.pair(r.get(m, "position", node, path), f"{path}.position")
        label = r.text(r.get(m, "label", node, path), f"{path}.label")
        goals.append(Goal(position, label))
    labels = [g.label for g in goals]
    if len(set(labels)) != len(labels):
        r.fail(goals_node, "goals", "goal labels must be unique")

    try:
        world = WorldModel(width, height, obstacles, goals, Pose2D(start[0], start[1], heading), radius)
        build_grid(world, resolution)
    except (InvalidWorld, ValueError) as exc:
        r.fail(root, "<world>", str(exc))

    mission_node = r.get(top, "mission", root, "")
    mission = r.mapping(mission_node, "mission")
    buffers_node = r.get(mission, "buffers", mission_node, "mission", required=False)
    buffers = (0,)
    if buffers_node is not None:
        buffers = tuple(r.integer(b, f"mission.buffers[{i}]") for i, b in enumerate(r.seq(buffers_node, "mission.buffers")))
        if not buffers:
            r.fail(buffers_node, "mission.buffers", "at least one buffer is required")
    stages_node = r.get(mission, "stages", mission_node, "mission")
    stages = []
    for i, node in enumerate(r.seq(stages_node, "mission.stages")):
        path = f"mission.stages[{i}]"
        m = r.mapping(node, path)
        kind_node = r.get(m, "kind", node, path)
        kind = r.text(kind_node, f"{path}.kind")
        try:
            kind = StageKind(kind)
        except ValueError:
            r.fail(kind_node, f"{path}.kind", f"unknown stage kind {kind!r}; expected one of {[k.value for k in StageKind]}")
        instr_node = r.get(m, "instruction", node, path, required=False)
        instruction = "" if instr_node is None else r.text(instr_node, f"{path}.instruction")
        cues_node = r.get(m, "cues", node, path, required=False)
        cues = () if cues_node is None else tuple(
            r.text(c, f"{path}.cues[{j}]") for j, c in enumerate(r.seq(cues_node, f"{path}.cues"))
        )
        gl_node = r.get(m, "goal_labels", node, path, required=False)
        goal_labels = None
        if gl_node is not None:
            goal_labels = tuple(r.text(g, f"{path}.goal_labels[{j}]") for j, g in enumerate(r.seq(gl_node, f"{path}.goal_labels")))
            unknown = set(goal_labels) - set(labels)
            if unknown:
                r.fail(gl_node, f"{path}.goal_labels", f"unknown goal labels {sorted(unknown)}")
        stages.append(MissionStage(kind, instruction, cues, goal_labels))
    try:
        spec = MissionSpec(tuple(stages), world, buffers, resolution)
    except ValueError as exc:
        r.fail(stages_node, "mission.stages", str(exc))
    if stages[0].kind is StageKind.RAW_PLANNING and stages[0].goal_labels is None and len(goals) != 1:
        r.fail(stages_node, "mission.stages", "raw planning needs exactly one goal or explicit goal_labels")

    correct_node = r.get(top, "correct_goal", root, "")
    correct = r.text(correct_node, "correct_goal")
    if correct != ANY_GOAL and correct not in labels:
        r.fail(correct_node, "correct_goal", f"{correct!r} is not a goal label (or 'any')")

    trials_node = r.get(top, "trials", root, "", required=False)
    trials = 10 if trials_node is None else r.integer(trials_node, "trials", minimum=1)

    jitter = JitterBounds()
    jitter_node = r.get(top, "jitter", root, "", required=False)
    if jitter_node is not None:
        jm = r.mapping(jitter_node, "jitter")
        o = r.get(jm, "obstacles_m", jitter_node, "jitter", required=False)
        g = r.get(jm, "goals_m", jitter_node, "jitter", required=False)
        jitter = JitterBounds(
            0.0 if o is None else r.number(o, "jitter.obstacles_m", non_negative=True),
            0.0 if g is None else r.number(g, "jitter.goals_m", non_negative=True),
        )

    planner = PlannerConfig()
    planner_node = r.get(top, "planner", root, "", required=False)
    if planner_node is not None:
        pm = r.mapping(planner_node, "planner")
        overrides = {}
        for key in ("proximity_radius_m", "descriptor_radius_m", "skinny_ratio"):
            if key in pm:
                overrides[key] = r.number(pm[key], f"planner.{key}", positive=True)
        if "crowd_count" in pm:
            overrides["crowd_count"] = r.integer(pm["crowd_count"], "planner.crowd_count", minimum=1)
        unknown = set(pm) - set(overrides)
        if unknown:
            r.fail(planner_node, "planner", f"unknown keys {sorted(unknown)}")
        planner = replace(planner, **overrides)

    desc_node = r.get(top, "description", root, "", required=False)
    description = "" if desc_node is None else r.text(desc_node, "description")
    return Scenario(
        name, world, spec, correct, trials, jitter, ExecutorConfig(planner=planner), description
    )


def load_scenario(path) -> Scenario:
    path = FsPath(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"{path}: cannot read scenario: {exc}") from exc
    return parse_scenario(text, str(path))


def builtin(name: str) -> Scenario:
    if name not in BUILTIN_NAMES + FIXTURE_NAMES:
        raise KeyError(f"unknown builtin scenario {name!r}; known: {', '.join(BUILTIN_NAMES + FIXTURE_NAMES)}")
    ref = resources.files("semnav.harness").joinpath("scenarios", f"{name}.yaml")
    return parse_scenario(ref.read_text(encoding="utf-8"), f"builtin:{name}")


def resolve(name_or_path: str) -> Scenario:
    if name_or_path in BUILTIN_NAMES + FIXTURE_NAMES:
        return builtin(name_or_path)
    return load_scenario(name_or_path)


# -- jitter -------------------------------------------------------------------------


def _world_ok(world: WorldModel, resolution_m: float) -> bool:
    try:
        world.validate()
        grid = build_grid(world, resolution_m)
    except (InvalidWorld, ValueError):
        return False
    for goal in world.goals:
        if grid.cells[world_to_cell(goal.position, grid)]:
            return False
        if any(ob.distance_to(goal.position) == 0.0 for ob in world.obstacles):
            return False
    return True


def jittered_world(scenario: Scenario, rng: np.random.Generator) -> WorldModel:
    """Perturb obstacle centers and goal positions uniformly within the
    scenario's bounds, redrawing until the world is valid."""
    base = scenario.world
    j = scenario.jitter
    if j.obstacles_m == 0.0 and j.goals_m == 0.0:
        return base
    for _ in range(_MAX_JITTER_DRAWS):
        obstacles = [
            replace(ob, center=(ob.center[0] + dx, ob.center[1] + dy))
            for ob, (dx, dy) in zip(base.obstacles, rng.uniform(-j.obstacles_m, j.obstacles_m, (len(base.obstacles), 2)))
        ]
        goals = [
            replace(g, position=(g.position[0] + dx, g.position[1] + dy))
            for g, (dx, dy) in zip(base.goals, rng.uniform(-j.goals_m, j.goals_m, (len(base.goals), 2)))
        ]
        try:
            world = replace(base, obstacles=tuple(obstacles), goals=tuple(goals))
        except InvalidWorld:
            continue
        if _world_ok(world, scenario.mission.resolution_m):
            return world
    raise ScenarioError(f"{scenario.name}: no valid jittered world in {_MAX_JITTER_DRAWS} draws")
