"""Decision-layer protocol: prompt construction, strict JSON parsing, and
the deterministic rule oracle that stands in for a language model."""

from __future__ import annotations

import enum
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from typing import Protocol

from scipy import ndimage

from semnav.errors import (
    BufferNotAllowed,
    IndexOutOfRange,
    MalformedJson,
    MultipleObjects,
    NoPathError,
    NoRuleMatched,
    OutOfArena,
    UnknownMode,
)
from semnav.grid import CellIndex, Goal, OccupancyGrid, Point2D, WorldModel, build_grid, cell_to_world, inflate
from semnav.planner import PathCandidate, downsample, plan_leg

DECISION_MODE = "candidate_selection"
DEFAULT_ALLOWED_BUFFERS = (0, 20)
MAX_RESPONSE_CHARS = 65536


class StageKind(str, enum.Enum):
    RESOURCE_COLLECTION = "resource_collection"
    FINAL_NAVIGATION = "final_navigation"
    RAW_PLANNING = "raw_planning"


class Schema(str, enum.Enum):
    CANDIDATE_SELECTION = "candidate_selection"
    WAYPOINT_LIST = "waypoint_list"


_BUFFER_RULE = (
    "if the path is direct with minimal obstacles, set buffer = {low}; "
    "if it requires turns or obstacle avoidance, set buffer = {high}."
)

RESOURCE_INSTRUCTION = (
    "Robot navigation task, first stage: reach the resource. {goal_count} goals are reachable from the "
    "current position. The resource goal is the one with a single skinny obstacle near it; ignore the "
    "other goals for this stage. Use the candidate metrics and obstacle descriptions below to choose "
    "the candidate that ends at the resource goal. Buffer rule: " + _BUFFER_RULE
)

FINAL_INSTRUCTION = (
    "Robot navigation task, final stage: reach the final goal while maintaining safe clearance from "
    "obstacles. Choose the candidate that is safest given the metrics and any context below. "
    "Buffer rule: " + _BUFFER_RULE
)

RAW_INSTRUCTION = (
    "Robot navigation task: propose a route from the start to the goal that keeps the robot body clear "
    "of every obstacle box listed in the payload. Coordinates are meters from the lower-left corner."
)

_SELECTION_FORMAT = (
    'Reply with exactly one JSON object of the form {"mode":"candidate_selection", '
    '"selected_candidate":<index>, "buffer":<value>} and no other fields.'
)

_WAYPOINT_FORMAT = (
    "Reply with a JSON array of [x, y] waypoints in meters that ends at the goal, "
    "e.g. [[0.2, 0.3], [0.5, 0.8]]."
)

_DEFAULT_INSTRUCTIONS = {
    StageKind.RESOURCE_COLLECTION: RESOURCE_INSTRUCTION,
    StageKind.FINAL_NAVIGATION: FINAL_INSTRUCTION,
    StageKind.RAW_PLANNING: RAW_INSTRUCTION,
}


@dataclass(frozen=True)
class MissionStage:
    kind: StageKind
    instruction_text: str = ""
    semantic_cues: tuple[str, ...] = ()
    goal_labels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", StageKind(self.kind))
        object.__setattr__(self, "semantic_cues", tuple(self.semantic_cues))
        if not self.instruction_text:
            object.__setattr__(self, "instruction_text", _DEFAULT_INSTRUCTIONS[self.kind])
        if not self.instruction_text.strip():
            raise ValueError("instruction_text must be non-empty")


@dataclass(frozen=True)
class PromptDoc:
    system_text: str
    payload: str
    expected_schema: Schema

    @property
    def text(self) -> str:
        return f"{self.system_text}\n\n{self.payload}"

    @property
    def hash(self) -> str:
        return prompt_hash(self.text)


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Decision:
    selected_candidate: int
    buffer: int
    mode: str = DECISION_MODE

    def to_json(self) -> str:
        return json.dumps(
            {"mode": self.mode, "selected_candidate": self.selected_candidate, "buffer": self.buffer}
        )


@dataclass(frozen=True)
class WaypointPlan:
    waypoints: tuple[Point2D, ...]

    def to_json(self) -> str:
        return json.dumps([[x, y] for x, y in self.waypoints])


# -- prompts ------------------------------------------------------------------


def _format_instruction(stage: MissionStage, goal_count: int, allowed) -> str:
    low, high = min(allowed), max(allowed)
    return stage.instruction_text.format(goal_count=goal_count, low=low, high=high)


def build_selection_prompt(
    stage: MissionStage,
    candidates: list[PathCandidate],
    allowed_buffers=DEFAULT_ALLOWED_BUFFERS,
) -> PromptDoc:
    if not candidates:
        raise ValueError("selection prompt needs at least one candidate")
    if stage.kind is StageKind.RAW_PLANNING:
        raise ValueError("raw planning stages do not select candidates")
    goal_count = len({c.goal_ref for c in candidates})
    lines = [_format_instruction(stage, goal_count, allowed_buffers)]
    if stage.semantic_cues:
        lines.append("")
        lines.append("Context:")
        lines.extend(f"- {cue}" for cue in stage.semantic_cues)
    lines.append("")
    lines.append("Candidate descriptions:")
    for cand in candidates:
        m = cand.metrics
        turns = "1 turn" if m.turn_count == 1 else f"{m.turn_count} turns"
        desc = "; ".join(m.descriptors) if m.descriptors else "no obstacles near the goal"
        lines.append(f"- candidate {cand.index}: computed with buffer {cand.buffer_used}, {turns}; {desc}")
    lines.append("")
    lines.append(_SELECTION_FORMAT)
    payload = json.dumps({"candidate_paths": [c.to_payload() for c in candidates]}, indent=2)
    return PromptDoc("\n".join(lines), payload, Schema.CANDIDATE_SELECTION)


def obstacle_boxes(grid: OccupancyGrid) -> list[dict]:
    """Bounding boxes (meters) of 8-connected occupied regions, row-major order."""
    labels, _ = ndimage.label(grid.cells, structure=[[1, 1, 1], [1, 1, 1], [1, 1, 1]])
    res = grid.resolution_m
    boxes = []
    for sl in ndimage.find_objects(labels):
        rows, cols = sl
        boxes.append(
            {
                "x_min": round(cols.start * res, 6),
                "y_min": round(rows.start * res, 6),
                "x_max": round(cols.stop * res, 6),
                "y_max": round(rows.stop * res, 6),
            }
        )
    return boxes


def build_raw_planning_prompt(
    grid: OccupancyGrid,
    start: CellIndex,
    goal: CellIndex,
    stage: MissionStage | None = None,
) -> PromptDoc:
    stage = stage or MissionStage(StageKind.RAW_PLANNING)
    sx, sy = cell_to_world(start, grid)
    gx, gy = cell_to_world(goal, grid)
    payload = {
        "arena": {"width_m": grid.width_m, "height_m": grid.height_m},
        "obstacles": obstacle_boxes(grid),
        "start": [round(sx, 6), round(sy, 6)],
        "goal": [round(gx, 6), round(gy, 6)],
    }
    lines = [stage.instruction_text]
    if stage.semantic_cues:
        lines.append("")
        lines.extend(f"- {cue}" for cue in stage.semantic_cues)
    lines.append("")
    lines.append(_WAYPOINT_FORMAT)
    return PromptDoc("\n".join(lines), json.dumps(payload, indent=2), Schema.WAYPOINT_LIST)


# -- parsing ------------------------------------------------------------------


def _unwrap_string(text: str) -> str:
    # responses sometimes arrive as a JSON string literal wrapping the object
    stripped = text.strip()
    if stripped.startswith('"'):
        try:
            inner = json.loads(stripped)
        except (ValueError, RecursionError):
            return text
        if isinstance(inner, str):
            return inner
    return text


_STARTS = {"{": re.compile(r"\{(?=\s*[\"}])"), "[": re.compile(r"\[")}


def _scan_json(text: str, opener: str) -> list:
    """Top-level JSON values starting with ``opener``, in order."""
    decoder = json.JSONDecoder()
    found = []
    end = 0
    for m in _STARTS[opener].finditer(text):
        i = m.start()
        if i < end:
            continue
        try:
            value, end = decoder.raw_decode(text, i)
        except ValueError:
            continue
        except RecursionError as exc:
            raise MalformedJson("JSON nesting too deep") from exc
        found.append(value)
    return found


def _check_size(text) -> str:
    if not isinstance(text, str):
        raise MalformedJson(f"expected text, got {type(text).__name__}")
    if len(text) > MAX_RESPONSE_CHARS:
        raise MalformedJson(f"response of {len(text)} characters exceeds {MAX_RESPONSE_CHARS}")
    return text


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def parse_decision(
    text: str,
    candidate_count: int,
    allowed_buffers=DEFAULT_ALLOWED_BUFFERS,
) -> Decision:
    """Parse one selection decision. Every failure is a :class:`ParseError`
    subclass, so callers can re-query on any of them."""
    _check_size(text)
    objects = [o for o in _scan_json(_unwrap_string(text), "{") if isinstance(o, dict)]
    if not objects:
        raise MalformedJson("no JSON object found")
    if len(objects) > 1:
        raise MultipleObjects(f"{len(objects)} JSON objects found")
    obj = objects[0]
    if obj.get("mode") != DECISION_MODE:
        raise UnknownMode(f"mode {obj.get('mode')!r}")
    index = obj.get("selected_candidate")
    buffer = obj.get("buffer")
    if not _is_int(index):
        raise MalformedJson(f"selected_candidate must be an integer, got {index!r}")
    if not _is_int(buffer):
        raise MalformedJson(f"buffer must be an integer, got {buffer!r}")
    if not 0 <= index < candidate_count:
        raise IndexOutOfRange(f"candidate {index} not in [0, {candidate_count})")
    if buffer not in set(allowed_buffers):
        raise BufferNotAllowed(f"buffer {buffer} not in {sorted(allowed_buffers)}")
    return Decision(index, buffer)


def _as_waypoints(value):
    if isinstance(value, dict):
        value = value.get("waypoints")
    if not isinstance(value, list) or not value:
        return None
    pts = []
    for item in value:
        if not (isinstance(item, list) and len(item) == 2):
            return None
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in item):
            return None
        pts.append((float(item[0]), float(item[1])))
    return pts


def parse_waypoints(text: str, world: WorldModel) -> WaypointPlan:
    body = _unwrap_string(_check_size(text))
    pts = None
    for value in _scan_json(body, "[") + _scan_json(body, "{"):
        pts = _as_waypoints(value)
        if pts is not None:
            break
    if pts is None:
        raise MalformedJson("no JSON array of [x, y] pairs found")
    for x, y in pts:
        if not (math.isfinite(x) and math.isfinite(y)):
            raise MalformedJson(f"non-finite waypoint ({x}, {y})")
        if not world.contains((x, y)):
            raise OutOfArena(f"waypoint ({x}, {y}) outside {world.arena_width_m} x {world.arena_height_m} arena")
    return WaypointPlan(tuple(pts))


# -- rule oracle ----------------------------------------------------------------


@dataclass(frozen=True)
class OracleConfig:
    turn_threshold: int = 2
    clearance_threshold_m: float = 0.05
    low_buffer: int = 0
    high_buffer: int = 20
    resource_marker: str = "single skinny obstacle"
    toxic_keywords: tuple[str, ...] = ("toxic",)
    battery_keywords: tuple[str, ...] = ("battery", "charging")
    crowded_keywords: tuple[str, ...] = ("crowd",)
    # extra clearance (cells) the raw planner keeps beyond the robot radius
    raw_margin_cells: int = 5


def _cue_kind(cues, rules: OracleConfig) -> str | None:
    text = " ".join(cues).lower()
    for kind, words in (
        ("toxic", rules.toxic_keywords),
        ("battery", rules.battery_keywords),
        ("crowded", rules.crowded_keywords),
    ):
        if any(w in text for w in words):
            return kind
    return None


def _mentions(cand: PathCandidate, words) -> bool:
    return any(w in d.lower() for d in cand.metrics.descriptors for w in words)


def _pick_goal(stage: MissionStage, by_goal: dict[Goal, list[PathCandidate]], rules: OracleConfig) -> Goal:
    base = {g: cands[0] for g, cands in by_goal.items()}

    def shortest(goals):
        return min(goals, key=lambda g: (base[g].metrics.path_length, base[g].index))

    if stage.kind is StageKind.RESOURCE_COLLECTION:
        marker = rules.resource_marker.lower()
        hits = [g for g, c in base.items() if any(marker in d.lower() for d in c.metrics.descriptors)]
        if len(hits) == 1:
            return hits[0]
        raise NoRuleMatched(f"{len(hits)} goals carry the resource marker")

    kind = _cue_kind(stage.semantic_cues, rules)
    if kind == "toxic":
        clean = [g for g, c in base.items() if not _mentions(c, rules.toxic_keywords)]
        if clean and len(clean) < len(base):
            return shortest(clean)
        raise NoRuleMatched("toxic cue does not separate the goals")
    if kind == "battery":
        hits = [g for g, c in base.items() if _mentions(c, rules.battery_keywords)]
        if hits:
            return shortest(hits)
        raise NoRuleMatched("no goal has a battery obstacle nearby")
    if kind == "crowded":
        ranked = sorted(base, key=lambda g: (base[g].metrics.near_goal_count, base[g].index))
        if len(ranked) == 1 or base[ranked[0]].metrics.near_goal_count < base[ranked[1]].metrics.near_goal_count:
            return ranked[0]
        raise NoRuleMatched("crowded cue does not separate the goals")
    if len(base) == 1:
        return next(iter(base))
    raise NoRuleMatched("no cue distinguishes the candidate goals")


def buffer_for(cand: PathCandidate, rules: OracleConfig) -> int:
    m = cand.metrics
    risky = (
        m.turn_count >= rules.turn_threshold
        or m.obstacle_count >= 1
        or m.min_clearance < rules.clearance_threshold_m
    )
    return rules.high_buffer if risky else rules.low_buffer


def oracle_decide(
    stage: MissionStage,
    candidates: list[PathCandidate],
    rules: OracleConfig = OracleConfig(),
) -> Decision:
    """Deterministic stand-in for the language model's selection."""
    if not candidates:
        raise ValueError("oracle needs at least one candidate")
    by_goal: dict[Goal, list[PathCandidate]] = {}
    for cand in candidates:
        by_goal.setdefault(cand.goal_ref, []).append(cand)
    for cands in by_goal.values():
        cands.sort(key=lambda c: (c.buffer_used, c.index))
    goal = _pick_goal(stage, by_goal, rules)
    base = by_goal[goal][0]
    buffer = buffer_for(base, rules)
    chosen = next((c for c in by_goal[goal] if c.buffer_used == buffer), base)
    return Decision(chosen.index, buffer)


def oracle_plan(
    world: WorldModel,
    start: Point2D,
    goal: Goal,
    resolution_m: float,
    rules: OracleConfig = OracleConfig(),
) -> WaypointPlan:
    """Waypoints from A* on a grid inflated past the robot radius."""
    raw = build_grid(world, resolution_m)
    body = math.ceil(world.robot_radius_m / resolution_m - 1e-9)
    for margin in range(rules.raw_margin_cells, -1, -1):
        try:
            path = plan_leg(world, start, goal, inflate(raw, body + margin))
        except NoPathError:
            continue
        return WaypointPlan(tuple(downsample(path)[1:]) or (goal.position,))
    raise NoRuleMatched("no collision-free route at any margin")


# -- providers ----------------------------------------------------------------


@dataclass(frozen=True)
class Query:
    """Everything a provider may look at. Remote providers only see ``prompt``."""

    prompt: PromptDoc
    stage: MissionStage
    candidates: tuple[PathCandidate, ...] = ()
    world: WorldModel | None = None
    start: Point2D | None = None
    goal: Goal | None = None
    resolution_m: float = 0.01


@dataclass(frozen=True)
class Reply:
    text: str
    latency_s: float = 0.0


class DecisionProvider(Protocol):
    kind: str

    def respond(self, query: Query) -> Reply: ...


@dataclass
class OracleProvider:
    """Rule-based provider. Reports zero latency: it is not a remote model."""

    rules: OracleConfig = field(default_factory=OracleConfig)
    kind: str = "oracle"

    def respond(self, query: Query) -> Reply:
        if query.stage.kind is StageKind.RAW_PLANNING:
            plan = oracle_plan(query.world, query.start, query.goal, query.resolution_m, self.rules)
            return Reply(plan.to_json())
        return Reply(oracle_decide(query.stage, list(query.candidates), self.rules).to_json())
