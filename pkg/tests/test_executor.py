from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import assume, event, given, settings
from hypothesis import strategies as st

from fixtures import ScriptedProvider, corridor_world, narrow_gap_world
from oracles import rect_distance, sampled_cells, sampled_collision, segment_rect_distance_sampled
from semnav.errors import ExhaustedTranscript, InvalidWorld, NoPathAfterBuffer, NoPathError
from semnav.executor import (
    TRIAL_SCHEMA_VERSION,
    DecisionFailed,
    ExecutorConfig,
    MissionSpec,
    NoiseConfig,
    collision_check,
    run_mission,
    run_stage,
    segment_clearance,
    simulate_follow,
    supercover_cells,
)
from semnav.grid import Goal, Obstacle, OccupancyGrid, Pose2D, WorldModel, build_grid, clearance_field, inflate
from semnav.harness.scenario import builtin
from semnav.llm_client import RecordingProvider, ReplayProvider, TranscriptWriter
from semnav.planner import plan_leg
from semnav.semantic import Decision, MissionStage, OracleProvider, StageKind, WaypointPlan

RES = 0.01


def decision_text(index: int, buffer: int) -> str:
    return Decision(index, buffer).to_json()


def raw_grid(cells, res=RES) -> OccupancyGrid:
    cells = np.asarray(cells, dtype=bool)
    return OccupancyGrid(res, cells, cells.shape[1] * res, cells.shape[0] * res)


def path_clearance(world, path, res=RES) -> float:
    field = clearance_field(build_grid(world, res))
    return min(field.at(c) for c in path.cells)


# -- simulate_follow -------------------------------------------------------------


class TestSimulateFollow:
    def test_safe_corridor_no_noise(self):
        w = narrow_gap_world()
        trace = simulate_follow(w, [(0.1, 0.505), (1.4, 0.505)], NoiseConfig(0.0))
        assert not trace.collided
        assert trace.final_pose.point == (1.4, 0.505)
        assert trace.distance_travelled_m == pytest.approx(1.3)

    def test_gap_narrower_than_robot(self):
        r, eps = 0.05, 1e-4
        gap = 2 * r - eps
        walls = (
            Obstacle((0.5, 0.25 - gap / 4), 0.1, 0.5 - gap / 2),
            Obstacle((0.5, 0.75 + gap / 4), 0.1, 0.5 - gap / 2),
        )
        w = WorldModel(1.0, 1.0, walls, (Goal((0.9, 0.5)),), Pose2D(0.1, 0.5), r)
        trace = simulate_follow(w, [(0.1, 0.5), (0.9, 0.5)], NoiseConfig(0.0))
        assert trace.collided
        # contact happens on entering the gap
        assert 0.45 - r - 0.005 <= trace.collision_point[0] <= 0.45 + 1e-9

    def test_exact_fit_is_contact_free(self):
        r = 0.05
        walls = (Obstacle((0.5, 0.2), 0.1, 0.2), Obstacle((0.5, 0.8), 0.1, 0.2))
        w = WorldModel(1.0, 1.0, walls, (Goal((0.9, 0.5)),), Pose2D(0.1, 0.5), r)
        # gap edges at 0.3 and 0.7 leave 0.2 > 2r
        assert not simulate_follow(w, [(0.1, 0.5), (0.9, 0.5)], NoiseConfig(0.0)).collided

    def test_trace_invariants(self):
        w = narrow_gap_world()
        for seed in range(20):
            trace = simulate_follow(w, [(0.1, 0.505), (1.4, 0.505)], NoiseConfig(0.02), seed)
            assert trace.poses[0].point == (0.1, 0.505)
            assert len(trace.poses) == len(trace.times_s)
            assert all(b >= a for a, b in zip(trace.times_s, trace.times_s[1:]))
            if trace.collided:
                assert trace.final_pose.point == trace.collision_point
            else:
                assert trace.final_pose.point == (1.4, 0.505)

    def test_seeded(self):
        w = narrow_gap_world()
        a = simulate_follow(w, [(0.1, 0.505), (1.4, 0.505)], NoiseConfig(0.02), 11)
        b = simulate_follow(w, [(0.1, 0.505), (1.4, 0.505)], NoiseConfig(0.02), 11)
        c = simulate_follow(w, [(0.1, 0.505), (1.4, 0.505)], NoiseConfig(0.02), 12)
        assert a == b
        assert a != c

    def test_start_in_contact(self):
        w = WorldModel(1.0, 1.0, (Obstacle((0.5, 0.5), 0.1, 0.1),), (), Pose2D(0.42, 0.5), 0.05)
        trace = simulate_follow(w, [(0.42, 0.5), (0.1, 0.5)], NoiseConfig(0.0))
        assert trace.collided and trace.distance_travelled_m == 0.0

    def test_empty_path_rejected(self):
        with pytest.raises(ValueError):
            simulate_follow(narrow_gap_world(), [])

    def test_time_follows_speed(self):
        trace = simulate_follow(narrow_gap_world(), [(0.1, 0.505), (1.4, 0.505)], NoiseConfig(0.0), speed_mps=0.1)
        assert trace.times_s[-1] == pytest.approx(13.0)

    def test_noise_config_validation(self):
        with pytest.raises(ValueError):
            NoiseConfig(-0.01)
        with pytest.raises(ValueError):
            NoiseConfig(0.01, 0.0)

    def test_narrow_gap_risk(self):
        # a derived Monte-Carlo check: 5 cm spare each side, sigma 2 cm
        w = narrow_gap_world()
        grid = build_grid(w, RES)
        hits = {}
        for b in (0, 20):
            path = plan_leg(w, w.robot_start.point, w.goals[0], inflate(grid, b))
            hits[b] = sum(simulate_follow(w, path, NoiseConfig(0.02), s).collided for s in range(100))
        assert hits[0] > 50
        assert hits[20] == 0


class TestSegmentClearance:
    @settings(max_examples=40, deadline=None)
    @given(
        st.tuples(st.floats(0, 1), st.floats(0, 1)),
        st.tuples(st.floats(0, 1), st.floats(0, 1)),
        st.tuples(st.floats(0.1, 0.9), st.floats(0.1, 0.9), st.floats(0.01, 0.3), st.floats(0.01, 0.3)),
    )
    def test_matches_sampling(self, p, q, box):
        cx, cy, w, h = box
        w, h = min(w, 2 * cx, 2 * (1 - cx)), min(h, 2 * cy, 2 * (1 - cy))
        rect = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        world = WorldModel(1.0, 1.0, (Obstacle((cx, cy), w, h),), (), Pose2D(0.0, 0.0), 0.0)
        exact = segment_clearance(world, p, q)
        n = 400
        sampled = segment_rect_distance_sampled(p, q, rect, n)
        seg = math.hypot(q[0] - p[0], q[1] - p[1])
        # sampled distance overestimates by at most half a sample spacing
        assert exact <= sampled + 1e-12
        assert sampled - exact <= seg / n + 1e-12
        assert exact <= min(rect_distance(p, rect), rect_distance(q, rect)) + 1e-12

    def test_empty_world(self):
        w = WorldModel(1.0, 1.0, (), (), Pose2D(0.5, 0.5), 0.05)
        assert segment_clearance(w, (0, 0), (1, 1)) == math.inf


# -- collision_check --------------------------------------------------------------


class TestCollisionCheck:
    def test_empty_grid_clear(self):
        g = raw_grid(np.zeros((50, 50)))
        assert collision_check([(0.05, 0.05), (0.45, 0.45), (0.05, 0.4)], g, 0.05) is None

    def test_through_obstacle_center(self):
        cells = np.zeros((50, 50), bool)
        cells[20:30, 20:30] = True
        g = raw_grid(cells)
        plan = WaypointPlan(((0.05, 0.05), (0.05, 0.45), (0.45, 0.45), (0.05, 0.05)))
        hit = collision_check(plan, g, 0.02)
        assert hit is not None
        assert hit.segment_index == 2
        assert hit.start == (0.45, 0.45)

    def test_radius_dilation(self):
        cells = np.zeros((40, 40), bool)
        cells[20, 20] = True
        g = raw_grid(cells)
        # segment along row 17 passes 3 cells from the obstacle
        seg = [(0.005, 0.175), (0.395, 0.175)]
        assert collision_check(seg, g, 0.02) is None
        assert collision_check(seg, g, 0.03) is not None
        assert collision_check(seg, g, 0.021) is not None

    def test_single_point_plan(self):
        cells = np.zeros((10, 10), bool)
        cells[5, 5] = True
        g = raw_grid(cells)
        assert collision_check([(0.055, 0.055)], g, 0.0) is not None
        assert collision_check([(0.015, 0.015)], g, 0.0) is None

    def test_empty_plan_rejected(self):
        with pytest.raises(ValueError):
            collision_check([], raw_grid(np.zeros((5, 5))), 0.0)

    def test_supercover_diagonal_corner(self):
        # a diagonal through a shared corner touches all four cells
        g = raw_grid(np.zeros((4, 4)))
        cells = {tuple(c) for c in supercover_cells((0.005, 0.005), (0.035, 0.035), g)}
        assert {(0, 0), (1, 1), (2, 2), (3, 3), (0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)} <= cells

    @settings(max_examples=150, deadline=None)
    @given(
        st.tuples(st.floats(0, 0.3), st.floats(0, 0.3)),
        st.tuples(st.floats(0, 0.3), st.floats(0, 0.3)),
    )
    def test_supercover_matches_crossing_sampler(self, p, q):
        g = raw_grid(np.zeros((30, 30)))
        mine = {tuple(map(int, c)) for c in supercover_cells(p, q, g)}
        assert mine == sampled_cells(p, q, RES, 30, 30)

    @settings(max_examples=80, deadline=None)
    @given(
        st.tuples(st.floats(0, 0.3), st.floats(0, 0.3)),
        st.tuples(st.floats(0, 0.3), st.floats(0, 0.3)),
    )
    def test_supercover_contains_plain_samples(self, p, q):
        g = raw_grid(np.zeros((30, 30)))
        mine = {tuple(map(int, c)) for c in supercover_cells(p, q, g)}
        assert sampled_cells(p, q, RES, 30, 30, crossings=False) <= mine

    def test_random_plans_match_oracle(self):
        rng = np.random.default_rng(20)
        for _ in range(20):
            n = int(rng.integers(20, 36))
            cells = rng.random((n, n)) < 0.03
            g = raw_grid(cells)
            pts = [tuple(rng.uniform(0, n * RES, 2)) for _ in range(int(rng.integers(2, 6)))]
            radius = float(rng.choice([0.0, 0.01, 0.015, 0.02]))
            hit = collision_check(pts, g, radius)
            expected = sampled_collision(pts, cells, RES, radius)
            assert (None if hit is None else hit.segment_index) == expected


# -- stages and missions -------------------------------------------------------------


@pytest.fixture(scope="module")
def reference():
    return builtin("reference")


@pytest.fixture(scope="module")
def reference_run(reference):
    return run_mission(reference.mission, OracleProvider(), 0, reference.config, reference.correct_goal_label)


class TestRunStage:
    def test_noop_replan(self, reference):
        stage = reference.mission.stages[0]
        prov = ScriptedProvider([decision_text(0, 0)])
        sr = run_stage(reference.world, stage, prov, reference.config, resolution_m=reference.mission.resolution_m)
        assert sr.replanned_with_buffer is None
        assert sr.path == prov.queries[0].candidates[0].path
        assert sr.reached_goal and sr.goal_label == "resource"
        assert sr.attempts == 1

    def test_buffer_replan_second_stage(self, reference_run, reference):
        first, second = reference_run.stage_results
        assert (second.decision.selected_candidate, second.decision.buffer) == (0, 20)
        assert second.replanned_with_buffer == 20
        assert second.reached_goal and second.goal_label == "final"
        res = reference.mission.resolution_m
        assert path_clearance(reference.world, second.path, res) >= (20 - math.sqrt(2)) * res
        # the unbuffered route to the same goal passes much closer
        grid = build_grid(reference.world, res)
        direct = plan_leg(reference.world, first.trace.final_pose.point, reference.world.goal_by_label("final"), grid)
        assert path_clearance(reference.world, direct, res) < path_clearance(reference.world, second.path, res)
        assert direct.cells != second.path.cells

    def test_second_stage_starts_at_first_end(self, reference_run):
        first, second = reference_run.stage_results
        assert second.trace.poses[0].point == first.trace.final_pose.point

    def test_narrow_corridor_buffer(self):
        w = corridor_world(10)
        stage = MissionStage(StageKind.FINAL_NAVIGATION)
        with pytest.raises(NoPathAfterBuffer):
            run_stage(w, stage, ScriptedProvider([decision_text(0, 20)]))

    def test_narrow_corridor_buffer_in_mission(self):
        w = corridor_world(10)
        spec = MissionSpec((MissionStage(StageKind.FINAL_NAVIGATION),), w)
        result = run_mission(spec, ScriptedProvider([decision_text(0, 20)]))
        assert not result.overall_success
        assert result.error.startswith("NoPathAfterBuffer")

    def test_requery_cap_on_parse_errors(self, reference):
        prov = ScriptedProvider(["no json here", '{"mode": "other"}', "[1, 2]"])
        with pytest.raises(DecisionFailed):
            run_stage(reference.world, reference.mission.stages[0], prov, reference.config)
        assert len(prov.queries) == 3

    def test_recovers_after_bad_reply(self, reference):
        prov = ScriptedProvider(["garbage", decision_text(0, 0)])
        sr = run_stage(reference.world, reference.mission.stages[0], prov, reference.config)
        assert sr.attempts == 2
        assert sr.provider_latency_s == pytest.approx(0.25)

    def test_allowed_buffers_respected(self, reference):
        prov = ScriptedProvider([decision_text(0, 5)])
        with pytest.raises(DecisionFailed):
            run_stage(reference.world, reference.mission.stages[0], prov, reference.config)

    def test_no_eligible_goals(self, reference):
        stage = MissionStage(StageKind.FINAL_NAVIGATION, goal_labels=("missing",))
        with pytest.raises(ValueError):
            run_stage(reference.world, stage, OracleProvider())


class TestRunMission:
    def test_sequential_oracle(self):
        sc = builtin("sequential")
        result = run_mission(sc.mission, OracleProvider(), 1, sc.config, sc.correct_goal_label)
        assert result.overall_success and result.semantic_compliance
        assert [sr.goal_label for sr in result.stage_results][0] == sc.correct_goal_label
        assert result.first_goal_label == sc.correct_goal_label
        assert not result.collided

    def test_stage_one_failure_skips_stage_two(self, reference):
        prov = ScriptedProvider(["not a decision"])
        result = run_mission(reference.mission, prov, 0, reference.config, reference.correct_goal_label)
        assert len(result.stage_results) == 1
        assert not result.overall_success and not result.semantic_compliance
        assert result.error.startswith("DecisionFailed")
        assert len(prov.queries) == 3

    def test_wrong_goal_not_compliant(self, reference):
        # candidate 1 in the first stage leads to the final goal; unbuffered
        # it grazes the long wall, so ask for the wide route
        prov = ScriptedProvider([decision_text(1, 20), decision_text(0, 0)])
        result = run_mission(reference.mission, prov, 0, reference.config, reference.correct_goal_label)
        assert result.first_goal_label == "final"
        assert not result.semantic_compliance

    def test_any_goal_compliance(self, reference):
        result = run_mission(reference.mission, OracleProvider(), 0, reference.config, "any")
        assert result.semantic_compliance

    def test_total_time(self, reference_run, reference):
        speed = reference.config.speed_mps
        expected = sum(sr.planned_length_m / speed + sr.provider_latency_s for sr in reference_run.stage_results)
        assert reference_run.total_time_s == pytest.approx(expected)
        assert reference_run.path_length_m == pytest.approx(sum(sr.planned_length_m for sr in reference_run.stage_results))

    def test_success_implies_every_stage(self, reference_run):
        assert reference_run.overall_success
        assert all(sr.reached_goal and not sr.trace.collided for sr in reference_run.stage_results)

    def test_reached_means_within_tolerance(self, reference_run, reference):
        for sr in reference_run.stage_results:
            goal = reference.world.goal_by_label(sr.goal_label)
            p = sr.trace.final_pose
            assert math.hypot(p.x - goal.position[0], p.y - goal.position[1]) <= reference.config.goal_tolerance_m

    def test_serialises(self, reference_run):
        data = json.loads(json.dumps(reference_run.to_dict()))
        assert data["schema"] == TRIAL_SCHEMA_VERSION
        assert [s["stage_kind"] for s in data["stages"]] == ["resource_collection", "final_navigation"]
        assert data["stages"][1]["replanned_with_buffer"] == 20

    def test_raw_planning_always_colliding(self):
        sc = builtin("course1")
        goal = sc.world.goals[0].position
        prov = ScriptedProvider([json.dumps({"waypoints": [list(goal)]})])
        result = run_mission(sc.mission, prov, 0, sc.config, sc.correct_goal_label)
        assert len(prov.queries) == 3
        assert not result.overall_success
        assert "predicted collision" in result.error

    def test_raw_planning_recovers(self):
        sc = builtin("course1")
        goal = sc.world.goals[0].position
        oracle = OracleProvider()
        good = None

        class Flaky:
            kind = "flaky"
            calls = 0

            def respond(self, query):
                nonlocal good
                Flaky.calls += 1
                if Flaky.calls == 1:
                    return ScriptedProvider([json.dumps([list(goal)])]).respond(query)
                good = oracle.respond(query)
                return good

        result = run_mission(sc.mission, Flaky(), 0, sc.config)
        assert Flaky.calls == 2
        assert result.overall_success
        assert result.stage_results[0].attempts == 2

    @pytest.mark.parametrize("name", ["course1", "course2", "course3"])
    def test_raw_planning_oracle(self, name):
        sc = builtin(name)
        result = run_mission(sc.mission, OracleProvider(), 0, sc.config, sc.correct_goal_label)
        assert result.overall_success
        sr = result.stage_results[0]
        assert isinstance(sr.decision, WaypointPlan)
        grid = build_grid(sc.world, sc.mission.resolution_m)
        assert collision_check([sc.world.robot_start.point, *sr.decision.waypoints], grid, sc.world.robot_radius_m) is None

    def test_replay_errors_propagate(self, reference):
        with pytest.raises(ExhaustedTranscript):
            run_mission(reference.mission, ReplayProvider([]), 0, reference.config)


class TestMissionSpec:
    def test_raw_planning_single_stage(self, reference):
        raw = MissionStage(StageKind.RAW_PLANNING)
        with pytest.raises(ValueError):
            MissionSpec((raw, raw), reference.world)

    def test_selection_stage_count(self, reference):
        s = MissionStage(StageKind.FINAL_NAVIGATION)
        with pytest.raises(ValueError):
            MissionSpec((), reference.world)
        with pytest.raises(ValueError):
            MissionSpec((s, s, s), reference.world)

    def test_buffers_required(self, reference):
        with pytest.raises(ValueError):
            MissionSpec((MissionStage(StageKind.FINAL_NAVIGATION),), reference.world, buffers_offered=())

    def test_executor_config(self):
        with pytest.raises(ValueError):
            ExecutorConfig(max_attempts=0)
        with pytest.raises(ValueError):
            ExecutorConfig(speed_mps=0.0)


# -- properties ------------------------------------------------------------------------


obstacle_st = st.tuples(
    st.floats(0.02, 0.98), st.floats(0.02, 0.98), st.floats(0.01, 0.3), st.floats(0.01, 0.3)
)


def _world(obstacles, start, goal):
    obs = []
    for cx, cy, w, h in obstacles:
        w, h = min(w, 2 * min(cx, 1 - cx)), min(h, 2 * min(cy, 1 - cy))
        assume(w >= RES and h >= RES)
        obs.append(Obstacle((cx, cy), w, h))
    try:
        return WorldModel(1.0, 1.0, tuple(obs), (Goal(goal, "g"),), Pose2D(*start), 0.05)
    except InvalidWorld:
        assume(False)


class TestProperties:
    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(obstacle_st, min_size=1, max_size=4),
        st.tuples(st.integers(0, 99), st.integers(0, 99)),
        st.tuples(st.integers(0, 99), st.integers(0, 99)),
        st.integers(5, 8),
    )
    def test_noise_free_completeness_cell_centres(self, obstacles, s, g, buffer):
        start = ((s[1] + 0.5) * RES, (s[0] + 0.5) * RES)
        goal = ((g[1] + 0.5) * RES, (g[0] + 0.5) * RES)
        w = _world(obstacles, start, goal)
        try:
            path = plan_leg(w, start, w.goals[0], inflate(build_grid(w, RES), buffer))
        except (NoPathError, InvalidWorld):
            event("no path")
            return
        assert not simulate_follow(w, path, NoiseConfig(0.0)).collided

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(obstacle_st, min_size=1, max_size=4),
        st.tuples(st.floats(0, 1), st.floats(0, 1)),
        st.tuples(st.floats(0, 1), st.floats(0, 1)),
    )
    def test_noise_free_completeness_exact_endpoints(self, obstacles, start, goal):
        # exact endpoints sit up to half a cell off the centre line, which
        # one extra buffer cell absorbs
        w = _world(obstacles, start, goal)
        try:
            path = plan_leg(w, start, w.goals[0], inflate(build_grid(w, RES), 6))
        except (NoPathError, InvalidWorld):
            event("no path")
            return
        assert not simulate_follow(w, path, NoiseConfig(0.0)).collided

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_replay_determinism(self, tmp_path_factory, seed):
        sc = builtin("sequential")
        path = tmp_path_factory.mktemp("rec") / "t.jsonl"
        recorded = run_mission(sc.mission, RecordingProvider(OracleProvider(), TranscriptWriter(path)), seed, sc.config)
        runs = [run_mission(sc.mission, ReplayProvider.from_file(path), seed, sc.config) for _ in range(2)]
        assert runs[0] == runs[1] == recorded
        assert json.dumps(runs[0].to_dict()) == json.dumps(runs[1].to_dict())
