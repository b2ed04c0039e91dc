"""Command-line entry point: ``semnav run | render | list``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path as FsPath

from semnav.errors import NoCandidatesError, ReplayError, ScenarioError
from semnav.harness.render import render_world
from semnav.harness.report import Report, render_report, run_trials
from semnav.harness.scenario import BUILTIN_NAMES, FIXTURE_NAMES, builtin, resolve
from semnav.llm_client import ClientConfig, LiveProvider, RecordingProvider, ReplayProvider, TranscriptWriter
from semnav.planner import generate_candidates
from semnav.semantic import OracleProvider


def _buffers(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"buffers must be comma-separated integers: {text!r}") from exc
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("buffers must be non-negative and non-empty")
    return values


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semnav", description="Semantic navigation scenario runner")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run scenarios and print a report")
    run.add_argument("scenarios", nargs="+", help="builtin names, 'all', or scenario file paths")
    run.add_argument("--provider", choices=("oracle", "live", "replay"), default="oracle")
    run.add_argument("--trials", type=_positive_int, help="trials per scenario (default: scenario's own)")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--report", choices=("text", "json", "csv"), default="text")
    run.add_argument("--record", metavar="FILE", help="append every exchange to a transcript file")
    run.add_argument("--replay", metavar="FILE", help="transcript to replay (with --provider replay)")
    run.add_argument("--resolution", type=float, metavar="M", help="grid resolution override in meters")
    run.add_argument("--buffers", type=_buffers, help="candidate buffers in cells, e.g. 0,20")
    run.add_argument("--endpoint", help="chat-completions URL for the live provider")
    run.add_argument("--model", help="model name for the live provider")
    run.add_argument("--api-key-env", help="environment variable holding the API key")
    run.add_argument("--timeout", type=float, help="live request timeout in seconds")
    run.add_argument("--out", metavar="FILE", help="write the report here instead of stdout")

    render = sub.add_parser("render", help="draw a scenario and its candidate paths")
    render.add_argument("scenario")
    render.add_argument("--format", choices=("ascii", "pgm"), default="ascii")
    render.add_argument("--buffers", type=_buffers, default=(0,))
    render.add_argument("--out", metavar="FILE")

    sub.add_parser("list", help="list builtin scenarios")
    return parser


def _provider(args):
    if args.provider == "oracle":
        return OracleProvider()
    if args.provider == "replay":
        if not args.replay:
            raise SystemExit("--provider replay requires --replay FILE")
        return ReplayProvider.from_file(args.replay)
    overrides = {
        k: v
        for k, v in (
            ("endpoint_url", args.endpoint),
            ("model_name", args.model),
            ("api_key_source", args.api_key_env),
            ("timeout_s", args.timeout),
        )
        if v is not None
    }
    return LiveProvider(ClientConfig(**overrides))


def _scenario_names(items) -> list[str]:
    names: list[str] = []
    for item in items:
        names.extend(BUILTIN_NAMES if item == "all" else [item])
    return names


def _cmd_run(args) -> int:
    provider = _provider(args)
    if args.record:
        FsPath(args.record).write_text("", encoding="utf-8")
        provider = RecordingProvider(provider, TranscriptWriter(args.record))
    reports = []
    for name in _scenario_names(args.scenarios):
        scenario = resolve(name).with_overrides(args.resolution, args.buffers)
        n = args.trials or scenario.trials_default
        reports.append(run_trials(scenario, n, provider, args.seed))
    text = render_report(Report.merge(reports), args.report)
    if args.out:
        FsPath(args.out).write_text(text + ("" if text.endswith("\n") else "\n"), encoding="utf-8")
    else:
        print(text)
    return 0


def _cmd_render(args) -> int:
    scenario = resolve(args.scenario)
    world = scenario.world
    res = scenario.mission.resolution_m
    try:
        cands = generate_candidates(world, world.goals, args.buffers, res, config=scenario.config.planner)
    except NoCandidatesError:
        cands = []
    doc = render_world(world, [c.path for c in cands], args.format, res)
    if args.out:
        mode = "wb" if isinstance(doc, bytes) else "w"
        with open(args.out, mode) as fh:
            fh.write(doc)
    elif isinstance(doc, bytes):
        sys.stdout.buffer.write(doc)
    else:
        sys.stdout.write(doc)
        for c in cands:
            print(f"{c.index % 10}: goal {c.goal_ref.label} buffer {c.buffer_used} length {c.metrics.path_length:.3f} m")
    return 0


def _cmd_list() -> int:
    for name in BUILTIN_NAMES + FIXTURE_NAMES:
        print(f"{name:12s} {builtin(name).description}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "render":
            return _cmd_render(args)
        return _cmd_list()
    except (ScenarioError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ReplayError as exc:
        print(f"replay error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
