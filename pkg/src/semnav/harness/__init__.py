"""Scenario corpus, trial batching, reports and the command line."""

from __future__ import annotations

from semnav.harness.render import render_world
from semnav.harness.report import Report, ScenarioSummary, TrialRecord, render_report, run_trials
from semnav.harness.scenario import BUILTIN_NAMES, Scenario, builtin, load_scenario, parse_scenario

__all__ = [
    "BUILTIN_NAMES",
    "Report",
    "Scenario",
    "ScenarioSummary",
    "TrialRecord",
    "builtin",
    "load_scenario",
    "parse_scenario",
    "render_report",
    "render_world",
    "run_trials",
]
