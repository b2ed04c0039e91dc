"""Trial batching, aggregation and report rendering."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from semnav.executor import TrialResult, run_mission
from semnav.harness.scenario import Scenario, jittered_world

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrialRecord:
    scenario: str
    index: int
    seed: int
    success: bool
    compliant: bool
    collided: bool
    total_time_s: float
    latency_s: float
    path_length_m: float
    first_goal: str | None
    buffers: tuple[int | None, ...] = ()
    error: str | None = None

    @classmethod
    def from_result(cls, scenario: str, index: int, result: TrialResult) -> TrialRecord:
        return cls(
            scenario,
            index,
            result.seed,
            result.overall_success,
            result.semantic_compliance,
            result.collided,
            result.total_time_s,
            result.provider_latency_s,
            result.path_length_m,
            result.first_goal_label,
            tuple(sr.buffer_used for sr in result.stage_results),
            result.error,
        )


@dataclass(frozen=True)
class ScenarioSummary:
    name: str
    trials: int
    successes: int
    compliant: int
    success_rate: float
    compliance_rate: float
    mean_time_s: float
    mean_latency_s: float
    max_latency_s: float
    mean_path_length_m: float
    collision_count: int

    @classmethod
    def from_records(cls, name: str, records: list[TrialRecord]) -> ScenarioSummary:
        n = len(records)

        def mean(values):
            return math.fsum(values) / n if n else 0.0

        succ = sum(r.success for r in records)
        comp = sum(r.compliant for r in records)
        return cls(
            name,
            n,
            succ,
            comp,
            succ / n if n else 0.0,
            comp / n if n else 0.0,
            mean(r.total_time_s for r in records),
            mean(r.latency_s for r in records),
            max((r.latency_s for r in records), default=0.0),
            mean(r.path_length_m for r in records),
            sum(r.collided for r in records),
        )


@dataclass(frozen=True)
class Provenance:
    provider: str
    seed: int
    config_hash: str
    schema: int = REPORT_SCHEMA_VERSION


@dataclass(frozen=True)
class Report:
    scenarios: tuple[ScenarioSummary, ...] = ()
    trials: tuple[TrialRecord, ...] = ()
    provenance: Provenance = field(default_factory=lambda: Provenance("none", 0, ""))

    def summary(self, name: str) -> ScenarioSummary:
        for s in self.scenarios:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> Report:
        data = json.loads(text)
        trials = tuple(
            TrialRecord(**{**t, "buffers": tuple(t["buffers"])}) for t in data["trials"]
        )
        return cls(
            tuple(ScenarioSummary(**s) for s in data["scenarios"]),
            trials,
            Provenance(**data["provenance"]),
        )

    @classmethod
    def merge(cls, reports) -> Report:
        reports = list(reports)
        if not reports:
            return cls()
        prov = reports[0].provenance
        digest = hashlib.sha256("".join(r.provenance.config_hash for r in reports).encode()).hexdigest()
        return cls(
            tuple(s for r in reports for s in r.scenarios),
            tuple(t for r in reports for t in r.trials),
            Provenance(prov.provider, prov.seed, digest if len(reports) > 1 else prov.config_hash),
        )


def config_hash(scenario: Scenario, n: int, seed: int, provider_kind: str) -> str:
    payload = {"scenario": scenario.fingerprint(), "trials": n, "seed": seed, "provider": provider_kind}
    blob = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def trial_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def run_trial_results(scenario: Scenario, n: int, provider, seed: int = 0) -> list[TrialResult]:
    """Full per-trial results; trial ``i`` uses a world jittered by
    ``default_rng([seed, i])`` and noise seeded from the same pair."""
    if n < 1:
        raise ValueError("n must be at least 1")
    results = []
    for i in range(n):
        world = jittered_world(scenario, np.random.default_rng([int(seed), i]))
        trial = scenario.with_world(world)
        results.append(
            run_mission(trial.mission, provider, trial_seed(seed, i), trial.config, trial.correct_goal_label)
        )
    return results


def run_trials(scenario: Scenario, n: int, provider, seed: int = 0) -> Report:
    results = run_trial_results(scenario, n, provider, seed)
    records = [TrialRecord.from_result(scenario.name, i, r) for i, r in enumerate(results)]
    return Report(
        (ScenarioSummary.from_records(scenario.name, records),),
        tuple(records),
        Provenance(provider.kind, int(seed), config_hash(scenario, n, seed, provider.kind)),
    )


# -- rendering ------------------------------------------------------------------------


def _table(headers, rows) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        widths = [max(w, len(c)) for w, c in zip(widths, row)]
    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(headers), line(["-" * w for w in widths])]
    out.extend(line(r) for r in rows)
    return "\n".join(out)


TIMING_HEADERS = ("Scenario", "Trials", "Avg time (s)", "Success rate", "Avg planning latency (s)")
SEMANTIC_HEADERS = ("Scenario", "Trials", "Semantic success")
CSV_FIELDS = tuple(ScenarioSummary.__dataclass_fields__)


def render_report(report: Report, fmt: str = "text") -> str:
    if fmt == "json":
        return report.to_json()
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for s in report.scenarios:
            writer.writerow([getattr(s, f) for f in CSV_FIELDS])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    timing = [
        (s.name, str(s.trials), f"{s.mean_time_s:.1f}", f"{s.success_rate:.0%}", f"{s.mean_latency_s:.2f}")
        for s in report.scenarios
    ]
    semantic = [
        (s.name, str(s.trials), f"{s.compliant}/{s.trials} ({s.compliance_rate:.0%})") for s in report.scenarios
    ]
    p = report.provenance
    return "\n".join(
        [
            _table(TIMING_HEADERS, timing),
            "",
            _table(SEMANTIC_HEADERS, semantic),
            "",
            f"provider={p.provider} seed={p.seed} config={p.config_hash[:12]}",
        ]
    )
