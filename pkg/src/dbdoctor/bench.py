"""Scenario benchmark over the bundled single-root-cause suite.

Each scenario bundles fixture telemetry, a rule script and the expected
legal/accurate flags per mode. The scripts encode the reported trajectories
(what gets checked, where the baseline stops early), so the bench validates
engine routing, experience matching, scoring and termination — it does not
measure live model quality.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .diagnosis import DiagnosisReport, SearchParams, run_baseline, run_diagnosis
from .errors import DbDoctorError
from .gateway import scripted_gateway
from .knowledge import KnowledgeBase
from .observability import (
    AnomalyAlert,
    SourceConfig,
    SourceKind,
    build_metric_registry,
    build_tool_registry,
)

MODES = ("dbot", "baseline")

CAUSE_IDS = (
    "INSERT_LARGE_DATA",
    "FETCH_LARGE_DATA",
    "REDUNDANT_INDEX",
    "LACK_STATISTIC_INFO",
    "MISSING_INDEXES",
    "POOR_JOIN_PERFORMANCE",
    "CORRELATED_SUBQUERY",
    "LOCK_CONTENTION",
    "WORKLOAD_CONTENTION",
    "CPU_CONTENTION",
    "IO_CONTENTION",
)


@dataclass
class Scenario:
    cause_id: str
    fixture_dir: Path
    script_path: Path
    expected_legal: bool
    expected_accurate_dbot: bool
    expected_accurate_baseline: bool
    alert: AnomalyAlert = None
    thresholds: dict = field(default_factory=dict)
    max_nodes: int = 3

    def __post_init__(self):
        if self.cause_id not in CAUSE_IDS:
            raise ValueError(f"unknown scenario cause_id {self.cause_id}")


@dataclass
class BenchResult:
    per_scenario: dict  # mode -> cause_id -> {"legal": bool, "accurate": bool}
    legality_count: dict  # mode -> int
    accuracy_count: dict  # mode -> int
    total: int


def bundled_scenarios_dir() -> Path:
    return Path(resources.files("dbdoctor") / "data" / "scenarios")


def bundled_kb_path() -> Path:
    return Path(resources.files("dbdoctor") / "data" / "seed_experience.json")


def load_scenario(path: Path) -> Scenario:
    meta = json.loads((path / "scenario.json").read_text(encoding="utf-8"))
    return Scenario(
        cause_id=meta["cause_id"],
        fixture_dir=path / "fixtures",
        script_path=path / "script.json",
        expected_legal=meta["expected_legal"],
        expected_accurate_dbot=meta["expected_accurate_dbot"],
        expected_accurate_baseline=meta["expected_accurate_baseline"],
        alert=AnomalyAlert.from_dict(meta["alert"]),
        thresholds=meta.get("thresholds", {}),
        max_nodes=meta.get("max_nodes", 3),
    )


def load_scenarios(scenarios_dir: str | Path) -> list[Scenario]:
    root = Path(scenarios_dir)
    scenarios = []
    for child in sorted(root.iterdir()):
        if (child / "scenario.json").exists():
            scenarios.append(load_scenario(child))
    return scenarios


def is_legal(report: DiagnosisReport, alert: AnomalyAlert) -> bool:
    """Well-formed, on-topic output: a non-empty causes-or-analysis response
    that addresses this alert and cites at least one observation."""
    if report.alert.alert_id != alert.alert_id:
        return False
    if not report.causes and not report.bullet_summary.strip():
        return False
    if not report.transcript:
        return False
    return any(r.observation for r in report.transcript) or bool(report.causes)


def run_scenario(
    scenario: Scenario, mode: str, kb_path: str | Path | None = None
) -> tuple[bool, bool, DiagnosisReport | None]:
    """One (scenario, mode) cell: returns (legal, accurate, report)."""
    if mode not in MODES:
        raise ValueError(f"unknown bench mode {mode}")
    src = SourceConfig(
        kind=SourceKind.FIXTURE,
        fixture_dir=scenario.fixture_dir,
        thresholds=scenario.thresholds,
    )
    gw = scripted_gateway(scenario.script_path)
    try:
        if mode == "baseline":
            report = run_baseline(scenario.alert, build_metric_registry(src), gw)
        else:
            kb = KnowledgeBase.load(kb_path or bundled_kb_path())
            report = run_diagnosis(
                scenario.alert,
                kb,
                build_tool_registry(src),
                gw,
                params=SearchParams(max_nodes=scenario.max_nodes),
            )
    except DbDoctorError:
        return False, False, None
    legal = is_legal(report, scenario.alert)
    accurate = scenario.cause_id in {c.cause_id for c in report.causes}
    return legal, accurate, report


def run_bench(
    scenarios: list[Scenario],
    modes: tuple = MODES,
    kb_path: str | Path | None = None,
) -> BenchResult:
    per_scenario = {mode: {} for mode in modes}
    legality = {mode: 0 for mode in modes}
    accuracy = {mode: 0 for mode in modes}
    for scenario in scenarios:
        for mode in modes:
            missing = not scenario.script_path.exists() or not scenario.fixture_dir.is_dir()
            if missing:
                legal, accurate = False, False
            else:
                legal, accurate, _ = run_scenario(scenario, mode, kb_path=kb_path)
            per_scenario[mode][scenario.cause_id] = {
                "legal": legal,
                "accurate": accurate,
            }
            legality[mode] += int(legal)
            accuracy[mode] += int(accurate)
    return BenchResult(
        per_scenario=per_scenario,
        legality_count=legality,
        accuracy_count=accuracy,
        total=len(scenarios),
    )


def format_table(result: BenchResult) -> str:
    modes = list(result.per_scenario.keys())
    width = max((len(c) for cells in result.per_scenario.values() for c in cells), default=10)
    lines = ["root cause".ljust(width + 2) + "  ".join(m.ljust(18) for m in modes)]
    cause_ids = list(next(iter(result.per_scenario.values()), {}).keys())
    for cause_id in cause_ids:
        cells = []
        for mode in modes:
            cell = result.per_scenario[mode][cause_id]
            marks = ("legal" if cell["legal"] else "-") + (
                " +accurate" if cell["accurate"] else ""
            )
            cells.append(marks.ljust(18))
        lines.append(cause_id.ljust(width + 2) + "  ".join(cells))
    tallies = []
    for mode in modes:
        tallies.append(
            f"{mode}: legality {result.legality_count[mode]}/{result.total}, "
            f"accuracy {result.accuracy_count[mode]}/{result.total}"
        )
    lines.append("")
    lines.extend(tallies)
    return "\n".join(lines)
