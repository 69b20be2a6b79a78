"""Observation tools over metrics, stat views and slow-query logs.

Three source kinds: ``prometheus-http`` (range queries), ``postgres-views``
(pg_stat_statements / pg_stat_activity) and ``fixture`` (JSON replay, the
contract surface for every test). All observation tools are exposed through
the shared tool registry; the diagnosis engines never call them directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import requests

from .errors import ConfigError, FixtureError, TransportError, UnknownMetricError
from .retrieval import ToolRegistry, ToolSpec

ANOMALY_CLASSES = (
    "running_slow",
    "full_disk",
    "execution_errors",
    "hanging",
    "crashing",
)


@dataclass
class MetricSeries:
    metric_name: str
    points: list  # ordered (unix_seconds, value) pairs

    def __post_init__(self):
        stamps = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise ValueError(f"{self.metric_name}: timestamps must strictly increase")

    def peak(self) -> tuple:
        return max(self.points, key=lambda p: p[1])


@dataclass
class AnomalyAlert:
    alert_id: str
    start_time: int
    end_time: int
    description: str
    anomaly_class: str

    def __post_init__(self):
        if self.start_time > self.end_time:
            raise ValueError("start_time must be <= end_time")
        if self.anomaly_class not in ANOMALY_CLASSES:
            raise ValueError(f"unknown anomaly class {self.anomaly_class}")

    def to_dict(self) -> dict:
        return {
            "alert_id": self.alert_id,
            "start_time": self.start_time,
            "end_time": self.end_time,
            "description": self.description,
            "anomaly_class": self.anomaly_class,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnomalyAlert":
        return cls(
            alert_id=d["alert_id"],
            start_time=int(d["start_time"]),
            end_time=int(d["end_time"]),
            description=d["description"],
            anomaly_class=d["anomaly_class"],
        )


@dataclass
class SlowQueryRecord:
    template: str
    calls: int
    total_time_ms: float

    def __post_init__(self):
        if self.calls < 0 or self.total_time_ms < 0:
            raise ValueError("calls and total_time_ms must be non-negative")


class SourceKind(str, Enum):
    PROMETHEUS = "prometheus-http"
    POSTGRES = "postgres-views"
    FIXTURE = "fixture"


@dataclass
class SourceConfig:
    kind: SourceKind
    endpoint: str | None = None
    dsn: str | None = None
    fixture_dir: str | Path | None = None
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = SourceKind(self.kind)
        if self.kind is SourceKind.PROMETHEUS and not self.endpoint:
            raise ConfigError("prometheus source requires endpoint")
        if self.kind is SourceKind.POSTGRES and not self.dsn:
            raise ConfigError("postgres source requires dsn")
        if self.kind is SourceKind.FIXTURE and not self.fixture_dir:
            raise ConfigError("fixture source requires fixture_dir")


@dataclass
class MetricCheck:
    abnormal: bool
    evidence: str


# --- fetch operations -------------------------------------------------------


def _fixture_series(name: str, src: SourceConfig) -> MetricSeries:
    path = Path(src.fixture_dir) / f"{name}.json"
    if not path.exists():
        raise UnknownMetricError(f"no fixture for metric {name} in {src.fixture_dir}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        points = [(int(ts), float(val)) for ts, val in raw["points"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FixtureError(f"malformed metric fixture {path}: {exc}") from exc
    return MetricSeries(metric_name=raw.get("metric_name", name), points=points)


def _prometheus_series(name: str, window, src: SourceConfig) -> MetricSeries:
    start, end = window
    url = src.endpoint.rstrip("/") + "/api/v1/query_range"
    try:
        resp = requests.get(
            url,
            params={"query": name, "start": start, "end": end, "step": "15s"},
            timeout=30,
        )
        resp.raise_for_status()
        payload = resp.json()
    except (requests.RequestException, ValueError) as exc:
        raise TransportError(f"prometheus query for {name} failed: {exc}") from exc
    results = payload.get("data", {}).get("result", [])
    if not results:
        raise UnknownMetricError(f"prometheus returned no series for {name}")
    points = [(int(float(ts)), float(val)) for ts, val in results[0]["values"]]
    return MetricSeries(metric_name=name, points=sorted(points))


def fetch_metric(name: str, window: tuple, src: SourceConfig) -> MetricSeries:
    """Fetch one metric series filtered to the inclusive window."""
    start, end = window
    if start > end:
        raise ValueError("window start must be <= end")
    if src.kind is SourceKind.FIXTURE:
        series = _fixture_series(name, src)
    elif src.kind is SourceKind.PROMETHEUS:
        series = _prometheus_series(name, window, src)
    else:
        raise ConfigError("postgres-views source does not serve time-series metrics")
    inside = [(ts, v) for ts, v in series.points if start <= ts <= end]
    return MetricSeries(metric_name=series.metric_name, points=inside)


def is_abnormal_metric(name: str, window: tuple, src: SourceConfig) -> MetricCheck:
    """Abnormal iff any point in the window strictly exceeds the threshold."""
    if name not in src.thresholds:
        raise ConfigError(f"no threshold configured for metric {name}")
    threshold = src.thresholds[name]
    series = fetch_metric(name, window, src)
    if not series.points:
        return MetricCheck(False, f"{name}: no points in window")
    ts, value = series.peak()
    if value > threshold:
        return MetricCheck(
            True,
            f"{name} peak {value:g} at {ts} exceeds threshold {threshold:g}",
        )
    return MetricCheck(
        False,
        f"{name} peak {value:g} at {ts} stays at or below threshold {threshold:g}",
    )


def fetch_slow_queries(window: tuple, src: SourceConfig) -> list[SlowQueryRecord]:
    """Slow query templates sorted by descending total time."""
    start, end = window
    if start > end:
        raise ValueError("window start must be <= end")
    if src.kind is SourceKind.FIXTURE:
        path = Path(src.fixture_dir) / "slow_queries.json"
        if not path.exists():
            raise FixtureError(f"missing slow_queries.json in {src.fixture_dir}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
            records = [
                SlowQueryRecord(r["template"], int(r["calls"]), float(r["total_time_ms"]))
                for r in raw
            ]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FixtureError(f"malformed slow query fixture {path}: {exc}") from exc
    elif src.kind is SourceKind.POSTGRES:
        records = _postgres_slow_queries(src)
    else:
        raise ConfigError("prometheus source does not serve slow queries")
    return sorted(records, key=lambda r: -r.total_time_ms)


def _postgres_slow_queries(src: SourceConfig) -> list[SlowQueryRecord]:
    try:
        import psycopg2  # noqa: F401  (optional, live deployments only)
    except ImportError as exc:
        raise ConfigError(
            "postgres-views source requires psycopg2; use fixture mode offline"
        ) from exc
    conn = psycopg2.connect(src.dsn)
    try:
        with conn.cursor() as cur:
            cur.execute(
                "SELECT query, calls, total_exec_time FROM pg_stat_statements "
                "ORDER BY total_exec_time DESC LIMIT 50"
            )
            return [SlowQueryRecord(q, int(c), float(t)) for q, c, t in cur.fetchall()]
    finally:
        conn.close()


# --- tool registry wiring ---------------------------------------------------

_WINDOW_ARGS = {
    "start_time": {"type": "integer", "required": True},
    "end_time": {"type": "integer", "required": True},
}


def _format_check(name: str, check: MetricCheck) -> str:
    verdict = "abnormal" if check.abnormal else "normal"
    return f"The metric is {verdict}. {check.evidence} ({name} {verdict})"


def register_metric_tools(registry: ToolRegistry, src: SourceConfig) -> None:
    """Raw metric observation tools (also the whole surface of baseline mode)."""

    def _is_abnormal(start_time: int, end_time: int, metric_name: str) -> str:
        check = is_abnormal_metric(metric_name, (start_time, end_time), src)
        return _format_check(metric_name, check)

    def _fetch(start_time: int, end_time: int, metric_name: str) -> str:
        series = fetch_metric(metric_name, (start_time, end_time), src)
        if not series.points:
            return f"metric {metric_name}: no points in window"
        values = [v for _, v in series.points]
        return (
            f"metric {metric_name}: {len(values)} points, "
            f"min {min(values):g}, max {max(values):g}"
        )

    registry.register(
        ToolSpec(
            name="is_abnormal_metric",
            description=(
                "Check whether a monitoring metric (cpu usage, memory usage, io "
                "wait, sessions...) exceeded its threshold inside a time window"
            ),
            args_schema={
                **_WINDOW_ARGS,
                "metric_name": {"type": "string", "required": True},
            },
            executor_binding="obs.is_abnormal_metric",
        ),
        _is_abnormal,
    )
    registry.register(
        ToolSpec(
            name="fetch_metric",
            description="Fetch the raw points of one monitoring metric in a window",
            args_schema={
                **_WINDOW_ARGS,
                "metric_name": {"type": "string", "required": True},
            },
            executor_binding="obs.fetch_metric",
        ),
        _fetch,
    )


def register_observation_tools(registry: ToolRegistry, src: SourceConfig) -> None:
    """Full tool surface: metric tools, stat views, and mock optimizers."""
    register_metric_tools(registry, src)

    def _slow_queries(start_time: int, end_time: int) -> str:
        records = fetch_slow_queries((start_time, end_time), src)
        if not records:
            return "pg_stat_statements: no slow query templates recorded"
        lines = [
            f"{i + 1}) {r.template} (calls={r.calls}, total_time_ms={r.total_time_ms:g})"
            for i, r in enumerate(records[:5])
        ]
        return "pg_stat_statements slowest templates: " + "; ".join(lines)

    registry.register(
        ToolSpec(
            name="fetch_slow_queries",
            description=(
                "List the slowest query templates from pg_stat_statements "
                "ordered by total execution time"
            ),
            args_schema=dict(_WINDOW_ARGS),
            executor_binding="obs.fetch_slow_queries",
        ),
        _slow_queries,
    )

    # Optimization executors are out of scope; these mocks only return advice
    # text so solutions can cite a concrete next step.
    registry.register(
        ToolSpec(
            name="suggest_indexes",
            description=(
                "Mock index advisor: recommend composite indexes for "
                "sequential-scan heavy query templates"
            ),
            args_schema={"table": {"type": "string", "required": False}},
            executor_binding="opt.suggest_indexes",
        ),
        lambda table="": (
            "index advisor: consider a composite index covering the predicate "
            "columns of the slowest sequential-scan templates"
            + (f" on table {table}" if table else "")
        ),
    )
    registry.register(
        ToolSpec(
            name="update_statistics",
            description="Mock statistics refresher: run ANALYZE on stale tables",
            args_schema={"table": {"type": "string", "required": False}},
            executor_binding="opt.update_statistics",
        ),
        lambda table="": "statistics refresh queued"
        + (f" for table {table}" if table else " for all stale tables"),
    )


def build_tool_registry(src: SourceConfig) -> ToolRegistry:
    registry = ToolRegistry()
    register_observation_tools(registry, src)
    return registry


def build_metric_registry(src: SourceConfig) -> ToolRegistry:
    registry = ToolRegistry()
    register_metric_tools(registry, src)
    return registry
