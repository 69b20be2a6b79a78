"""Session orchestration, report rendering and the HTTP/JSON API.

Sessions run their engine loop on a worker thread; the API only reads the
thread-safe record store and writes to the feedback inbox. Each session
persists as a directory of JSON files, no database needed.
"""

from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

from pydantic import BaseModel

from .collab import EnvironmentSettings, builtin_agents, run_collaborative
from .diagnosis import (
    ChatRecord,
    DiagnosisReport,
    HumanInbox,
    SearchParams,
    run_baseline,
    run_diagnosis,
)
from .errors import DiagnosisAborted, SessionError
from .gateway import LlmGateway, ProviderConfig, ProviderKind
from .knowledge import KnowledgeBase
from .observability import (
    AnomalyAlert,
    SourceConfig,
    SourceKind,
    build_metric_registry,
    build_tool_registry,
)


class SessionMode(str, Enum):
    SINGLE = "single"
    COLLABORATIVE = "collaborative"
    BASELINE = "baseline-metrics-only"


class SessionStatus(str, Enum):
    RUNNING = "running"
    AWAITING_FEEDBACK = "awaiting-feedback"
    DONE = "done"
    ABORTED = "aborted"


@dataclass
class ServiceConfig:
    kb_path: str | Path
    fixture_dir: str | Path
    script_path: str | Path
    thresholds: dict = field(default_factory=dict)
    sessions_dir: str | Path = "sessions"
    embed_dim: int = 64
    params: SearchParams = field(default_factory=SearchParams)
    max_rounds: int = 8


@dataclass
class Session:
    session_id: str
    alert: AnomalyAlert
    mode: SessionMode
    status: SessionStatus = SessionStatus.RUNNING
    report: DiagnosisReport | None = None
    error: str | None = None
    records: list = field(default_factory=list)
    verdicts: list = field(default_factory=list)
    inbox: HumanInbox = field(default_factory=HumanInbox)
    kb_lookups: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)
    thread: threading.Thread | None = None

    def is_terminal(self) -> bool:
        return self.status in (SessionStatus.DONE, SessionStatus.ABORTED)

    def summary(self) -> dict:
        with self.lock:
            return {
                "session_id": self.session_id,
                "alert": self.alert.to_dict(),
                "mode": self.mode.value,
                "status": self.status.value,
                "kb_lookups": self.kb_lookups,
                "verdicts": list(self.verdicts),
                "report": self.report.to_dict() if self.report else None,
            }


class SessionManager:
    def __init__(self, config: ServiceConfig):
        self.config = config
        self.sessions: dict[str, Session] = {}
        self._lock = threading.Lock()
        Path(config.sessions_dir).mkdir(parents=True, exist_ok=True)

    # -- lifecycle

    def start_session(
        self,
        alert: AnomalyAlert,
        mode: SessionMode,
        session_id: str | None = None,
        synchronous: bool = False,
    ) -> Session:
        session_id = session_id or uuid.uuid4().hex[:12]
        with self._lock:
            if session_id in self.sessions:
                raise SessionError(f"duplicate session_id {session_id}")
            session = Session(session_id=session_id, alert=alert, mode=SessionMode(mode))
            self.sessions[session_id] = session
        if synchronous:
            self._run(session)
        else:
            session.thread = threading.Thread(
                target=self._run, args=(session,), daemon=True
            )
            session.thread.start()
        return session

    def _run(self, session: Session) -> None:
        cfg = self.config
        gw = LlmGateway(
            ProviderConfig(
                kind=ProviderKind.SCRIPTED,
                script_path=cfg.script_path,
                embed_dim=cfg.embed_dim,
            )
        )
        src = SourceConfig(
            kind=SourceKind.FIXTURE,
            fixture_dir=cfg.fixture_dir,
            thresholds=cfg.thresholds,
        )
        kb = KnowledgeBase.load(cfg.kb_path)
        try:
            if session.mode is SessionMode.BASELINE:
                # The comparison condition: raw metric fetch only, no
                # knowledge base, no non-metric tools.
                report = run_baseline(session.alert, build_metric_registry(src), gw)
            elif session.mode is SessionMode.COLLABORATIVE:
                report = run_collaborative(
                    session.alert,
                    builtin_agents(),
                    EnvironmentSettings(max_rounds=cfg.max_rounds),
                    gw,
                    kb,
                    build_tool_registry(src),
                    human_feedback=session.inbox,
                )
            else:
                report = run_diagnosis(
                    session.alert,
                    kb,
                    build_tool_registry(src),
                    gw,
                    params=cfg.params,
                    human_feedback=session.inbox,
                )
            with session.lock:
                session.records.extend(report.transcript)
                session.report = report
                session.kb_lookups = kb.lookup_count
                session.status = SessionStatus.DONE
        except DiagnosisAborted as exc:
            with session.lock:
                session.records.extend(exc.transcript)
                session.error = str(exc)
                session.kb_lookups = kb.lookup_count
                session.status = SessionStatus.ABORTED
        self._persist(session)

    def _persist(self, session: Session) -> None:
        out_dir = Path(self.config.sessions_dir) / session.session_id
        out_dir.mkdir(parents=True, exist_ok=True)
        with session.lock:
            (out_dir / "session.json").write_text(
                json.dumps(
                    {
                        "session_id": session.session_id,
                        "alert": session.alert.to_dict(),
                        "mode": session.mode.value,
                        "status": session.status.value,
                        "error": session.error,
                        "verdicts": session.verdicts,
                    },
                    indent=2,
                ),
                encoding="utf-8",
            )
            (out_dir / "transcript.json").write_text(
                json.dumps([r.to_dict() for r in session.records], indent=2),
                encoding="utf-8",
            )
            if session.report is not None:
                (out_dir / "report.json").write_text(
                    render_report(session.report, "json"), encoding="utf-8"
                )

    # -- access

    def get(self, session_id: str) -> Session:
        session = self.sessions.get(session_id)
        if session is None:
            raise SessionError(f"unknown session {session_id}")
        return session

    def submit_feedback(self, session_id: str, text: str) -> dict:
        session = self.get(session_id)
        if session.is_terminal():
            raise SessionError(f"session {session_id} is {session.status.value}")
        session.inbox.post(text)
        with session.lock:
            session.records.append(
                ChatRecord(
                    seq=len(session.records) + 1, speaker="human", analysis=text
                )
            )
        return {"ok": True}

    def submit_verdict(self, session_id: str, cause_id: str, accepted: bool) -> dict:
        session = self.get(session_id)
        if session.report is None:
            raise SessionError("session has no report yet")
        known = {c.cause_id for c in session.report.causes}
        if cause_id not in known:
            raise SessionError(f"unknown cause {cause_id}")
        with session.lock:
            session.verdicts.append({"cause_id": cause_id, "accepted": accepted})
        self._persist(session)
        return {"ok": True}

    def messages_since(self, session_id: str, since: int = 0) -> list[dict]:
        session = self.get(session_id)
        with session.lock:
            return [r.to_dict() for r in session.records if r.seq > since]

    def wait(self, session_id: str, timeout: float = 30.0) -> Session:
        session = self.get(session_id)
        if session.thread is not None:
            session.thread.join(timeout)
        return session


# --- rendering ---------------------------------------------------------------


def render_report(report: DiagnosisReport, format: str = "markdown") -> str:
    """Markdown bullets (one top-level bullet per cause, nested solutions) or
    lossless JSON."""
    if format == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if format != "markdown":
        raise ValueError(f"unknown format {format}")
    lines = [f"# Diagnosis report for {report.alert.alert_id}", ""]
    lines.append(
        f"Anomaly: {report.alert.description} "
        f"(class={report.alert.anomaly_class}, "
        f"window {report.alert.start_time}-{report.alert.end_time})"
    )
    lines.append("")
    if not report.causes:
        lines.append("- no root cause identified")
    for cause in report.causes:
        lines.append(f"- **{cause.cause_id}** — {cause.evidence}")
        if cause.matched_experience:
            lines.append(f"  - matched experience: {cause.matched_experience}")
        for solution in cause.solutions:
            lines.append(f"  - solution: {solution}")
        if not cause.solutions:
            lines.append("  - solution: no specific solution recorded")
    feedback = [r for r in report.transcript if r.speaker == "human"]
    if feedback:
        lines.append("")
        lines.append("Human feedback:")
        for rec in feedback:
            lines.append(f"- {rec.analysis}")
    return "\n".join(lines)


def report_from_dict(data: dict) -> DiagnosisReport:
    from .diagnosis import RootCause

    return DiagnosisReport(
        alert=AnomalyAlert.from_dict(data["alert"]),
        causes=[
            RootCause(
                cause_id=c["cause_id"],
                evidence=c["evidence"],
                matched_experience=c["matched_experience"],
                solutions=list(c["solutions"]),
            )
            for c in data["causes"]
        ],
        bullet_summary=data["bullet_summary"],
        transcript=[ChatRecord(**r) for r in data["transcript"]],
    )


# --- HTTP API ----------------------------------------------------------------


class StartSessionBody(BaseModel):
    alert: dict
    mode: str = "single"
    session_id: Optional[str] = None


class FeedbackBody(BaseModel):
    text: str


class VerdictBody(BaseModel):
    cause_id: str
    accepted: bool


def create_app(manager: SessionManager):
    """FastAPI app over the session manager; bodies and errors are JSON."""
    from fastapi import FastAPI
    from fastapi.responses import JSONResponse

    app = FastAPI(title="dbdoctor", version="0.1.0")

    def error(status: int, code: str, message: str) -> JSONResponse:
        return JSONResponse(
            status_code=status, content={"code": code, "message": message}
        )

    @app.exception_handler(SessionError)
    async def _session_error(request, exc):
        status = 404 if "unknown session" in str(exc) else 409
        return error(status, "session_error", str(exc))

    @app.post("/api/sessions")
    def start_session(body: StartSessionBody):
        try:
            alert = AnomalyAlert.from_dict(body.alert)
        except (KeyError, ValueError) as exc:
            return error(422, "bad_alert", str(exc))
        try:
            mode = SessionMode(body.mode)
        except ValueError:
            return error(422, "bad_mode", f"unknown mode {body.mode}")
        session = manager.start_session(alert, mode, session_id=body.session_id)
        return {"session_id": session.session_id}

    @app.get("/api/sessions")
    def list_sessions():
        return {
            "sessions": [
                {
                    "session_id": s.session_id,
                    "status": s.status.value,
                    "mode": s.mode.value,
                    "alert_id": s.alert.alert_id,
                }
                for s in manager.sessions.values()
            ]
        }

    @app.get("/api/sessions/{session_id}")
    def get_session(session_id: str):
        return manager.get(session_id).summary()

    @app.get("/api/sessions/{session_id}/messages")
    def get_messages(session_id: str, since: int = 0):
        records = manager.messages_since(session_id, since)
        next_since = records[-1]["seq"] if records else since
        return {"records": records, "next_since": next_since}

    @app.post("/api/sessions/{session_id}/feedback")
    def post_feedback(session_id: str, body: FeedbackBody):
        if not body.text.strip():
            return error(422, "empty_feedback", "feedback text must be non-empty")
        return manager.submit_feedback(session_id, body.text)

    @app.post("/api/sessions/{session_id}/verdict")
    def post_verdict(session_id: str, body: VerdictBody):
        return manager.submit_verdict(session_id, body.cause_id, body.accepted)

    @app.get("/api/tools")
    def get_tools():
        src = SourceConfig(
            kind=SourceKind.FIXTURE,
            fixture_dir=manager.config.fixture_dir,
            thresholds=manager.config.thresholds,
        )
        registry = build_tool_registry(src)
        return {
            "tools": [
                {
                    "name": s.name,
                    "description": s.description,
                    "args_schema": s.args_schema,
                }
                for s in registry.specs
            ]
        }

    @app.get("/api/experience")
    def get_experience():
        kb = KnowledgeBase.load(manager.config.kb_path)
        return {"segments": [s.to_dict() for s in kb.segments.values()]}

    return app
