"""Multi-agent communicative diagnosis.

One Chief DBA schedules specialist agents (one speaker per round), a selector
filters ungrounded analyses out of the shared transcript, an updater keeps
each agent's memory as a progressive summary of its tool records, and human
feedback enters between rounds and bypasses the selector.
"""

from __future__ import annotations

import fnmatch
import json
from dataclasses import dataclass, field

from .errors import DiagnosisAborted, GatewayError
from .diagnosis import (
    ChatRecord,
    DiagnosisReport,
    HumanInbox,
    RootCause,
    _harvest_metrics,
    _one_shot,
    build_bullet_summary,
    match_experience,
    parse_action_reply,
)
from .gateway import LlmGateway
from .knowledge import KnowledgeBase
from .retrieval import ToolRegistry


@dataclass
class ChatSummary:
    lines: list = field(default_factory=list)

    def text(self) -> str:
        return "\n".join(self.lines)

    def total_length(self) -> int:
        return sum(len(line) for line in self.lines)


@dataclass
class AgentRole:
    name: str
    charter: str
    tool_globs: list = field(default_factory=lambda: ["*"])
    metric_globs: list = field(default_factory=lambda: ["*"])
    memory: ChatSummary = field(default_factory=ChatSummary)

    def allows_tool(self, tool_name: str) -> bool:
        return any(fnmatch.fnmatch(tool_name, g) for g in self.tool_globs)

    def allows_metric(self, metric_name: str) -> bool:
        return any(fnmatch.fnmatch(metric_name, g) for g in self.metric_globs)


def builtin_agents() -> list[AgentRole]:
    return [
        AgentRole(
            name="ChiefDBA",
            charter=(
                "Schedule which agent speaks, consolidate findings, and when "
                "the specialists report nothing useful, look into other "
                "potential problems such as the application side"
            ),
        ),
        AgentRole(
            name="CpuAgent",
            charter="CPU usage analysis and diagnosis",
            metric_globs=["cpu_*", "node_procs_*", "load*", "active_sessions"],
        ),
        AgentRole(
            name="MemoryAgent",
            charter="Memory usage analysis and diagnosis",
            metric_globs=["memory_*", "swap_*", "cache_*"],
        ),
    ]


@dataclass
class EnvironmentSettings:
    visibility: str = "shared"
    selector: object = None  # predicate(session, record) -> bool
    updater: object = None  # callable(session, agent, record)
    max_rounds: int = 8
    summary_cap: int = 1200

    def __post_init__(self):
        if self.visibility != "shared":
            raise ValueError("only the shared visibility group is supported")
        if self.max_rounds <= 0:
            raise ValueError("max_rounds must be positive")


@dataclass
class CollabSession:
    alert: object
    agents: list
    records: list = field(default_factory=list)  # accepted, shared transcript
    filtered: list = field(default_factory=list)  # rejected, never shared
    markers: set = field(default_factory=set)
    abnormal: dict = field(default_factory=dict)
    metric_values: dict = field(default_factory=dict)
    causes: list = field(default_factory=list)
    reported: set = field(default_factory=set)
    _seq: int = 0

    def next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def non_chief(self) -> list:
        return [a for a in self.agents if a.name != "ChiefDBA"]

    def agent(self, name: str):
        for a in self.agents:
            if a.name == name:
                return a
        return None


def default_selector(session: CollabSession, rec: ChatRecord) -> bool:
    """Ground-truth filter: an analysis must reference an observation (its own
    tool observation, or a known tool/metric/view/segment name)."""
    if rec.speaker == "human":
        return True
    if rec.observation:
        return True
    analysis = (rec.analysis or "").lower()
    return any(marker in analysis for marker in session.markers)


def schedule_speaker(
    session: CollabSession, chief: AgentRole, gw: LlmGateway, round_index: int
) -> AgentRole:
    """Ask the Chief DBA who speaks; one bad name gets one re-prompt, then the
    round-robin order takes over."""
    candidates = session.non_chief()
    if not candidates:
        raise ValueError("no non-chief agents registered")
    if len(candidates) == 1:
        return candidates[0]
    names = ", ".join(a.name for a in candidates)
    prompt = (
        f"[chief-schedule] Round {round_index + 1}. Registered agents: {names}.\n"
        f"Shared summary so far:\n{_shared_summary(session)}\n"
        "Name the single agent that should speak next."
    )
    for _ in range(2):
        reply = _one_shot(gw, prompt).strip()
        for agent in candidates:
            if agent.name.lower() in reply.lower():
                return agent
        prompt += "\nThat is not a registered agent name. Pick one of: " + names
    return candidates[round_index % len(candidates)]


def post_message(
    session: CollabSession, rec: ChatRecord, env: EnvironmentSettings
) -> bool:
    """Run the selector; accepted records join the shared transcript, filtered
    ones are only logged."""
    selector = env.selector or default_selector
    if selector(session, rec):
        session.records.append(rec)
        return True
    session.filtered.append(rec)
    return False


SUMMARY_PROMPT = (
    "[summarize-goal] Current summary:\n{current}\n"
    "New record:\nThought: {thought}\nAction: {action}\n"
    "Action Input: {action_input}\nObservation: {observation}\n"
    "State in one line the goal solved with this tool call and what is now known."
)


def _local_goal_line(rec: ChatRecord) -> str:
    finding = (rec.observation or "").strip()
    if len(finding) > 160:
        finding = finding[:157] + "..."
    finding = finding[0].lower() + finding[1:] if finding else "the call returned nothing"
    return f"- I searched for {rec.action}, and I now know that {finding}"


def _enforce_cap(lines: list[str], cap: int) -> list[str]:
    """Keep the summary within ``cap`` total characters.

    The first line anchors the session goal and survives; the oldest lines
    after it are folded into a single compaction marker when space runs out.
    """

    def total(ls):
        return sum(len(l) for l in ls)

    if total(lines) <= cap:
        return lines
    if len(lines) == 1:
        return [lines[0][: max(cap - 3, 0)] + "..."]
    anchor, middle, newest = lines[0], lines[1:-1], lines[-1]
    dropped = 0

    def assemble():
        marker = [f"- ({dropped} earlier findings compacted)"] if dropped else []
        return [anchor, *marker, *middle, newest]

    while middle and total(assemble()) > cap:
        middle.pop(0)
        dropped += 1
    out = assemble()
    if total(out) > cap:
        excess = total(out) - cap
        out[-1] = newest[: max(len(newest) - excess - 3, 0)] + "..."
    if total(out) > cap:  # pathological tiny cap: keep the newest line only
        out = [out[-1][: max(cap - 3, 0)] + "..."]
    return out


def summarize_progressive(
    current: ChatSummary,
    rec: ChatRecord,
    gw: LlmGateway | None,
    cap: int = 1200,
) -> ChatSummary:
    """Append one extracted goal line for a tool record.

    All prior lines are preserved verbatim until the cap forces compaction of
    the oldest non-anchor lines. With ``gw=None`` the goal line is composed
    locally from the record, which keeps replay deterministic without a
    script.
    """
    if not rec.action:
        raise ValueError("record has no tool action to summarize")
    if gw is None:
        line = _local_goal_line(rec)
    else:
        line = _one_shot(
            gw,
            SUMMARY_PROMPT.format(
                current=current.text() or "(empty)",
                thought=rec.thought or "",
                action=rec.action,
                action_input=rec.action_input or "{}",
                observation=rec.observation or "",
            ),
        ).strip()
        if not line.startswith("-"):
            line = "- " + line
    return ChatSummary(lines=_enforce_cap(list(current.lines) + [line], cap))


def default_updater(
    session: CollabSession, agent: AgentRole, rec: ChatRecord, cap: int
) -> None:
    if rec.action:
        agent.memory = summarize_progressive(agent.memory, rec, gw=None, cap=cap)


def _shared_summary(session: CollabSession) -> str:
    lines = []
    for rec in session.records[-8:]:
        body = rec.analysis or rec.observation or ""
        lines.append(f"{rec.speaker}: {body}")
    return "\n".join(lines) or "(nothing yet)"


AGENT_ACTION_PROMPT = (
    "[agent-action] You are {name} ({charter}).\n"
    "Anomaly: {anomaly}\n"
    "Your memory:\n{memory}\n"
    "Shared findings:\n{shared}\n"
    "Allowed tools:\n{tools}\n"
    "Respond with Thought, Action and Action Input to run one check."
)

AGENT_ANALYSIS_PROMPT = (
    "[agent-analysis] You are {name}. Your check ran:\n"
    "Action: {action}\nObservation: {observation}\n"
    "Give a one-line analysis of what this means for the diagnosis."
)

CHIEF_CONCLUDE_PROMPT = (
    "[chief-conclude] Round {round} finished. Causes so far: {causes}.\n"
    "Shared findings:\n{shared}\n"
    "Are you nearly certain about the diagnosis? Answer 'conclude' or 'continue'."
)


def _agent_step(
    session: CollabSession,
    agent: AgentRole,
    gw: LlmGateway,
    registry: ToolRegistry,
    anomaly_text: str,
) -> ChatRecord:
    allowed = registry.subset(agent.allows_tool)
    tools_text = "\n".join(f"- {t.name}: {t.description}" for t in allowed.specs) or "-"
    reply = _one_shot(
        gw,
        AGENT_ACTION_PROMPT.format(
            name=agent.name,
            charter=agent.charter,
            anomaly=anomaly_text,
            memory=agent.memory.text() or "(empty)",
            shared=_shared_summary(session),
            tools=tools_text,
        ),
    )
    thought, invocation, problem = parse_action_reply(reply)
    observation = None
    if invocation is None:
        observation = f"failed to call tool API: {problem}"
    else:
        metric = invocation.arguments.get("metric_name")
        spec = allowed.get(invocation.tool_name)
        if spec is None:
            observation = (
                f"failed to call tool API: {invocation.tool_name} is outside "
                f"{agent.name}'s charter"
            )
        elif isinstance(metric, str) and not agent.allows_metric(metric):
            observation = (
                f"failed to call tool API: metric {metric} is outside "
                f"{agent.name}'s charter"
            )
        else:
            problems = allowed.validate_args(spec, invocation.arguments)
            if problems:
                observation = "failed to call tool API: " + "; ".join(problems)
            else:
                observation = allowed.execute(invocation)
    analysis = _one_shot(
        gw,
        AGENT_ANALYSIS_PROMPT.format(
            name=agent.name,
            action=invocation.render() if invocation else "(malformed)",
            observation=observation,
        ),
    ).strip()
    return ChatRecord(
        seq=session.next_seq(),
        speaker=agent.name,
        thought=thought,
        action=invocation.tool_name if invocation else None,
        action_input=(
            json.dumps(invocation.arguments, sort_keys=True) if invocation else None
        ),
        observation=observation,
        analysis=analysis,
    )


def run_collaborative(
    alert,
    agents: list[AgentRole],
    env: EnvironmentSettings,
    gw: LlmGateway,
    kb: KnowledgeBase,
    registry: ToolRegistry,
    human_feedback: HumanInbox | None = None,
) -> DiagnosisReport:
    chief = next((a for a in agents if a.name == "ChiefDBA"), None)
    if chief is None:
        raise ValueError("ChiefDBA agent is required")
    anomaly_text = (
        f"{alert.description} (class={alert.anomaly_class}, "
        f"window {alert.start_time}-{alert.end_time})"
    )
    session = CollabSession(alert=alert, agents=agents)
    session.markers = {name.lower() for name in registry.names()}
    session.markers |= {s.name.lower() for s in kb.segments.values()}
    session.markers |= {m.lower() for m in sum((s.metrics for s in kb.segments.values()), [])}
    session.markers |= {"pg_stat_statements", "pg_stat_activity", "observation"}

    try:
        for round_index in range(env.max_rounds):
            if human_feedback is not None:
                for text in human_feedback.drain():
                    session.records.append(
                        ChatRecord(
                            seq=session.next_seq(), speaker="human", analysis=text
                        )
                    )
            agent = schedule_speaker(session, chief, gw, round_index)
            rec = _agent_step(session, agent, gw, registry, anomaly_text)
            accepted = post_message(session, rec, env)
            updater = env.updater or (
                lambda s, a, r: default_updater(s, a, r, env.summary_cap)
            )
            updater(session, agent, rec)

            if accepted and rec.observation:
                _harvest_metrics_from_record(rec, session)
                cause = match_experience(
                    kb,
                    session.abnormal,
                    session.metric_values,
                    session.reported,
                    gw,
                    evidence=f"{rec.speaker} seq {rec.seq}: {rec.observation}",
                )
                if cause is not None:
                    session.causes.append(cause)
                    session.reported.add(cause.cause_id)

            reply = _one_shot(
                gw,
                CHIEF_CONCLUDE_PROMPT.format(
                    round=round_index + 1,
                    causes=", ".join(c.cause_id for c in session.causes) or "none",
                    shared=_shared_summary(session),
                ),
            )
            if "conclude" in reply.lower():
                break
    except GatewayError as exc:
        raise DiagnosisAborted(
            f"collaborative diagnosis aborted: {exc}",
            transcript=session.records,
        ) from exc

    if not session.causes and not session.abnormal:
        session.records.append(
            ChatRecord(
                seq=session.next_seq(),
                speaker="ChiefDBA",
                analysis=(
                    "Specialist agents reported nothing useful from the database "
                    "metrics; investigating the application side next: app server "
                    "resource exhaustion, network latency, and slow client-side "
                    "query processing."
                ),
            )
        )

    summary = build_bullet_summary(session.causes)
    session.records.append(
        ChatRecord(
            seq=session.next_seq(),
            speaker="ChiefDBA",
            analysis="Consolidated diagnosis:\n" + summary,
        )
    )
    return DiagnosisReport(
        alert=alert,
        causes=session.causes,
        bullet_summary=summary,
        transcript=session.records,
    )


def _harvest_metrics_from_record(rec: ChatRecord, session: CollabSession) -> None:
    shim = type("NodeShim", (), {"observation": rec.observation})()
    _harvest_metrics(shim, session.abnormal, session.metric_values)
