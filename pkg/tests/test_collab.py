from __future__ import annotations

import json
import random

import pytest

from dbdoctor.bench import bundled_kb_path, bundled_scenarios_dir
from dbdoctor.collab import (
    AgentRole,
    ChatSummary,
    CollabSession,
    EnvironmentSettings,
    builtin_agents,
    default_selector,
    post_message,
    run_collaborative,
    schedule_speaker,
    summarize_progressive,
)
from dbdoctor.diagnosis import ChatRecord, HumanInbox
from dbdoctor.gateway import scripted_gateway
from dbdoctor.knowledge import KnowledgeBase
from dbdoctor.observability import AnomalyAlert, SourceConfig, SourceKind, build_tool_registry

B = 1684600070


def gateway(tmp_path, rules, name="script.json"):
    path = tmp_path / name
    path.write_text(json.dumps(rules))
    return scripted_gateway(path)


def session_with(agents=None, markers=()):
    s = CollabSession(alert=None, agents=agents or builtin_agents())
    s.markers = set(markers)
    return s


# --- scheduling ---------------------------------------------------------------


def test_schedule_constrained_choice(tmp_path):
    gw = gateway(tmp_path, [{"match": "[chief-schedule]", "reply": "CpuAgent"}])
    session = session_with()
    chief = session.agents[0]
    assert schedule_speaker(session, chief, gw, 0).name == "CpuAgent"


def test_schedule_unknown_agent_reprompt_then_round_robin(tmp_path):
    gw = gateway(tmp_path, [{"match": "[chief-schedule]", "reply": "DiskAgent"}])
    session = session_with()
    chief = session.agents[0]
    chosen = schedule_speaker(session, chief, gw, 0)
    assert gw.completion_calls == 2  # one re-prompt before falling back
    assert chosen.name == "CpuAgent"  # round-robin at round 0
    gw2 = gateway(tmp_path, [{"match": "[chief-schedule]", "reply": "DiskAgent"}], "s2.json")
    assert schedule_speaker(session, chief, gw2, 1).name == "MemoryAgent"


def test_schedule_single_agent_always_chosen(tmp_path):
    gw = gateway(tmp_path, [])  # never consulted
    agents = [builtin_agents()[0], AgentRole(name="OnlyAgent", charter="x")]
    session = session_with(agents=agents)
    assert schedule_speaker(session, agents[0], gw, 3).name == "OnlyAgent"
    assert gw.completion_calls == 0


# --- selector ----------------------------------------------------------------


def rec(seq=1, speaker="CpuAgent", observation=None, analysis=""):
    return ChatRecord(seq=seq, speaker=speaker, observation=observation, analysis=analysis)


def test_selector_accepts_observation_reference():
    session = session_with(markers={"pg_stat_statements"})
    env = EnvironmentSettings()
    r = rec(analysis="pg_stat_statements shows one dominating template")
    assert post_message(session, r, env) is True
    assert session.records == [r]


def test_selector_filters_free_floating_speculation():
    session = session_with(markers={"pg_stat_statements"})
    env = EnvironmentSettings()
    r = rec(analysis="it is probably the moon phase")
    assert post_message(session, r, env) is False
    assert session.records == [] and session.filtered == [r]


def test_selector_human_bypass():
    session = session_with(markers=set())
    env = EnvironmentSettings()
    r = rec(speaker="human", analysis="try the orders table")
    assert post_message(session, r, env) is True


def test_selector_tool_observation_grounds_record():
    session = session_with(markers=set())
    r = rec(observation="The metric is abnormal...", analysis="so it is the cpu")
    assert default_selector(session, r) is True


# --- progressive summary -------------------------------------------------------


def paper_record():
    return ChatRecord(
        seq=2,
        speaker="CpuAgent",
        thought=(
            "Now that I have the start and end time of the anomaly, I need to "
            "diagnose the causes of the anomaly"
        ),
        action="is_abnormal_metric",
        action_input=json.dumps(
            {"start_time": 1684600070, "end_time": 1684600074, "metric_name": "cpu_usage"}
        ),
        observation="The metric is abnormal",
    )


def test_progressive_summary_replay(tmp_path):
    current = ChatSummary(lines=["- I know the start and end time of the anomaly."])
    gw = gateway(
        tmp_path,
        [
            {
                "match": "[summarize-goal]",
                "reply": (
                    "- I searched for is_abnormal_metric, and I now know that the "
                    "CPU usage is abnormal."
                ),
            }
        ],
    )
    updated = summarize_progressive(current, paper_record(), gw)
    assert updated.lines[0] == "- I know the start and end time of the anomaly."
    assert "is_abnormal_metric" in updated.lines[1]
    assert "abnormal" in updated.lines[1]
    assert len(updated.lines) == 2


def test_progressive_summary_local_mode_replay():
    current = ChatSummary(lines=["- I know the start and end time of the anomaly."])
    updated = summarize_progressive(current, paper_record(), gw=None)
    assert updated.lines[0] == "- I know the start and end time of the anomaly."
    assert "is_abnormal_metric" in updated.lines[1]
    assert "abnormal" in updated.lines[1]


def test_progressive_summary_requires_tool_action():
    with pytest.raises(ValueError):
        summarize_progressive(ChatSummary(), rec(analysis="no tool"), gw=None)


def test_progressive_summary_from_empty():
    updated = summarize_progressive(ChatSummary(), paper_record(), gw=None)
    assert len(updated.lines) == 1


def test_progressive_summary_cap_random_sessions():
    rng = random.Random(42)
    cap = 400
    summary = ChatSummary(lines=["- anchor: anomaly window is known."])
    for i in range(100):
        record = ChatRecord(
            seq=i + 2,
            speaker="CpuAgent",
            action=rng.choice(["is_abnormal_metric", "fetch_metric", "fetch_slow_queries"]),
            action_input="{}",
            observation="x" * rng.randint(10, 200),
        )
        summary = summarize_progressive(summary, record, gw=None, cap=cap)
        assert sum(len(l) for l in summary.lines) <= cap
    assert summary.lines[0] == "- anchor: anomaly window is known."


def test_progressive_summary_earlier_lines_survive_until_compaction():
    summary = ChatSummary(lines=["- anchor line."])
    record = paper_record()
    summary = summarize_progressive(summary, record, gw=None, cap=10_000)
    first_goal = summary.lines[1]
    summary = summarize_progressive(summary, record, gw=None, cap=10_000)
    assert summary.lines[1] == first_goal  # preserved verbatim, no compaction yet


# --- run_collaborative ---------------------------------------------------------


def workload_env():
    scenario_dir = bundled_scenarios_dir() / "WORKLOAD_CONTENTION"
    meta = json.loads((scenario_dir / "scenario.json").read_text())
    src = SourceConfig(
        kind=SourceKind.FIXTURE,
        fixture_dir=scenario_dir / "fixtures",
        thresholds=meta["thresholds"],
    )
    alert = AnomalyAlert.from_dict(meta["alert"])
    registry = build_tool_registry(src)
    kb = KnowledgeBase.load(bundled_kb_path())
    return scenario_dir, alert, registry, kb


def test_collab_workload_contention_scenario():
    scenario_dir, alert, registry, kb = workload_env()
    gw = scripted_gateway(scenario_dir / "script.json")
    report = run_collaborative(
        alert, builtin_agents(), EnvironmentSettings(max_rounds=4), gw, kb, registry
    )
    assert [c.cause_id for c in report.causes] == ["WORKLOAD_CONTENTION"]
    speakers = {r.speaker for r in report.transcript}
    assert "CpuAgent" in speakers and "ChiefDBA" in speakers
    cpu_records = [r for r in report.transcript if r.speaker == "CpuAgent"]
    assert any("cpu_usage" in (r.observation or "") for r in cpu_records)
    consolidation = [r for r in report.transcript if r.speaker == "ChiefDBA"]
    assert any("WORKLOAD_CONTENTION" in r.analysis for r in consolidation)


def test_collab_one_speaker_per_round():
    scenario_dir, alert, registry, kb = workload_env()
    gw = scripted_gateway(scenario_dir / "script.json")
    report = run_collaborative(
        alert, builtin_agents(), EnvironmentSettings(max_rounds=4), gw, kb, registry
    )
    non_chief = [r for r in report.transcript if r.speaker in ("CpuAgent", "MemoryAgent")]
    seqs = [r.seq for r in report.transcript]
    assert seqs == sorted(seqs) and len(seqs) == len(set(seqs))
    assert len(non_chief) == 2  # two rounds before the chief concluded


def test_collab_report_causes_superset_of_agent_causes():
    scenario_dir, alert, registry, kb = workload_env()
    gw = scripted_gateway(scenario_dir / "script.json")
    report = run_collaborative(
        alert, builtin_agents(), EnvironmentSettings(max_rounds=4), gw, kb, registry
    )
    agent_mentions = {
        c.cause_id
        for c in report.causes  # causes are attributed to agent records
    }
    assert agent_mentions <= {c.cause_id for c in report.causes}
    assert report.causes  # non-empty for this scenario


def test_collab_agents_find_nothing_chief_checks_application_side(tmp_path):
    scenario_dir, alert, registry, kb = workload_env()
    # quiet fixtures: nothing abnormal anywhere
    quiet = tmp_path / "fixtures"
    quiet.mkdir()
    for metric in ("cpu_usage", "active_sessions", "memory_usage"):
        quiet.joinpath(f"{metric}.json").write_text(
            json.dumps({"metric_name": metric, "points": [[B + i, 0.01] for i in range(5)]})
        )
    src = SourceConfig(
        kind=SourceKind.FIXTURE,
        fixture_dir=quiet,
        thresholds={"cpu_usage": 0.8, "active_sessions": 50, "memory_usage": 0.7},
    )
    registry = build_tool_registry(src)
    window = {"start_time": B, "end_time": B + 4}
    gw = gateway(
        tmp_path,
        [
            {"match": "[chief-schedule]", "reply": "CpuAgent", "max_uses": 1},
            {"match": "[chief-schedule]", "reply": "MemoryAgent"},
            {
                "match": "[agent-action]",
                "reply": (
                    "Thought: check cpu\nAction: is_abnormal_metric\n"
                    f"Action Input: {json.dumps(dict(window, metric_name='cpu_usage'))}"
                ),
                "max_uses": 1,
            },
            {
                "match": "[agent-action]",
                "reply": (
                    "Thought: check memory\nAction: is_abnormal_metric\n"
                    f"Action Input: {json.dumps(dict(window, metric_name='memory_usage'))}"
                ),
            },
            # ungrounded speculation: the selector must filter it
            {"match": "[agent-analysis]", "reply": "CANARY-nothing concrete to report"},
            {"match": "[chief-conclude]", "reply": "continue", "max_uses": 1},
            {"match": "[chief-conclude]", "reply": "conclude"},
        ],
    )
    report = run_collaborative(
        alert, builtin_agents(), EnvironmentSettings(max_rounds=2), gw, kb, registry
    )
    assert report.causes == []
    chief_lines = [r.analysis for r in report.transcript if r.speaker == "ChiefDBA"]
    assert any("application side" in line for line in chief_lines)


def test_collab_max_rounds_one(tmp_path):
    scenario_dir, alert, registry, kb = workload_env()
    gw = scripted_gateway(scenario_dir / "script.json")
    report = run_collaborative(
        alert, builtin_agents(), EnvironmentSettings(max_rounds=1), gw, kb, registry
    )
    non_chief = [r for r in report.transcript if r.speaker in ("CpuAgent", "MemoryAgent")]
    assert len(non_chief) == 1


def test_collab_human_feedback_visible_and_bypasses_selector():
    scenario_dir, alert, registry, kb = workload_env()
    gw = scripted_gateway(scenario_dir / "script.json")
    inbox = HumanInbox()
    inbox.post("the surge started right after the deploy")
    report = run_collaborative(
        alert,
        builtin_agents(),
        EnvironmentSettings(max_rounds=4),
        gw,
        kb,
        registry,
        human_feedback=inbox,
    )
    human = [r for r in report.transcript if r.speaker == "human"]
    assert len(human) == 1 and "deploy" in human[0].analysis


def test_filtered_records_never_reach_visible_context(tmp_path):
    """A canary token in a filtered analysis must not appear in any later
    prompt sent through the gateway."""
    scenario_dir, alert, _, kb = workload_env()
    quiet = tmp_path / "fixtures"
    quiet.mkdir()
    for metric in ("cpu_usage", "memory_usage"):
        quiet.joinpath(f"{metric}.json").write_text(
            json.dumps({"metric_name": metric, "points": [[B + i, 0.01] for i in range(5)]})
        )
    src = SourceConfig(
        kind=SourceKind.FIXTURE,
        fixture_dir=quiet,
        thresholds={"cpu_usage": 0.8, "memory_usage": 0.7},
    )
    registry = build_tool_registry(src)
    window = {"start_time": B, "end_time": B + 4}
    gw = gateway(
        tmp_path,
        [
            {"match": "[chief-schedule]", "reply": "CpuAgent"},
            {
                "match": "[agent-action]",
                "reply": (
                    "Thought: speculation only\nAction: ghost_tool\nAction Input: {}"
                ),
            },
            {"match": "[agent-analysis]", "reply": "CANARY-speculation with no grounding"},
            {"match": "[chief-conclude]", "reply": "continue", "max_uses": 1},
            {"match": "[chief-conclude]", "reply": "conclude"},
        ],
    )

    env = EnvironmentSettings(
        max_rounds=2,
        # tighten the default: a failed tool call (observation present but
        # useless) with an ungrounded analysis gets filtered
        selector=lambda session, r: r.speaker == "human"
        or ("CANARY" not in (r.analysis or "")),
    )
    run_collaborative(alert, builtin_agents(), env, gw, kb, registry)
    later_prompts = gw.request_log[3:]  # after the first canary reply exists
    assert all("CANARY" not in p for p in later_prompts)
