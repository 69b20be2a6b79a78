"""UCT-guided tree-of-thought diagnosis engine.

Each simulation selects a node, expands it with a model-proposed tool action,
executes the tool, reflects on the path, checks the observations against the
experience base and backpropagates the reward. A proposal naming a tool the
registry does not know (or with invalid arguments) is not an error: the child
is pinned to the failure score -1 and the search routes around it.
"""

from __future__ import annotations

import json
import math
import queue
import re
from dataclasses import dataclass, field

from .errors import DiagnosisAborted, GatewayError
from .gateway import ChatMessage, CompletionRequest, LlmGateway, Role, ToolInvocation
from .knowledge import ExperienceSegment, KnowledgeBase
from .retrieval import Bm25Params, ToolRegistry, bm25_score, build_corpus_stats, rank_tools_bm25
from .textutil import tokenize

FAILED_SCORE = -1.0


@dataclass
class SearchParams:
    C: float = math.sqrt(2.0)
    no_progress_limit: int = 5
    max_nodes: int = 32

    def __post_init__(self):
        if self.C < 0:
            raise ValueError("C must be >= 0")
        if self.no_progress_limit <= 0 or self.max_nodes <= 0:
            raise ValueError("limits must be positive")


@dataclass
class ChatRecord:
    """One transcript entry in Thought / Action / Action Input / Observation shape."""

    seq: int
    speaker: str
    thought: str | None = None
    action: str | None = None
    action_input: str | None = None
    observation: str | None = None
    analysis: str = ""

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "speaker": self.speaker,
            "thought": self.thought,
            "action": self.action,
            "action_input": self.action_input,
            "observation": self.observation,
            "analysis": self.analysis,
        }


@dataclass
class TreeNode:
    node_id: int
    parent: int | None
    action: ToolInvocation | None = None
    observation: str | None = None
    w: float = 0.0
    n: int = 0
    uct_override: float | None = None
    children: list = field(default_factory=list)
    failed: bool = False


@dataclass
class DiagnosisTree:
    nodes: dict
    root: int = 0
    N: int = 0

    @classmethod
    def new(cls, request_text: str) -> "DiagnosisTree":
        root = TreeNode(node_id=0, parent=None, observation=request_text)
        return cls(nodes={0: root})

    def add_child(self, parent_id: int, **kwargs) -> TreeNode:
        node = TreeNode(node_id=len(self.nodes), parent=parent_id, **kwargs)
        self.nodes[node.node_id] = node
        self.nodes[parent_id].children.append(node.node_id)
        return node

    def path_to(self, node_id: int) -> list[int]:
        path = []
        cursor: int | None = node_id
        while cursor is not None:
            path.append(cursor)
            cursor = self.nodes[cursor].parent
        return list(reversed(path))


def uct(v: TreeNode, N: int, C: float) -> float:
    """w/n plus the C-weighted sqrt(ln N / n) exploration bonus.

    An override (set by reflection) wins outright; an unvisited node scores
    +inf so that it gets tried once.
    """
    if v.uct_override is not None:
        return v.uct_override
    if v.n == 0:
        return math.inf
    return v.w / v.n + C * math.sqrt(math.log(N) / v.n)


_METRIC_TOKEN = re.compile(r"\b[a-z][a-z0-9]*(?:_[a-z0-9]+)+\b")


def detect_abnormal_metrics(text: str) -> list[str]:
    """Metric identifiers mentioned in a text that reports an abnormality."""
    lowered = text.lower()
    if "abnormal" not in lowered or "not abnormal" in lowered:
        return []
    return list(dict.fromkeys(_METRIC_TOKEN.findall(lowered)))


def _targeted_metrics(tree: DiagnosisTree) -> set:
    targeted = set()
    for node in tree.nodes.values():
        if node.action is not None:
            value = node.action.arguments.get("metric_name")
            if isinstance(value, str):
                targeted.add(value)
    return targeted


def select(tree: DiagnosisTree, params: SearchParams, last_observation: str) -> int:
    """Pick the node to expand under.

    If the last observation surfaced an abnormal metric that no existing
    action targets, expansion under the observing node is mandated; otherwise
    the highest-UCT node wins, ties to the lowest node id.
    """
    if not tree.nodes:
        raise ValueError("tree is not initialized")
    untargeted = [
        m
        for m in detect_abnormal_metrics(last_observation)
        if m not in _targeted_metrics(tree)
    ]
    if untargeted:
        observers = [
            n.node_id
            for n in tree.nodes.values()
            if n.observation == last_observation
        ]
        return max(observers) if observers else tree.root
    best_id = None
    best_score = -math.inf
    for node_id in sorted(tree.nodes):
        score = uct(tree.nodes[node_id], max(tree.N, 1), params.C)
        if score > best_score:
            best_id, best_score = node_id, score
    if best_id is None:
        raise ValueError("no expandable nodes")
    return best_id


_ACTION_RE = re.compile(r"Action:\s*([\w.-]+)", re.IGNORECASE)
_INPUT_RE = re.compile(r"Action Input:\s*(\{.*?\})", re.IGNORECASE | re.DOTALL)
_THOUGHT_RE = re.compile(r"Thought:\s*(.+)", re.IGNORECASE)


def parse_action_reply(reply: str):
    """Parse a Thought/Action/Action Input block. Returns (thought, invocation,
    problem); a malformed block yields a problem string instead of raising."""
    thought_m = _THOUGHT_RE.search(reply)
    thought = thought_m.group(1).strip() if thought_m else None
    action_m = _ACTION_RE.search(reply)
    if not action_m:
        return thought, None, "proposal has no Action line"
    input_m = _INPUT_RE.search(reply)
    arguments = {}
    if input_m:
        try:
            arguments = json.loads(input_m.group(1))
        except json.JSONDecodeError:
            return thought, None, "Action Input is not valid JSON"
    elif re.search(r"Action Input:", reply, re.IGNORECASE):
        return thought, None, "Action Input is not valid JSON"
    try:
        invocation = ToolInvocation(action_m.group(1), arguments)
    except ValueError as exc:
        return thought, None, str(exc)
    return thought, invocation, None


def expand(
    tree: DiagnosisTree,
    at: int,
    context: str,
    gw: LlmGateway,
    registry: ToolRegistry,
) -> int:
    """Ask the model for the next action under ``at``, execute it, attach the
    child. Unknown tools, bad arguments and executor failures produce a
    failed child (w = -1) rather than an error."""
    if at not in tree.nodes:
        raise KeyError(f"no node {at}")
    reply = _one_shot(gw, context)
    thought, invocation, problem = parse_action_reply(reply)
    if invocation is None:
        child = tree.add_child(
            at, observation=f"failed to call tool API: {problem}",
            w=FAILED_SCORE, failed=True,
        )
        return child.node_id

    spec = registry.get(invocation.tool_name)
    if spec is None:
        child = tree.add_child(
            at,
            action=invocation,
            observation=f"failed to call tool API: unknown tool {invocation.tool_name}",
            w=FAILED_SCORE,
            failed=True,
        )
        return child.node_id
    problems = registry.validate_args(spec, invocation.arguments)
    if problems:
        child = tree.add_child(
            at,
            action=invocation,
            observation="failed to call tool API: " + "; ".join(problems),
            w=FAILED_SCORE,
            failed=True,
        )
        return child.node_id
    try:
        observation = registry.execute(invocation)
    except GatewayError:
        raise
    except Exception as exc:  # tool runtime failure = failed API call
        child = tree.add_child(
            at,
            action=invocation,
            observation=f"failed to call tool API: {exc}",
            w=FAILED_SCORE,
            failed=True,
        )
        return child.node_id
    child = tree.add_child(at, action=invocation, observation=observation)
    return child.node_id


REFLECT_PROMPT = (
    "[reflect] The step below ran during a database diagnosis.\n"
    "Action: {action}\nObservation: {observation}\n"
    "Does this step find useful information for locating a root cause? "
    "Answer 'useful' or 'not useful'."
)


def reflect(
    tree: DiagnosisTree, path: list[int], gw: LlmGateway, params: SearchParams
) -> DiagnosisTree:
    """Demote path nodes judged unhelpful to their parent's pre-reflection UCT.

    A later 'useful' verdict clears an earlier override.
    """
    snapshot = {
        node_id: uct(tree.nodes[node_id], max(tree.N, 1), params.C)
        for node_id in path
    }
    for node_id in path:
        node = tree.nodes[node_id]
        if node.parent is None or node.action is None:
            continue
        reply = _one_shot(
            gw,
            REFLECT_PROMPT.format(
                action=node.action.render(), observation=node.observation or ""
            ),
        )
        verdict = reply.strip().lower()
        if "not useful" in verdict:
            node.uct_override = snapshot[node.parent]
        elif "useful" in verdict:
            node.uct_override = None
    return tree


def backpropagate(tree: DiagnosisTree, leaf: int, reward: float) -> DiagnosisTree:
    if not 0.0 <= reward <= 1.0:
        raise ValueError("reward must be in [0, 1]")
    for node_id in tree.path_to(leaf):
        node = tree.nodes[node_id]
        node.n += 1
        if node.failed:
            node.w = FAILED_SCORE  # failure sentinel is permanent
        else:
            node.w += reward
    tree.N += 1
    return tree


# --- experience matching ----------------------------------------------------

_CONDITION_RE = re.compile(
    r"\b(?P<metric>[a-z][a-z0-9_]*)\s+"
    r"(?:also\s+)?(?P<op>exceeds|is above|is over|is at least|is below|is under|stays below)"
    r"(?:\s+the\s+(?:threshold|limit))?\s*\(?\s*(?P<value>\d+(?:\.\d+)?)\s*(?:MB|GB|ms|%)?\s*\)?",
    re.IGNORECASE,
)

_OPS = {
    "exceeds": lambda a, b: a > b,
    "is above": lambda a, b: a > b,
    "is over": lambda a, b: a > b,
    "is at least": lambda a, b: a >= b,
    "is below": lambda a, b: a < b,
    "is under": lambda a, b: a < b,
    "stays below": lambda a, b: a < b,
}


def parse_step_conditions(steps: str) -> list[tuple]:
    """Threshold conditions (metric, op, value) parsed from a steps text."""
    conditions = []
    for m in _CONDITION_RE.finditer(steps):
        metric = m.group("metric").lower()
        conditions.append((metric, m.group("op").lower(), float(m.group("value"))))
    return conditions


STEPS_CHECK_PROMPT = (
    "[steps-check] Experience {name} gives this check procedure:\n{steps}\n"
    "Known metric peaks: {values}\n"
    "Is this root cause confirmed by the data? Answer 'confirmed' or 'not confirmed'."
)


def evaluate_steps(
    seg: ExperienceSegment, metric_values: dict, gw: LlmGateway | None
) -> bool:
    """True iff the segment's checking steps hold over the observed values.

    Parseable threshold conditions are evaluated directly; a steps text with
    no parseable condition falls back to one model judgment call.
    """
    conditions = parse_step_conditions(seg.steps)
    if conditions:
        for metric, op, value in conditions:
            observed = metric_values.get(metric)
            if observed is None or not _OPS[op](observed, value):
                return False
        return True
    if gw is None:
        return False
    values = json.dumps(metric_values, sort_keys=True)
    reply = _one_shot(
        gw, STEPS_CHECK_PROMPT.format(name=seg.name, steps=seg.steps, values=values)
    )
    verdict = reply.strip().lower()
    return "confirmed" in verdict and "not confirmed" not in verdict


def extract_solutions(steps: str) -> list[str]:
    """Solution sentences (the 'we suggest ...' tail) of a steps text."""
    solutions = []
    for sentence in re.split(r"(?<=[.!?])\s+", steps):
        if re.search(r"\b(suggest|recommend)\b", sentence, re.IGNORECASE):
            solutions.append(sentence.strip())
    return solutions


@dataclass
class RootCause:
    cause_id: str
    evidence: str
    matched_experience: str
    solutions: list

    def to_dict(self) -> dict:
        return {
            "cause_id": self.cause_id,
            "evidence": self.evidence,
            "matched_experience": self.matched_experience,
            "solutions": list(self.solutions),
        }


@dataclass
class DiagnosisReport:
    alert: object
    causes: list
    bullet_summary: str
    transcript: list

    def to_dict(self) -> dict:
        return {
            "alert": self.alert.to_dict(),
            "causes": [c.to_dict() for c in self.causes],
            "bullet_summary": self.bullet_summary,
            "transcript": [r.to_dict() for r in self.transcript],
        }


def build_bullet_summary(causes: list[RootCause]) -> str:
    if not causes:
        return "- no root cause identified"
    lines = []
    for cause in causes:
        lines.append(f"- {cause.cause_id} (experience: {cause.matched_experience})")
        if cause.solutions:
            for solution in cause.solutions:
                lines.append(f"  - {solution}")
        else:
            lines.append("  - no specific solution recorded")
    return "\n".join(lines)


def match_experience(
    kb: KnowledgeBase,
    abnormal: dict,
    metric_values: dict,
    already: set,
    gw: LlmGateway | None,
    evidence: str,
) -> RootCause | None:
    """First experience segment confirmed by the abnormal metrics and steps."""
    for seg in kb.segments_for_metrics(abnormal.keys()):
        cause_id = seg.name.upper()
        if cause_id in already:
            continue
        if evaluate_steps(seg, metric_values, gw):
            return RootCause(
                cause_id=cause_id,
                evidence=evidence,
                matched_experience=seg.name,
                solutions=extract_solutions(seg.steps),
            )
    return None


# --- the engine loop --------------------------------------------------------


class HumanInbox:
    """Thread-safe feedback channel drained between scheduling rounds."""

    def __init__(self):
        self._queue: queue.Queue = queue.Queue()

    def post(self, text: str) -> None:
        self._queue.put(text)

    def drain(self) -> list[str]:
        out = []
        while True:
            try:
                out.append(self._queue.get_nowait())
            except queue.Empty:
                return out


DEFAULT_TASK_DESCRIPTION = (
    "You assist with database anomaly diagnosis. Establish the anomaly window, "
    "check suspicious metrics and views with the tools, match confirmed "
    "findings against the experience base, and report every root cause with "
    "its solutions as bullet points."
)

DEFAULT_TEMPLATE = (
    "{task_description}\n"
    "Anomaly: {anomaly}\n"
    "Available tools:\n{tools}\n"
    "Relevant experience:\n{experience}\n"
)

PROPOSE_SUFFIX = (
    "Path so far:\n{path}\n"
    "Abnormal so far: {abnormal}\n"
    "Human feedback: {feedback}\n"
    "[propose-action] Respond with Thought, Action (one tool name) and "
    "Action Input (a JSON object)."
)


def _one_shot(gw: LlmGateway, prompt: str) -> str:
    req = CompletionRequest(messages=[ChatMessage(Role.USER, prompt, seq=1)])
    return gw.complete(req).content


def _rank_segments(alert_text: str, segments: list[ExperienceSegment], k: int = 3):
    if not segments:
        return []
    docs = [tokenize(f"{s.name} {s.content}") for s in segments]
    stats = build_corpus_stats(docs)
    query = tokenize(alert_text)
    params = Bm25Params()
    scored = [
        (bm25_score(query, doc, stats, params), seg)
        for doc, seg in zip(docs, segments)
    ]
    order = sorted(range(len(scored)), key=lambda i: -scored[i][0])
    return [scored[i][1] for i in order[:k]]


def _describe_path(tree: DiagnosisTree, node_id: int) -> str:
    lines = []
    for nid in tree.path_to(node_id):
        node = tree.nodes[nid]
        if node.action is None:
            lines.append(f"- root: {node.observation}")
        else:
            lines.append(f"- {node.action.render()} -> {node.observation}")
    return "\n".join(lines)


def run_diagnosis(
    alert,
    kb: KnowledgeBase,
    registry: ToolRegistry,
    gw: LlmGateway,
    params: SearchParams = SearchParams(),
    human_feedback: HumanInbox | None = None,
    template: str = DEFAULT_TEMPLATE,
    task_description: str = DEFAULT_TASK_DESCRIPTION,
) -> DiagnosisReport:
    """Full select / expand / reflect / match / backpropagate loop.

    Ends after ``no_progress_limit`` consecutive simulations without a new
    cause, or when ``max_nodes`` expansions were spent. Script exhaustion
    aborts with the partial transcript preserved.
    """
    anomaly_text = (
        f"{alert.description} (class={alert.anomaly_class}, "
        f"window {alert.start_time}-{alert.end_time})"
    )
    tree = DiagnosisTree.new(anomaly_text)
    transcript: list[ChatRecord] = [
        ChatRecord(seq=1, speaker="user", analysis=f"diagnosis request: {anomaly_text}")
    ]
    causes: list[RootCause] = []
    reported: set = set()
    abnormal: dict = {}
    metric_values: dict = {}
    feedback_lines: list[str] = []
    last_observation = anomaly_text
    fruitless = 0

    tools_text = "\n".join(
        f"- {t.name}: {t.description}"
        for t in rank_tools_bm25(alert.description, registry.specs, k=5)
    )
    experience_text = "\n".join(
        f"- {s.name}: {s.content}" for s in _rank_segments(anomaly_text, kb.all_segments())
    )
    header = template.format(
        task_description=task_description,
        anomaly=anomaly_text,
        tools=tools_text,
        experience=experience_text,
    )

    try:
        while fruitless < params.no_progress_limit and (
            len(tree.nodes) - 1 < params.max_nodes
        ):
            if human_feedback is not None:
                for text in human_feedback.drain():
                    feedback_lines.append(text)
                    transcript.append(
                        ChatRecord(
                            seq=len(transcript) + 1, speaker="human", analysis=text
                        )
                    )
            selected = select(tree, params, last_observation)
            prompt = header + PROPOSE_SUFFIX.format(
                path=_describe_path(tree, selected),
                abnormal=", ".join(sorted(abnormal)) or "none",
                feedback="; ".join(feedback_lines) or "none",
            )
            child_id = expand(tree, selected, prompt, gw, registry)
            child = tree.nodes[child_id]
            reflect(tree, tree.path_to(child_id), gw, params)

            _harvest_metrics(child, abnormal, metric_values)
            cause = None
            if not child.failed:
                cause = match_experience(
                    kb,
                    abnormal,
                    metric_values,
                    reported,
                    gw,
                    evidence=f"node {child_id}: {child.observation}",
                )
            reward = 1.0 if cause is not None else 0.0
            backpropagate(tree, child_id, reward)
            if cause is not None:
                causes.append(cause)
                reported.add(cause.cause_id)
                fruitless = 0
            else:
                fruitless += 1

            transcript.append(
                ChatRecord(
                    seq=len(transcript) + 1,
                    speaker="dbot",
                    action=child.action.tool_name if child.action else None,
                    action_input=(
                        json.dumps(child.action.arguments, sort_keys=True)
                        if child.action
                        else None
                    ),
                    observation=child.observation,
                    analysis=(
                        f"confirmed root cause {cause.cause_id}"
                        if cause
                        else "no new root cause this simulation"
                    ),
                )
            )
            last_observation = child.observation or ""
    except GatewayError as exc:
        raise DiagnosisAborted(
            f"diagnosis aborted: {exc}", transcript=transcript
        ) from exc

    summary = build_bullet_summary(causes)
    transcript.append(
        ChatRecord(seq=len(transcript) + 1, speaker="dbot", analysis=summary)
    )
    return DiagnosisReport(
        alert=alert, causes=causes, bullet_summary=summary, transcript=transcript
    )


_PEAK_RE = re.compile(r"\b([a-z][a-z0-9_]*)\s+peak\s+([0-9.]+)")
_ABNORMAL_SUFFIX_RE = re.compile(r"\(([a-z][a-z0-9_]*)\s+abnormal\)")


def _harvest_metrics(node: TreeNode, abnormal: dict, metric_values: dict) -> None:
    text = (node.observation or "").lower()
    for name, value in _PEAK_RE.findall(text):
        try:
            metric_values[name] = float(value.rstrip("."))
        except ValueError:
            continue
    for name in _ABNORMAL_SUFFIX_RE.findall(text):
        if name in metric_values:
            abnormal[name] = metric_values[name]


# --- metrics-only baseline (no knowledge base, no non-metric tools) ---------

BASELINE_PROMPT = (
    "You diagnose a database anomaly using raw monitoring metrics only.\n"
    "Anomaly: {anomaly}\n"
    "Metric tools:\n{tools}\n"
    "Checked so far:\n{path}\n"
    "[baseline-action] Either respond with Thought/Action/Action Input to "
    "check one metric, or give your final analysis starting with "
    "'Final analysis:' including a 'Causes:' line."
)

_CAUSES_RE = re.compile(r"Causes:\s*([A-Z][A-Z0-9_]*(?:\s*,\s*[A-Z][A-Z0-9_]*)*)")


def run_baseline(
    alert,
    registry: ToolRegistry,
    gw: LlmGateway,
    max_steps: int = 8,
) -> DiagnosisReport:
    """The metrics-only comparison condition: a flat observe/answer loop."""
    anomaly_text = (
        f"{alert.description} (class={alert.anomaly_class}, "
        f"window {alert.start_time}-{alert.end_time})"
    )
    tools_text = "\n".join(f"- {t.name}: {t.description}" for t in registry.specs)
    transcript = [
        ChatRecord(seq=1, speaker="user", analysis=f"diagnosis request: {anomaly_text}")
    ]
    path_lines: list[str] = []
    causes: list[RootCause] = []
    summary = ""
    try:
        for _ in range(max_steps):
            prompt = BASELINE_PROMPT.format(
                anomaly=anomaly_text,
                tools=tools_text,
                path="\n".join(path_lines) or "- nothing yet",
            )
            reply = _one_shot(gw, prompt)
            if "final analysis" in reply.lower():
                summary = reply.strip()
                m = _CAUSES_RE.search(reply)
                if m:
                    for cause_id in re.split(r"[,;]", m.group(1)):
                        cause_id = cause_id.strip().strip(".")
                        if cause_id:
                            causes.append(
                                RootCause(
                                    cause_id=cause_id,
                                    evidence="stated in final metrics analysis",
                                    matched_experience="",
                                    solutions=[],
                                )
                            )
                transcript.append(
                    ChatRecord(
                        seq=len(transcript) + 1, speaker="baseline", analysis=summary
                    )
                )
                break
            thought, invocation, problem = parse_action_reply(reply)
            if invocation is None:
                observation = f"failed to call tool API: {problem}"
            else:
                spec = registry.get(invocation.tool_name)
                if spec is None:
                    observation = (
                        f"failed to call tool API: unknown tool {invocation.tool_name}"
                    )
                else:
                    problems = registry.validate_args(spec, invocation.arguments)
                    observation = (
                        "failed to call tool API: " + "; ".join(problems)
                        if problems
                        else registry.execute(invocation)
                    )
            path_lines.append(
                f"- {invocation.render() if invocation else 'malformed'} -> {observation}"
            )
            transcript.append(
                ChatRecord(
                    seq=len(transcript) + 1,
                    speaker="baseline",
                    thought=thought,
                    action=invocation.tool_name if invocation else None,
                    action_input=(
                        json.dumps(invocation.arguments, sort_keys=True)
                        if invocation
                        else None
                    ),
                    observation=observation,
                    analysis="checked one metric",
                )
            )
    except GatewayError as exc:
        raise DiagnosisAborted(
            f"baseline aborted: {exc}", transcript=transcript
        ) from exc

    return DiagnosisReport(
        alert=alert,
        causes=causes,
        bullet_summary=summary or build_bullet_summary(causes),
        transcript=transcript,
    )
