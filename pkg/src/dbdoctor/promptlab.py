"""Generate, score and select diagnosis prompt templates from labeled samples.

Candidates come from the model in batches of up to five labeled samples per
proposal request; each candidate is scored by the ratio of labeled root causes
the diagnosis engine detects with it, and the best templates are reserved for
a final (human-vetoable) pick.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .diagnosis import SearchParams, run_diagnosis
from .errors import DbDoctorError, PromptValidationError
from .gateway import ChatMessage, CompletionRequest, LlmGateway, Role
from .knowledge import KnowledgeBase
from .observability import AnomalyAlert, SourceConfig, SourceKind, build_tool_registry

REQUIRED_SLOTS = ("task_description", "anomaly", "tools", "experience")
SAMPLES_PER_REQUEST = 5


@dataclass
class DiagnosisSample:
    alert: AnomalyAlert
    fixture_dir: str | Path
    labeled_causes: list
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.labeled_causes:
            raise ValueError("labeled_causes must be non-empty")


@dataclass
class PromptCandidate:
    template: str
    origin: str = "llm-suggested"  # or "seeded"

    def __post_init__(self):
        missing = missing_slots(self.template)
        if missing:
            raise PromptValidationError(
                f"template missing slots: {', '.join(missing)}"
            )


@dataclass
class ScoredPrompt:
    candidate: PromptCandidate
    score: float
    per_sample: list  # detected cause ids, one list per sample


def missing_slots(template: str) -> list[str]:
    return [s for s in REQUIRED_SLOTS if ("{%s}" % s) not in template]


PROPOSE_PROMPT = (
    "[propose-prompts] Below are {count} labeled diagnosis samples "
    "(anomaly -> root causes).\n{samples}\n"
    "Suggest prompt templates for the diagnosis task. Each template must "
    "contain the literal slots {{task_description}}, {{anomaly}}, {{tools}} "
    "and {{experience}}. Reply with a JSON array of template strings."
)


def _sample_line(sample: DiagnosisSample) -> str:
    return (
        f"- {sample.alert.description} (class={sample.alert.anomaly_class}) -> "
        f"{', '.join(sample.labeled_causes)}"
    )


def _parse_template_list(reply: str) -> list[str]:
    text = reply.strip()
    fenced = re.search(r"```(?:json)?\s*(.+?)```", text, re.DOTALL)
    if fenced:
        text = fenced.group(1).strip()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PromptValidationError(f"proposal reply is not JSON: {exc}") from exc
    if not isinstance(data, list):
        raise PromptValidationError("proposal reply must be a JSON array")
    return [str(t) for t in data]


def propose_prompts(
    samples: list[DiagnosisSample], count: int, gw: LlmGateway
) -> list[PromptCandidate]:
    """Ask for candidates in sample groups of five (the last may be smaller).

    Malformed templates are rejected with a diagnostic; at least one valid
    candidate must come back.
    """
    if not samples:
        raise ValueError("at least one sample required")
    candidates: list[PromptCandidate] = []
    rejected: list[str] = []
    for i in range(0, len(samples), SAMPLES_PER_REQUEST):
        group = samples[i : i + SAMPLES_PER_REQUEST]
        prompt = PROPOSE_PROMPT.format(
            count=len(group), samples="\n".join(_sample_line(s) for s in group)
        )
        req = CompletionRequest(messages=[ChatMessage(Role.USER, prompt, seq=1)])
        reply = gw.complete(req).content
        for template in _parse_template_list(reply):
            missing = missing_slots(template)
            if missing:
                rejected.append(f"missing slots: {', '.join(missing)}")
                continue
            candidates.append(PromptCandidate(template=template))
    if not candidates:
        raise PromptValidationError(
            "no valid prompt candidates; rejected: " + "; ".join(rejected or ["none"])
        )
    return candidates[:count]


@dataclass
class EngineConfig:
    """Everything score_prompt needs to run the diagnosis engine on a sample."""

    kb: KnowledgeBase
    params: SearchParams = field(
        default_factory=lambda: SearchParams(max_nodes=4, no_progress_limit=3)
    )
    thresholds: dict = field(default_factory=dict)


def score_prompt(
    candidate: PromptCandidate,
    samples: list[DiagnosisSample],
    engine: EngineConfig,
    gw: LlmGateway,
) -> ScoredPrompt:
    """Mean over samples of |detected ∩ labeled| / |labeled|.

    Engine failures count as a zero for that sample instead of aborting the
    whole scoring run.
    """
    per_sample = []
    total = 0.0
    for sample in samples:
        src = SourceConfig(
            kind=SourceKind.FIXTURE,
            fixture_dir=sample.fixture_dir,
            thresholds={**engine.thresholds, **sample.thresholds},
        )
        try:
            report = run_diagnosis(
                sample.alert,
                engine.kb,
                build_tool_registry(src),
                gw,
                params=engine.params,
                template=candidate.template,
            )
            detected = [c.cause_id for c in report.causes]
        except DbDoctorError:
            detected = []
        per_sample.append(detected)
        labeled = set(sample.labeled_causes)
        total += len(labeled & set(detected)) / len(labeled)
    return ScoredPrompt(
        candidate=candidate, score=total / len(samples), per_sample=per_sample
    )


def select_template(
    scored: list[ScoredPrompt], reserve: int = 10
) -> tuple[list[ScoredPrompt], PromptCandidate]:
    """Reserve the top templates by score (ties keep proposal order) and pick
    the best one."""
    if not scored:
        raise ValueError("no scored prompts to select from")
    if reserve <= 0:
        raise ValueError("reserve must be positive")
    ranked = sorted(
        range(len(scored)), key=lambda i: (-scored[i].score, i)
    )
    reserved = [scored[i] for i in ranked[:reserve]]
    return reserved, reserved[0].candidate
