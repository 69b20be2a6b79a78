"""Turn maintenance documents into a retrievable experience base.

Pipeline: split a document at section separators (recursively halving
oversized chunks at paragraph, then sentence, then token boundaries), summarize
each chunk as its textual index, then extract 4-field experience segments
(name / content / metrics / steps) from a chunk plus its most similar
neighbor summaries.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .errors import MalformedResponseError, SegmentValidationError
from .gateway import ChatMessage, CompletionRequest, LlmGateway, Role
from .textutil import tokenize

DEFAULT_SECTION_PATTERNS = (
    r"^(?P<hashes>#{1,6})\s+(?P<title>.+?)\s*$",
    r"^(?P<number>\d+(?:\.\d+)*)[.)]\s+(?P<title_n>\S.*?)\s*$",
)

SUMMARIZE_PROMPT = (
    "[summarize-chunk] Write a one-line index entry for the chunk below so "
    "maintenance engineers can find its technical details later. Keep concrete "
    "names and example values.\n\nChunk ({chunk_id}):\n{text}"
)

EXTRACT_PROMPT = (
    "[extract-experience] Read the chunk below together with the neighbor "
    "summaries. Extract every reusable diagnosis experience as a JSON object "
    'with exactly the fields "name", "content", "metrics", "steps" (a JSON '
    "array of such objects is also fine). Reply 'no experience found' if the "
    "chunk holds none.\n\nNeighbor summaries:\n{neighbors}\n\nChunk "
    "({chunk_id}):\n{text}"
)


@dataclass
class DocumentChunk:
    chunk_id: str
    section_path: tuple
    text: str
    token_count: int


@dataclass
class ChunkSummary:
    chunk_id: str
    summary: str


@dataclass
class ExperienceSegment:
    """One unit of maintenance knowledge in the 4-field format."""

    name: str
    content: str
    metrics: list
    steps: str
    source_chunks: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "content": self.content,
            "metrics": list(self.metrics),
            "steps": self.steps,
            "source_chunks": list(self.source_chunks),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperienceSegment":
        return cls(
            name=d["name"],
            content=d["content"],
            metrics=list(d["metrics"]),
            steps=d["steps"],
            source_chunks=list(d.get("source_chunks", [])),
        )


def validate_segment(seg: ExperienceSegment) -> list[str]:
    """Return violations of the 4-field contract (empty list means ok)."""
    violations = []
    for fname in ("name", "content", "steps"):
        if not str(getattr(seg, fname) or "").strip():
            violations.append(f"empty field: {fname}")
    if not seg.metrics:
        violations.append("empty field: metrics")
    seen = set()
    for m in seg.metrics:
        if m in seen:
            violations.append(f"duplicate metric: {m}")
        seen.add(m)
    return violations


class KnowledgeBase:
    """Append-only store of segments (unique by name) and chunk summaries."""

    def __init__(self):
        self.segments: dict[str, ExperienceSegment] = {}
        self.summaries: list[ChunkSummary] = []
        self.lookup_count = 0
        self._write_lock = threading.Lock()

    def insert(self, seg: ExperienceSegment) -> None:
        # Idempotent by name: re-ingesting a document never duplicates.
        with self._write_lock:
            self.segments[seg.name] = seg

    def add_summary(self, summary: ChunkSummary) -> None:
        with self._write_lock:
            self.summaries.append(summary)

    def segments_for_metrics(self, metric_names) -> list[ExperienceSegment]:
        """Segments whose metrics field intersects the given metric names."""
        self.lookup_count += 1
        wanted = set(metric_names)
        return [s for s in self.segments.values() if wanted & set(s.metrics)]

    def all_segments(self) -> list[ExperienceSegment]:
        self.lookup_count += 1
        return list(self.segments.values())

    def save(self, path: str | Path) -> None:
        payload = {
            "segments": [s.to_dict() for s in self.segments.values()],
            "summaries": [
                {"chunk_id": s.chunk_id, "summary": s.summary} for s in self.summaries
            ],
        }
        Path(path).write_text(
            json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeBase":
        kb = cls()
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        for raw in payload.get("segments", []):
            kb.insert(ExperienceSegment.from_dict(raw))
        for raw in payload.get("summaries", []):
            kb.add_summary(ChunkSummary(raw["chunk_id"], raw["summary"]))
        return kb


# --- segmentation -----------------------------------------------------------


def _match_heading(line: str, patterns) -> tuple[int, str] | None:
    stripped = line.rstrip("\n")
    for pat in patterns:
        m = re.match(pat, stripped)
        if not m:
            continue
        groups = m.groupdict()
        if groups.get("hashes") is not None:
            return len(groups["hashes"]), groups["title"]
        if groups.get("number") is not None:
            return groups["number"].count(".") + 1, groups["title_n"]
        # Custom pattern: level 1, title = first group or whole line.
        title = m.group(1) if m.groups() else stripped
        return 1, title
    return None


def _split_point(text: str) -> int:
    """Best index to cut `text` in two, preferring paragraph, then sentence,
    then plain whitespace boundaries nearest the middle."""
    mid = len(text) // 2
    candidate_sets = (
        [m.end() for m in re.finditer(r"\n\s*\n", text)],
        [m.end() for m in re.finditer(r"[.!?][\"')\]]*\s+", text)],
        [m.start() for m in re.finditer(r"\s+", text)],
    )
    for candidates in candidate_sets:
        inner = [c for c in candidates if 0 < c < len(text)]
        if inner:
            return min(inner, key=lambda c: abs(c - mid))
    return 0


def _split_oversized(text: str, max_tokens: int) -> list[str]:
    if len(tokenize(text)) <= max_tokens:
        return [text]
    cut = _split_point(text)
    if cut <= 0 or cut >= len(text):
        return [text]  # indivisible (single huge token); cannot shrink further
    return _split_oversized(text[:cut], max_tokens) + _split_oversized(
        text[cut:], max_tokens
    )


def segment_document(
    doc: str, max_chunk_tokens: int, section_patterns=DEFAULT_SECTION_PATTERNS
) -> list[DocumentChunk]:
    """Split a document into chunks no larger than ``max_chunk_tokens``.

    Heading lines are the separators: they set the section path and are not
    part of any chunk's text, so concatenating chunk texts in order rebuilds
    the document minus its separator lines.
    """
    if max_chunk_tokens < 8:
        raise ValueError("max_chunk_tokens must be >= 8")
    if not doc:
        return []

    sections: list[tuple[tuple, str]] = []
    path: list[str] = []
    body: list[str] = []

    def flush():
        if body:
            sections.append((tuple(path), "".join(body)))
            body.clear()

    for line in doc.splitlines(keepends=True):
        heading = _match_heading(line, section_patterns)
        if heading is not None:
            flush()
            level, title = heading
            del path[level - 1 :]
            path.append(title)
        else:
            body.append(line)
    flush()

    chunks = []
    for section_path, text in sections:
        for piece in _split_oversized(text, max_chunk_tokens):
            chunks.append(
                DocumentChunk(
                    chunk_id=f"c{len(chunks):04d}",
                    section_path=section_path,
                    text=piece,
                    token_count=len(tokenize(piece)),
                )
            )
    return chunks


# --- summarize / extract ----------------------------------------------------


def _one_shot(gw: LlmGateway, prompt: str) -> str:
    req = CompletionRequest(messages=[ChatMessage(Role.USER, prompt, seq=1)])
    return gw.complete(req).content


def summarize_chunk(chunk: DocumentChunk, gw: LlmGateway) -> ChunkSummary:
    if not chunk.text.strip():
        raise ValueError(f"chunk {chunk.chunk_id} is empty")
    reply = _one_shot(
        gw, SUMMARIZE_PROMPT.format(chunk_id=chunk.chunk_id, text=chunk.text)
    )
    return ChunkSummary(chunk_id=chunk.chunk_id, summary=reply)


def _parse_segment_objects(reply: str) -> list[dict]:
    text = reply.strip()
    if re.search(r"no experience found", text, re.IGNORECASE):
        return []
    fenced = re.search(r"```(?:json)?\s*(.+?)```", text, re.DOTALL)
    if fenced:
        text = fenced.group(1).strip()
    attempts = [text]
    if text.startswith('"name"'):
        attempts.insert(0, "{" + text.rstrip().rstrip(",") + "}")
    for candidate in attempts:
        try:
            data = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(data, dict):
            return [data]
        if isinstance(data, list):
            return [d for d in data if isinstance(d, dict)]
    raise MalformedResponseError(
        "experience reply is neither JSON segments nor 'no experience found'"
    )


def extract_experience(
    chunk: DocumentChunk, neighbors: list[ChunkSummary], gw: LlmGateway
) -> list[ExperienceSegment]:
    """Extract 4-field segments from a chunk, guided by neighbor summaries.

    Segments failing validation are rejected with a diagnostic; they are never
    silently repaired.
    """
    neighbor_text = "\n".join(f"- {s.chunk_id}: {s.summary}" for s in neighbors) or "-"
    reply = _one_shot(
        gw,
        EXTRACT_PROMPT.format(
            neighbors=neighbor_text, chunk_id=chunk.chunk_id, text=chunk.text
        ),
    )
    segments = []
    for obj in _parse_segment_objects(reply):
        missing = [f for f in ("name", "content", "metrics", "steps") if f not in obj]
        if missing:
            raise SegmentValidationError(
                [f"missing field: {f}" for f in missing]
            )
        seg = ExperienceSegment(
            name=str(obj["name"]),
            content=str(obj["content"]),
            metrics=list(obj["metrics"]),
            steps=str(obj["steps"]),
            source_chunks=[chunk.chunk_id],
        )
        violations = validate_segment(seg)
        if violations:
            raise SegmentValidationError(violations)
        segments.append(seg)
    return segments


def similar_summaries(
    target: ChunkSummary, pool: list[ChunkSummary], gw: LlmGateway, k: int = 3
) -> list[ChunkSummary]:
    """The k summaries most similar to ``target`` (scripted-embedding cosine)."""
    from .retrieval import cosine  # local import, retrieval depends on gateway only

    tv = gw.embed(target.summary)
    scored = []
    for cand in pool:
        if cand.chunk_id == target.chunk_id:
            continue
        scored.append((cosine(tv, gw.embed(cand.summary)), cand))
    scored.sort(key=lambda pair: (-pair[0], pair[1].chunk_id))
    return [cand for _, cand in scored[:k]]


def ingest_document(
    doc: str,
    kb: KnowledgeBase,
    gw: LlmGateway,
    max_chunk_tokens: int = 1000,
    neighbor_k: int = 3,
) -> list[ExperienceSegment]:
    """Full document pipeline: segment, summarize, extract, validate, insert."""
    chunks = segment_document(doc, max_chunk_tokens)
    summaries = [summarize_chunk(c, gw) for c in chunks if c.text.strip()]
    by_id = {s.chunk_id: s for s in summaries}
    inserted = []
    for chunk in chunks:
        if chunk.chunk_id not in by_id:
            continue
        neighbors = similar_summaries(by_id[chunk.chunk_id], summaries, gw, neighbor_k)
        for seg in extract_experience(chunk, neighbors, gw):
            kb.insert(seg)
            inserted.append(seg)
    for summary in summaries:
        kb.add_summary(summary)
    return inserted
