"""Tool and knowledge retrieval: Okapi BM25, embedding cosine ranking, the
request/answer vector cache, and keyword-to-API mapping.

"LLM embeddings" and dense retrieval share one exhaustive vector path; they
differ only in which encoder produced the vectors.
"""

from __future__ import annotations

import json
import math
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .gateway import EmbeddingVector, LlmGateway, ToolInvocation
from .textutil import stem, tokenize


# --- tool registry ----------------------------------------------------------


@dataclass
class ToolSpec:
    """A callable diagnosis/observation tool.

    ``args_schema`` maps argument name to ``{"type": ..., "required": bool}``;
    ``executor_binding`` names the callable the registry dispatches to.
    """

    name: str
    description: str
    args_schema: dict
    executor_binding: str


_TYPE_CHECKS = {
    "string": lambda v: isinstance(v, str),
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "boolean": lambda v: isinstance(v, bool),
}


class ToolRegistry:
    """Ordered tool specs plus their executors, looked up by binding name."""

    def __init__(self):
        self.specs: list[ToolSpec] = []
        self._by_name: dict[str, ToolSpec] = {}
        self._executors: dict[str, object] = {}

    def register(self, spec: ToolSpec, executor) -> None:
        if spec.name in self._by_name:
            raise ConfigError(f"duplicate tool name {spec.name}")
        self.specs.append(spec)
        self._by_name[spec.name] = spec
        self._executors[spec.executor_binding] = executor

    def get(self, name: str) -> ToolSpec | None:
        return self._by_name.get(name)

    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def validate_args(self, spec: ToolSpec, arguments: dict) -> list[str]:
        problems = []
        for arg, meta in spec.args_schema.items():
            if meta.get("required") and arg not in arguments:
                problems.append(f"missing required argument: {arg}")
            elif arg in arguments:
                check = _TYPE_CHECKS.get(meta.get("type", "string"))
                if check and not check(arguments[arg]):
                    problems.append(f"argument {arg} has wrong type")
        for arg in arguments:
            if arg not in spec.args_schema:
                problems.append(f"unknown argument: {arg}")
        return problems

    def execute(self, invocation: ToolInvocation) -> str:
        spec = self._by_name.get(invocation.tool_name)
        if spec is None:
            raise KeyError(invocation.tool_name)
        fn = self._executors[spec.executor_binding]
        return fn(**invocation.arguments)

    def subset(self, predicate) -> "ToolRegistry":
        """A view registry containing only tools whose name passes predicate."""
        sub = ToolRegistry()
        for spec in self.specs:
            if predicate(spec.name):
                sub.register(spec, self._executors[spec.executor_binding])
        return sub


# --- BM25 -------------------------------------------------------------------


@dataclass
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if self.k1 <= 0:
            raise ValueError("k1 must be > 0")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must be in [0, 1]")


@dataclass
class CorpusStats:
    n_docs: int
    df: dict
    avgdl: float


def build_corpus_stats(docs: list[list[str]]) -> CorpusStats:
    df: Counter = Counter()
    total_len = 0
    for doc in docs:
        total_len += len(doc)
        for term in set(doc):
            df[term] += 1
    avgdl = total_len / len(docs) if docs else 0.0
    return CorpusStats(n_docs=len(docs), df=dict(df), avgdl=avgdl)


def bm25_idf(n_docs: int, df: int) -> float:
    # +1 smoothing keeps the IDF (and hence every score) non-negative.
    return math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))


def bm25_score(
    query: list[str],
    doc: list[str],
    stats: CorpusStats,
    params: Bm25Params = Bm25Params(),
) -> float:
    tf = Counter(doc)
    dl = len(doc)
    norm = 1.0 - params.b + params.b * (dl / stats.avgdl if stats.avgdl else 0.0)
    score = 0.0
    for term in query:
        freq = tf.get(term, 0)
        if freq == 0:
            continue
        idf = bm25_idf(stats.n_docs, stats.df.get(term, 0))
        score += idf * (freq * (params.k1 + 1.0)) / (freq + params.k1 * norm)
    return score


def rank_tools_bm25(
    anomaly: str,
    tools: list[ToolSpec],
    params: Bm25Params = Bm25Params(),
    k: int = 5,
) -> list[ToolSpec]:
    """Top-k tools by BM25 of the anomaly text against tool descriptions.

    Ties keep registry insertion order (stable sort).
    """
    if not tools:
        raise ValueError("tool registry is empty")
    docs = [tokenize(t.description) for t in tools]
    stats = build_corpus_stats(docs)
    query = tokenize(anomaly)
    scored = [(bm25_score(query, doc, stats, params), t) for doc, t in zip(docs, tools)]
    order = sorted(range(len(scored)), key=lambda i: -scored[i][0])
    return [scored[i][1] for i in order[:k]]


# --- cosine / vector store --------------------------------------------------


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    dot = sum(x * y for x, y in zip(a.values, b.values))
    na, nb = a.norm(), b.norm()
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


@dataclass
class VectorRecord:
    id: str
    vector: EmbeddingVector
    payload: str = ""


def rank_by_cosine(
    query: EmbeddingVector, store: list[VectorRecord], k: int
) -> list[tuple[str, float]]:
    """Exhaustive descending-cosine scan; ties broken by record id."""
    scored = [(rec.id, cosine(query, rec.vector)) for rec in store]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:k]


class VectorStore:
    """Exact in-memory store with JSON-lines persistence."""

    def __init__(self, dim: int | None = None):
        self.dim = dim
        self.records: list[VectorRecord] = []
        self._lock = threading.Lock()

    def add(self, record: VectorRecord) -> None:
        with self._lock:
            if self.dim is None:
                self.dim = record.vector.dim
            elif record.vector.dim != self.dim:
                raise ValueError("record dimension differs from store dimension")
            self.records.append(record)

    def top_k(self, query: EmbeddingVector, k: int) -> list[tuple[str, float]]:
        return rank_by_cosine(query, self.records, k)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(
                    json.dumps(
                        {
                            "id": rec.id,
                            "vector": list(rec.vector.values),
                            "payload": rec.payload,
                        }
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path: str | Path) -> "VectorStore":
        store = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            raw = json.loads(line)
            values = tuple(float(v) for v in raw["vector"])
            store.add(
                VectorRecord(
                    raw["id"], EmbeddingVector(values, len(values)), raw.get("payload", "")
                )
            )
        return store


# --- request/answer cache ---------------------------------------------------


@dataclass
class CacheEntry:
    key_vector: EmbeddingVector
    request_text: str
    response: str
    hits: int = 0


@dataclass
class CacheHit:
    response: str
    similarity: float
    entry: CacheEntry


class VectorCache:
    """Embedding-keyed cache answering near-duplicate requests model-free."""

    def __init__(self):
        self.entries: list[CacheEntry] = []
        self._lock = threading.Lock()

    def insert(self, request: str, response: str, gw: LlmGateway) -> CacheEntry:
        vec = gw.embed(request)
        entry = CacheEntry(key_vector=vec, request_text=request, response=response)
        with self._lock:
            self.entries.append(entry)
        return entry


def cache_lookup(
    request: str, threshold: float, gw: LlmGateway, cache: VectorCache
) -> CacheHit | None:
    """Return the best cache entry iff its cosine clears ``threshold``.

    A hit increments the entry's counter and performs zero completion calls.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    if not cache.entries:
        return None
    query = gw.embed(request)
    best: CacheEntry | None = None
    best_sim = -2.0
    for entry in cache.entries:
        sim = cosine(query, entry.key_vector)
        if sim > best_sim:
            best, best_sim = entry, sim
    if best is None or best_sim < threshold:
        return None
    with cache._lock:
        best.hits += 1
    return CacheHit(response=best.response, similarity=best_sim, entry=best)


# --- keyword-API mapping ----------------------------------------------------


@dataclass
class KeywordApiMap:
    """Maps keyword phrases to tool names, with configurable synonyms."""

    entries: dict = field(default_factory=dict)
    synonyms: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "KeywordApiMap":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(entries=raw.get("entries", raw), synonyms=raw.get("synonyms", {}))


def _normalize_tokens(text: str, synonyms: dict) -> list[str]:
    out = []
    for tok in tokenize(text):
        tok = synonyms.get(tok, tok)
        out.append(stem(tok))
    return out


def _contains_phrase(haystack: list[str], needle: list[str]) -> bool:
    if not needle:
        return False
    n = len(needle)
    return any(haystack[i : i + n] == needle for i in range(len(haystack) - n + 1))


def map_keywords(
    request: str, m: KeywordApiMap, registry: ToolRegistry | None = None
) -> list[str]:
    """Tools whose keyword phrases occur in the request (after synonym and
    stem normalization). Deduplicated, in map order."""
    req_tokens = _normalize_tokens(request, m.synonyms)
    result = []
    for keyword, tool_names in m.entries.items():
        key_tokens = [stem(t) for t in tokenize(keyword)]
        if _contains_phrase(req_tokens, key_tokens):
            for name in tool_names:
                if name not in result:
                    result.append(name)
    if registry is not None:
        for name in result:
            if registry.get(name) is None:
                raise ConfigError(f"keyword map names unknown tool {name}")
    return result
