"""
Retrieval agent
Problem -> intent -> search plan -> hybrid evidence -> synthesized, cited recommendation
"""

import hashlib
import logging
import threading
import uuid
from collections import OrderedDict
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .config import RetrievalConfig
from .errors import ProviderError, SparkError, ValidationError
from .gateway import Gateway, extract_json
from .index import (
    Channel,
    DocIndexes,
    InsightIndex,
    RankedHit,
    bm25_search,
    build_doc_indexes,
    build_insight_index,
    extract_symbols,
    fuse,
    knn_search,
    load_doc_indexes,
    save_doc_indexes,
    tokenize,
)
from .models import (
    Citation,
    CuratedInsight,
    DocBlob,
    Intent,
    MemorySnapshot,
    Recommendation,
    TaskKind,
    dumps,
    require_text,
    utc_now,
)
from .store import SparkStore

logger = logging.getLogger(__name__)

HISTORY_VIEWS = 8
LIBRARY_ALIASES = {
    "pd": "pandas",
    "np": "numpy",
    "plt": "matplotlib",
    "sklearn": "scikit-learn",
    "tf": "tensorflow",
}

# insight recall runs beside the documentation channels
_recall_pool = ThreadPoolExecutor(max_workers=4, thread_name_prefix="spark-recall")


# ============================================================================
# TYPES
# ============================================================================

@dataclass(frozen=True)
class PlannedChannel:
    channel: Channel
    query: str
    k: int


@dataclass(frozen=True)
class SearchPlan:
    channels: Tuple[PlannedChannel, ...]
    fusion_k: int
    include_insights: bool
    query: str

    def channel_names(self) -> List[str]:
        return [c.channel.value for c in self.channels]


@dataclass(frozen=True)
class DocHit:
    hit: RankedHit
    path: str
    title: str
    excerpt: str


@dataclass(frozen=True)
class Evidence:
    doc_hits: Tuple[DocHit, ...] = ()
    insight_hits: Tuple[Tuple[CuratedInsight, float], ...] = ()
    citations: Tuple[Citation, ...] = ()

    def is_empty(self) -> bool:
        return not self.doc_hits and not self.insight_hits


@dataclass(frozen=True)
class MemoryView:
    """Immutable pairing of one epoch snapshot with the indexes built for it"""
    snapshot: MemorySnapshot
    docs: DocIndexes
    doc_lookup: Dict[str, DocBlob]
    sources: Tuple[str, ...]
    insights: InsightIndex

    @property
    def epoch_number(self) -> int:
        return self.snapshot.epoch_number

    @property
    def index_version(self) -> str:
        return self.docs.version


# ============================================================================
# WORKFLOW STEPS
# ============================================================================

def truncate_utf8(text: str, max_bytes: int) -> str:
    encoded = text.encode("utf-8")
    if len(encoded) <= max_bytes:
        return text
    return encoded[:max_bytes].decode("utf-8", errors="ignore")


def detect_libraries(text: str, corpus_names: Sequence[str]) -> List[str]:
    tokens = set(tokenize(text))
    found = []
    for name in sorted(set(corpus_names)):
        parts = tokenize(name)
        aliases = [alias for alias, lib in LIBRARY_ALIASES.items() if lib == name.lower()]
        if (parts and all(p in tokens for p in parts)) or any(a in tokens for a in aliases):
            found.append(name)
    return found


def analyze_intent(
    problem: str,
    gateway: Gateway,
    corpus_names: Sequence[str] = (),
    max_problem_bytes: int = 32 * 1024,
) -> Intent:
    """
    Symbols and libraries are extracted deterministically; the provider only
    classifies the task and normalizes the query
    """
    if not isinstance(problem, str) or not problem.strip():
        raise ValidationError("problem must be a non-empty string")
    require_text("problem", problem)
    text = truncate_utf8(problem, max_problem_bytes)
    symbols = extract_symbols(text)
    libraries = detect_libraries(text, corpus_names)

    raw = gateway.complete(
        "intent_analysis",
        problem=text,
        named_symbols=", ".join(symbols) or "(none)",
        target_libraries=", ".join(libraries) or "(none)",
    )
    try:
        parsed = extract_json(raw)
    except ValueError:
        raise ProviderError("intent analysis returned no JSON object") from None

    try:
        kind = TaskKind(str(parsed.get("task_kind", "other")).strip().lower())
    except ValueError:
        kind = TaskKind.OTHER
    query = " ".join(str(parsed.get("normalized_query") or "").split())
    if not query:
        query = " ".join(text.split())[:512]
    return Intent(
        normalized_query=query,
        task_kind=kind,
        named_symbols=tuple(symbols),
        target_libraries=tuple(libraries),
        raw_problem=problem,
    )


def plan_search(intent: Intent, epoch_number: int, fusion_k: int = 10, channel_k: int = 25) -> SearchPlan:
    """Blob, section and vector channels always; the symbol channel twice when symbols were named"""
    lexical_query = " ".join([intent.normalized_query, *intent.named_symbols])
    channels = [
        PlannedChannel(Channel.LEXICAL_BLOB, lexical_query, channel_k),
        PlannedChannel(Channel.LEXICAL_SECTION, lexical_query, channel_k),
        PlannedChannel(Channel.VECTOR, intent.normalized_query, channel_k),
    ]
    if intent.named_symbols:
        symbol_query = " ".join(intent.named_symbols)
        channels += [PlannedChannel(Channel.LEXICAL_SYMBOL, symbol_query, channel_k)] * 2
    return SearchPlan(
        channels=tuple(channels),
        fusion_k=max(1, fusion_k),
        include_insights=epoch_number > 0,
        query=intent.normalized_query,
    )


def _recall_insights(
    view: MemoryView, query_vec, insight_k: int, threshold: float
) -> Tuple[Tuple[CuratedInsight, float], ...]:
    hits = knn_search(view.insights.vectors, query_vec, insight_k, channel=Channel.INSIGHT)
    return tuple(
        (view.snapshot.insight(hit.doc_ref), hit.score) for hit in hits if hit.score >= threshold
    )


def execute_plan(
    plan: SearchPlan,
    view: MemoryView,
    gateway: Gateway,
    insight_k: int = 5,
    insight_threshold: float = 0.35,
    excerpt_chars: int = 400,
) -> Evidence:
    """Run every channel against the view's indexes and fuse the documentation rankings"""
    has_docs = view.docs.doc_count > 0
    wants_insights = plan.include_insights and len(view.insights.vectors) > 0
    if not has_docs and not wants_insights:
        return Evidence()

    query_vec = gateway.embed([plan.query])[0]
    recall: Optional[Future] = None
    if wants_insights:
        recall = _recall_pool.submit(_recall_insights, view, query_vec, insight_k, insight_threshold)

    lexical = {
        Channel.LEXICAL_BLOB: view.docs.blob,
        Channel.LEXICAL_SECTION: view.docs.section,
        Channel.LEXICAL_SYMBOL: view.docs.symbol,
    }
    rankings: List[List[RankedHit]] = []
    if has_docs:
        for planned in plan.channels:
            if planned.channel == Channel.VECTOR:
                rankings.append(knn_search(view.docs.vectors, query_vec, planned.k))
            else:
                rankings.append(bm25_search(lexical[planned.channel], planned.query, planned.k))

    doc_hits = []
    for hit in fuse(rankings, plan.fusion_k):
        blob = view.doc_lookup[hit.doc_ref]
        doc_hits.append(DocHit(hit=hit, path=blob.path, title=blob.title, excerpt=blob.body[:excerpt_chars]))
    insight_hits = recall.result() if recall is not None else ()

    citations = [Citation(h.hit.doc_ref, h.path, "doc") for h in doc_hits]
    citations += [Citation(i.insight_id, f"insight/{i.cluster_id}", "insight") for i, _ in insight_hits]
    return Evidence(tuple(doc_hits), insight_hits, tuple(citations))


def evidence_payload(evidence: Evidence) -> str:
    return dumps({
        "documents": [
            {"ref": h.hit.doc_ref, "path": h.path, "title": h.title, "excerpt": h.excerpt}
            for h in evidence.doc_hits
        ],
        "insights": [
            {"id": i.insight_id, "lesson": i.lesson_text, "confidence": i.confidence, "score": round(score, 6)}
            for i, score in evidence.insight_hits
        ],
    })


def _parse_guidance(raw: str) -> Tuple[str, Tuple[str, ...]]:
    try:
        parsed = extract_json(raw)
        guidance = str(parsed.get("guidance") or "").strip()
        practices = parsed.get("best_practices") or []
        if isinstance(practices, str):
            practices = [practices]
        return guidance, tuple(str(p).strip() for p in practices if str(p).strip())
    except (ValueError, AttributeError):
        # prose answer: bullet lines are best practices, the rest is guidance
        prose, bullets = [], []
        for line in raw.splitlines():
            stripped = line.strip()
            if stripped[:2] in ("- ", "* "):
                bullets.append(stripped[2:].strip())
            else:
                prose.append(line)
        return "\n".join(prose).strip(), tuple(bullets)


def synthesize(
    intent: Intent,
    evidence: Evidence,
    gateway: Gateway,
    store: SparkStore,
    epoch_number: int,
    code_context: str = "",
    max_problem_bytes: int = 32 * 1024,
) -> Recommendation:
    """Generate guidance from the evidence and persist it before returning"""
    raw = gateway.complete(
        "recommendation_synthesis",
        problem=truncate_utf8(intent.raw_problem, max_problem_bytes),
        code_context=code_context or "(none)",
        task_kind=intent.task_kind.value,
        evidence_json=evidence_payload(evidence),
    )
    guidance, practices = _parse_guidance(raw)
    if not guidance:
        raise ProviderError("synthesis returned empty guidance")

    rec = Recommendation(
        recommendation_id=f"rec-{uuid.uuid4().hex}",
        intent=intent,
        guidance_text=guidance,
        best_practices=practices,
        citations=evidence.citations,
        epoch_number=epoch_number,
        created_at=utc_now(),
        code_context=code_context,
        problem_digest=hashlib.sha256(intent.raw_problem.encode("utf-8")).hexdigest(),
    )
    store.put_recommendation(rec)
    return rec


def format_recommendation(rec: Recommendation) -> str:
    """Guidance, best practices and citations as three fixed sections"""
    lines = ["Guidance:", rec.guidance_text, "", "Best practices:"]
    lines += [f"- {p}" for p in rec.best_practices] or ["- (none)"]
    lines += ["", "Citations:"]
    lines += [f"- [{c.kind}] {c.locator} ({c.ref})" for c in rec.citations] or ["- (none)"]
    return "\n".join(lines)


# ============================================================================
# AGENT
# ============================================================================

class RetrievalAgent:
    """
    Owns the active MemoryView and swaps it atomically
    New epochs are picked up on the next call; new documentation triggers a background rebuild
    """

    def __init__(self, store: SparkStore, gateway: Gateway, config: Optional[RetrievalConfig] = None):
        self.store = store
        self.gateway = gateway
        self.config = config or RetrievalConfig()
        self._lock = threading.Lock()
        self._build_lock = threading.Lock()
        self._view: Optional[MemoryView] = None
        self._history: "OrderedDict[int, MemoryView]" = OrderedDict()
        self._worker = ThreadPoolExecutor(max_workers=1, thread_name_prefix="spark-index")
        self._pending: Optional[Future] = None
        self._index_path = store.root / "index" / "docs.npz"

    def close(self) -> None:
        self._worker.shutdown(wait=True)

    # views ------------------------------------------------------------

    def _build_docs(self) -> Tuple[DocIndexes, Dict[str, DocBlob], Tuple[str, ...]]:
        with self._build_lock:
            docs, version = self.store.corpus()
            current = self._view
            if current is not None and current.docs.version == version:
                return current.docs, current.doc_lookup, current.sources
            indexes = load_doc_indexes(self._index_path, version)
            if indexes is None:
                indexes = build_doc_indexes(docs, version, self.gateway.embed, self.gateway.dim)
                try:
                    save_doc_indexes(indexes, self._index_path)
                except OSError as e:
                    logger.warning(f"⚠️  Could not save index: {e}")
                logger.info(f"🔎 Built indexes over {len(docs)} docs ({version})")
            lookup = {d.blob_id: d for d in docs}
            sources = tuple(sorted({d.source for d in docs}))
            return indexes, lookup, sources

    def _make_view(self, snapshot: MemorySnapshot, docs) -> MemoryView:
        indexes, lookup, sources = docs
        insights = build_insight_index(snapshot, self.gateway.embed, self.gateway.dim)
        return MemoryView(snapshot, indexes, lookup, sources, insights)

    def view(self) -> MemoryView:
        """The active view, advanced to the latest committed epoch"""
        latest = self.store.latest_epoch()
        if latest is None:
            raise SparkError("store has no baseline epoch")
        with self._lock:
            current = self._view
        if current is None:
            current = self._make_view(self.store.load_snapshot(latest.epoch_number), self._build_docs())
        elif current.epoch_number != latest.epoch_number:
            docs = (current.docs, current.doc_lookup, current.sources)
            current = self._make_view(self.store.load_snapshot(latest.epoch_number), docs)
        with self._lock:
            if self._view is None or self._view.epoch_number <= current.epoch_number:
                self._view = current
            current = self._view
        if current.docs.version != self.store.doc_corpus_version():
            self.refresh(background=True)
        return current

    def view_for(self, epoch_number: int) -> MemoryView:
        """A historical epoch's insights over the current documentation"""
        active = self.view()
        if epoch_number == active.epoch_number:
            return active
        snapshot = self.store.load_snapshot(epoch_number)
        with self._lock:
            cached = self._history.get(epoch_number)
            if cached is not None and cached.docs is active.docs:
                self._history.move_to_end(epoch_number)
                return cached
        view = self._make_view(snapshot, (active.docs, active.doc_lookup, active.sources))
        with self._lock:
            self._history[epoch_number] = view
            self._history.move_to_end(epoch_number)
            while len(self._history) > HISTORY_VIEWS:
                self._history.popitem(last=False)
        return view

    def refresh(self, background: bool = True) -> Optional[Future]:
        """Rebuild doc indexes; background requests coalesce onto one pending rebuild"""
        if not background:
            self._rebuild()
            return None
        with self._lock:
            if self._pending is not None and not self._pending.running() and not self._pending.done():
                return self._pending
            self._pending = self._worker.submit(self._rebuild_logged)
            return self._pending

    def _rebuild_logged(self) -> None:
        try:
            self._rebuild()
        except Exception as e:
            logger.error(f"❌ Index rebuild failed: {e}")

    def _rebuild(self) -> None:
        docs = self._build_docs()
        with self._lock:
            if self._view is not None and self._view.docs is not docs[0]:
                self._view = replace(self._view, docs=docs[0], doc_lookup=docs[1], sources=docs[2])
                self._history.clear()

    # workflow ---------------------------------------------------------

    def recommend(self, problem: str, code_context: str = "", epoch: Optional[int] = None) -> Recommendation:
        """Full workflow against one view acquired at the start of the call"""
        try:
            view = self.view() if epoch is None else self.view_for(epoch)
        except SparkError as e:
            raise e.with_stage("load_view")
        cfg = self.config
        try:
            require_text("code_context", code_context)
            intent = analyze_intent(problem, self.gateway, view.sources, cfg.max_problem_bytes)
        except SparkError as e:
            raise e.with_stage("analyze_intent")
        plan = plan_search(intent, view.epoch_number, cfg.fusion_k, cfg.channel_k)
        try:
            evidence = execute_plan(plan, view, self.gateway, cfg.insight_k, cfg.insight_threshold, cfg.excerpt_chars)
        except SparkError as e:
            raise e.with_stage("execute_plan")
        try:
            return synthesize(
                intent, evidence, self.gateway, self.store, view.epoch_number, code_context, cfg.max_problem_bytes
            )
        except SparkError as e:
            raise e.with_stage("synthesize")
