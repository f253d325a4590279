"""
Spark domain types
Documentation blobs, experiential traces, curated insights, epochs and recommendations
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Tuple

from .errors import ValidationError


# ============================================================================
# HELPERS
# ============================================================================

def utc_now() -> str:
    """Current UTC instant as RFC 3339 text"""
    return format_timestamp(datetime.now(timezone.utc))


def format_timestamp(moment: datetime) -> str:
    moment = moment.astimezone(timezone.utc)
    if moment.microsecond:
        return moment.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_timestamp(text: str) -> datetime:
    """Parse an RFC 3339 UTC instant (Z or +00:00); naive and non-UTC timestamps are rejected"""
    try:
        moment = datetime.fromisoformat(str(text).replace("Z", "+00:00"))
    except ValueError:
        raise ValidationError(f"invalid RFC 3339 timestamp: {text!r}") from None
    if moment.tzinfo is None:
        raise ValidationError(f"timestamp must carry a UTC offset: {text!r}")
    if moment.utcoffset() != timedelta(0):
        raise ValidationError(f"timestamp must be UTC: {text!r}")
    return moment.astimezone(timezone.utc)


def require_text(name: str, value: Any, optional: bool = False) -> Optional[str]:
    """value as a str that encodes to UTF-8; None passes only when optional"""
    if value is None and optional:
        return None
    if not isinstance(value, str):
        raise ValidationError(f"{name} must be a string")
    try:
        value.encode("utf-8")
    except UnicodeEncodeError:
        raise ValidationError(f"{name} is not valid UTF-8 text") from None
    return value


def sha256_hex(*parts: str) -> str:
    return hashlib.sha256("\x00".join(parts).encode("utf-8")).hexdigest()


def dumps(obj: Any) -> str:
    """Compact, key-sorted JSON used for journals and wire payloads"""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def _vector(value: Any) -> Optional[Tuple[float, ...]]:
    if value is None:
        return None
    return tuple(float(x) for x in value)


# ============================================================================
# ENUMS
# ============================================================================

class Outcome(str, Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    PARTIALLY_USEFUL = "partially_useful"
    NO_RECOMMENDATION_AVAILABLE = "no_recommendation_available"

    @classmethod
    def parse(cls, value: Any) -> "Outcome":
        try:
            return cls(value)
        except ValueError:
            allowed = ", ".join(o.value for o in cls)
            raise ValidationError(f"unknown outcome {value!r} (expected one of: {allowed})") from None


class TaskKind(str, Enum):
    API_USAGE = "api_usage"
    DEBUGGING = "debugging"
    CONCEPTUAL = "conceptual"
    REFACTORING = "refactoring"
    OTHER = "other"


# ============================================================================
# STORE TYPES
# ============================================================================

@dataclass(frozen=True)
class DocBlob:
    """One unit of ingested documentation"""
    blob_id: str
    source: str
    path: str
    title: str
    body: str
    symbols: Tuple[str, ...] = ()
    metadata: Dict[str, str] = field(default_factory=dict)
    embedding: Optional[Tuple[float, ...]] = None

    @staticmethod
    def compute_id(source: str, path: str, body: str) -> str:
        return sha256_hex(source, path, body)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["symbols"] = list(self.symbols)
        data["embedding"] = list(self.embedding) if self.embedding is not None else None
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DocBlob":
        return cls(
            blob_id=data["blob_id"],
            source=data["source"],
            path=data["path"],
            title=data.get("title", ""),
            body=data["body"],
            symbols=tuple(data.get("symbols") or ()),
            metadata={str(k): str(v) for k, v in (data.get("metadata") or {}).items()},
            embedding=_vector(data.get("embedding")),
        )


@dataclass(frozen=True)
class ExperientialTrace:
    """One captured agent interaction"""
    trace_id: str
    timestamp: str
    problem_text: str
    code_context: str
    outcome: Outcome
    recommendation_id: Optional[str] = None
    hindsight_feedback: Optional[str] = None
    agent_tag: str = ""

    def validate(self) -> "ExperientialTrace":
        for name in ("trace_id", "timestamp", "problem_text", "code_context", "agent_tag"):
            require_text(name, getattr(self, name))
        require_text("recommendation_id", self.recommendation_id, optional=True)
        require_text("hindsight_feedback", self.hindsight_feedback, optional=True)
        if not self.trace_id:
            raise ValidationError("trace_id must be non-empty")
        parse_timestamp(self.timestamp)
        if self.outcome == Outcome.NO_RECOMMENDATION_AVAILABLE and self.recommendation_id:
            raise ValidationError("outcome no_recommendation_available cannot reference a recommendation_id")
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["outcome"] = self.outcome.value
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperientialTrace":
        try:
            return cls(
                trace_id=str(data["trace_id"]),
                timestamp=str(data["timestamp"]),
                problem_text=str(data.get("problem_text") or ""),
                code_context=str(data.get("code_context") or ""),
                outcome=Outcome.parse(data["outcome"]),
                recommendation_id=data.get("recommendation_id") or None,
                hindsight_feedback=data.get("hindsight_feedback"),
                agent_tag=str(data.get("agent_tag") or ""),
            )
        except KeyError as e:
            raise ValidationError(f"trace is missing field {e.args[0]}") from None


@dataclass(frozen=True)
class CuratedInsight:
    """A generalizable lesson committed at an epoch boundary"""
    insight_id: str
    lesson_text: str
    supporting_trace_ids: Tuple[str, ...]
    cluster_id: str
    confidence: float
    created_epoch: int
    superseded_by: Optional[str] = None
    embedding: Optional[Tuple[float, ...]] = None
    supersedes: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["supporting_trace_ids"] = list(self.supporting_trace_ids)
        data["supersedes"] = list(self.supersedes)
        data["embedding"] = list(self.embedding) if self.embedding is not None else None
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CuratedInsight":
        return cls(
            insight_id=data["insight_id"],
            lesson_text=data["lesson_text"],
            supporting_trace_ids=tuple(data["supporting_trace_ids"]),
            cluster_id=data["cluster_id"],
            confidence=float(data["confidence"]),
            created_epoch=int(data["created_epoch"]),
            superseded_by=data.get("superseded_by"),
            embedding=_vector(data.get("embedding")),
            supersedes=tuple(data.get("supersedes") or ()),
        )


@dataclass(frozen=True)
class MemoryEpoch:
    """An immutable, numbered commit of the curated knowledge state"""
    epoch_number: int
    committed_at: str
    insight_ids: Tuple[str, ...]
    doc_corpus_version: str
    stats: Dict[str, int]
    added_insight_ids: Tuple[str, ...] = ()
    superseded_ids: Tuple[str, ...] = ()
    trace_high_water: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epoch_number": self.epoch_number,
            "committed_at": self.committed_at,
            "insight_ids": list(self.insight_ids),
            "doc_corpus_version": self.doc_corpus_version,
            "stats": dict(self.stats),
            "added_insight_ids": list(self.added_insight_ids),
            "superseded_ids": list(self.superseded_ids),
            "trace_high_water": self.trace_high_water,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MemoryEpoch":
        return cls(
            epoch_number=int(data["epoch_number"]),
            committed_at=data["committed_at"],
            insight_ids=tuple(data["insight_ids"]),
            doc_corpus_version=data["doc_corpus_version"],
            stats={k: int(v) for k, v in data["stats"].items()},
            added_insight_ids=tuple(data.get("added_insight_ids") or ()),
            superseded_ids=tuple(data.get("superseded_ids") or ()),
            trace_high_water=int(data.get("trace_high_water", 0)),
        )


@dataclass(frozen=True)
class MemorySnapshot:
    """Active insights of one epoch plus the doc corpus version it was committed against"""
    epoch_number: int
    doc_corpus_version: str
    insights: Tuple[CuratedInsight, ...]
    committed_at: str = ""
    trace_high_water: int = 0

    def insight(self, insight_id: str) -> Optional[CuratedInsight]:
        for item in self.insights:
            if item.insight_id == insight_id:
                return item
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epoch_number": self.epoch_number,
            "doc_corpus_version": self.doc_corpus_version,
            "committed_at": self.committed_at,
            "trace_high_water": self.trace_high_water,
            "insights": [i.to_dict() for i in self.insights],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MemorySnapshot":
        return cls(
            epoch_number=int(data["epoch_number"]),
            doc_corpus_version=data["doc_corpus_version"],
            insights=tuple(CuratedInsight.from_dict(i) for i in data["insights"]),
            committed_at=data.get("committed_at", ""),
            trace_high_water=int(data.get("trace_high_water", 0)),
        )


@dataclass
class IngestReport:
    inserted: int = 0
    deduplicated: int = 0
    rejected: int = 0
    rejections: List[Dict[str, Any]] = field(default_factory=list)

    def reject(self, position: int, reason: str) -> None:
        self.rejected += 1
        self.rejections.append({"index": position, "reason": reason})

    @property
    def total(self) -> int:
        return self.inserted + self.deduplicated + self.rejected

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ============================================================================
# RETRIEVAL TYPES
# ============================================================================

@dataclass(frozen=True)
class Intent:
    normalized_query: str
    task_kind: TaskKind
    named_symbols: Tuple[str, ...]
    target_libraries: Tuple[str, ...]
    raw_problem: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            "normalized_query": self.normalized_query,
            "task_kind": self.task_kind.value,
            "named_symbols": list(self.named_symbols),
            "target_libraries": list(self.target_libraries),
            "raw_problem": self.raw_problem,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Intent":
        return cls(
            normalized_query=data["normalized_query"],
            task_kind=TaskKind(data["task_kind"]),
            named_symbols=tuple(data["named_symbols"]),
            target_libraries=tuple(data["target_libraries"]),
            raw_problem=data["raw_problem"],
        )


@dataclass(frozen=True)
class Citation:
    ref: str
    locator: str
    kind: str = "doc"

    def to_dict(self) -> Dict[str, str]:
        return {"ref": self.ref, "locator": self.locator, "kind": self.kind}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Citation":
        return cls(ref=data["ref"], locator=data["locator"], kind=data.get("kind", "doc"))


@dataclass(frozen=True)
class Recommendation:
    """Synthesized, evidence-cited guidance returned to an agent"""
    recommendation_id: str
    intent: Intent
    guidance_text: str
    best_practices: Tuple[str, ...]
    citations: Tuple[Citation, ...]
    epoch_number: int
    created_at: str
    code_context: str = ""
    problem_digest: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "recommendation_id": self.recommendation_id,
            "intent": self.intent.to_dict(),
            "guidance_text": self.guidance_text,
            "best_practices": list(self.best_practices),
            "citations": [c.to_dict() for c in self.citations],
            "epoch_number": self.epoch_number,
            "created_at": self.created_at,
            "code_context": self.code_context,
            "problem_digest": self.problem_digest,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Recommendation":
        return cls(
            recommendation_id=data["recommendation_id"],
            intent=Intent.from_dict(data["intent"]),
            guidance_text=data["guidance_text"],
            best_practices=tuple(data["best_practices"]),
            citations=tuple(Citation.from_dict(c) for c in data["citations"]),
            epoch_number=int(data["epoch_number"]),
            created_at=data["created_at"],
            code_context=data.get("code_context", ""),
            problem_digest=data.get("problem_digest", ""),
        )
