"""
Experiential learning loop
Feedback -> traces -> candidate lessons -> clusters -> curated insights -> committed epoch
"""

import logging
import threading
import uuid
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import LearningConfig
from .errors import EpochConflictError, ProviderError, SparkError, UnknownReferenceError, ValidationError
from .gateway import Gateway, extract_json
from .models import (
    CuratedInsight,
    ExperientialTrace,
    Outcome,
    dumps,
    format_timestamp,
    parse_timestamp,
    require_text,
    sha256_hex,
    utc_now,
)
from .store import SparkStore

logger = logging.getLogger(__name__)

Vector = Tuple[float, ...]
EmbedFn = Callable[[List[str]], List[Vector]]
SYNTHETIC_EPOCH_START = datetime(2025, 1, 1, tzinfo=timezone.utc)


# ============================================================================
# TYPES
# ============================================================================

@dataclass(frozen=True)
class FeedbackEvent:
    recommendation_id: str
    outcome: Outcome
    hindsight_feedback: Optional[str] = None
    agent_tag: str = ""
    timestamp: str = field(default_factory=utc_now)


@dataclass(frozen=True)
class CandidateInsight:
    candidate_id: str
    lesson_text: str
    supporting_trace_ids: Tuple[str, ...]
    novelty: float = 1.0
    embedding: Optional[Vector] = None


@dataclass(frozen=True)
class InsightCluster:
    cluster_id: str
    member_candidates: Tuple[CandidateInsight, ...]
    centroid: Vector

    @property
    def supporting_trace_ids(self) -> Tuple[str, ...]:
        ordered: Dict[str, None] = {}
        for member in self.member_candidates:
            ordered.update(dict.fromkeys(member.supporting_trace_ids))
        return tuple(ordered)


@dataclass(frozen=True)
class EpochReport:
    epoch_number: int
    traces_consumed: int = 0
    candidates_extracted: int = 0
    candidates_rejected: int = 0
    clusters_formed: int = 0
    insights_committed: int = 0
    insights_superseded: int = 0

    def to_dict(self) -> Dict[str, int]:
        return {
            "epoch_number": self.epoch_number,
            "traces_consumed": self.traces_consumed,
            "candidates_extracted": self.candidates_extracted,
            "candidates_rejected": self.candidates_rejected,
            "clusters_formed": self.clusters_formed,
            "insights_committed": self.insights_committed,
            "insights_superseded": self.insights_superseded,
        }


# ============================================================================
# VECTOR HELPERS
# ============================================================================

def _unit(vector: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vector)
    return vector / norm if norm > 0 else vector


def _max_similarity(vector: Sequence[float], others: Sequence[Sequence[float]]) -> float:
    if not others:
        return 0.0
    return float(np.max(np.asarray(others, dtype=np.float64) @ np.asarray(vector, dtype=np.float64)))


def _insight_vectors(insights: Sequence[CuratedInsight], embed: EmbedFn) -> List[Vector]:
    missing = [i.lesson_text for i in insights if i.embedding is None]
    filled = iter(embed(missing)) if missing else iter(())
    return [i.embedding if i.embedding is not None else next(filled) for i in insights]


# ============================================================================
# EXTRACTION
# ============================================================================

def _candidate_id(lesson: str, trace_ids: Sequence[str]) -> str:
    return "cand-" + sha256_hex(lesson, *sorted(trace_ids))[:16]


def extract_candidates(
    traces: Sequence[ExperientialTrace],
    gateway: Gateway,
    active_insights: Sequence[CuratedInsight] = (),
    batch_size: int = 20,
    rejects: Optional[Counter] = None,
) -> List[CandidateInsight]:
    """
    Mine candidate lessons from traces in provider-sized batches
    Malformed provider output is skipped and tallied in rejects, never raised
    """
    if not traces:
        raise ValidationError("extract_candidates needs at least one trace")
    rejects = rejects if rejects is not None else Counter()
    eligible = [
        t for t in traces
        if not (t.outcome == Outcome.ACCEPTED and not (t.hindsight_feedback or "").strip())
    ]

    found: Dict[str, Tuple[str, Tuple[str, ...]]] = {}
    for start in range(0, len(eligible), max(1, batch_size)):
        batch = eligible[start:start + batch_size]
        batch_ids = {t.trace_id for t in batch}
        payload = dumps([
            {
                "trace_id": t.trace_id,
                "problem": t.problem_text,
                "code_context": t.code_context,
                "outcome": t.outcome.value,
                "hindsight": t.hindsight_feedback or "",
            }
            for t in batch
        ])
        raw = gateway.complete("insight_extraction", traces_json=payload)
        try:
            entries = extract_json(raw).get("candidates")
        except (ValueError, AttributeError):
            entries = None
        if not isinstance(entries, list):
            rejects["unparseable_output"] += 1
            continue
        for entry in entries:
            if not isinstance(entry, dict):
                rejects["malformed_candidate"] += 1
                continue
            lesson = entry.get("lesson")
            trace_ids = entry.get("trace_ids")
            if not isinstance(lesson, str) or not lesson.strip():
                rejects["missing_lesson"] += 1
                continue
            if not isinstance(trace_ids, list) or not trace_ids or not all(t in batch_ids for t in trace_ids):
                rejects["unknown_trace"] += 1
                continue
            ids = tuple(dict.fromkeys(str(t) for t in trace_ids))
            lesson = " ".join(lesson.split())
            found.setdefault(_candidate_id(lesson, ids), (lesson, ids))

    if not found:
        return []
    lessons = [lesson for lesson, _ in found.values()]
    vectors = gateway.embed(lessons)
    active_vectors = _insight_vectors(active_insights, gateway.embed)
    candidates = []
    for (candidate_id, (lesson, ids)), vector in zip(found.items(), vectors):
        novelty = min(1.0, max(0.0, 1.0 - _max_similarity(vector, active_vectors)))
        candidates.append(CandidateInsight(candidate_id, lesson, ids, novelty, tuple(vector)))
    return candidates


# ============================================================================
# CLUSTERING
# ============================================================================

def _greedy_pass(items: List[Tuple[CandidateInsight, np.ndarray]], threshold: float):
    clusters: List[List] = []  # [members, running sum, centroid]
    for candidate, vector in items:
        for cluster in clusters:
            if float(cluster[2] @ vector) >= threshold:
                cluster[0].append((candidate, vector))
                cluster[1] = cluster[1] + vector
                cluster[2] = _unit(cluster[1])
                break
        else:
            clusters.append([[(candidate, vector)], vector.copy(), _unit(vector)])
    return [members for members, _, _ in clusters]


def _repair(members: List[Tuple[CandidateInsight, np.ndarray]], threshold: float):
    """Evict members below the threshold until every remaining member satisfies it"""
    evicted = []
    while True:
        centroid = _unit(np.sum([v for _, v in members], axis=0))
        keep = [(c, v) for c, v in members if float(centroid @ v) >= threshold]
        if len(keep) == len(members):
            return members, centroid, evicted
        if not keep:
            keep = members[:1]
        evicted.extend(m for m in members if not any(m[0] is k[0] for k in keep))
        members = keep


def cluster_candidates(
    candidates: Sequence[CandidateInsight],
    embed: Optional[EmbedFn] = None,
    threshold: float = 0.80,
) -> List[InsightCluster]:
    """
    Greedy single-pass clustering in lesson_text order: join the first cluster whose
    centroid cosine >= threshold, else open a new one; then evict and re-cluster any
    member that drifted below the threshold of its final centroid
    """
    if not candidates:
        return []
    missing = [c.lesson_text for c in candidates if c.embedding is None]
    filled = iter(embed(missing)) if missing else iter(())
    order = sorted(candidates, key=lambda c: (c.lesson_text, c.candidate_id))
    rank = {c.candidate_id: n for n, c in enumerate(order)}
    pending = [
        (c, np.asarray(c.embedding if c.embedding is not None else next(filled), dtype=np.float64))
        for c in order
    ]

    clusters: List[InsightCluster] = []
    while pending:
        leftovers = []
        for members in _greedy_pass(pending, threshold):
            kept, centroid, evicted = _repair(members, threshold)
            member_ids = sorted(c.candidate_id for c, _ in kept)
            clusters.append(InsightCluster(
                cluster_id="cl-" + sha256_hex(*member_ids)[:16],
                member_candidates=tuple(c for c, _ in kept),
                centroid=tuple(float(x) for x in centroid),
            ))
            leftovers.extend(evicted)
        pending = sorted(leftovers, key=lambda item: rank[item[0].candidate_id])
    return clusters


# ============================================================================
# CURATION
# ============================================================================

def _consolidate(cluster: InsightCluster, gateway: Gateway) -> str:
    lessons = [m.lesson_text for m in cluster.member_candidates]
    if len(set(lessons)) == 1:
        return lessons[0]
    raw = gateway.complete("lesson_consolidation", lessons_json=dumps(lessons))
    try:
        lesson = extract_json(raw).get("lesson")
    except (ValueError, AttributeError):
        lesson = None
    if not isinstance(lesson, str) or not lesson.strip():
        raise ProviderError("lesson consolidation returned no lesson")
    return " ".join(lesson.split())


def curate(
    clusters: Sequence[InsightCluster],
    active_insights: Sequence[CuratedInsight],
    gateway: Gateway,
    config: Optional[LearningConfig] = None,
    epoch_number: int = 0,
) -> Tuple[List[CuratedInsight], List[str]]:
    """
    Turn clusters into insights: support-count confidence, novelty filtering and
    supersession of near-duplicate active insights with strictly less support
    """
    config = config or LearningConfig()
    active = list(active_insights)
    active_vectors = _insight_vectors(active, gateway.embed)
    matrix = np.asarray(active_vectors, dtype=np.float64) if active_vectors else None

    new: List[CuratedInsight] = []
    superseded: List[str] = []
    for cluster in clusters:
        support = cluster.supporting_trace_ids
        if len(support) < config.min_support:
            continue
        centroid = np.asarray(cluster.centroid, dtype=np.float64)
        similarities = matrix @ centroid if matrix is not None else np.zeros(0)
        novelty = 1.0 - float(similarities.max()) if similarities.size else 1.0
        if config.enable_novelty_filter and len(support) == 1 and novelty < config.novelty_floor:
            continue

        replaces: Tuple[str, ...] = ()
        near = [
            (float(similarities[n]), insight)
            for n, insight in enumerate(active)
            if similarities[n] >= config.supersede_threshold and insight.insight_id not in superseded
        ]
        if near:
            _, twin = min(near, key=lambda item: (-item[0], item[1].insight_id))
            if not config.enable_supersession or len(twin.supporting_trace_ids) >= len(support):
                continue
            replaces = (twin.insight_id,)
            superseded.append(twin.insight_id)

        lesson = _consolidate(cluster, gateway)
        n = len(support)
        confidence = n / (n + config.confidence_prior) if config.enable_confidence else 1.0
        new.append(CuratedInsight(
            insight_id="ins-" + sha256_hex(str(epoch_number), *sorted(support), lesson)[:16],
            lesson_text=lesson,
            supporting_trace_ids=support,
            cluster_id=cluster.cluster_id,
            confidence=confidence,
            created_epoch=epoch_number,
            embedding=cluster.centroid,
            supersedes=replaces,
        ))
    return new, superseded


# ============================================================================
# SYNTHETIC TRACES
# ============================================================================

def generate_synthetic_traces(
    problems: Sequence[str],
    reference_solutions: Sequence[str],
    gateway: Gateway,
    agent_tag: str = "synthetic",
    base_time: Optional[datetime] = None,
) -> List[ExperientialTrace]:
    """
    Simulate co-piloting: an initial attempt, then developer-style guidance
    derived from comparing it with the accepted reference solution
    """
    if len(problems) != len(reference_solutions):
        raise ValidationError(
            f"{len(problems)} problems but {len(reference_solutions)} reference solutions"
        )
    base_time = base_time or SYNTHETIC_EPOCH_START
    traces = []
    for n, (problem, solution) in enumerate(zip(problems, reference_solutions)):
        initial = gateway.complete("synthetic_initial_solution", problem=problem)
        guidance = gateway.complete(
            "synthetic_feedback", problem=problem, initial_solution=initial, reference_solution=solution
        )
        traces.append(ExperientialTrace(
            trace_id="syn-" + sha256_hex(agent_tag, str(n), problem, solution)[:16],
            timestamp=format_timestamp(base_time + timedelta(seconds=n)),
            problem_text=problem,
            code_context=initial,
            outcome=Outcome.NO_RECOMMENDATION_AVAILABLE,
            hindsight_feedback=guidance.strip(),
            agent_tag=agent_tag,
        ))
    return traces


# ============================================================================
# LOOP
# ============================================================================

class LearningLoop:
    """Feedback capture and epoch runs against one store"""

    def __init__(self, store: SparkStore, gateway: Gateway, config: Optional[LearningConfig] = None):
        self.store = store
        self.gateway = gateway
        self.config = config or LearningConfig()

    def record_feedback(self, event: FeedbackEvent) -> str:
        outcome = Outcome.parse(event.outcome)
        if outcome == Outcome.NO_RECOMMENDATION_AVAILABLE:
            raise ValidationError("feedback on a recommendation cannot have outcome no_recommendation_available")
        parse_timestamp(event.timestamp)
        require_text("recommendation_id", event.recommendation_id)
        require_text("hindsight_feedback", event.hindsight_feedback, optional=True)
        require_text("agent_tag", event.agent_tag)
        rec = self.store.get_recommendation(event.recommendation_id)
        if rec is None:
            raise UnknownReferenceError(f"unknown recommendation_id: {event.recommendation_id}")
        hindsight = event.hindsight_feedback.strip() if event.hindsight_feedback else None
        trace = ExperientialTrace(
            trace_id=f"tr-{uuid.uuid4().hex}",
            timestamp=event.timestamp,
            problem_text=rec.intent.raw_problem,
            code_context=rec.code_context,
            outcome=outcome,
            recommendation_id=rec.recommendation_id,
            hindsight_feedback=hindsight or None,
            agent_tag=event.agent_tag,
        )
        return self.store.append_trace(trace.validate())

    def record_trace(self, trace: ExperientialTrace) -> str:
        return self.store.append_trace(trace.validate())

    def run_epoch(self) -> EpochReport:
        """
        Consume the traces appended since the last epoch's high-water mark and commit one epoch
        Nothing is consumed unless the commit succeeds
        """
        cfg = self.config
        with self.store.gate.hold():
            latest = self.store.latest_epoch() or self.store.ensure_baseline()
            end = self.store.trace_count()
            traces = self.store.scan_traces(latest.trace_high_water, end)
            if not traces:
                report = EpochReport(epoch_number=latest.epoch_number)
                logger.info(f"ℹ️  No new traces since epoch {latest.epoch_number}")
                logger.info(dumps(report.to_dict()))
                return report

            snapshot = self.store.load_snapshot(latest.epoch_number)
            rejects: Counter = Counter()
            candidates = extract_candidates(traces, self.gateway, snapshot.insights, cfg.extraction_batch, rejects)
            clusters = cluster_candidates(candidates, self.gateway.embed, cfg.cluster_threshold)
            new, superseded = curate(clusters, snapshot.insights, self.gateway, cfg, latest.epoch_number + 1)
            try:
                epoch = self.store.commit_epoch(
                    new, superseded, traces_consumed=len(traces), trace_high_water=end
                )
            except SparkError as e:
                logger.error(f"❌ Epoch commit failed: {e}")
                raise

        report = EpochReport(
            epoch_number=epoch.epoch_number,
            traces_consumed=len(traces),
            candidates_extracted=len(candidates),
            candidates_rejected=sum(rejects.values()),
            clusters_formed=len(clusters),
            insights_committed=len(new),
            insights_superseded=len(superseded),
        )
        logger.info(dumps(report.to_dict()))
        return report


class EpochScheduler:
    """Runs epochs on a fixed interval from a daemon thread"""

    def __init__(self, loop: LearningLoop, interval: float):
        self.loop = loop
        self.interval = interval
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="spark-epochs", daemon=True)

    def start(self) -> "EpochScheduler":
        self._thread.start()
        logger.info(f"⏱️  Epoch schedule: every {self.interval:g}s")
        return self

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=self.interval + 5)

    def _run(self) -> None:
        while not self._stop.wait(self.interval):
            try:
                self.loop.run_epoch()
            except EpochConflictError:
                logger.info("ℹ️  Scheduled epoch skipped: another epoch is in progress")
            except SparkError as e:
                logger.error(f"❌ Scheduled epoch failed: {e}")
