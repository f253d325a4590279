"""
Spark memory service
Wires store, gateway, retrieval agent and learning loop together for the server and CLI
"""

import logging
import time
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional

from .config import SparkConfig, load_config
from .errors import ValidationError
from .gateway import Gateway
from .learning import EpochReport, FeedbackEvent, LearningLoop
from .models import ExperientialTrace, IngestReport, Outcome, Recommendation, utc_now
from .retrieval import RetrievalAgent
from .store import SparkStore

logger = logging.getLogger(__name__)

EXPORTABLE = ("epochs", "snapshot", "traces", "insights")


class SparkService:
    """One shared memory: the object every tool call and CLI command goes through"""

    def __init__(self, config: Optional[SparkConfig] = None, gateway: Optional[Gateway] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config or load_config()
        self.gateway = gateway or Gateway(self.config.gateway, sleep=sleep)
        self.store = SparkStore(self.config.store.root)
        self.store.ensure_baseline()
        self.retrieval = RetrievalAgent(self.store, self.gateway, self.config.retrieval)
        self.learning = LearningLoop(self.store, self.gateway, self.config.learning)

    def close(self) -> None:
        self.retrieval.close()
        self.store.close()

    def __enter__(self) -> "SparkService":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def warm(self) -> None:
        """Build (or load) indexes before serving the first request"""
        self.retrieval.view()

    # ====== agent-facing operations ======

    def recommend(self, problem: str, code_context: str = "", epoch: Optional[int] = None) -> Recommendation:
        return self.retrieval.recommend(problem, code_context or "", epoch)

    def submit_feedback(self, recommendation_id: str, outcome: str, hindsight_feedback: Optional[str] = None,
                        agent_tag: str = "") -> str:
        event = FeedbackEvent(
            recommendation_id=recommendation_id,
            outcome=Outcome.parse(outcome),
            hindsight_feedback=hindsight_feedback,
            agent_tag=agent_tag,
            timestamp=utc_now(),
        )
        return self.learning.record_feedback(event)

    def ingest_documentation(self, blobs: Iterable[Any], source: Optional[str] = None) -> IngestReport:
        """Store blobs and schedule an index rebuild; the report comes back immediately"""
        batch = []
        for blob in blobs:
            if source and isinstance(blob, Mapping) and not blob.get("source"):
                blob = {**blob, "source": source}
            batch.append(blob)
        report = self.store.put_doc_blobs(batch)
        if report.inserted:
            self.retrieval.refresh(background=True)
        return report

    def memory_stats(self, attempts: int = 5) -> Dict[str, Any]:
        """Store counts and the active index version, re-read until both describe one state"""
        stats = self.store.stats()
        for _ in range(attempts):
            view = self.retrieval.view()
            after = self.store.stats()
            if after == stats and view.epoch_number == stats["epoch_number"]:
                break
            stats = after
        return {
            "epoch_number": stats["epoch_number"],
            "doc_count": stats["doc_count"],
            "trace_count": stats["trace_count"],
            "insight_count": stats["insight_count"],
            "index_version": view.index_version,
        }

    # ====== operator operations ======

    def ingest_traces(self, records: Iterable[Any]) -> IngestReport:
        """Import JSONL-style trace records; invalid entries are rejected, known ids deduplicated"""
        report = IngestReport()
        accepted: List[ExperientialTrace] = []
        seen = set()
        for position, record in enumerate(records):
            try:
                if not isinstance(record, Mapping):
                    raise ValidationError("entry is not an object")
                trace = ExperientialTrace.from_dict(record).validate()
                if trace.recommendation_id and self.store.get_recommendation(trace.recommendation_id) is None:
                    raise ValidationError(f"unknown recommendation_id: {trace.recommendation_id}")
            except ValidationError as e:
                report.reject(position, e.message)
                continue
            if trace.trace_id in seen or self.store.has_trace(trace.trace_id):
                report.deduplicated += 1
                continue
            seen.add(trace.trace_id)
            accepted.append(trace)
        if accepted:
            self.store.append_traces(accepted)
        report.inserted = len(accepted)
        return report

    def run_epoch(self) -> EpochReport:
        return self.learning.run_epoch()

    def export(self, what: str, epoch: Optional[int] = None) -> Any:
        if what not in EXPORTABLE:
            raise ValidationError(f"cannot export {what!r}; choose one of {', '.join(EXPORTABLE)}")
        if what == "epochs":
            return [e.to_dict() for e in self.store.list_epochs()]
        if what == "snapshot":
            return self.store.load_snapshot(epoch).to_dict()
        if what == "traces":
            return [t.to_dict() for t in self.store.scan_traces()]
        return [i.to_dict() for i in self.store.insight_history(epoch)]
