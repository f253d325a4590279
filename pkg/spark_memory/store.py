"""
Spark store
Single-directory, append-only JSON Lines journals (docs, traces, insights, epochs, recommendations)
plus one compacted snapshot file per committed epoch
"""

import fcntl
import hashlib
import json
import logging
import math
import os
import threading
import time
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

from .errors import EpochConflictError, NotFoundError, StorageError, UnknownReferenceError, ValidationError
from .index import extract_symbols
from .models import (
    CuratedInsight,
    DocBlob,
    ExperientialTrace,
    IngestReport,
    MemoryEpoch,
    MemorySnapshot,
    Recommendation,
    dumps,
    require_text,
    utc_now,
)

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-6
COLLECTIONS = ("docs", "traces", "insights", "epochs", "recommendations")
SNAPSHOT_CACHE_SIZE = 32


# ============================================================================
# JOURNAL
# ============================================================================

class Journal:
    """
    Append-only JSON Lines file shared between processes
    Writers hold an exclusive flock and a batch lands in one write + fsync; readers take a shared flock
    Thread safety is the owning store's job
    """

    def __init__(self, path: Path):
        self.path = path
        self._offset = 0
        self.fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        self._recover()

    def _recover(self) -> None:
        """Drop a torn trailing line left by a crash mid-append"""
        with self._flock():
            size = os.fstat(self.fd).st_size
            if size == 0:
                return
            data = os.pread(self.fd, size, 0)
            if data.endswith(b"\n"):
                return
            keep = data.rfind(b"\n") + 1
            os.ftruncate(self.fd, keep)
            os.fsync(self.fd)
            logger.warning(f"⚠️  Recovered {self.path.name}: dropped {size - keep} bytes of a torn record")

    @contextmanager
    def _flock(self, mode: int = fcntl.LOCK_EX) -> Iterator[None]:
        fcntl.flock(self.fd, mode)
        try:
            yield
        finally:
            fcntl.flock(self.fd, fcntl.LOCK_UN)

    @contextmanager
    def exclusive(self) -> Iterator["Journal"]:
        with self._flock():
            yield self

    def read_new(self) -> List[Dict[str, Any]]:
        """Records appended since the last read or write by this handle"""
        size = os.fstat(self.fd).st_size
        if size <= self._offset:
            return []
        data = os.pread(self.fd, size - self._offset, self._offset)
        end = data.rfind(b"\n") + 1
        if end == 0:
            return []
        records = []
        for raw in data[:end].splitlines():
            if raw.strip():
                try:
                    records.append(json.loads(raw))
                except json.JSONDecodeError as e:
                    raise StorageError(f"corrupt record in {self.path.name}: {e}") from None
        self._offset += end
        return records

    def tail(self) -> List[Dict[str, Any]]:
        with self._flock(fcntl.LOCK_SH):
            return self.read_new()

    def write(self, records: Sequence[Mapping[str, Any]]) -> None:
        """Append records; caller holds exclusive(). On failure the file is cut back"""
        if not records:
            return
        payload = "".join(dumps(r) + "\n" for r in records).encode("utf-8")
        start = os.lseek(self.fd, 0, os.SEEK_END)
        try:
            view = memoryview(payload)
            while view:
                written = os.write(self.fd, view)
                view = view[written:]
            os.fsync(self.fd)
        except OSError as e:
            try:
                os.ftruncate(self.fd, start)
            except OSError:
                pass
            raise StorageError(f"append to {self.path.name} failed: {e}") from None
        self._offset = start + len(payload)

    def close(self) -> None:
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1


# ============================================================================
# EPOCH GATE
# ============================================================================

class EpochGate:
    """
    Exclusive, non-blocking epoch lock shared by run_epoch and commit_epoch
    Re-entrant for the thread that holds it; a second holder gets EpochConflictError
    """

    def __init__(self, path: Path):
        self.path = path
        self._lock = threading.Lock()
        self._owner: Optional[int] = None
        self._depth = 0
        self._fd = -1

    @contextmanager
    def hold(self) -> Iterator[None]:
        me = threading.get_ident()
        if self._owner == me:
            self._depth += 1
            try:
                yield
            finally:
                self._depth -= 1
            return

        if not self._lock.acquire(blocking=False):
            raise EpochConflictError()
        try:
            fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
            try:
                fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                os.close(fd)
                raise EpochConflictError() from None
            self._fd, self._owner, self._depth = fd, me, 1
            try:
                yield
            finally:
                self._owner, self._depth, self._fd = None, 0, -1
                fcntl.flock(fd, fcntl.LOCK_UN)
                os.close(fd)
        finally:
            self._lock.release()


# ============================================================================
# STORE
# ============================================================================

def _unit_norm(vector: Sequence[float]) -> bool:
    return abs(math.sqrt(math.fsum(float(x) * float(x) for x in vector)) - 1.0) <= NORM_TOLERANCE


def _roll_version(previous: str, blob_id: str) -> str:
    return hashlib.sha256((previous + blob_id).encode("ascii")).hexdigest()


class SparkStore:
    """
    Durable store for the shared memory; the single source of truth every other module reads from
    Writes are journaled before they become visible in memory, so readers never see partial batches
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        try:
            (self.root / "snapshots").mkdir(parents=True, exist_ok=True)
            (self.root / "locks").mkdir(parents=True, exist_ok=True)
            (self.root / "index").mkdir(parents=True, exist_ok=True)
            self._journals = {name: Journal(self.root / f"{name}.jsonl") for name in COLLECTIONS}
        except OSError as e:
            raise StorageError(f"cannot open store at {self.root}: {e}") from None

        self.gate = EpochGate(self.root / "locks" / "epoch.lock")
        # guards journal offsets and every in-memory collection
        self._lock = threading.RLock()

        self._docs: List[DocBlob] = []
        self._doc_pos: Dict[str, int] = {}
        self._corpus_hash = ""
        self._traces: List[ExperientialTrace] = []
        self._trace_pos: Dict[str, int] = {}
        self._insight_records: Dict[str, CuratedInsight] = {}
        self._committed: Dict[str, CuratedInsight] = {}
        self._epochs: List[MemoryEpoch] = []
        self._recommendations: Dict[str, Recommendation] = {}
        self._snapshots: "OrderedDict[int, MemorySnapshot]" = OrderedDict()

        self.sync()
        logger.info(
            f"✅ Store opened at {self.root} "
            f"({len(self._docs)} docs, {len(self._traces)} traces, {len(self._epochs)} epochs)"
        )

    def close(self) -> None:
        with self._lock:
            for journal in self._journals.values():
                journal.close()

    def __enter__(self) -> "SparkStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # ------------------------------------------------------------------
    # journal replay
    # ------------------------------------------------------------------

    def sync(self) -> None:
        """Pick up records appended by other processes"""
        with self._lock:
            for name in COLLECTIONS:
                self._absorb(name, self._journals[name].tail())

    def _absorb(self, name: str, records: List[Dict[str, Any]]) -> None:
        if not records:
            return
        if name == "docs":
            for data in records:
                self._add_doc(DocBlob.from_dict(data))
        elif name == "traces":
            for data in records:
                self._add_trace(ExperientialTrace.from_dict(data))
        elif name == "insights":
            for data in records:
                insight = CuratedInsight.from_dict(data)
                self._insight_records[insight.insight_id] = insight
        elif name == "epochs":
            for data in records:
                self._add_epoch(MemoryEpoch.from_dict(data))
        elif name == "recommendations":
            for data in records:
                rec = Recommendation.from_dict(data)
                self._recommendations[rec.recommendation_id] = rec

    def _add_doc(self, blob: DocBlob) -> None:
        if blob.blob_id in self._doc_pos:
            return
        self._doc_pos[blob.blob_id] = len(self._docs)
        self._docs.append(blob)
        self._corpus_hash = _roll_version(self._corpus_hash, blob.blob_id)

    def _add_trace(self, trace: ExperientialTrace) -> None:
        self._trace_pos[trace.trace_id] = len(self._traces)
        self._traces.append(trace)

    def _add_epoch(self, epoch: MemoryEpoch) -> None:
        if epoch.epoch_number != len(self._epochs):
            raise StorageError(
                f"epoch journal out of sequence: expected {len(self._epochs)}, found {epoch.epoch_number}"
            )
        if any(i not in self._insight_records for i in epoch.added_insight_ids):
            # another process wrote the insights after our last look at that journal
            self._absorb("insights", self._journals["insights"].tail())
        for insight_id in epoch.added_insight_ids:
            record = self._insight_records.get(insight_id)
            if record is None:
                raise StorageError(f"epoch {epoch.epoch_number} references unjournaled insight {insight_id}")
            self._committed[insight_id] = record
        self._epochs.append(epoch)

    # ------------------------------------------------------------------
    # documentation
    # ------------------------------------------------------------------

    def put_doc_blobs(self, batch: Iterable[Union[Mapping[str, Any], DocBlob]]) -> IngestReport:
        """
        Persist documentation blobs, content-addressed by sha256(source, path, body)
        Per-entry problems are rejections in the report; storage failure raises and stores nothing
        """
        report = IngestReport()
        journal = self._journals["docs"]
        with self._lock, journal.exclusive():
            self._absorb("docs", journal.read_new())
            accepted: List[DocBlob] = []
            seen = set()
            for position, candidate in enumerate(batch):
                if isinstance(candidate, DocBlob):
                    candidate = candidate.to_dict()
                blob, reason = self._prepare_blob(candidate)
                if blob is None:
                    report.reject(position, reason)
                elif blob.blob_id in seen or blob.blob_id in self._doc_pos:
                    report.deduplicated += 1
                else:
                    seen.add(blob.blob_id)
                    accepted.append(blob)
                    report.inserted += 1
            journal.write([b.to_dict() for b in accepted])
            for blob in accepted:
                self._add_doc(blob)
        if report.inserted or report.rejected:
            logger.info(
                f"📚 Ingested docs: inserted={report.inserted} "
                f"deduplicated={report.deduplicated} rejected={report.rejected}"
            )
        return report

    @staticmethod
    def _prepare_blob(candidate: Any) -> Tuple[Optional[DocBlob], str]:
        if not isinstance(candidate, Mapping):
            return None, "entry is not an object"
        fields = {}
        for name in ("source", "path", "body"):
            value = candidate.get(name)
            if not isinstance(value, str) or not value.strip():
                return None, f"{name} must be a non-empty string"
            fields[name] = value
        title = candidate.get("title") or ""
        if not isinstance(title, str):
            return None, "title must be a string"

        symbols = candidate.get("symbols")
        if not symbols:
            symbols = extract_symbols(fields["body"])
        elif not isinstance(symbols, list) or not all(isinstance(s, str) for s in symbols):
            return None, "symbols must be a list of strings"

        metadata = candidate.get("metadata") or {}
        if not isinstance(metadata, Mapping):
            return None, "metadata must be an object"
        metadata = {str(k): str(v) for k, v in metadata.items()}

        texts = [fields["source"], fields["path"], fields["body"], title, *symbols, *metadata, *metadata.values()]
        try:
            for text in texts:
                require_text("document", text)
        except ValidationError as e:
            return None, e.message

        embedding = candidate.get("embedding")
        if embedding is not None:
            if not isinstance(embedding, (list, tuple)) or not embedding:
                return None, "embedding must be a non-empty list of numbers"
            try:
                embedding = tuple(float(x) for x in embedding)
            except (TypeError, ValueError):
                return None, "embedding must be a non-empty list of numbers"
            if not _unit_norm(embedding):
                return None, "embedding is not unit-norm"

        blob = DocBlob(
            blob_id=DocBlob.compute_id(fields["source"], fields["path"], fields["body"]),
            source=fields["source"],
            path=fields["path"],
            title=title,
            body=fields["body"],
            symbols=tuple(symbols),
            metadata=metadata,
            embedding=embedding,
        )
        return blob, ""

    def count(self) -> int:
        return len(self._docs)

    def get_doc(self, blob_id: str) -> Optional[DocBlob]:
        pos = self._doc_pos.get(blob_id)
        return self._docs[pos] if pos is not None else None

    def iter_docs(self) -> List[DocBlob]:
        """Stable copy of the corpus at call time"""
        with self._lock:
            return list(self._docs)

    def corpus(self) -> Tuple[List[DocBlob], str]:
        """Docs and their corpus version, read together"""
        with self._lock:
            return list(self._docs), self.doc_corpus_version()

    def doc_corpus_version(self) -> str:
        with self._lock:
            return f"docs-{len(self._docs)}-{self._corpus_hash[:16] or '0' * 16}"

    # ------------------------------------------------------------------
    # traces
    # ------------------------------------------------------------------

    def append_trace(self, trace: ExperientialTrace) -> str:
        return self.append_traces([trace])[0]

    def append_traces(self, traces: Sequence[ExperientialTrace]) -> List[str]:
        """Append traces in order; the whole batch is validated before anything is written"""
        journal = self._journals["traces"]
        with self._lock, journal.exclusive():
            self._absorb("traces", journal.read_new())
            self._absorb("recommendations", self._journals["recommendations"].tail())
            seen = set()
            for trace in traces:
                trace.validate()
                if trace.trace_id in self._trace_pos or trace.trace_id in seen:
                    raise ValidationError(f"trace {trace.trace_id} already exists")
                if trace.recommendation_id and trace.recommendation_id not in self._recommendations:
                    raise UnknownReferenceError(f"unknown recommendation_id: {trace.recommendation_id}")
                seen.add(trace.trace_id)
            journal.write([t.to_dict() for t in traces])
            for trace in traces:
                self._add_trace(trace)
        return [t.trace_id for t in traces]

    def scan_traces(self, start: int = 0, end: Optional[int] = None) -> List[ExperientialTrace]:
        with self._lock:
            stop = len(self._traces) if end is None else min(end, len(self._traces))
            return self._traces[start:stop]

    def trace_count(self) -> int:
        return len(self._traces)

    def has_trace(self, trace_id: str) -> bool:
        return trace_id in self._trace_pos

    # ------------------------------------------------------------------
    # recommendations
    # ------------------------------------------------------------------

    def put_recommendation(self, rec: Recommendation) -> None:
        journal = self._journals["recommendations"]
        with self._lock, journal.exclusive():
            self._absorb("recommendations", journal.read_new())
            journal.write([rec.to_dict()])
            self._recommendations[rec.recommendation_id] = rec

    def get_recommendation(self, recommendation_id: str) -> Optional[Recommendation]:
        rec = self._recommendations.get(recommendation_id)
        if rec is None:
            self.sync()
            rec = self._recommendations.get(recommendation_id)
        return rec

    # ------------------------------------------------------------------
    # epochs
    # ------------------------------------------------------------------

    def ensure_baseline(self, attempts: int = 50) -> MemoryEpoch:
        """Commit the documentation-only epoch 0 unless some process already did"""
        for _ in range(attempts):
            latest = self.latest_epoch()
            if latest is not None:
                return latest
            try:
                return self.commit_epoch([], [], baseline=True)
            except EpochConflictError:
                time.sleep(0.05)
        raise EpochConflictError("timed out waiting for the baseline epoch")

    def commit_epoch(
        self,
        new_insights: Sequence[CuratedInsight],
        superseded: Sequence[str],
        *,
        traces_consumed: int = 0,
        trace_high_water: Optional[int] = None,
        baseline: bool = False,
    ) -> MemoryEpoch:
        """
        Atomically publish a new epoch: the epoch record is the commit point
        Insights journaled by a commit that never wrote its epoch record stay invisible
        A baseline commit is a no-op returning the latest epoch once any epoch exists
        """
        with self.gate.hold():
            self.sync()
            with self._lock:
                if baseline and self._epochs:
                    return self._epochs[-1]
                epoch, added = self._prepare_epoch(new_insights, superseded, traces_consumed, trace_high_water)

                insights_journal = self._journals["insights"]
                with insights_journal.exclusive():
                    self._absorb("insights", insights_journal.read_new())
                    insights_journal.write([i.to_dict() for i in added])
                for insight in added:
                    self._insight_records[insight.insight_id] = insight

                epochs_journal = self._journals["epochs"]
                with epochs_journal.exclusive():
                    self._absorb("epochs", epochs_journal.read_new())
                    if len(self._epochs) != epoch.epoch_number:
                        raise EpochConflictError(f"epoch {epoch.epoch_number} was committed concurrently")
                    epochs_journal.write([epoch.to_dict()])
                self._add_epoch(epoch)

            snapshot = self._replay_snapshot(epoch)
            self._cache_snapshot(snapshot)
            self._write_snapshot_file(snapshot)

        logger.info(
            f"✅ Committed epoch {epoch.epoch_number}: +{len(added)} insights, "
            f"-{len(epoch.superseded_ids)} superseded, {len(epoch.insight_ids)} active"
        )
        return epoch

    def _prepare_epoch(
        self,
        new_insights: Sequence[CuratedInsight],
        superseded: Sequence[str],
        traces_consumed: int,
        trace_high_water: Optional[int],
    ) -> Tuple[MemoryEpoch, List[CuratedInsight]]:
        previous = self._epochs[-1] if self._epochs else None
        number = previous.epoch_number + 1 if previous else 0
        active = list(previous.insight_ids) if previous else []

        if number == 0 and (new_insights or superseded):
            raise ValidationError("epoch 0 is the documentation-only baseline and holds no insights")

        active_set = set(active)
        gone: List[str] = []
        for insight_id in superseded:
            if insight_id not in self._committed:
                raise ValidationError(f"cannot supersede unknown insight {insight_id}")
            if insight_id not in active_set or insight_id in gone:
                raise ValidationError(f"insight {insight_id} is already superseded")
            gone.append(insight_id)

        added: List[CuratedInsight] = []
        new_ids = set()
        for insight in new_insights:
            if not insight.supporting_trace_ids:
                raise ValidationError(f"insight {insight.insight_id} has no supporting traces")
            dangling = [t for t in insight.supporting_trace_ids if t not in self._trace_pos]
            if dangling:
                raise ValidationError(
                    f"insight {insight.insight_id} has dangling supporting_trace_ids: {', '.join(dangling)}"
                )
            if insight.insight_id in self._committed or insight.insight_id in new_ids:
                raise ValidationError(f"insight {insight.insight_id} already committed")
            stray = [s for s in insight.supersedes if s not in gone]
            if stray:
                raise ValidationError(f"insight {insight.insight_id} supersedes ids not listed as superseded: {stray}")
            new_ids.add(insight.insight_id)
            added.append(replace(insight, created_epoch=number, superseded_by=None))

        high_water = previous.trace_high_water if previous else 0
        if trace_high_water is not None:
            if trace_high_water < high_water or trace_high_water > len(self._traces):
                raise ValidationError(f"trace_high_water {trace_high_water} out of range")
            high_water = trace_high_water

        removed = set(gone)
        epoch = MemoryEpoch(
            epoch_number=number,
            committed_at=utc_now(),
            insight_ids=tuple([i for i in active if i not in removed] + [i.insight_id for i in added]),
            doc_corpus_version=self.doc_corpus_version(),
            stats={
                "traces_consumed": traces_consumed,
                "insights_added": len(added),
                "insights_superseded": len(gone),
            },
            added_insight_ids=tuple(i.insight_id for i in added),
            superseded_ids=tuple(gone),
            trace_high_water=high_water,
        )
        return epoch, added

    def latest_epoch(self) -> Optional[MemoryEpoch]:
        self.sync()
        with self._lock:
            return self._epochs[-1] if self._epochs else None

    def list_epochs(self) -> List[MemoryEpoch]:
        self.sync()
        with self._lock:
            return list(self._epochs)

    def get_epoch(self, epoch_number: int) -> MemoryEpoch:
        with self._lock:
            if 0 <= epoch_number < len(self._epochs):
                return self._epochs[epoch_number]
        self.sync()
        with self._lock:
            if 0 <= epoch_number < len(self._epochs):
                return self._epochs[epoch_number]
        raise NotFoundError(f"unknown epoch: {epoch_number}")

    def load_snapshot(self, epoch_number: Optional[int] = None) -> MemorySnapshot:
        """Active insights of an epoch (latest by default); snapshots are immutable values"""
        if epoch_number is None:
            latest = self.latest_epoch()
            if latest is None:
                raise NotFoundError("no epoch has been committed")
            epoch_number = latest.epoch_number
        epoch = self.get_epoch(epoch_number)
        with self._lock:
            cached = self._snapshots.get(epoch_number)
            if cached is not None:
                self._snapshots.move_to_end(epoch_number)
                return cached
        snapshot = self._read_snapshot_file(epoch) or self._replay_snapshot(epoch)
        self._cache_snapshot(snapshot)
        return snapshot

    def _cache_snapshot(self, snapshot: MemorySnapshot) -> None:
        """Keep the most recently used snapshots, oldest evicted first"""
        with self._lock:
            self._snapshots[snapshot.epoch_number] = snapshot
            self._snapshots.move_to_end(snapshot.epoch_number)
            while len(self._snapshots) > SNAPSHOT_CACHE_SIZE:
                self._snapshots.popitem(last=False)

    def _replay_snapshot(self, epoch: MemoryEpoch) -> MemorySnapshot:
        with self._lock:
            insights = tuple(replace(self._committed[i], superseded_by=None) for i in epoch.insight_ids)
        return MemorySnapshot(
            epoch_number=epoch.epoch_number,
            doc_corpus_version=epoch.doc_corpus_version,
            insights=insights,
            committed_at=epoch.committed_at,
            trace_high_water=epoch.trace_high_water,
        )

    def _snapshot_path(self, epoch_number: int) -> Path:
        return self.root / "snapshots" / f"epoch-{epoch_number:06d}.json"

    def _write_snapshot_file(self, snapshot: MemorySnapshot) -> None:
        path = self._snapshot_path(snapshot.epoch_number)
        tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
        try:
            with open(tmp, "w", encoding="utf-8") as f:
                f.write(dumps(snapshot.to_dict()))
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, path)
        except OSError as e:
            # journals stay authoritative; load_snapshot falls back to replay
            logger.warning(f"⚠️  Could not write snapshot for epoch {snapshot.epoch_number}: {e}")

    def _read_snapshot_file(self, epoch: MemoryEpoch) -> Optional[MemorySnapshot]:
        path = self._snapshot_path(epoch.epoch_number)
        if not path.exists():
            return None
        try:
            snapshot = MemorySnapshot.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (OSError, ValueError, KeyError) as e:
            logger.warning(f"⚠️  Ignoring unreadable snapshot {path.name}: {e}")
            return None
        ids = tuple(i.insight_id for i in snapshot.insights)
        if snapshot.epoch_number != epoch.epoch_number or ids != epoch.insight_ids:
            logger.warning(f"⚠️  Snapshot {path.name} disagrees with the epoch journal, replaying")
            return None
        return snapshot

    # ------------------------------------------------------------------
    # insights + stats
    # ------------------------------------------------------------------

    def insight_history(self, epoch_number: Optional[int] = None) -> List[CuratedInsight]:
        """Every insight committed up to an epoch, with superseded_by resolved as of that epoch"""
        epochs = self.list_epochs()
        if not epochs:
            return []
        if epoch_number is None:
            epoch_number = epochs[-1].epoch_number
        self.get_epoch(epoch_number)
        with self._lock:
            ordered = [
                self._committed[i]
                for epoch in epochs[: epoch_number + 1]
                for i in epoch.added_insight_ids
            ]
        replaced_by = {old: ins.insight_id for ins in ordered for old in ins.supersedes}
        return [replace(ins, superseded_by=replaced_by.get(ins.insight_id)) for ins in ordered]

    def stats(self) -> Dict[str, Any]:
        """All counts read under one lock so they describe a single state"""
        with self._lock:
            self.sync()
            latest = self._epochs[-1] if self._epochs else None
            return {
                "epoch_number": latest.epoch_number if latest else None,
                "doc_count": len(self._docs),
                "trace_count": len(self._traces),
                "insight_count": len(latest.insight_ids) if latest else 0,
                "doc_corpus_version": self.doc_corpus_version(),
            }
