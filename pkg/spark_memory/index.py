"""
Spark hybrid index
Multi-scope BM25 lexical search, exact vector kNN and reciprocal rank fusion
"""

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)

BM25_K1 = 1.2
BM25_B = 0.75
RRF_CONSTANT = 60
NORM_TOLERANCE = 1e-6
INDEX_FORMAT = "spark-index/1"

_WORD = re.compile(r"\w+")
_BACKTICKED = re.compile(r"`([^`\n]+)`")


# ============================================================================
# TOKENIZER
# ============================================================================

def _identifier_parts(word: str) -> List[str]:
    parts: List[str] = []
    for chunk in word.split("_"):
        if not chunk:
            continue
        start = 0
        for i in range(1, len(chunk)):
            if chunk[i - 1].islower() and chunk[i].isupper():
                parts.append(chunk[start:i])
                start = i
        parts.append(chunk[start:])
    return [p.lower() for p in parts]


def _compound(word: str) -> str:
    return word.strip("_").lower()


def tokenize(text: str) -> List[str]:
    """
    Lowercased word tokens; identifiers also split on underscores and camelCase
    tz_localize -> tz, localize, tz_localize
    """
    tokens: List[str] = []
    for word in _WORD.findall(text or ""):
        parts = _identifier_parts(word)
        if not parts:
            continue
        tokens.extend(parts)
        compound = _compound(word)
        if len(parts) > 1 and compound:
            tokens.append(compound)
    return tokens


def _looks_like_code(text: str, start: int, end: int, word: str, in_backticks: bool) -> bool:
    if in_backticks:
        return True
    if "_" in word.strip("_"):
        return True
    if any(word[i - 1].islower() and word[i].isupper() for i in range(1, len(word))):
        return True
    if start > 0 and text[start - 1] == ".":
        return True
    return end < len(text) and text[end] == "("


def extract_symbols(text: str) -> List[str]:
    """API identifiers mentioned in text, as compound tokens, in first-mention order"""
    text = text or ""
    spans = [m.span(1) for m in _BACKTICKED.finditer(text)]
    symbols: List[str] = []
    seen = set()
    for match in _WORD.finditer(text):
        word = match.group(0)
        symbol = _compound(word)
        if len(symbol) < 2 or symbol.isdigit() or not any(c.isalpha() for c in symbol):
            continue
        start, end = match.span()
        in_backticks = any(lo <= start and end <= hi for lo, hi in spans)
        if symbol not in seen and _looks_like_code(text, start, end, word, in_backticks):
            seen.add(symbol)
            symbols.append(symbol)
    return symbols


# ============================================================================
# HITS
# ============================================================================

class Channel(str, Enum):
    LEXICAL_BLOB = "lexical_blob"
    LEXICAL_SECTION = "lexical_section"
    LEXICAL_SYMBOL = "lexical_symbol"
    VECTOR = "vector"
    INSIGHT = "insight"


CHANNEL_ORDER = {channel: i for i, channel in enumerate(Channel)}


@dataclass(frozen=True)
class RankedHit:
    doc_ref: str
    score: float
    source_channel: Channel

    def to_dict(self) -> Dict[str, object]:
        return {"doc_ref": self.doc_ref, "score": self.score, "source_channel": self.source_channel.value}


def _ref_ranks(refs: Sequence[str]) -> np.ndarray:
    """Position of each ref in ascending ref order, used as the tie-breaker"""
    order = sorted(range(len(refs)), key=refs.__getitem__)
    ranks = np.empty(len(refs), dtype=np.int64)
    ranks[order] = np.arange(len(refs), dtype=np.int64)
    return ranks


def _top_hits(
    scores: np.ndarray, candidates: np.ndarray, refs: Sequence[str], ref_rank: np.ndarray, k: int, channel: Channel
) -> List[RankedHit]:
    if k <= 0 or candidates.size == 0:
        return []
    order = np.lexsort((ref_rank[candidates], -scores[candidates]))[:k]
    return [RankedHit(refs[int(i)], float(scores[int(i)]), channel) for i in candidates[order]]


# ============================================================================
# LEXICAL INDEX
# ============================================================================

class LexicalIndex:
    """Inverted index for one lexical scope; immutable after build"""

    def __init__(
        self,
        scope: str,
        refs: List[str],
        doc_lengths: np.ndarray,
        postings: Dict[str, Tuple[np.ndarray, np.ndarray]],
    ):
        self.scope = scope
        self.refs = refs
        self.doc_lengths_array = doc_lengths
        self._postings = postings
        self.doc_count = len(refs)
        self.avg_doc_length = int(doc_lengths.sum()) / len(refs) if refs else 0.0
        self._ref_rank = _ref_ranks(refs)

    @property
    def channel(self) -> Channel:
        return Channel(f"lexical_{self.scope}")

    @property
    def terms(self) -> List[str]:
        return sorted(self._postings)

    @property
    def doc_lengths(self) -> Dict[str, int]:
        return {ref: int(n) for ref, n in zip(self.refs, self.doc_lengths_array)}

    def postings(self, term: str) -> List[Tuple[str, int]]:
        entry = self._postings.get(term)
        if entry is None:
            return []
        idx, tf = entry
        return [(self.refs[int(i)], int(f)) for i, f in zip(idx, tf)]


def build_lexical(docs: Iterable[Tuple[str, str]], scope: str) -> LexicalIndex:
    """Tokenize (ref, text) pairs into an inverted index for the given scope"""
    if scope not in ("blob", "section", "symbol"):
        raise ValidationError(f"unknown lexical scope: {scope}")
    refs: List[str] = []
    lengths: List[int] = []
    seen = set()
    raw: Dict[str, Tuple[List[int], List[int]]] = {}
    for ref, text in docs:
        if ref in seen:
            raise ValidationError(f"duplicate doc ref: {ref}")
        seen.add(ref)
        position = len(refs)
        refs.append(ref)
        tokens = tokenize(text)
        lengths.append(len(tokens))
        for term, tf in Counter(tokens).items():
            idx, freqs = raw.setdefault(term, ([], []))
            idx.append(position)
            freqs.append(tf)
    postings = {
        term: (np.asarray(idx, dtype=np.int64), np.asarray(freqs, dtype=np.float64))
        for term, (idx, freqs) in raw.items()
    }
    return LexicalIndex(scope, refs, np.asarray(lengths, dtype=np.int64), postings)


def bm25_search(index: LexicalIndex, query: str, k: int) -> List[RankedHit]:
    """BM25 (k1=1.2, b=0.75) over the documents matching at least one query term"""
    if k <= 0 or index.doc_count == 0:
        return []
    n_docs = index.doc_count
    scores = np.zeros(n_docs, dtype=np.float64)
    matched = np.zeros(n_docs, dtype=bool)
    avgdl = index.avg_doc_length
    for term in sorted(set(tokenize(query))):
        entry = index._postings.get(term)
        if entry is None:
            continue
        idx, tf = entry
        n_t = len(idx)
        idf = math.log(1 + (n_docs - n_t + 0.5) / (n_t + 0.5))
        dl = index.doc_lengths_array[idx].astype(np.float64)
        scores[idx] += idf * (tf * (BM25_K1 + 1)) / (tf + BM25_K1 * (1 - BM25_B + BM25_B * dl / avgdl))
        matched[idx] = True
    return _top_hits(scores, np.flatnonzero(matched), index.refs, index._ref_rank, k, index.channel)


# ============================================================================
# VECTOR INDEX
# ============================================================================

class VectorIndex:
    """Exact linear-scan cosine index over unit vectors"""

    def __init__(self, dim: int, refs: List[str], matrix: np.ndarray):
        self.dim = dim
        self.refs = refs
        self.matrix = matrix
        self._ref_rank = _ref_ranks(refs)

    @property
    def entries(self) -> List[Tuple[str, np.ndarray]]:
        return list(zip(self.refs, self.matrix))

    def __len__(self) -> int:
        return len(self.refs)


def build_vector(entries: Iterable[Tuple[str, Sequence[float]]], dim: int) -> VectorIndex:
    refs: List[str] = []
    rows: List[np.ndarray] = []
    seen = set()
    for ref, vector in entries:
        if ref in seen:
            raise ValidationError(f"duplicate doc ref: {ref}")
        seen.add(ref)
        row = np.asarray(vector, dtype=np.float64)
        if row.shape != (dim,):
            raise ValidationError(f"vector for {ref} has dimension {row.size}, index dimension is {dim}")
        if abs(float(np.linalg.norm(row)) - 1.0) > NORM_TOLERANCE:
            raise ValidationError(f"vector for {ref} is not unit-norm")
        refs.append(ref)
        rows.append(row)
    matrix = np.vstack(rows) if rows else np.zeros((0, dim), dtype=np.float64)
    return VectorIndex(dim, refs, matrix)


def knn_search(
    index: VectorIndex, query_vec: Sequence[float], k: int, channel: Channel = Channel.VECTOR
) -> List[RankedHit]:
    query = np.asarray(query_vec, dtype=np.float64)
    if query.shape != (index.dim,):
        raise ValidationError(f"query dimension {query.size} does not match index dimension {index.dim}")
    if k <= 0 or not index.refs:
        return []
    scores = index.matrix @ query
    return _top_hits(scores, np.arange(len(index.refs)), index.refs, index._ref_rank, k, channel)


# ============================================================================
# FUSION
# ============================================================================

def fuse(rankings: Sequence[Sequence[RankedHit]], k: int) -> List[RankedHit]:
    """
    Reciprocal rank fusion: score(d) = sum over lists of 1 / (60 + rank), rank from 1
    Independent of the order of the input lists
    """
    if k <= 0:
        return []
    contributions: Dict[str, List[float]] = {}
    best: Dict[str, Tuple[int, int, Channel]] = {}
    for ranking in rankings:
        for rank, hit in enumerate(ranking, start=1):
            contributions.setdefault(hit.doc_ref, []).append(1.0 / (RRF_CONSTANT + rank))
            key = (rank, CHANNEL_ORDER[hit.source_channel], hit.source_channel)
            if hit.doc_ref not in best or key[:2] < best[hit.doc_ref][:2]:
                best[hit.doc_ref] = key
    fused = [
        RankedHit(ref, math.fsum(sorted(parts)), best[ref][2])
        for ref, parts in contributions.items()
    ]
    fused.sort(key=lambda hit: (-hit.score, hit.doc_ref))
    return fused[:k]


# ============================================================================
# BUNDLES
# ============================================================================

EmbedFn = Callable[[List[str]], List[Sequence[float]]]


def doc_embedding_text(title: str, body: str) -> str:
    return f"{title}\n{body}" if title else body


@dataclass(frozen=True)
class DocIndexes:
    """Everything searchable about the documentation corpus at one corpus version"""
    version: str
    blob: LexicalIndex
    section: LexicalIndex
    symbol: LexicalIndex
    vectors: VectorIndex

    @property
    def doc_count(self) -> int:
        return self.blob.doc_count


def build_doc_indexes(docs: Sequence, version: str, embed: EmbedFn, dim: int, batch_size: int = 256) -> DocIndexes:
    """Build all doc indexes; blobs without a stored embedding of the right size are embedded"""
    blob = build_lexical(((d.blob_id, d.body) for d in docs), "blob")
    section = build_lexical(((d.blob_id, f"{d.path} {d.title}") for d in docs), "section")
    symbol = build_lexical(((d.blob_id, " ".join(d.symbols)) for d in docs), "symbol")

    vectors: List[Optional[Sequence[float]]] = [
        d.embedding if d.embedding is not None and len(d.embedding) == dim else None for d in docs
    ]
    missing = [i for i, v in enumerate(vectors) if v is None]
    for start in range(0, len(missing), batch_size):
        chunk = missing[start:start + batch_size]
        embedded = embed([doc_embedding_text(docs[i].title, docs[i].body) for i in chunk])
        for i, vector in zip(chunk, embedded):
            vectors[i] = vector
    vector_index = build_vector(((d.blob_id, v) for d, v in zip(docs, vectors)), dim)
    return DocIndexes(version, blob, section, symbol, vector_index)


@dataclass(frozen=True)
class InsightIndex:
    """Vector index over the active insights of one epoch"""
    epoch_number: int
    vectors: VectorIndex


def build_insight_index(snapshot, embed: EmbedFn, dim: int) -> InsightIndex:
    insights = list(snapshot.insights)
    vectors: List[Optional[Sequence[float]]] = [
        i.embedding if i.embedding is not None and len(i.embedding) == dim else None for i in insights
    ]
    missing = [n for n, v in enumerate(vectors) if v is None]
    if missing:
        for n, vector in zip(missing, embed([insights[n].lesson_text for n in missing])):
            vectors[n] = vector
    index = build_vector(((i.insight_id, v) for i, v in zip(insights, vectors)), dim)
    return InsightIndex(snapshot.epoch_number, index)


# ============================================================================
# PERSISTENCE
# ============================================================================

def _lexical_arrays(prefix: str, index: LexicalIndex) -> Dict[str, np.ndarray]:
    terms = sorted(index._postings)
    offsets = [0]
    idx_parts, tf_parts = [], []
    for term in terms:
        idx, tf = index._postings[term]
        idx_parts.append(idx)
        tf_parts.append(tf)
        offsets.append(offsets[-1] + len(idx))
    return {
        f"{prefix}_terms": np.asarray(terms, dtype=str),
        f"{prefix}_offsets": np.asarray(offsets, dtype=np.int64),
        f"{prefix}_idx": np.concatenate(idx_parts) if idx_parts else np.zeros(0, dtype=np.int64),
        f"{prefix}_tf": np.concatenate(tf_parts) if tf_parts else np.zeros(0, dtype=np.float64),
        f"{prefix}_lengths": index.doc_lengths_array,
    }


def _lexical_from_arrays(prefix: str, scope: str, refs: List[str], data) -> LexicalIndex:
    terms = [str(t) for t in data[f"{prefix}_terms"]]
    offsets = data[f"{prefix}_offsets"]
    idx_all = data[f"{prefix}_idx"]
    tf_all = data[f"{prefix}_tf"]
    postings = {
        term: (idx_all[offsets[n]:offsets[n + 1]], tf_all[offsets[n]:offsets[n + 1]])
        for n, term in enumerate(terms)
    }
    return LexicalIndex(scope, refs, data[f"{prefix}_lengths"], postings)


def save_doc_indexes(indexes: DocIndexes, path: Union[str, Path]) -> None:
    path = Path(path)
    header = {"format": INDEX_FORMAT, "version": indexes.version, "dim": indexes.vectors.dim}
    arrays = {
        "header": np.asarray(json.dumps(header)),
        "refs": np.asarray(indexes.blob.refs, dtype=str),
        "vectors": indexes.vectors.matrix,
    }
    for scope in ("blob", "section", "symbol"):
        arrays.update(_lexical_arrays(scope, getattr(indexes, scope)))
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_doc_indexes(path: Union[str, Path], expected_version: str) -> Optional[DocIndexes]:
    """Load a saved index; None when missing, unreadable, of another format or another corpus version"""
    path = Path(path)
    if not path.exists():
        return None
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("format") != INDEX_FORMAT or header.get("version") != expected_version:
                logger.info(f"ℹ️  Saved index at {path.name} is stale, rebuilding")
                return None
            refs = [str(r) for r in data["refs"]]
            lexical = {scope: _lexical_from_arrays(scope, scope, refs, data) for scope in ("blob", "section", "symbol")}
            vectors = VectorIndex(int(header["dim"]), refs, np.array(data["vectors"]))
    except (OSError, ValueError, KeyError) as e:
        logger.warning(f"⚠️  Could not load saved index {path.name}: {e}")
        return None
    return DocIndexes(header["version"], lexical["blob"], lexical["section"], lexical["symbol"], vectors)
