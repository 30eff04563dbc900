"""Scenario knowledge base: filtered historical reports, chunked and embedded.

On disk an index is one append-only file of length-prefixed JSON records (a
header, then one record per chunk) plus a sidecar keyword index
``<path>.keywords.json``. Queries fuse a cosine ranking with a BM25 ranking by
reciprocal rank and never return chunks created at or after the cutoff.
"""

from __future__ import annotations

import json
import logging
import re
import struct
import time
from collections.abc import Callable, Iterable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
from rank_bm25 import BM25Okapi

from .config import SkbSettings
from .errors import EmbeddingError, LeakageError
from .protocol import HistoricalReport, Tokenizer, format_timestamp, parse_timestamp
from .prompts import render_prompt
from .validation import extract_json

if TYPE_CHECKING:
    from .llm_gateway import LlmGateway

logger = logging.getLogger(__name__)

INDEX_SCHEMA = "ripple-difftest/skb-index/v0.1"
RRF_K = 60

REJECT_LOG_LIKE = "rule_log_like"
REJECT_KEYWORD = "rule_keyword"
REJECT_NOT_SCENARIO = "llm_not_scenario"

_LEN = struct.Struct(">I")
_TERM_RE = re.compile(r"\w+", re.UNICODE)
_TIMESTAMP_RE = re.compile(
    r"(\d{4}-\d{2}-\d{2}[ T]\d{1,2}:\d{2}(:\d{2})?"
    r"|\b\d{1,2}:\d{2}:\d{2}(\.\d+)?\b"
    r"|\[\s*\d+\.\d+\s*\])"
)


def keyword_terms(text: str) -> list[str]:
    return [t.lower() for t in _TERM_RE.findall(text)]


@dataclass
class SkbChunk:
    chunk_id: str
    source_id: str
    offset_tokens: int
    token_count: int
    text: str
    embedding: list[float]
    created_at: datetime

    def to_dict(self) -> dict[str, Any]:
        return {
            "chunk_id": self.chunk_id,
            "source_id": self.source_id,
            "offset_tokens": self.offset_tokens,
            "token_count": self.token_count,
            "text": self.text,
            "created_at": format_timestamp(self.created_at),
            "embedding": self.embedding,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> SkbChunk:
        return cls(
            chunk_id=str(raw["chunk_id"]),
            source_id=str(raw["source_id"]),
            offset_tokens=int(raw["offset_tokens"]),
            token_count=int(raw["token_count"]),
            text=str(raw["text"]),
            embedding=[float(x) for x in raw["embedding"]],
            created_at=parse_timestamp(raw["created_at"]),
        )


@dataclass
class SkbIndex:
    dim: int
    chunk_tokens: int
    overlap_tokens: int
    tokenizer: str
    chunks: list[SkbChunk] = field(default_factory=list)
    terms: dict[str, list[str]] = field(default_factory=dict)
    path: Path | None = None

    @classmethod
    def empty(cls, dim: int = 64, *, chunk_tokens: int = 512, overlap_tokens: int = 64) -> SkbIndex:
        return cls(dim=dim, chunk_tokens=chunk_tokens, overlap_tokens=overlap_tokens, tokenizer="none")

    def header(self) -> dict[str, Any]:
        return {
            "schema": INDEX_SCHEMA,
            "dim": self.dim,
            "chunk_tokens": self.chunk_tokens,
            "overlap_tokens": self.overlap_tokens,
            "tokenizer": self.tokenizer,
        }


@dataclass
class RetrievalResult:
    chunk: SkbChunk
    semantic_score: float
    keyword_score: float
    fused_score: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "chunk_id": self.chunk.chunk_id,
            "source_id": self.chunk.source_id,
            "created_at": format_timestamp(self.chunk.created_at),
            "semantic_score": round(self.semantic_score, 6),
            "keyword_score": round(self.keyword_score, 6),
            "fused_score": round(self.fused_score, 6),
            "text": self.chunk.text,
        }


# filtering


def timestamp_line_ratio(text: str) -> float:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        return 0.0
    hits = sum(1 for ln in lines if _TIMESTAMP_RE.search(ln))
    return hits / len(lines)


def rule_rejection(report: HistoricalReport, settings: SkbSettings) -> str | None:
    if timestamp_line_ratio(report.body) > settings.timestamp_ratio:
        return REJECT_LOG_LIKE
    haystack = f"{report.title}\n{report.body}".lower()
    if any(k.lower() in haystack for k in settings.stop_keywords):
        return REJECT_KEYWORD
    return None


def _classifier_verdict(reply: str) -> bool:
    try:
        payload = extract_json(reply)
    except ValueError:
        payload = None
    if isinstance(payload, dict) and isinstance(payload.get("end_user_scenario"), bool):
        return payload["end_user_scenario"]
    head = reply.strip().lower()
    if head.startswith("yes"):
        return True
    if head.startswith("no"):
        return False
    raise ValueError(f"unrecognized classifier reply: {reply[:80]!r}")


def filter_reports(
    raw: Iterable[HistoricalReport],
    classifier: LlmGateway,
    settings: SkbSettings | None = None,
) -> Iterator[HistoricalReport]:
    """Mark each report kept or rejected; rule checks first, then the LLM classifier.

    Classifier failures reject the report (fail-closed).
    """
    settings = settings or SkbSettings()
    for report in raw:
        reason = rule_rejection(report, settings)
        if reason is not None:
            yield replace(report, kept=False, rejection_reason=reason)
            continue

        try:
            session = classifier.open_session("classifier")
            reply = classifier.ask(
                session,
                render_prompt("classify_report", title=report.title, body=report.body),
            )
            is_scenario = _classifier_verdict(reply)
        except Exception as e:
            logger.warning("classifier failed on %s, rejecting: %s", report.source_id, e)
            is_scenario = False

        if is_scenario:
            yield replace(report, kept=True, rejection_reason=None)
        else:
            yield replace(report, kept=False, rejection_reason=REJECT_NOT_SCENARIO)


# chunking


def chunk_offsets(n_tokens: int, chunk_tokens: int, overlap_tokens: int) -> list[int]:
    if not chunk_tokens > overlap_tokens >= 0:
        raise ValueError("require chunk_tokens > overlap_tokens >= 0")
    if n_tokens <= 0:
        return []
    step = chunk_tokens - overlap_tokens
    offsets = [0]
    while offsets[-1] + chunk_tokens < n_tokens:
        offsets.append(offsets[-1] + step)
    return offsets


@dataclass(frozen=True)
class _PendingChunk:
    chunk_id: str
    source_id: str
    offset_tokens: int
    token_count: int
    text: str
    created_at: datetime


def split_report(
    report: HistoricalReport, tokenizer: Tokenizer, chunk_tokens: int, overlap_tokens: int
) -> list[_PendingChunk]:
    pieces = tokenizer.split(report.text)
    out: list[_PendingChunk] = []
    for off in chunk_offsets(len(pieces), chunk_tokens, overlap_tokens):
        window = pieces[off : off + chunk_tokens]
        out.append(
            _PendingChunk(
                chunk_id=f"{report.source_id}#{off}",
                source_id=report.source_id,
                offset_tokens=off,
                token_count=len(window),
                text="".join(window),
                created_at=report.created_at,
            )
        )
    return out


def reconstruct_text(chunks: Sequence[SkbChunk], tokenizer: Tokenizer) -> str:
    """Join one source's chunks (ordered by offset), dropping the overlapping prefix of each."""
    ordered = sorted(chunks, key=lambda c: c.offset_tokens)
    parts: list[str] = []
    prev_end = 0
    for c in ordered:
        pieces = tokenizer.split(c.text)
        skip = max(0, prev_end - c.offset_tokens)
        parts.append("".join(pieces[skip:]))
        prev_end = c.offset_tokens + c.token_count
    return "".join(parts)


# building


def _embed_with_retry(
    embedder: LlmGateway,
    chunk: _PendingChunk,
    *,
    attempts: int,
    backoff_sec: float,
    sleep: Callable[[float], None],
) -> list[float] | None:
    for attempt in range(attempts):
        try:
            vectors = embedder.embed([chunk.text])
            if not vectors or not np.any(vectors[0]):
                raise EmbeddingError(f"empty embedding for {chunk.chunk_id}")
            return vectors[0]
        except Exception as e:
            if attempt + 1 < attempts:
                delay = backoff_sec * (2**attempt)
                logger.warning(
                    "embedding %s failed (attempt %d/%d): %s", chunk.chunk_id, attempt + 1, attempts, e
                )
                sleep(delay)
            else:
                logger.warning("skipping chunk %s after %d attempt(s): %s", chunk.chunk_id, attempts, e)
    return None


def _write_record(f: Any, record: dict[str, Any]) -> None:
    data = json.dumps(record, ensure_ascii=False, sort_keys=True).encode("utf-8")
    f.write(_LEN.pack(len(data)))
    f.write(data)


def keyword_sidecar(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".keywords.json")


def build_index(
    kept: Iterable[HistoricalReport],
    embedder: LlmGateway,
    chunk_tokens: int,
    overlap_tokens: int,
    *,
    out_path: str | Path,
    embed_attempts: int = 3,
    backoff_sec: float = 1.0,
    workers: int = 4,
    sleep: Callable[[float], None] = time.sleep,
) -> SkbIndex:
    if not chunk_tokens > overlap_tokens >= 0:
        raise ValueError("require chunk_tokens > overlap_tokens >= 0")

    tokenizer = embedder.tokenizer()
    reports = sorted((r for r in kept if r.kept), key=lambda r: r.source_id)
    pending = [
        c for r in reports for c in split_report(r, tokenizer, chunk_tokens, overlap_tokens)
    ]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        vectors = list(
            pool.map(
                lambda c: _embed_with_retry(
                    embedder, c, attempts=embed_attempts, backoff_sec=backoff_sec, sleep=sleep
                ),
                pending,
            )
        )

    chunks: list[SkbChunk] = []
    dim = 0
    for p, vec in zip(pending, vectors):
        if vec is None:
            continue
        if dim == 0:
            dim = len(vec)
        elif len(vec) != dim:
            logger.warning("skipping chunk %s: dimension %d != %d", p.chunk_id, len(vec), dim)
            continue
        chunks.append(
            SkbChunk(
                chunk_id=p.chunk_id,
                source_id=p.source_id,
                offset_tokens=p.offset_tokens,
                token_count=p.token_count,
                text=p.text,
                embedding=vec,
                created_at=p.created_at,
            )
        )

    index = SkbIndex(
        dim=dim or embedder.settings.embedding_dim,
        chunk_tokens=chunk_tokens,
        overlap_tokens=overlap_tokens,
        tokenizer=tokenizer.name,
        chunks=chunks,
        terms={c.chunk_id: keyword_terms(c.text) for c in chunks},
        path=Path(out_path),
    )
    save_index(index, out_path)
    logger.info("built skb index: %d report(s), %d chunk(s) -> %s", len(reports), len(chunks), out_path)
    return index


def save_index(index: SkbIndex, path: str | Path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("wb") as f:
        _write_record(f, index.header())
        for chunk in index.chunks:
            _write_record(f, chunk.to_dict())

    postings: dict[str, list[str]] = {}
    for chunk_id in sorted(index.terms):
        for term in sorted(set(index.terms[chunk_id])):
            postings.setdefault(term, []).append(chunk_id)
    sidecar = {
        "schema": INDEX_SCHEMA,
        "documents": {k: index.terms[k] for k in sorted(index.terms)},
        "postings": {k: postings[k] for k in sorted(postings)},
    }
    keyword_sidecar(p).write_text(
        json.dumps(sidecar, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8"
    )


def _read_records(data: bytes) -> Iterator[dict[str, Any]]:
    pos = 0
    while pos < len(data):
        if pos + _LEN.size > len(data):
            raise ValueError("truncated index record header")
        (n,) = _LEN.unpack_from(data, pos)
        pos += _LEN.size
        if pos + n > len(data):
            raise ValueError("truncated index record")
        yield json.loads(data[pos : pos + n].decode("utf-8"))
        pos += n


def load_index(path: str | Path) -> SkbIndex:
    p = Path(path)
    records = _read_records(p.read_bytes())
    header = next(records, None)
    if not isinstance(header, dict) or header.get("schema") != INDEX_SCHEMA:
        raise ValueError(f"{p}: not an skb index")
    chunks = [SkbChunk.from_dict(r) for r in records]

    sidecar_path = keyword_sidecar(p)
    if sidecar_path.exists():
        docs = json.loads(sidecar_path.read_text(encoding="utf-8")).get("documents", {})
        terms = {str(k): [str(t) for t in v] for k, v in docs.items()}
    else:
        terms = {c.chunk_id: keyword_terms(c.text) for c in chunks}

    return SkbIndex(
        dim=int(header["dim"]),
        chunk_tokens=int(header["chunk_tokens"]),
        overlap_tokens=int(header["overlap_tokens"]),
        tokenizer=str(header.get("tokenizer", "")),
        chunks=chunks,
        terms=terms,
        path=p,
    )


# querying


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def rrf_fuse(rankings: Sequence[Sequence[str]], *, k: int = RRF_K) -> dict[str, float]:
    fused: dict[str, float] = {}
    for ranking in rankings:
        for rank, item in enumerate(ranking, start=1):
            fused[item] = fused.get(item, 0.0) + 1.0 / (k + rank)
    return fused


def query(
    index: SkbIndex,
    query_text: str,
    cutoff: datetime,
    k: int,
    *,
    embedder: LlmGateway,
) -> list[RetrievalResult]:
    if k < 1:
        raise ValueError("k must be >= 1")
    cutoff = parse_timestamp(cutoff)
    eligible = [c for c in index.chunks if c.created_at < cutoff]
    if not eligible:
        return []

    qvec = np.asarray(embedder.embed([query_text])[0], dtype=np.float64)

    semantic = {
        c.chunk_id: (_cosine(qvec, np.asarray(c.embedding, dtype=np.float64)) + 1.0) / 2.0
        for c in eligible
    }
    semantic_rank = sorted(eligible, key=lambda c: (-semantic[c.chunk_id], c.chunk_id))

    keyword: dict[str, float] = {c.chunk_id: 0.0 for c in eligible}
    keyword_rank: list[SkbChunk] = []
    q_terms = keyword_terms(query_text)
    docs = [index.terms.get(c.chunk_id) or keyword_terms(c.text) for c in eligible]
    if q_terms and any(docs):
        bm25 = BM25Okapi(docs)
        scores = bm25.get_scores(q_terms)
        q_set = set(q_terms)
        for c, score in zip(eligible, scores):
            keyword[c.chunk_id] = max(0.0, float(score))
        keyword_rank = sorted(
            (c for c, doc in zip(eligible, docs) if q_set.intersection(doc)),
            key=lambda c: (-keyword[c.chunk_id], c.chunk_id),
        )

    fused = rrf_fuse(
        [[c.chunk_id for c in semantic_rank], [c.chunk_id for c in keyword_rank]]
    )
    ordered = sorted(eligible, key=lambda c: (-fused[c.chunk_id], c.chunk_id))
    return [
        RetrievalResult(
            chunk=c,
            semantic_score=semantic[c.chunk_id],
            keyword_score=keyword[c.chunk_id],
            fused_score=fused[c.chunk_id],
        )
        for c in ordered[:k]
    ]


def assert_no_leakage(results: Iterable[RetrievalResult], cutoff: datetime) -> None:
    cutoff = parse_timestamp(cutoff)
    for r in results:
        if not r.chunk.created_at < cutoff:
            raise LeakageError(
                f"chunk {r.chunk.chunk_id} created {format_timestamp(r.chunk.created_at)} "
                f"is not before cutoff {format_timestamp(cutoff)}"
            )


def load_reports_dir(source: str | Path) -> list[HistoricalReport]:
    """Read historical reports from `*.json` files (an object or a list of objects each)."""
    out: list[HistoricalReport] = []
    for path in sorted(Path(source).glob("*.json")):
        raw = json.loads(path.read_text(encoding="utf-8"))
        rows = raw if isinstance(raw, list) else [raw]
        for row in rows:
            out.append(HistoricalReport.from_dict(row))
    return out
