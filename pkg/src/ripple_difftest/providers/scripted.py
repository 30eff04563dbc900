"""Deterministic scripted provider used for `fake:<script-path>` models.

Script file: JSON, either a list of records or ``{"records": [...]}``. A record is
``{"match": <substring, optional>, "reply": <text or JSON value>}``; a record may
instead carry ``"raise": "transport" | "refusal"`` to simulate provider failures.

Selection per send: the earliest unconsumed record whose ``match`` occurs in the
incoming user text; otherwise the next unconsumed record without ``match``.
Consumed indices live on the session, so each session walks the script on its
own and a restored session continues where it left off.

``{{image_hash}}`` in a reply expands to ``img:<sha256[:12]>`` per image of the
incoming message.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from ..errors import LlmTransportError, ProviderRefusal, ScriptExhausted
from ..protocol import ProviderReply

if TYPE_CHECKING:
    from ..llm_gateway import ChatMessage, SessionHandle

_PIECE_RE = re.compile(r"\S+\s*")
_LEADING_WS_RE = re.compile(r"\s*")


class WhitespaceTokenizer:
    name = "whitespace"

    def split(self, text: str) -> list[str]:
        pieces = _PIECE_RE.findall(text)
        lead = _LEADING_WS_RE.match(text)
        prefix = lead.group(0) if lead else ""
        if not pieces:
            return [text] if text else []
        if prefix:
            pieces[0] = prefix + pieces[0]
        return pieces

    def count(self, text: str) -> int:
        return len(self.split(text))


def fake_embedding(text: str, dim: int) -> list[float]:
    """Signed feature hashing of lower-cased whitespace tokens, L2-normalized.

    For each token: h = sha256(token); bucket = int(h[:8], 16) % dim;
    sign = +1 if int(h[8:10], 16) is even else -1. An all-zero result maps to e0.
    """
    vec = np.zeros(dim, dtype=np.float64)
    for token in text.lower().split():
        h = hashlib.sha256(token.encode("utf-8")).hexdigest()
        bucket = int(h[:8], 16) % dim
        sign = 1.0 if int(h[8:10], 16) % 2 == 0 else -1.0
        vec[bucket] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        vec[0] = 1.0
        return vec.tolist()
    return (vec / norm).tolist()


@dataclass(frozen=True)
class ScriptRecord:
    reply: str
    match: str | None = None
    fault: str | None = None


def _render_reply(value: Any) -> str:
    if isinstance(value, str):
        return value
    return "```json\n" + json.dumps(value, ensure_ascii=False, indent=2) + "\n```"


def load_script(path: str | Path) -> list[ScriptRecord]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(raw, dict):
        raw = raw.get("records", [])
    if not isinstance(raw, list):
        raise ValueError(f"script {path}: expected a list of records")

    records: list[ScriptRecord] = []
    for i, rec in enumerate(raw):
        if not isinstance(rec, dict):
            raise ValueError(f"script {path}: record {i} must be an object")
        fault = rec.get("raise")
        if fault is not None and fault not in ("transport", "refusal"):
            raise ValueError(f"script {path}: record {i} has unknown fault {fault!r}")
        if fault is None and "reply" not in rec:
            raise ValueError(f"script {path}: record {i} needs a reply")
        match = rec.get("match")
        records.append(
            ScriptRecord(
                reply=_render_reply(rec.get("reply", "")),
                match=str(match) if match else None,
                fault=fault,
            )
        )
    return records


class ScriptedProvider:
    name = "scripted"

    def __init__(self, script_path: str | Path | None, *, embedding_dim: int = 64) -> None:
        self.script_path = Path(script_path) if script_path else None
        self.embedding_dim = embedding_dim
        self.requests: list[dict[str, Any]] = []
        self._records: list[ScriptRecord] | None = None
        self._lock = threading.Lock()
        self._tokenizer = WhitespaceTokenizer()

    @property
    def records(self) -> list[ScriptRecord]:
        with self._lock:
            if self._records is None:
                if self.script_path is None or not self.script_path.is_file():
                    raise ScriptExhausted(f"no script available at {self.script_path}")
                self._records = load_script(self.script_path)
            return self._records

    def _select(self, session: SessionHandle, text: str) -> int | None:
        consumed = set(session.consumed)
        records = self.records
        for i, rec in enumerate(records):
            if i not in consumed and rec.match is not None and rec.match in text:
                return i
        for i, rec in enumerate(records):
            if i not in consumed and rec.match is None:
                return i
        return None

    def complete(self, session: SessionHandle, messages: Sequence[ChatMessage]) -> ProviderReply:
        incoming = messages[-1]
        idx = self._select(session, incoming.text)
        if idx is None:
            raise ScriptExhausted(f"script exhausted for session {session.session_id}")
        session.consumed.append(idx)
        rec = self.records[idx]

        with self._lock:
            self.requests.append(
                {
                    "session_id": session.session_id,
                    "role": session.role,
                    "record": idx,
                    "text": incoming.text,
                    "images": [p.sha256 for p in incoming.images],
                }
            )

        if rec.fault == "transport":
            raise LlmTransportError(f"scripted transport failure (record {idx})")
        if rec.fault == "refusal":
            raise ProviderRefusal(f"scripted refusal (record {idx})")

        reply = rec.reply
        if "{{image_hash}}" in reply:
            tokens = " ".join(f"img:{p.sha256[:12]}" for p in incoming.images)
            reply = reply.replace("{{image_hash}}", tokens)

        input_tokens = sum(self._tokenizer.count(m.text) for m in messages)
        return ProviderReply(
            text=reply,
            input_tokens=input_tokens,
            output_tokens=self._tokenizer.count(reply),
        )

    def embed(self, model: str, texts: Sequence[str]) -> list[list[float]]:
        return [fake_embedding(t, self.embedding_dim) for t in texts]

    def tokenizer(self) -> WhitespaceTokenizer:
        return self._tokenizer
