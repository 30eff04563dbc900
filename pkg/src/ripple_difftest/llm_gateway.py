from __future__ import annotations

import base64
import hashlib
import itertools
import json
import logging
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .config import Config, LlmSettings, ModelEndpoint, ModelRoles, Price
from .errors import EmbeddingError, LlmFormatError, LlmTransportError, ProviderRefusal, UnknownRole
from .prompts import render_prompt, system_prompt
from .protocol import LlmProvider, Tokenizer
from .validation import extract_json

logger = logging.getLogger(__name__)

CHAT_ROLES = ("generator", "executor", "detector", "filter", "classifier")


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    data: bytes
    media_type: str = "image/png"

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()


Part = TextPart | ImagePart


@dataclass(frozen=True)
class ChatMessage:
    role: str
    parts: tuple[Part, ...]

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"invalid message role: {self.role}")
        if not self.parts:
            raise ValueError("a message needs at least one part")
        if self.role != "user" and any(isinstance(p, ImagePart) for p in self.parts):
            raise ValueError("images are only allowed in user messages")

    @classmethod
    def user(cls, text: str, images: Sequence[bytes] = ()) -> ChatMessage:
        parts: list[Part] = [TextPart(text)]
        parts.extend(ImagePart(img) for img in images)
        return cls("user", tuple(parts))

    @classmethod
    def assistant(cls, text: str) -> ChatMessage:
        return cls("assistant", (TextPart(text),))

    @property
    def text(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))

    @property
    def images(self) -> list[ImagePart]:
        return [p for p in self.parts if isinstance(p, ImagePart)]

    def to_dict(self, *, embed_images: bool = True) -> dict[str, Any]:
        parts: list[dict[str, Any]] = []
        for p in self.parts:
            if isinstance(p, TextPart):
                parts.append({"text": p.text})
            elif embed_images:
                parts.append(
                    {
                        "image": base64.b64encode(p.data).decode("ascii"),
                        "media_type": p.media_type,
                        "sha256": p.sha256,
                    }
                )
            else:
                parts.append({"image_sha256": p.sha256, "media_type": p.media_type})
        return {"role": self.role, "parts": parts}

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> ChatMessage:
        parts: list[Part] = []
        for p in raw["parts"]:
            if "text" in p:
                parts.append(TextPart(str(p["text"])))
            elif "image" in p:
                parts.append(ImagePart(base64.b64decode(p["image"]), p.get("media_type", "image/png")))
            else:
                raise ValueError("cannot restore an image stored by hash only")
        return cls(str(raw["role"]), tuple(parts))


@dataclass
class SessionHandle:
    session_id: str
    role: str
    model: str
    system_prompt: str
    memory: list[ChatMessage] = field(default_factory=list)
    # Script records already consumed by the scripted provider.
    consumed: list[int] = field(default_factory=list)

    def messages(self) -> list[ChatMessage]:
        return [ChatMessage("system", (TextPart(self.system_prompt),)), *self.memory]

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "role": self.role,
            "model": self.model,
            "system_prompt": self.system_prompt,
            "memory": [m.to_dict() for m in self.memory],
            "consumed": list(self.consumed),
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> SessionHandle:
        return cls(
            session_id=str(raw["session_id"]),
            role=str(raw["role"]),
            model=str(raw["model"]),
            system_prompt=str(raw["system_prompt"]),
            memory=[ChatMessage.from_dict(m) for m in raw.get("memory", [])],
            consumed=[int(i) for i in raw.get("consumed", [])],
        )


@dataclass
class RoleUsage:
    requests: int = 0
    input_tokens: int = 0
    output_tokens: int = 0
    image_count: int = 0
    estimated_cost: float = 0.0
    wall_time: float = 0.0


class UsageMeter:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._roles: dict[str, RoleUsage] = {}

    def record(
        self,
        role: str,
        *,
        input_tokens: int,
        output_tokens: int,
        image_count: int,
        cost: float,
        wall_time: float,
    ) -> None:
        with self._lock:
            usage = self._roles.setdefault(role, RoleUsage())
            usage.requests += 1
            usage.input_tokens += max(0, input_tokens)
            usage.output_tokens += max(0, output_tokens)
            usage.image_count += max(0, image_count)
            usage.estimated_cost += max(0.0, cost)
            usage.wall_time += max(0.0, wall_time)

    def role(self, role: str) -> RoleUsage:
        with self._lock:
            return RoleUsage(**asdict(self._roles.get(role, RoleUsage())))

    def snapshot(self) -> dict[str, dict[str, Any]]:
        with self._lock:
            return {role: asdict(u) for role, u in sorted(self._roles.items())}

    def restore(self, snapshot: Mapping[str, Mapping[str, Any]]) -> None:
        with self._lock:
            self._roles = {role: RoleUsage(**dict(v)) for role, v in snapshot.items()}

    def total_cost(self) -> float:
        with self._lock:
            return sum(u.estimated_cost for u in self._roles.values())


def estimate_cost(price: Price | None, *, input_tokens: int, output_tokens: int, images: int) -> float:
    if price is None:
        return 0.0
    return (
        input_tokens / 1000.0 * price.input_per_1k
        + output_tokens / 1000.0 * price.output_per_1k
        + images * price.per_image
    )


def default_provider_factory(endpoint: ModelEndpoint, settings: LlmSettings) -> LlmProvider:
    if endpoint.is_fake:
        from .providers.scripted import ScriptedProvider

        path = endpoint.model.removeprefix("fake:")
        return ScriptedProvider(path, embedding_dim=settings.embedding_dim)

    from .providers.openai_compat import OpenAICompatProvider

    return OpenAICompatProvider(endpoint)


class LlmGateway:
    def __init__(
        self,
        models: ModelRoles,
        *,
        prices: Mapping[str, Price] | None = None,
        settings: LlmSettings | None = None,
        audit_dir: str | Path | None = None,
        provider_factory: Callable[[ModelEndpoint, LlmSettings], LlmProvider] | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.models = models
        self.prices = dict(prices or {})
        self.settings = settings or LlmSettings()
        self.audit_dir = Path(audit_dir) if audit_dir else None
        self.meter = UsageMeter()
        self._factory = provider_factory or default_provider_factory
        self._sleep = sleep
        self._providers: dict[ModelEndpoint, LlmProvider] = {}
        self._lock = threading.Lock()
        self._audit_lock = threading.Lock()
        self._ids = itertools.count(1)

    @classmethod
    def from_config(
        cls, cfg: Config, *, audit_dir: str | Path | None = None, **kwargs: Any
    ) -> LlmGateway:
        return cls(
            cfg.models,
            prices=cfg.prices,
            settings=cfg.llm,
            audit_dir=audit_dir if cfg.llm.audit else None,
            **kwargs,
        )

    def provider_for(self, endpoint: ModelEndpoint) -> LlmProvider:
        with self._lock:
            provider = self._providers.get(endpoint)
            if provider is None:
                provider = self._factory(endpoint, self.settings)
                self._providers[endpoint] = provider
            return provider

    def open_session(self, role: str, *, system: str | None = None) -> SessionHandle:
        if role not in CHAT_ROLES:
            raise UnknownRole(f"not a dialogue role: {role}")
        endpoint = self.models.resolve(role)
        return SessionHandle(
            session_id=f"{role}-{next(self._ids):04d}",
            role=role,
            model=endpoint.model,
            system_prompt=system if system is not None else system_prompt(role),
        )

    def _with_retries(self, what: str, fn: Callable[[], Any]) -> Any:
        attempts = self.settings.max_attempts
        last: LlmTransportError | None = None
        for attempt in range(attempts):
            try:
                return fn()
            except LlmTransportError as e:
                if not e.retryable:
                    raise
                last = e
                if attempt + 1 < attempts:
                    delay = self.settings.backoff_sec * (2**attempt)
                    logger.warning(
                        "%s failed (attempt %d/%d): %s; retrying in %.1fs",
                        what,
                        attempt + 1,
                        attempts,
                        e,
                        delay,
                    )
                    self._sleep(delay)
        raise LlmTransportError(f"{what} failed after {attempts} attempt(s): {last}") from last

    def send(self, session: SessionHandle, msg: ChatMessage) -> ChatMessage:
        if msg.role != "user":
            raise ValueError("only user messages can be sent")
        endpoint = self.models.resolve(session.role)
        provider = self.provider_for(endpoint)
        outgoing = [*session.messages(), msg]

        started = time.monotonic()
        try:
            reply = self._with_retries(
                f"{session.role} request", lambda: provider.complete(session, outgoing)
            )
        except ProviderRefusal:
            logger.error("%s: provider refused the request", session.role)
            raise
        elapsed = time.monotonic() - started

        images = len(msg.images)
        cost = estimate_cost(
            self.prices.get(endpoint.model),
            input_tokens=reply.input_tokens,
            output_tokens=reply.output_tokens,
            images=images,
        )
        self.meter.record(
            session.role,
            input_tokens=reply.input_tokens,
            output_tokens=reply.output_tokens,
            image_count=images,
            cost=cost,
            wall_time=elapsed,
        )

        answer = ChatMessage.assistant(reply.text)
        session.memory.extend([msg, answer])
        self._audit(session, msg, reply.text, reply.input_tokens, reply.output_tokens)
        return answer

    def ask(self, session: SessionHandle, text: str, *, images: Sequence[bytes] = ()) -> str:
        return self.send(session, ChatMessage.user(text, images)).text

    def ask_json(
        self,
        session: SessionHandle,
        text: str,
        *,
        images: Sequence[bytes] = (),
        validate: Callable[[Any], None] | None = None,
    ) -> Any:
        """Send, parse the structured reply, and reprompt once with the parse error on failure."""

        def _parse(reply: str) -> Any:
            payload = extract_json(reply)
            if validate is not None:
                validate(payload)
            return payload

        reply = self.ask(session, text, images=images)
        try:
            return _parse(reply)
        except ValueError as first:
            logger.warning("%s: unparseable reply, sending repair prompt: %s", session.role, first)
            reply = self.ask(session, render_prompt("repair", error=str(first)))
            try:
                return _parse(reply)
            except ValueError as second:
                raise LlmFormatError(
                    f"{session.role}: reply still invalid after repair: {second}"
                ) from second

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        if not texts:
            return []
        endpoint = self.models.resolve("embedding")
        provider = self.provider_for(endpoint)
        tokenizer = provider.tokenizer()

        started = time.monotonic()
        vectors = self._with_retries(
            "embedding request", lambda: provider.embed(endpoint.model, list(texts))
        )
        elapsed = time.monotonic() - started
        if len(vectors) != len(texts):
            raise EmbeddingError(f"expected {len(texts)} vectors, got {len(vectors)}")

        input_tokens = sum(tokenizer.count(t) for t in texts)
        self.meter.record(
            "embedding",
            input_tokens=input_tokens,
            output_tokens=0,
            image_count=0,
            cost=estimate_cost(
                self.prices.get(endpoint.model), input_tokens=input_tokens, output_tokens=0, images=0
            ),
            wall_time=elapsed,
        )
        return [list(map(float, v)) for v in vectors]

    def tokenizer(self) -> Tokenizer:
        return self.provider_for(self.models.resolve("embedding")).tokenizer()

    def _audit(
        self, session: SessionHandle, msg: ChatMessage, reply: str, input_tokens: int, output_tokens: int
    ) -> None:
        if self.audit_dir is None:
            return
        row = {
            "session_id": session.session_id,
            "role": session.role,
            "model": session.model,
            "request": msg.to_dict(embed_images=False),
            "reply": reply,
            "input_tokens": input_tokens,
            "output_tokens": output_tokens,
        }
        path = self.audit_dir / f"{session.role}.jsonl"
        with self._audit_lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(row, ensure_ascii=False) + "\n")
