from __future__ import annotations

import base64
import logging
import os
from collections.abc import Sequence
from typing import Any

import openai
import tiktoken
from openai import OpenAI

from ..config import ModelEndpoint
from ..errors import LlmTransportError, ProviderRefusal
from ..llm_gateway import ChatMessage, ImagePart, SessionHandle
from ..protocol import ProviderReply

logger = logging.getLogger(__name__)

_RETRYABLE = (
    openai.APIConnectionError,
    openai.RateLimitError,
    openai.InternalServerError,
)


class TiktokenTokenizer:
    name = "tiktoken"

    def __init__(self, model: str | None = None) -> None:
        try:
            self._enc = tiktoken.encoding_for_model(model or "")
        except KeyError:
            self._enc = tiktoken.get_encoding("cl100k_base")

    def split(self, text: str) -> list[str]:
        tokens = self._enc.encode(text, disallowed_special=())
        if not tokens:
            return []
        decoded, offsets = self._enc.decode_with_offsets(tokens)
        if decoded != text:
            return [self._enc.decode([t]) for t in tokens]
        bounds = [*offsets, len(text)]
        return [text[bounds[i] : bounds[i + 1]] for i in range(len(tokens))]

    def count(self, text: str) -> int:
        return len(self._enc.encode(text, disallowed_special=()))


def _to_openai_message(msg: ChatMessage) -> dict[str, Any]:
    if msg.role != "user" or not msg.images:
        return {"role": msg.role, "content": msg.text}
    content: list[dict[str, Any]] = []
    for part in msg.parts:
        if not isinstance(part, ImagePart):
            content.append({"type": "text", "text": part.text})
            continue
        encoded = base64.b64encode(part.data).decode("ascii")
        url = f"data:{part.media_type};base64,{encoded}"
        content.append({"type": "image_url", "image_url": {"url": url}})
    return {"role": "user", "content": content}


class OpenAICompatProvider:
    """Chat and embedding calls against any OpenAI-compatible endpoint.

    Retries are owned by the gateway, so the SDK client is built with max_retries=0.
    """

    name = "openai"

    def __init__(
        self, endpoint: ModelEndpoint, *, client: Any = None, timeout_sec: float = 120.0
    ) -> None:
        self.endpoint = endpoint
        if client is None:
            env_var = endpoint.api_key_env_var or "OPENAI_API_KEY"
            client = OpenAI(
                base_url=endpoint.endpoint,
                api_key=os.environ.get(env_var) or "EMPTY",
                max_retries=0,
                timeout=timeout_sec,
            )
        self.client = client
        self._tokenizer: TiktokenTokenizer | None = None

    def _call(self, fn: Any, **kwargs: Any) -> Any:
        try:
            return fn(**kwargs)
        except _RETRYABLE as e:
            logger.debug("openai-compatible call failed: %s", e)
            raise LlmTransportError(f"{type(e).__name__}: {e}") from e
        except openai.BadRequestError as e:
            if "content_filter" in str(e) or "content_policy" in str(e):
                raise ProviderRefusal(str(e)) from e
            err = LlmTransportError(f"bad request: {e}")
            err.retryable = False
            raise err from e
        except openai.APIStatusError as e:
            err = LlmTransportError(f"status {e.status_code}: {e}")
            err.retryable = e.status_code >= 500
            raise err from e

    def complete(self, session: SessionHandle, messages: Sequence[ChatMessage]) -> ProviderReply:
        resp = self._call(
            self.client.chat.completions.create,
            model=session.model,
            messages=[_to_openai_message(m) for m in messages],
        )
        choice = resp.choices[0]
        refusal = getattr(choice.message, "refusal", None)
        if refusal:
            raise ProviderRefusal(str(refusal))
        if choice.finish_reason == "content_filter":
            raise ProviderRefusal("response withheld by content filter")

        text = choice.message.content or ""
        usage = getattr(resp, "usage", None)
        if usage is not None:
            in_tokens, out_tokens = int(usage.prompt_tokens), int(usage.completion_tokens)
        else:
            tok = self.tokenizer()
            in_tokens = sum(tok.count(m.text) for m in messages)
            out_tokens = tok.count(text)
        return ProviderReply(
            text=text,
            input_tokens=in_tokens,
            output_tokens=out_tokens,
            finish_reason=str(choice.finish_reason or "stop"),
        )

    def embed(self, model: str, texts: Sequence[str]) -> list[list[float]]:
        resp = self._call(self.client.embeddings.create, model=model, input=list(texts))
        rows = sorted(resp.data, key=lambda d: d.index)
        return [list(d.embedding) for d in rows]

    def tokenizer(self) -> TiktokenTokenizer:
        if self._tokenizer is None:
            self._tokenizer = TiktokenTokenizer(self.endpoint.model)
        return self._tokenizer
