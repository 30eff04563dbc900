from __future__ import annotations

import json
import subprocess


class RippleError(Exception):
    code = "RIPPLE_ERROR"
    category = "unknown"
    retryable = False


# change_context


class NotFound(RippleError):
    code = "NOT_FOUND"
    category = "tracker"


class NetworkError(RippleError):
    code = "NETWORK_ERROR"
    category = "network"
    retryable = True

    def __init__(self, message: str, *, attempts: int) -> None:
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempt(s))")


class DetachedPr(RippleError):
    code = "DETACHED_PR"
    category = "tracker"


class BlameUnavailable(RippleError):
    code = "BLAME_UNAVAILABLE"
    category = "vcs"


# skb


class EmbeddingError(RippleError):
    code = "EMBEDDING_ERROR"
    category = "provider"
    retryable = True


class LeakageError(RippleError):
    code = "RETRIEVAL_LEAKAGE"
    category = "invariant"


# llm_gateway


class UnknownRole(RippleError):
    code = "UNKNOWN_ROLE"
    category = "provider"


class LlmTransportError(RippleError):
    code = "LLM_TRANSPORT_ERROR"
    category = "provider"
    retryable = True


TransportError = LlmTransportError


class ScriptExhausted(LlmTransportError):
    code = "SCRIPT_EXHAUSTED"
    retryable = False


class ProviderRefusal(RippleError):
    code = "PROVIDER_REFUSAL"
    category = "provider"


class LlmFormatError(RippleError):
    code = "LLM_FORMAT_ERROR"
    category = "parse"


# executor


class BuildFailure(RippleError):
    code = "BUILD_FAILURE"
    category = "build"

    def __init__(self, message: str, *, revision: str = "", log: str = "") -> None:
        self.revision = revision
        self.log = log
        super().__init__(message)


class DriverError(RippleError):
    code = "DRIVER_ERROR"
    category = "driver"
    retryable = True


class InstructionError(ValueError):
    """A UI instruction violates the kind/argument matrix or display bounds."""


# orchestrator


class StageNotReady(RippleError):
    code = "STAGE_NOT_READY"
    category = "pipeline"


class StageFailed(RippleError):
    """A pipeline stage raised; `failure` is its classified failure record."""

    code = "STAGE_FAILED"
    category = "pipeline"

    def __init__(self, stage: str, failure: dict) -> None:
        self.stage = stage
        self.failure = failure
        code, err = failure.get("error_code"), failure.get("error")
        super().__init__(f"stage {stage} failed: {code}: {err}")


PROVIDER_ERRORS = (LlmTransportError, ProviderRefusal, UnknownRole)


def classify_failure(exc: BaseException, *, stage: str) -> dict:
    msg = str(exc)

    def _row(code: str, category: str, retryable: bool) -> dict:
        return {
            "stage": stage,
            "error_code": code,
            "error_category": category,
            "retryable": retryable,
            "exception_type": type(exc).__name__,
            "error": msg,
        }

    if isinstance(exc, RippleError):
        return _row(exc.code, exc.category, exc.retryable)

    if isinstance(exc, subprocess.TimeoutExpired):
        return _row("TIMEOUT", "timeout", True)

    if isinstance(exc, FileNotFoundError):
        return _row("COMMAND_NOT_FOUND", "environment", False)

    if isinstance(exc, json.JSONDecodeError):
        return _row("PARSE_ERROR", "parse", False)

    if isinstance(exc, ValueError):
        return _row("DATA_VALIDATION_ERROR", "validation", False)

    if isinstance(exc, RuntimeError) and "command failed:" in msg:
        return _row("COMMAND_FAILED", "runtime", True)

    return _row("UNEXPECTED_ERROR", "unknown", False)
