from __future__ import annotations

import threading
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone

UTC = timezone.utc
from typing import TYPE_CHECKING, Any, Protocol

if TYPE_CHECKING:
    from .config import SutConfig
    from .executor import UiInstruction
    from .llm_gateway import ChatMessage, SessionHandle


def parse_timestamp(value: str | datetime) -> datetime:
    """Parse an ISO-8601 timestamp and normalize it to UTC; naive values are taken as UTC."""
    if isinstance(value, datetime):
        dt = value
    else:
        text = str(value).strip()
        if not text:
            raise ValueError("empty timestamp")
        dt = datetime.fromisoformat(text.replace("Z", "+00:00") if text.endswith("Z") else text)
    if dt.tzinfo is None:
        return dt.replace(tzinfo=UTC)
    return dt.astimezone(UTC)


def format_timestamp(dt: datetime) -> str:
    return parse_timestamp(dt).isoformat()


@dataclass(frozen=True)
class ChangeIntent:
    source_id: str
    title: str
    description: str
    created_at: datetime

    def __post_init__(self) -> None:
        if not self.source_id:
            raise ValueError("source_id must be non-empty")
        object.__setattr__(self, "created_at", parse_timestamp(self.created_at))

    def to_dict(self) -> dict[str, Any]:
        return {
            "source_id": self.source_id,
            "title": self.title,
            "description": self.description,
            "created_at": format_timestamp(self.created_at),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> ChangeIntent:
        return cls(
            source_id=str(raw["source_id"]),
            title=str(raw.get("title") or ""),
            description=str(raw.get("description") or ""),
            created_at=parse_timestamp(raw["created_at"]),
        )


@dataclass(frozen=True)
class CommitRef:
    sha: str
    message: str = ""


@dataclass
class PrRecord:
    intent: ChangeIntent
    head_revision: str | None
    commits: list[CommitRef]
    linked_issue_ids: list[str] = field(default_factory=list)
    files: list[str] = field(default_factory=list)
    state: str = "merged"


@dataclass
class HistoricalReport:
    source_id: str
    title: str
    body: str
    created_at: datetime
    kept: bool = True
    rejection_reason: str | None = None

    def __post_init__(self) -> None:
        self.created_at = parse_timestamp(self.created_at)

    @property
    def text(self) -> str:
        return f"{self.title}\n\n{self.body}" if self.body else self.title

    def to_dict(self) -> dict[str, Any]:
        return {
            "source_id": self.source_id,
            "title": self.title,
            "body": self.body,
            "created_at": format_timestamp(self.created_at),
            "kept": self.kept,
            "rejection_reason": self.rejection_reason,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> HistoricalReport:
        return cls(
            source_id=str(raw["source_id"]),
            title=str(raw.get("title") or ""),
            body=str(raw.get("body") or ""),
            created_at=parse_timestamp(raw["created_at"]),
        )


@dataclass(frozen=True)
class BuildArtifact:
    image_ref: str
    revision: str
    launch_command: str
    location: str


@dataclass
class ContainerSession:
    session_id: str
    image_ref: str
    sut_revision: str
    display_geometry: tuple[int, int]
    state: str = "building"
    handle: Any = None


class IssueTrackerClient(Protocol):
    """Read-only view of a project's pull requests and issues."""

    name: str

    def get_pr(self, pr_id: str) -> PrRecord: ...

    def get_issue(self, issue_id: str) -> ChangeIntent: ...

    def list_cross_references(self, commit_sha: str) -> list[str]: ...

    def iter_reports(self) -> Iterator[HistoricalReport]: ...


class VcsClient(Protocol):
    def diff(self, pre: str, post: str, paths: Sequence[str] | None = None) -> str: ...

    def blame(self, revision: str, path: str, ranges: Sequence[tuple[int, int]]) -> dict[int, str]: ...

    def resolve_parent(self, revision: str) -> str: ...

    def commit_message(self, sha: str) -> str: ...


class ContainerRuntime(Protocol):
    name: str
    # Build cache keyed by (base image ref, revision), guarded by `lock`.
    artifacts: dict[tuple[str, str], BuildArtifact]
    lock: threading.Lock

    def build_image(self, cfg: SutConfig, revision: str) -> BuildArtifact: ...

    def start_session(self, artifact: BuildArtifact, geometry: tuple[int, int]) -> ContainerSession: ...

    def exec_in_session(self, session: ContainerSession, argv: Sequence[str]) -> str: ...

    def capture_screenshot(self, session: ContainerSession) -> bytes: ...

    def copy_in(self, session: ContainerSession, src: str, dest: str) -> None: ...

    def teardown(self, session: ContainerSession) -> None: ...


class InputDriver(Protocol):
    def inject(self, instr: UiInstruction, session: ContainerSession) -> None: ...

    def screenshot(self, session: ContainerSession) -> bytes: ...


class Tokenizer(Protocol):
    name: str

    def split(self, text: str) -> list[str]:
        """Token pieces whose concatenation reproduces `text` exactly."""
        ...

    def count(self, text: str) -> int: ...


@dataclass
class ProviderReply:
    text: str
    input_tokens: int
    output_tokens: int
    finish_reason: str = "stop"


class LlmProvider(Protocol):
    name: str

    def complete(self, session: SessionHandle, messages: Sequence[ChatMessage]) -> ProviderReply: ...

    def embed(self, model: str, texts: Sequence[str]) -> list[list[float]]: ...

    def tokenizer(self) -> Tokenizer: ...
