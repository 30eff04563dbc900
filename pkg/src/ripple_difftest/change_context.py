"""Change intent, code changes and ranked preceding intents for one PR.

Preceding intents come from line-level blame at the pre-change revision: every
modified or deleted line is attributed to the commit that last touched it, the
commit is mapped to a PR (tracker cross-reference) or an issue (key parsed from
the commit message), and intents are ranked by how many lines they own.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any

from .errors import BlameUnavailable, DetachedPr, NotFound
from .protocol import ChangeIntent, IssueTrackerClient, VcsClient
from .vcs import FileChange, parse_unified_diff

logger = logging.getLogger(__name__)

DEFAULT_ISSUE_KEY_PATTERN = r"(?:[Bb]ug|#)\s*(\d+)"
MAX_PRECEDING = 10


@dataclass
class CodeChange:
    commit_messages: list[str]
    files: list[FileChange]

    @property
    def paths(self) -> list[str]:
        return [f.path for f in self.files]

    @property
    def modified_line_count(self) -> int:
        return sum(len(set(f.old_lines)) for f in self.files if not f.binary)

    def to_dict(self) -> dict[str, Any]:
        return {
            "commit_messages": list(self.commit_messages),
            "files": [f.to_dict() for f in self.files],
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> CodeChange:
        return cls(
            commit_messages=[str(m) for m in raw.get("commit_messages", [])],
            files=[FileChange.from_dict(f) for f in raw.get("files", [])],
        )


@dataclass(frozen=True)
class PrecedingChangeIntent:
    intent: ChangeIntent
    overlap_lines: int
    rank: int

    def to_dict(self) -> dict[str, Any]:
        return {"rank": self.rank, "overlap_lines": self.overlap_lines, "intent": self.intent.to_dict()}

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> PrecedingChangeIntent:
        return cls(
            intent=ChangeIntent.from_dict(raw["intent"]),
            overlap_lines=int(raw["overlap_lines"]),
            rank=int(raw["rank"]),
        )


@dataclass
class ChangeContext:
    pr_id: str
    pr_intent: ChangeIntent
    resolved_issues: list[ChangeIntent]
    code_change: CodeChange
    preceding: list[PrecedingChangeIntent]
    pre_revision: str
    post_revision: str
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "pr_id": self.pr_id,
            "pr_intent": self.pr_intent.to_dict(),
            "resolved_issues": [i.to_dict() for i in self.resolved_issues],
            "code_change": self.code_change.to_dict(),
            "preceding": [p.to_dict() for p in self.preceding],
            "pre_revision": self.pre_revision,
            "post_revision": self.post_revision,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> ChangeContext:
        return cls(
            pr_id=str(raw["pr_id"]),
            pr_intent=ChangeIntent.from_dict(raw["pr_intent"]),
            resolved_issues=[ChangeIntent.from_dict(i) for i in raw.get("resolved_issues", [])],
            code_change=CodeChange.from_dict(raw["code_change"]),
            preceding=[PrecedingChangeIntent.from_dict(p) for p in raw.get("preceding", [])],
            pre_revision=str(raw["pre_revision"]),
            post_revision=str(raw["post_revision"]),
            warnings=[str(w) for w in raw.get("warnings", [])],
        )


class _CommitIntentResolver:
    """Commit sha -> ChangeIntent, memoized. Cross-references win over message keys."""

    def __init__(self, repo: VcsClient, tracker: IssueTrackerClient, issue_key_pattern: str) -> None:
        self.repo = repo
        self.tracker = tracker
        self.pattern = re.compile(issue_key_pattern)
        self._cache: dict[str, ChangeIntent | None] = {}

    def __call__(self, sha: str) -> ChangeIntent | None:
        if sha not in self._cache:
            self._cache[sha] = self._resolve(sha)
        return self._cache[sha]

    def _resolve(self, sha: str) -> ChangeIntent | None:
        for pr_id in sorted(self.tracker.list_cross_references(sha)):
            try:
                return self.tracker.get_pr(pr_id).intent
            except NotFound:
                logger.debug("cross-referenced PR %s of %s not found", pr_id, sha[:12])

        try:
            message = self.repo.commit_message(sha)
        except RuntimeError as e:
            logger.warning("cannot read commit message of %s: %s", sha[:12], e)
            return None
        m = self.pattern.search(message)
        if not m:
            return None
        try:
            return self.tracker.get_issue(m.group(1))
        except NotFound:
            logger.debug("issue %s referenced by %s not found", m.group(1), sha[:12])
            return None


def _blame_file(repo: VcsClient, revision: str, f: FileChange) -> dict[int, str]:
    lines = set(f.old_lines)
    blamed = repo.blame(revision, f.old_path or f.path, f.old_ranges)
    return {n: sha for n, sha in blamed.items() if n in lines}


def compute_preceding_intents(
    code_change: CodeChange,
    repo: VcsClient,
    tracker: IssueTrackerClient,
    *,
    revision: str,
    current: ChangeIntent | None = None,
    issue_key_pattern: str = DEFAULT_ISSUE_KEY_PATTERN,
    workers: int = 4,
    warnings: list[str] | None = None,
) -> list[PrecedingChangeIntent]:
    """Rank earlier intents by how many of this change's modified/deleted lines they last touched.

    `revision` is the pre-change revision blame runs against. Intents equal to or
    not strictly older than `current` are dropped. Files whose blame fails are
    skipped and noted in `warnings`.
    """
    targets = [f for f in code_change.files if not f.binary and f.old_lines]

    def _one(f: FileChange) -> tuple[FileChange, dict[int, str] | None, str | None]:
        try:
            return f, _blame_file(repo, revision, f), None
        except BlameUnavailable as e:
            return f, None, str(e)

    commits: Counter[str] = Counter()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for f, blamed, error in pool.map(_one, targets):
            if blamed is None:
                msg = f"blame unavailable for {f.path}: {error}"
                logger.warning(msg)
                if warnings is not None:
                    warnings.append(msg)
                continue
            commits.update(blamed.values())

    resolve = _CommitIntentResolver(repo, tracker, issue_key_pattern)
    overlap: Counter[str] = Counter()
    intents: dict[str, ChangeIntent] = {}
    for sha in sorted(commits):
        intent = resolve(sha)
        if intent is None:
            continue
        if current is not None:
            if intent.source_id == current.source_id:
                continue
            if not intent.created_at < current.created_at:
                continue
        intents[intent.source_id] = intent
        overlap[intent.source_id] += commits[sha]

    ordered = sorted(
        intents.values(),
        key=lambda i: (-overlap[i.source_id], -i.created_at.timestamp(), i.source_id),
    )
    return [
        PrecedingChangeIntent(intent=i, overlap_lines=overlap[i.source_id], rank=n)
        for n, i in enumerate(ordered, start=1)
    ]


def fetch_change_context(
    pr_id: str,
    tracker: IssueTrackerClient,
    repo: VcsClient,
    *,
    issue_key_pattern: str = DEFAULT_ISSUE_KEY_PATTERN,
    max_preceding: int = MAX_PRECEDING,
    workers: int = 4,
) -> ChangeContext:
    pr = tracker.get_pr(pr_id)
    if pr.state == "draft":
        raise DetachedPr(f"PR {pr_id} is a draft")
    if not pr.head_revision or not pr.commits:
        raise DetachedPr(f"PR {pr_id} has no mergeable head")

    try:
        pre = repo.resolve_parent(pr.commits[0].sha)
    except RuntimeError as e:
        raise DetachedPr(f"PR {pr_id}: cannot resolve parent of {pr.commits[0].sha}: {e}") from e
    post = pr.head_revision
    if pre == post:
        raise DetachedPr(f"PR {pr_id}: pre and post revisions are identical ({pre})")

    resolved: list[ChangeIntent] = []
    warnings: list[str] = []
    for issue_id in pr.linked_issue_ids:
        try:
            resolved.append(tracker.get_issue(issue_id))
        except NotFound:
            msg = f"linked issue {issue_id} not found"
            logger.warning("PR %s: %s", pr_id, msg)
            warnings.append(msg)

    messages = [c.message or repo.commit_message(c.sha) for c in pr.commits]
    files = parse_unified_diff(repo.diff(pre, post, pr.files or None))
    code_change = CodeChange(commit_messages=messages, files=files)
    logger.info("PR %s: %d file(s) changed between %s and %s", pr_id, len(files), pre[:12], post[:12])

    preceding = compute_preceding_intents(
        code_change,
        repo,
        tracker,
        revision=pre,
        current=pr.intent,
        issue_key_pattern=issue_key_pattern,
        workers=workers,
        warnings=warnings,
    )
    return ChangeContext(
        pr_id=str(pr_id),
        pr_intent=pr.intent,
        resolved_issues=resolved,
        code_change=code_change,
        preceding=preceding[:max_preceding],
        pre_revision=pre,
        post_revision=post,
        warnings=warnings,
    )


def intent_cutoff(ctx: ChangeContext) -> datetime:
    """Retrieval cutoff for a PR: its creation time."""
    return ctx.pr_intent.created_at


def format_intents(intents: Sequence[ChangeIntent]) -> str:
    if not intents:
        return "(none)"
    return "\n\n".join(f"[{i.source_id}] {i.title}\n{i.description}".rstrip() for i in intents)
