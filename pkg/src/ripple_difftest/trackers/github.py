from __future__ import annotations

import logging
import re
from collections.abc import Iterator
from typing import Any

from ..protocol import ChangeIntent, CommitRef, HistoricalReport, PrRecord
from .http import HttpTrackerBase

logger = logging.getLogger(__name__)

_CLOSING_RE = re.compile(r"\b(?:close[sd]?|fix(?:e[sd])?|resolve[sd]?)\s*:?\s+#(\d+)", re.IGNORECASE)
_PER_PAGE = 100


def linked_issue_ids(body: str) -> list[str]:
    seen: list[str] = []
    for m in _CLOSING_RE.finditer(body or ""):
        if m.group(1) not in seen:
            seen.append(m.group(1))
    return seen


class GithubTracker(HttpTrackerBase):
    """GitHub REST v3. `tracker.project` is `owner/repo`."""

    name = "github"
    default_base_url = "https://api.github.com"

    def extra_headers(self) -> dict[str, str]:
        return {"Accept": "application/vnd.github+json", "X-GitHub-Api-Version": "2022-11-28"}

    @property
    def repo_path(self) -> str:
        if not self.settings.project:
            raise ValueError("github tracker needs tracker.project (owner/repo)")
        return f"repos/{self.settings.project}"

    def _pages(self, path: str, params: dict[str, Any] | None = None) -> Iterator[dict[str, Any]]:
        page = 1
        while True:
            rows = self.get_json(path, {**(params or {}), "per_page": _PER_PAGE, "page": page})
            if not rows:
                return
            yield from rows
            if len(rows) < _PER_PAGE:
                return
            page += 1

    def get_pr(self, pr_id: str) -> PrRecord:
        raw = self.get_json(f"{self.repo_path}/pulls/{pr_id}")
        commits = [
            CommitRef(sha=c["sha"], message=(c.get("commit") or {}).get("message") or "")
            for c in self._pages(f"{self.repo_path}/pulls/{pr_id}/commits")
        ]
        files = [f["filename"] for f in self._pages(f"{self.repo_path}/pulls/{pr_id}/files")]

        if raw.get("draft"):
            state = "draft"
        elif raw.get("merged_at"):
            state = "merged"
        else:
            state = str(raw.get("state") or "open")

        return PrRecord(
            intent=ChangeIntent(
                source_id=f"pr/{raw['number']}",
                title=raw.get("title") or "",
                description=raw.get("body") or "",
                created_at=raw["created_at"],
            ),
            head_revision=(raw.get("head") or {}).get("sha"),
            commits=commits,
            linked_issue_ids=linked_issue_ids(raw.get("body") or ""),
            files=files,
            state=state,
        )

    def get_issue(self, issue_id: str) -> ChangeIntent:
        raw = self.get_json(f"{self.repo_path}/issues/{issue_id}")
        kind = "pr" if "pull_request" in raw else "issue"
        return ChangeIntent(
            source_id=f"{kind}/{raw['number']}",
            title=raw.get("title") or "",
            description=raw.get("body") or "",
            created_at=raw["created_at"],
        )

    def list_cross_references(self, commit_sha: str) -> list[str]:
        rows = self.get_json(f"{self.repo_path}/commits/{commit_sha}/pulls")
        return [str(r["number"]) for r in rows or []]

    def iter_reports(self) -> Iterator[HistoricalReport]:
        for raw in self._pages(f"{self.repo_path}/issues", {"state": "all", "direction": "asc"}):
            kind = "pr" if "pull_request" in raw else "issue"
            yield HistoricalReport(
                source_id=f"{kind}/{raw['number']}",
                title=raw.get("title") or "",
                body=raw.get("body") or "",
                created_at=raw["created_at"],
            )
