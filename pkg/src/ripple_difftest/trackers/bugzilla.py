from __future__ import annotations

import logging
import re
from collections.abc import Iterator
from typing import Any

from ..errors import NotFound
from ..protocol import ChangeIntent, CommitRef, HistoricalReport, PrRecord
from .http import HttpTrackerBase

logger = logging.getLogger(__name__)

# Landing comments link pushed revisions as ".../rev/<sha>".
_REV_RE = re.compile(r"/rev/([0-9a-f]{12,40})\b")
_PAGE = 200


class BugzillaTracker(HttpTrackerBase):
    """Bugzilla REST API. A fixed bug plays the role of a PR; its commits come from landing comments.

    `tracker.project` restricts report crawling to one product.
    """

    name = "bugzilla"

    def _bug(self, bug_id: str) -> dict[str, Any]:
        raw = self.get_json(f"rest/bug/{bug_id}")
        bugs = raw.get("bugs") or []
        if not bugs:
            raise NotFound(f"bugzilla: bug {bug_id} not found")
        return bugs[0]

    def _comments(self, bug_id: str | int) -> list[dict[str, Any]]:
        raw = self.get_json(f"rest/bug/{bug_id}/comment")
        return ((raw.get("bugs") or {}).get(str(bug_id)) or {}).get("comments") or []

    def _intent(self, bug: dict[str, Any], comments: list[dict[str, Any]]) -> ChangeIntent:
        return ChangeIntent(
            source_id=f"bug/{bug['id']}",
            title=bug.get("summary") or "",
            description=comments[0].get("text", "") if comments else "",
            created_at=bug["creation_time"],
        )

    def get_pr(self, pr_id: str) -> PrRecord:
        bug = self._bug(pr_id)
        comments = self._comments(pr_id)
        revisions: list[str] = []
        for c in comments:
            for sha in _REV_RE.findall(c.get("text", "")):
                if sha not in revisions:
                    revisions.append(sha)

        fixed = bug.get("resolution") == "FIXED"
        return PrRecord(
            intent=self._intent(bug, comments),
            head_revision=revisions[-1] if revisions else None,
            commits=[CommitRef(sha=s) for s in revisions],
            linked_issue_ids=[str(x) for x in bug.get("depends_on") or []],
            state="merged" if fixed else str(bug.get("status") or "open").lower(),
        )

    def get_issue(self, issue_id: str) -> ChangeIntent:
        return self._intent(self._bug(issue_id), self._comments(issue_id))

    def list_cross_references(self, commit_sha: str) -> list[str]:
        raw = self.get_json(
            "rest/bug",
            {
                "longdesc": commit_sha[:12],
                "longdesc_type": "substring",
                "include_fields": "id",
            },
        )
        return [str(b["id"]) for b in raw.get("bugs") or []]

    def iter_reports(self) -> Iterator[HistoricalReport]:
        offset = 0
        while True:
            params: dict[str, Any] = {
                "include_fields": "id,summary,creation_time",
                "limit": _PAGE,
                "offset": offset,
                "order": "bug_id",
            }
            if self.settings.project:
                params["product"] = self.settings.project
            bugs = self.get_json("rest/bug", params).get("bugs") or []
            for bug in bugs:
                comments = self._comments(bug["id"])
                yield HistoricalReport(
                    source_id=f"bug/{bug['id']}",
                    title=bug.get("summary") or "",
                    body=comments[0].get("text", "") if comments else "",
                    created_at=bug["creation_time"],
                )
            if len(bugs) < _PAGE:
                return
            offset += _PAGE
