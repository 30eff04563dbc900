"""Tracker backed by a directory of JSON fixture records.

Layout::

    prs/<id>.json      {"number", "title", "body", "created_at", "head",
                        "commits": [{"sha", "message"}], "linked_issues", "files", "state"}
    issues/<id>.json   {"number", "title", "body", "created_at"}
    xrefs.json         {"<commit sha>": ["<pr id>", ...]}
"""

from __future__ import annotations

import json
from collections.abc import Iterator
from pathlib import Path
from typing import Any

from ..config import TrackerSettings
from ..errors import NotFound
from ..protocol import ChangeIntent, CommitRef, HistoricalReport, PrRecord


def _numeric_key(path: Path) -> tuple[int, str]:
    stem = path.stem
    return (int(stem), stem) if stem.isdigit() else (1 << 62, stem)


class MockTracker:
    name = "mock"

    def __init__(self, settings: TrackerSettings | None = None, *, root: str | Path | None = None) -> None:
        base = root or (settings.fixtures_dir if settings else None)
        if not base:
            raise ValueError("mock tracker needs tracker.fixtures_dir")
        self.root = Path(base)
        if not self.root.is_dir():
            raise NotFound(f"mock tracker directory missing: {self.root}")

    def _load(self, kind: str, record_id: str) -> dict[str, Any]:
        p = self.root / kind / f"{record_id}.json"
        if not p.is_file():
            raise NotFound(f"mock tracker: {kind[:-1]} {record_id} not found")
        return json.loads(p.read_text(encoding="utf-8"))

    @staticmethod
    def _intent(kind: str, raw: dict[str, Any]) -> ChangeIntent:
        return ChangeIntent(
            source_id=f"{kind}/{raw['number']}",
            title=raw.get("title") or "",
            description=raw.get("body") or "",
            created_at=raw["created_at"],
        )

    def get_pr(self, pr_id: str) -> PrRecord:
        raw = self._load("prs", str(pr_id))
        return PrRecord(
            intent=self._intent("pr", raw),
            head_revision=raw.get("head"),
            commits=[CommitRef(sha=c["sha"], message=c.get("message", "")) for c in raw.get("commits", [])],
            linked_issue_ids=[str(i) for i in raw.get("linked_issues", [])],
            files=[str(f) for f in raw.get("files", [])],
            state=str(raw.get("state") or "merged"),
        )

    def get_issue(self, issue_id: str) -> ChangeIntent:
        return self._intent("issue", self._load("issues", str(issue_id)))

    def list_cross_references(self, commit_sha: str) -> list[str]:
        p = self.root / "xrefs.json"
        if not p.is_file():
            return []
        xrefs = json.loads(p.read_text(encoding="utf-8"))
        return [str(x) for x in xrefs.get(commit_sha, [])]

    def iter_reports(self) -> Iterator[HistoricalReport]:
        for kind, folder in (("issue", "issues"), ("pr", "prs")):
            for p in sorted((self.root / folder).glob("*.json"), key=_numeric_key):
                raw = json.loads(p.read_text(encoding="utf-8"))
                yield HistoricalReport(
                    source_id=f"{kind}/{raw['number']}",
                    title=raw.get("title") or "",
                    body=raw.get("body") or "",
                    created_at=raw["created_at"],
                )
