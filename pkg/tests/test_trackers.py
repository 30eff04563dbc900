from __future__ import annotations

from pathlib import Path
from typing import Any

import pytest
import requests

from ripple_difftest.config import TrackerSettings
from ripple_difftest.errors import NetworkError, NotFound
from ripple_difftest.trackers import available_trackers
from ripple_difftest.trackers.bugzilla import BugzillaTracker
from ripple_difftest.trackers.github import GithubTracker, linked_issue_ids
from ripple_difftest.trackers.mock import MockTracker


class _Resp:
    def __init__(self, status: int, payload: Any = None) -> None:
        self.status_code = status
        self._payload = payload
        self.text = str(payload)

    def json(self) -> Any:
        return self._payload


class _Session:
    """requests.Session stand-in: url -> queue of responses (or exceptions)."""

    def __init__(self, routes: dict[str, list[Any]]) -> None:
        self.routes = routes
        self.calls: list[tuple[str, dict | None, dict]] = []

    def get(self, url, headers=None, params=None, timeout=None):
        self.calls.append((url, params, headers))
        queue = self.routes[url]
        item = queue.pop(0) if len(queue) > 1 else queue[0]
        if isinstance(item, Exception):
            raise item
        return item


def _settings(**kw: Any) -> TrackerSettings:
    return TrackerSettings(**{"max_attempts": 3, "backoff_sec": 0.5, **kw})


def test_registry_lists_all_kinds() -> None:
    assert set(available_trackers()) == {"github", "bugzilla", "mock"}


def test_get_json_retries_server_errors_with_backoff() -> None:
    url = "https://api.example.test/repos/o/r/pulls/1/commits"
    session = _Session({url: [_Resp(502), requests.ConnectionError("reset"), _Resp(200, [])]})
    delays: list[float] = []
    t = GithubTracker(
        _settings(base_url="https://api.example.test", project="o/r"),
        session=session,
        sleep=delays.append,
    )
    assert t.get_json("repos/o/r/pulls/1/commits") == []
    assert delays == [0.5, 1.0]


def test_get_json_gives_up_after_max_attempts() -> None:
    url = "https://api.example.test/x"
    session = _Session({url: [_Resp(503)]})
    t = GithubTracker(_settings(base_url="https://api.example.test"), session=session, sleep=lambda _s: None)
    with pytest.raises(NetworkError) as exc:
        t.get_json("x")
    assert exc.value.attempts == 3
    assert len(session.calls) == 3


def test_get_json_maps_404_and_does_not_retry_client_errors() -> None:
    base = "https://api.example.test"
    session = _Session({f"{base}/missing": [_Resp(404)], f"{base}/denied": [_Resp(403, "no")]})
    t = GithubTracker(_settings(base_url=base), session=session, sleep=lambda _s: None)
    with pytest.raises(NotFound):
        t.get_json("missing")
    with pytest.raises(RuntimeError, match="command failed"):
        t.get_json("denied")
    assert len(session.calls) == 2


def test_token_is_read_from_named_env_var(monkeypatch) -> None:
    monkeypatch.setenv("RIPPLE_TEST_TOKEN", "s3cret")
    t = GithubTracker(_settings(token_env_var="RIPPLE_TEST_TOKEN"), session=_Session({}))
    assert t.headers["Authorization"] == "Bearer s3cret"
    assert t.base_url == "https://api.github.com"


def test_github_pr_record_and_linked_issues() -> None:
    base = "https://api.github.com/repos/o/r"
    pr = {
        "number": 12,
        "title": "Fix toolbar",
        "body": "Fixes #3 and closes #8. Also fixes #3.",
        "created_at": "2024-05-01T10:00:00Z",
        "head": {"sha": "f" * 40},
        "state": "closed",
        "merged_at": "2024-05-02T10:00:00Z",
    }
    session = _Session(
        {
            f"{base}/pulls/12": [_Resp(200, pr)],
            f"{base}/pulls/12/commits": [
                _Resp(200, [{"sha": "a" * 40, "commit": {"message": "first"}}]),
                _Resp(200, []),
            ],
            f"{base}/pulls/12/files": [_Resp(200, [{"filename": "ui/toolbar.py"}])],
        }
    )
    t = GithubTracker(_settings(project="o/r"), session=session)
    rec = t.get_pr("12")
    assert rec.intent.source_id == "pr/12"
    assert rec.state == "merged"
    assert rec.linked_issue_ids == ["3", "8"]
    assert [c.message for c in rec.commits] == ["first"]
    assert rec.files == ["ui/toolbar.py"]
    assert linked_issue_ids("resolves: #5") == ["5"]


def test_bugzilla_bug_plays_the_pr_role() -> None:
    base = "https://bugzilla.example.test"
    bug = {
        "id": 77,
        "summary": "Dialog title clipped",
        "creation_time": "2024-04-01T00:00:00Z",
        "resolution": "FIXED",
        "depends_on": [70],
    }
    comments = {
        "bugs": {
            "77": {
                "comments": [
                    {"text": "The dialog title is clipped."},
                    {"text": "Landed: https://hg.example.test/rev/0123456789ab"},
                    {"text": "Follow-up: https://hg.example.test/rev/ba9876543210"},
                ]
            }
        }
    }
    session = _Session(
        {
            f"{base}/rest/bug/77": [_Resp(200, {"bugs": [bug]})],
            f"{base}/rest/bug/77/comment": [_Resp(200, comments)],
        }
    )
    rec = BugzillaTracker(_settings(base_url=base), session=session).get_pr("77")
    assert rec.intent.source_id == "bug/77"
    assert rec.intent.description == "The dialog title is clipped."
    assert rec.head_revision == "ba9876543210"
    assert [c.sha for c in rec.commits] == ["0123456789ab", "ba9876543210"]
    assert rec.linked_issue_ids == ["70"]
    assert rec.state == "merged"


def test_mock_tracker_reads_fixture_records(fixture_repo) -> None:
    t = MockTracker(_settings(fixtures_dir=str(fixture_repo.tracker_dir)))
    pr = t.get_pr("7")
    assert pr.head_revision == fixture_repo.shas["c7"]
    assert pr.state == "open"
    assert t.get_issue("6").source_id == "issue/6"
    assert t.list_cross_references(fixture_repo.shas["c5"]) == ["5"]
    assert t.list_cross_references("0" * 40) == []
    with pytest.raises(NotFound):
        t.get_pr("404")
    ids = [r.source_id for r in t.iter_reports()]
    assert ids == ["issue/1", "issue/4", "issue/6", "pr/2", "pr/5", "pr/7"]


def test_mock_tracker_requires_directory(tmp_path: Path) -> None:
    with pytest.raises(ValueError):
        MockTracker(_settings())
    with pytest.raises(NotFound):
        MockTracker(root=tmp_path / "nowhere")
