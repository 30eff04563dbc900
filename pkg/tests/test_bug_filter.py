from __future__ import annotations

from pathlib import Path

import pytest

from conftest import gateway
from ripple_difftest.bug_filter import FilterResult, filter_reports, natural_key
from ripple_difftest.oracle import BugReport


def _reports(*ids: str) -> list[BugReport]:
    return [BugReport(rid, "7", rid.split("-")[0], f"title {rid}", "", [(0, 0)]) for rid in ids]


def _decide(rid: str, outcome: str, target: str | None = None) -> dict:
    d = {"report_id": rid, "outcome": outcome, "rationale": f"{rid} {outcome}"}
    if target is not None:
        d["duplicate_of"] = target
    return d


def _filter(tmp_path: Path, reports, decisions, **kw) -> FilterResult:
    llm = gateway(tmp_path, filter=[{"reply": {"decisions": decisions}}])
    return filter_reports(reports, llm, **kw)


def test_duplicates_collapse_onto_the_lowest_id(tmp_path: Path) -> None:
    reports = _reports("S01-r1", "S01-r2", "S02-r1", "S02-r2", "S03-r1", "S10-r1")
    result = _filter(
        tmp_path,
        reports,
        [
            _decide("S03-r1", "duplicate_of", "S02-r1"),
            _decide("S02-r1", "duplicate_of", "S01-r1"),
            _decide("S01-r1", "keep"),
            _decide("S01-r2", "rendering_artifact"),
            _decide("S02-r2", "nondeterministic"),
            _decide("S10-r1", "keep"),
        ],
    )
    status = {r.report_id: r.status for r in result.reports}
    assert status == {
        "S01-r1": "kept",
        "S01-r2": "filtered_rendering",
        "S02-r1": "filtered_duplicate",
        "S02-r2": "filtered_nondeterminism",
        "S03-r1": "filtered_duplicate",
        "S10-r1": "kept",
    }
    assert result.counts() == {
        "kept": 2,
        "filtered_duplicate": 2,
        "filtered_rendering": 1,
        "filtered_nondeterminism": 1,
    }
    dup = {d.report_id: d.duplicate_of for d in result.decisions if d.outcome == "duplicate_of"}
    assert dup == {"S02-r1": "S01-r1", "S03-r1": "S01-r1"}
    assert [r.report_id for r in result.reports] == [r.report_id for r in reports]
    assert result.flags == []


def test_group_representative_is_always_kept(tmp_path: Path) -> None:
    result = _filter(
        tmp_path,
        _reports("S01-r1", "S02-r1"),
        [_decide("S01-r1", "rendering_artifact"), _decide("S02-r1", "duplicate_of", "S01-r1")],
    )
    s01, s02 = result.reports
    assert s01.status == "kept"
    assert "representative_forced_keep" in s01.flags
    assert s02.status == "filtered_duplicate"


def test_bad_duplicate_targets_keep_the_report(tmp_path: Path) -> None:
    result = _filter(
        tmp_path,
        _reports("S01-r1", "S02-r1"),
        [_decide("S01-r1", "duplicate_of", "S09-r1"), _decide("S02-r1", "duplicate_of", "S02-r1")],
    )
    assert [r.status for r in result.reports] == ["kept", "kept"]
    flagged = [f["report_id"] for f in result.flags if f["flag"] == "bad_duplicate_target"]
    assert flagged == ["S01-r1", "S02-r1"]


def test_undecided_reports_are_kept_and_flagged(tmp_path: Path) -> None:
    reports = _reports("S01-r1", "S02-r1")
    result = _filter(tmp_path, reports, [_decide("S01-r1", "nondeterministic")])
    s01, s02 = result.reports
    assert s01.status == "filtered_nondeterminism"
    assert s02.status == "kept"
    assert s02.flags == ["undecided_kept"]
    assert {"flag": "undecided", "report_id": "S02-r1"} in result.flags


def test_unusable_reply_keeps_everything(tmp_path: Path) -> None:
    llm = gateway(tmp_path, filter=[{"reply": "no idea"}, {"reply": {"decisions": "all"}}])
    result = filter_reports(_reports("S01-r1", "S02-r1"), llm)
    assert [r.status for r in result.reports] == ["kept", "kept"]
    assert [f["flag"] for f in result.flags] == ["filter_format_error"]


def test_natural_ordering_picks_the_representative(tmp_path: Path) -> None:
    assert natural_key("S02-r9") < natural_key("S02-r10")
    result = _filter(
        tmp_path,
        _reports("S02-r10", "S02-r9"),
        [_decide("S02-r9", "duplicate_of", "S02-r10"), _decide("S02-r10", "keep")],
    )
    status = {r.report_id: r.status for r in result.reports}
    assert status == {"S02-r9": "kept", "S02-r10": "filtered_duplicate"}


def test_evidence_images_are_attached_and_indexed(tmp_path: Path) -> None:
    llm = gateway(tmp_path, filter=[{"reply": {"decisions": [_decide("S01-r1", "keep")]}}])
    images = {"S01-r1": [("step 0 pre", b"a"), ("step 0 post", b"b")]}
    filter_reports(_reports("S01-r1"), llm, evidence_images=images)
    (request,) = llm.provider_for(llm.models.resolve("filter")).requests
    assert len(request["images"]) == 2
    assert "image 2: S01-r1 step 0 post" in request["text"]


def test_only_candidates_are_filtered(tmp_path: Path) -> None:
    done = _reports("S01-r1")
    done[0].transition("kept")
    result = filter_reports(done, gateway(tmp_path))
    assert result.decisions == []
    with pytest.raises(ValueError):
        filter_reports(_reports("S01-r1", "S01-r1"), gateway(tmp_path))


def test_filter_result_round_trip(tmp_path: Path) -> None:
    result = _filter(tmp_path, _reports("S01-r1"), [_decide("S01-r1", "keep")])
    again = FilterResult.from_dict(result.to_dict())
    assert again.to_dict() == result.to_dict()
