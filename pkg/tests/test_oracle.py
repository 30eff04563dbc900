from __future__ import annotations

from pathlib import Path

import pytest

from conftest import gateway, paired_trace, parsed_step, sample_context
from ripple_difftest.oracle import (
    SOURCE_FORMAT_ERROR,
    SOURCE_LLM,
    SOURCE_REGION_CAP,
    SOURCE_UNREVIEWED,
    WHOLE_STEP,
    BugReport,
    DetectionResult,
    detect_bugs,
    validate_evidence,
)
from ripple_difftest.scenario_pipeline import ImpactAnalysis

ANALYSIS = ImpactAnalysis("Saved notes move to a profile folder")


def _pairs(n: int) -> list[tuple[bytes, bytes]]:
    return [(f"pre{i}".encode(), f"post{i}".encode()) for i in range(n)]


def _verdict(region: int, classification: str = "bug", **extra) -> dict:
    return {"region_index": region, "classification": classification, **extra}


def _detect(tmp_path: Path, parsed, records, **kw):
    llm = gateway(tmp_path, detector=records)
    trace = paired_trace(len(parsed))
    result = detect_bugs(trace, parsed, _pairs(len(parsed)), sample_context(), ANALYSIS, llm, **kw)
    return result, llm


def _requests(llm) -> list[dict]:
    return llm.provider_for(llm.models.resolve("detector")).requests


def test_identical_screens_never_reach_the_detector(tmp_path: Path) -> None:
    llm = gateway(tmp_path)  # no detector configured
    trace = paired_trace(2)
    parsed = [parsed_step(0), parsed_step(1)]
    result = detect_bugs(trace, parsed, _pairs(2), sample_context(), ANALYSIS, llm)
    assert result.verdicts == [] and result.candidates == []


def test_every_region_gets_exactly_one_verdict(tmp_path: Path) -> None:
    reply = {
        "holistic_summary": "Save moved right",
        "verdicts": [
            _verdict(0, report_key="moved", title="Save button moved"),
            _verdict(0, "expected"),
            _verdict(1, "expected"),
            _verdict(7),
        ],
    }
    result, _ = _detect(tmp_path, [parsed_step(0, 50, 20, 5)], [{"reply": reply}])
    got = {(v.step_index, v.region_index): (v.classification, v.source) for v in result.verdicts}
    assert got == {
        (0, 0): ("bug", SOURCE_LLM),
        (0, 1): ("expected", SOURCE_LLM),
        (0, 2): ("expected", SOURCE_UNREVIEWED),
    }
    assert len(result.verdicts) == 3
    assert result.holistic_summaries == {0: "Save moved right"}
    assert {"step_index": 0, "flag": "unreviewed_regions", "regions": [2]} in result.flags
    (report,) = result.candidates
    assert report.report_id == "S01-r1"
    assert report.title == "Save button moved"
    assert report.evidence == [(0, 0)]


def test_findings_group_by_report_key_across_steps(tmp_path: Path) -> None:
    records = [
        {"match": "## Step 0", "reply": {"verdicts": [_verdict(0, report_key="moved")]}},
        {
            "match": "## Step 1",
            "reply": {
                "verdicts": [
                    _verdict(0, report_key="moved"),
                    _verdict(1, description="Status text clipped"),
                    _verdict(WHOLE_STEP, report_key="moved"),
                ]
            },
        },
    ]
    result, llm = _detect(tmp_path, [parsed_step(0, 10), parsed_step(1, 10, 10)], records)
    r1, r2 = result.candidates
    assert r1.evidence == [(0, 0), (1, WHOLE_STEP), (1, 0)]
    assert r2.evidence == [(1, 1)]
    assert r2.title == "Status text clipped"
    assert len({r["session_id"] for r in _requests(llm)}) == 1


def test_region_cap_keeps_the_largest_regions(tmp_path: Path) -> None:
    reply = {"verdicts": [_verdict(1, "expected"), _verdict(3, "expected")]}
    result, llm = _detect(
        tmp_path, [parsed_step(0, 5, 90, 1, 70, 2)], [{"reply": reply}], max_prompt_regions=2
    )
    sources = {v.region_index: v.source for v in result.verdicts}
    assert sources == {
        0: SOURCE_REGION_CAP,
        1: SOURCE_LLM,
        2: SOURCE_REGION_CAP,
        3: SOURCE_LLM,
        4: SOURCE_REGION_CAP,
    }
    assert {"step_index": 0, "flag": "region_cap", "regions": [0, 2, 4]} in result.flags
    assert "showing 2 of 5 regions" in _requests(llm)[0]["text"]


def test_unparseable_detector_replies_default_to_expected(tmp_path: Path) -> None:
    records = [{"reply": "looks fine to me"}, {"reply": "really fine"}]
    result, _ = _detect(tmp_path, [parsed_step(0, 10, 10)], records)
    assert [v.source for v in result.verdicts] == [SOURCE_FORMAT_ERROR] * 2
    assert all(v.classification == "expected" for v in result.verdicts)
    assert result.flags[0]["flag"] == "llm_format_error"
    assert result.candidates == []


def test_parsed_records_must_match_paired_steps(tmp_path: Path) -> None:
    llm = gateway(tmp_path)
    with pytest.raises(ValueError):
        detect_bugs(paired_trace(2), [parsed_step(0)], _pairs(1), sample_context(), ANALYSIS, llm)


def test_validate_evidence() -> None:
    parsed = [parsed_step(0, 3, 3), parsed_step(2, 1)]
    report = BugReport("S01-r1", "7", "S01", "t", "d", [(0, 1), (2, WHOLE_STEP), (2, 4), (5, 0)])
    assert validate_evidence(report, parsed) == ["(2, 4)", "(5, 0)"]


def test_report_status_moves_once() -> None:
    report = BugReport("S01-r1", "7", "S01", "t", "d", [(0, 0)])
    report.transition("kept")
    with pytest.raises(ValueError):
        report.transition("filtered_duplicate")
    with pytest.raises(ValueError):
        BugReport("S01-r2", "7", "S01", "t", "d", [])


def test_detection_result_round_trip(tmp_path: Path) -> None:
    result, _ = _detect(tmp_path, [parsed_step(0, 10)], [{"reply": {"verdicts": [_verdict(0)]}}])
    again = DetectionResult.from_dict(result.to_dict())
    assert again.to_dict() == result.to_dict()
