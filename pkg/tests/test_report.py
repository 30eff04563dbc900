from __future__ import annotations

import json
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from conftest import paired_trace, sample_context
from ripple_difftest.bug_filter import FilterResult
from ripple_difftest.executor import ExecutionTrace, save_trace
from ripple_difftest.manifest import STAGES, RunManifest, RunPaths
from ripple_difftest.oracle import BugReport
from ripple_difftest.report import (
    CENT,
    NO_FINDINGS,
    emit_report,
    largest_remainder,
    overhead_breakdown,
    render_markdown,
)


def test_largest_remainder_breaks_ties_by_position() -> None:
    parts = largest_remainder([0.004, 0.004, 0.004], CENT)
    assert parts == [Decimal("0.01"), Decimal("0"), Decimal("0")]


@given(st.lists(st.decimals(min_value=0, max_value=1000, places=4), min_size=1, max_size=6))
def test_largest_remainder_parts_sum_to_rounded_total(values: list[Decimal]) -> None:
    parts = largest_remainder(values, CENT)
    total = (sum(values, Decimal(0)) / CENT).to_integral_value(rounding=ROUND_HALF_UP) * CENT
    assert sum(parts, Decimal(0)) == total
    assert all(abs(p - v) < CENT for p, v in zip(parts, values, strict=True))


def test_overhead_rows_sum_to_the_total() -> None:
    snapshot = {
        "generator": {"estimated_cost": 0.004, "requests": 3, "wall_time": 1.0},
        "classifier": {"estimated_cost": 0.004, "requests": 6},
        "embedding": {"estimated_cost": 0.004, "requests": 2},
        "executor": {"estimated_cost": 0.5, "requests": 4},
        "detector": {"estimated_cost": 0.25, "requests": 5},
        "filter": {"estimated_cost": 0.001, "requests": 1},
    }
    o = overhead_breakdown(snapshot)
    assert [(r["component"], r["cost"], r["requests"]) for r in o["rows"]] == [
        ("generator", "0.01", 11),
        ("executor", "0.50", 4),
        ("detector", "0.25", 6),
    ]
    assert o["total_cost"] == "0.76"
    assert o["meter_total_cost"] == pytest.approx(0.763)


def _report(rid: str) -> BugReport:
    return BugReport(rid, "7", rid.split("-")[0], f"Bug {rid}", "Save moved", [(0, 0)])


def _run_dir(tmp_path: Path, kept: list[str], duplicates: list[str]) -> tuple[RunManifest, Path]:
    paths = RunPaths(tmp_path / "run")
    manifest = RunManifest(run_id="run-1", pr_id="7")
    for stage in STAGES[:-1]:
        manifest.mark_started(stage)
        manifest.mark_done(stage, str(paths.stage_dir(stage)))

    paths.change_context.parent.mkdir(parents=True)
    paths.change_context.write_text(json.dumps(sample_context().to_dict()), encoding="utf-8")

    reports = [_report(r) for r in kept + duplicates]
    for r in reports:
        if r.report_id in kept:
            r.transition("kept")
        else:
            r.transition("filtered_duplicate", rationale=f"same as {kept[0]}")
    paths.filter_result.parent.mkdir(parents=True)
    paths.filter_result.write_text(json.dumps(FilterResult(reports).to_dict()), encoding="utf-8")

    save_trace(paired_trace(1, "S01"), paths.trace_dir("S01"))
    broken = ExecutionTrace("S02", [], "execution_error", 3, {}, error="reply still invalid")
    save_trace(broken, paths.trace_dir("S02"))
    return manifest, paths.root


def test_report_with_kept_and_duplicate_bugs(tmp_path: Path) -> None:
    manifest, run = _run_dir(tmp_path, ["S01-r1", "S02-r1", "S03-r1"], ["S04-r1", "S05-r1"])
    diff = RunPaths(run).diff_dir("S01")
    diff.mkdir(parents=True)
    Image.new("RGB", (640, 480), (255, 0, 255)).save(diff / "step_0_post.annotated.png")

    summary = emit_report(manifest, run)
    s = summary["summary"]
    assert s["candidates"] == 5
    assert s["kept"] == 3
    assert s["filtered"]["duplicate"] == 2
    assert s["terminations"] == {"completed": 1, "execution_error": 1}
    assert [f["scenario_id"] for f in s["scenario_failures"]] == ["S02"]
    assert "note" not in s
    assert [b["report_id"] for b in summary["bugs"]] == ["S01-r1", "S02-r1", "S03-r1"]

    evidence = summary["bugs"][0]["evidence"][0]
    assert evidence["thumbnail"] == "report/thumbs/S01-r1_step_0.png"
    with Image.open(run / evidence["thumbnail"]) as thumb:
        assert thumb.size == (320, 240)
    assert summary["bugs"][1]["evidence"][0]["thumbnail"] is None

    assert [r["duplicate_of"] for r in summary["filtered_reports"]] == [None, None]
    md = (run / "report" / "summary.md").read_text(encoding="utf-8")
    assert "### S01-r1: Bug S01-r1" in md
    assert "![step 0](thumbs/S01-r1_step_0.png)" in md
    assert "- duplicate: 2" in md
    on_disk = json.loads((run / "report" / "summary.json").read_text(encoding="utf-8"))
    assert on_disk["bugs"] == summary["bugs"]


def test_report_without_findings_says_so(tmp_path: Path) -> None:
    manifest, run = _run_dir(tmp_path, [], [])
    summary = emit_report(manifest, run)
    assert summary["summary"]["kept"] == 0
    assert summary["summary"]["note"] == NO_FINDINGS
    assert NO_FINDINGS in render_markdown(summary)


def test_report_needs_filter_results(tmp_path: Path) -> None:
    with pytest.raises(ValueError):
        emit_report(RunManifest(run_id="r", pr_id="7"), tmp_path)
