"""Per-PR report bundle: `report/summary.json`, `report/summary.md` and evidence thumbnails."""

from __future__ import annotations

import json
import logging
from collections import Counter
from collections.abc import Mapping, Sequence
from datetime import datetime, timezone

UTC = timezone.utc
from decimal import ROUND_FLOOR, ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any

from PIL import Image

from .bug_filter import FilterResult
from .executor import load_trace
from .manifest import STAGES, RunManifest, RunPaths

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "ripple-difftest/report/v0.1"
NO_FINDINGS = "No unintended differences found."
CENT = Decimal("0.01")
TENTH_SECOND = Decimal("0.1")
THUMBNAIL_SIZE = (320, 240)

# overhead component -> meter roles / pipeline stages it covers
COMPONENT_ROLES = {
    "generator": ("generator", "classifier", "embedding"),
    "executor": ("executor",),
    "detector": ("detector", "filter"),
}
COMPONENT_STAGES = {
    "generator": ("ingest", "generate"),
    "executor": ("execute",),
    "detector": ("diff", "detect", "filter"),
}

FILTER_LABELS = {
    "filtered_duplicate": "duplicate",
    "filtered_rendering": "rendering / screenshot timing",
    "filtered_nondeterminism": "non-deterministic GUI behaviour",
}


def largest_remainder(values: Sequence[float | Decimal], quantum: Decimal) -> list[Decimal]:
    """Round each value to `quantum` so the parts sum to the rounded total."""
    units = [Decimal(str(v)) / quantum for v in values]
    total = sum(units, Decimal(0)).to_integral_value(rounding=ROUND_HALF_UP)
    floors = [u.to_integral_value(rounding=ROUND_FLOOR) for u in units]
    short = int(total - sum(floors, Decimal(0)))
    order = sorted(range(len(units)), key=lambda i: (-(units[i] - floors[i]), i))
    for i in order[:short]:
        floors[i] += 1
    return [f * quantum for f in floors]


def _stage_seconds(manifest: RunManifest, stage: str) -> float:
    ts = manifest.timestamps.get(stage) or {}
    if "started_at" not in ts or "finished_at" not in ts:
        return 0.0
    start = datetime.fromisoformat(ts["started_at"])
    end = datetime.fromisoformat(ts["finished_at"])
    return max(0.0, (end - start).total_seconds())


def overhead_breakdown(
    meter_snapshot: Mapping[str, Mapping[str, Any]], manifest: RunManifest | None = None
) -> dict[str, Any]:
    """Three-row cost/time split; each column sums exactly to its rounded total."""
    names = list(COMPONENT_ROLES)
    costs = [
        sum(float(meter_snapshot.get(r, {}).get("estimated_cost", 0.0)) for r in COMPONENT_ROLES[c])
        for c in names
    ]
    llm_time = [
        sum(float(meter_snapshot.get(r, {}).get("wall_time", 0.0)) for r in COMPONENT_ROLES[c])
        for c in names
    ]
    requests = [
        sum(int(meter_snapshot.get(r, {}).get("requests", 0)) for r in COMPONENT_ROLES[c])
        for c in names
    ]
    stage_time = [
        sum(_stage_seconds(manifest, s) for s in COMPONENT_STAGES[c]) if manifest else 0.0
        for c in names
    ]
    cost_rows = largest_remainder(costs, CENT)
    time_rows = largest_remainder(stage_time, TENTH_SECOND)
    rows = [
        {
            "component": c,
            "requests": requests[i],
            "cost": str(cost_rows[i]),
            "llm_seconds": round(llm_time[i], 3),
            "stage_seconds": str(time_rows[i]),
        }
        for i, c in enumerate(names)
    ]
    return {
        "rows": rows,
        "total_cost": str(sum(cost_rows, Decimal(0))),
        "total_stage_seconds": str(sum(time_rows, Decimal(0))),
        "meter_total_cost": sum(
            float(v.get("estimated_cost", 0.0)) for v in meter_snapshot.values()
        ),
    }


def _thumbnail(src: Path, dest: Path) -> str | None:
    if not src.is_file():
        return None
    dest.parent.mkdir(parents=True, exist_ok=True)
    with Image.open(src) as img:
        thumb = img.convert("RGB")
        thumb.thumbnail(THUMBNAIL_SIZE)
        thumb.save(dest, format="PNG")
    return str(dest)


def _rel(path: Path | str | None, root: Path) -> str | None:
    if path is None:
        return None
    try:
        return Path(path).relative_to(root).as_posix()
    except ValueError:
        return str(path)


def emit_report(manifest: RunManifest, run_dir: str | Path) -> dict[str, Any]:
    paths = RunPaths(Path(run_dir))
    if not manifest.is_done("filter"):
        raise ValueError("report needs the filter stage to be done")
    filtered = FilterResult.from_dict(json.loads(paths.filter_result.read_text(encoding="utf-8")))
    ctx_raw = json.loads(paths.change_context.read_text(encoding="utf-8"))
    out_dir = paths.report_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    decisions = {d.report_id: d for d in filtered.decisions}
    bugs: list[dict[str, Any]] = []
    for r in filtered.kept:
        diff_dir = paths.diff_dir(r.scenario_id)
        evidence = []
        for s, region in r.evidence:
            stem = paths.step_stem(s)
            thumb = _thumbnail(
                diff_dir / f"{stem}_post.annotated.png",
                out_dir / "thumbs" / f"{r.report_id}_{stem}.png",
            )
            evidence.append(
                {
                    "step_index": s,
                    "region_index": region,
                    "pre_image": _rel(diff_dir / f"{stem}_pre.annotated.png", paths.root),
                    "post_image": _rel(diff_dir / f"{stem}_post.annotated.png", paths.root),
                    "thumbnail": _rel(thumb, paths.root),
                }
            )
        bugs.append({**r.to_dict(), "evidence": evidence})

    filtered_rows = [
        {
            "report_id": r.report_id,
            "scenario_id": r.scenario_id,
            "title": r.title,
            "status": r.status,
            "duplicate_of": decisions[r.report_id].duplicate_of if r.report_id in decisions else None,
            "rationale": r.filter_rationale,
        }
        for r in filtered.reports
        if r.status.startswith("filtered_")
    ]

    terminations: Counter[str] = Counter()
    scenario_failures: list[dict[str, Any]] = []
    execute_dir = paths.stage_dir("execute")
    for trace_json in sorted(execute_dir.glob("*/trace.json")):
        trace = load_trace(trace_json.parent)
        terminations.update([trace.termination])
        if trace.termination == "execution_error" or trace.replay_failure_at is not None:
            scenario_failures.append(
                {
                    "scenario_id": trace.scenario_id,
                    "termination": trace.termination,
                    "replay_failure_at": trace.replay_failure_at,
                    "error": trace.error,
                }
            )

    counts = filtered.counts()
    summary = {
        "schema": REPORT_SCHEMA,
        "run_id": manifest.run_id,
        "pr_id": manifest.pr_id,
        "pr_title": ctx_raw.get("pr_intent", {}).get("title", ""),
        "created_at_utc": datetime.now(UTC).isoformat(),
        "summary": {
            "candidates": len(filtered.reports),
            "kept": counts["kept"],
            "filtered": {FILTER_LABELS[k]: counts[k] for k in FILTER_LABELS},
            "terminations": dict(sorted(terminations.items())),
            "scenario_failures": scenario_failures,
            "stage_failures": manifest.failures,
            "flags": filtered.flags,
        },
        "bugs": bugs,
        "filtered_reports": filtered_rows,
        "overhead": overhead_breakdown(manifest.meter_snapshot, manifest),
    }
    if not bugs:
        summary["summary"]["note"] = NO_FINDINGS

    (out_dir / "summary.json").write_text(
        json.dumps(summary, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    (out_dir / "summary.md").write_text(render_markdown(summary), encoding="utf-8")
    logger.info("report: %d kept bug(s) of %d candidate(s)", counts["kept"], len(filtered.reports))
    return summary


def render_markdown(summary: Mapping[str, Any]) -> str:
    s = summary["summary"]
    lines: list[str] = []
    lines.append(f"# Differential test report: PR {summary['pr_id']}\n")
    if summary.get("pr_title"):
        lines.append(f"- PR: {summary['pr_title']}")
    lines.append(f"- Run: `{summary['run_id']}`")
    lines.append(f"- Candidates: {s['candidates']}")
    lines.append(f"- Kept bugs: {s['kept']}")
    if s["terminations"]:
        lines.append(
            "- Scenario outcomes: "
            + ", ".join(f"{k} {v}" for k, v in s["terminations"].items())
        )

    lines.append("\n## Bugs")
    if not summary["bugs"]:
        lines.append(NO_FINDINGS)
    for b in summary["bugs"]:
        lines.append(f"\n### {b['report_id']}: {b['title']}")
        lines.append(f"- Scenario: {b['scenario_id']}")
        if b["description"]:
            lines.append(f"- Description: {b['description']}")
        for e in b["evidence"]:
            where = "whole step" if e["region_index"] < 0 else f"region {e['region_index']}"
            lines.append(f"- Evidence: step {e['step_index']}, {where}")
            if e.get("thumbnail"):
                # summary.md lives in report/, thumbnails are referenced relative to it
                thumb = Path(e["thumbnail"]).relative_to("report").as_posix()
                lines.append(f"  ![step {e['step_index']}]({thumb})")

    lines.append("\n## Filtered")
    for label, n in s["filtered"].items():
        lines.append(f"- {label}: {n}")

    lines.append("\n## Overhead")
    lines.append("| component | requests | cost | LLM time (s) | stage time (s) |")
    lines.append("|---|---:|---:|---:|---:|")
    o = summary["overhead"]
    for row in o["rows"]:
        lines.append(
            f"| {row['component']} | {row['requests']} | {row['cost']} | "
            f"{row['llm_seconds']} | {row['stage_seconds']} |"
        )
    lines.append(f"| **total** |  | {o['total_cost']} |  | {o['total_stage_seconds']} |")

    if s["scenario_failures"] or s["stage_failures"]:
        lines.append("\n## Failures")
        for f in s["scenario_failures"]:
            lines.append(f"- {f['scenario_id']}: {f['termination']} {f.get('error') or ''}".rstrip())
        for stage in STAGES:
            if stage in s["stage_failures"]:
                f = s["stage_failures"][stage]
                lines.append(f"- stage {stage}: {f.get('error_code')} {f.get('error')}")
    return "\n".join(lines) + "\n"
