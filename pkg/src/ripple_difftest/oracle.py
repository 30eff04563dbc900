"""Differential bug detection over one execution trace.

For every step whose screenshots differ, the detector is shown both annotated
screenshots, the instruction that produced them, and the region list, and must
classify each region as `expected` (covered by the change intent) or `bug`.
Bug verdicts sharing a `report_key` within a trace become one candidate report.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

from .change_context import ChangeContext, format_intents
from .diff_engine import ParsedInfo
from .errors import LlmFormatError
from .executor import ExecutionTrace
from .llm_gateway import LlmGateway, SessionHandle
from .prompts import render_prompt
from .scenario_pipeline import ImpactAnalysis
from .validation import validate_detection_payload

logger = logging.getLogger(__name__)

MAX_PROMPT_REGIONS = 40
WHOLE_STEP = -1

REPORT_STATUSES = (
    "candidate",
    "kept",
    "filtered_duplicate",
    "filtered_rendering",
    "filtered_nondeterminism",
)

# verdict sources other than the detector itself
SOURCE_LLM = "llm"
SOURCE_UNREVIEWED = "unreviewed"
SOURCE_REGION_CAP = "region_cap"
SOURCE_FORMAT_ERROR = "format_error"


@dataclass(frozen=True)
class DifferenceVerdict:
    step_index: int
    region_index: int
    classification: str
    description: str = ""
    reasoning: str = ""
    source: str = SOURCE_LLM

    def to_dict(self) -> dict[str, Any]:
        return {
            "step_index": self.step_index,
            "region_index": self.region_index,
            "classification": self.classification,
            "description": self.description,
            "reasoning": self.reasoning,
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> DifferenceVerdict:
        return cls(
            step_index=int(raw["step_index"]),
            region_index=int(raw["region_index"]),
            classification=str(raw["classification"]),
            description=str(raw.get("description") or ""),
            reasoning=str(raw.get("reasoning") or ""),
            source=str(raw.get("source") or SOURCE_LLM),
        )


@dataclass
class BugReport:
    report_id: str
    pr_id: str
    scenario_id: str
    title: str
    description: str
    evidence: list[tuple[int, int]]
    status: str = "candidate"
    reasoning: str = ""
    filter_rationale: str | None = None
    flags: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.evidence:
            raise ValueError(f"report {self.report_id}: evidence must be non-empty")
        if self.status not in REPORT_STATUSES:
            raise ValueError(f"report {self.report_id}: unknown status {self.status!r}")

    def transition(self, status: str, *, rationale: str | None = None) -> None:
        if self.status != "candidate":
            raise ValueError(f"report {self.report_id} already {self.status}")
        if status not in REPORT_STATUSES or status == "candidate":
            raise ValueError(f"report {self.report_id}: cannot move to {status!r}")
        self.status = status
        self.filter_rationale = rationale

    @property
    def steps(self) -> list[int]:
        return sorted({s for s, _ in self.evidence})

    def to_dict(self) -> dict[str, Any]:
        return {
            "report_id": self.report_id,
            "pr_id": self.pr_id,
            "scenario_id": self.scenario_id,
            "title": self.title,
            "description": self.description,
            "reasoning": self.reasoning,
            "evidence": [{"step_index": s, "region_index": r} for s, r in self.evidence],
            "status": self.status,
            "filter_rationale": self.filter_rationale,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> BugReport:
        return cls(
            report_id=str(raw["report_id"]),
            pr_id=str(raw["pr_id"]),
            scenario_id=str(raw["scenario_id"]),
            title=str(raw.get("title") or ""),
            description=str(raw.get("description") or ""),
            evidence=[(int(e["step_index"]), int(e["region_index"])) for e in raw["evidence"]],
            status=str(raw.get("status") or "candidate"),
            reasoning=str(raw.get("reasoning") or ""),
            filter_rationale=raw.get("filter_rationale"),
            flags=[str(x) for x in raw.get("flags", [])],
        )


@dataclass
class DetectionResult:
    scenario_id: str
    verdicts: list[DifferenceVerdict] = field(default_factory=list)
    candidates: list[BugReport] = field(default_factory=list)
    holistic_summaries: dict[int, str] = field(default_factory=dict)
    flags: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "candidates": [c.to_dict() for c in self.candidates],
            "holistic_summaries": {str(k): v for k, v in sorted(self.holistic_summaries.items())},
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> DetectionResult:
        return cls(
            scenario_id=str(raw["scenario_id"]),
            verdicts=[DifferenceVerdict.from_dict(v) for v in raw.get("verdicts", [])],
            candidates=[BugReport.from_dict(c) for c in raw.get("candidates", [])],
            holistic_summaries={int(k): str(v) for k, v in raw.get("holistic_summaries", {}).items()},
            flags=list(raw.get("flags", [])),
        )


def _change_intent_text(ctx: ChangeContext) -> str:
    head = f"[{ctx.pr_intent.source_id}] {ctx.pr_intent.title}\n{ctx.pr_intent.description}".rstrip()
    if ctx.resolved_issues:
        return f"{head}\n\nResolved issues:\n{format_intents(ctx.resolved_issues)}"
    return head


def _prompt_regions(info: ParsedInfo, cap: int) -> tuple[ParsedInfo, list[int]]:
    """Largest `cap` regions (by pixel count) for the prompt, plus the indices left out."""
    if len(info.regions) <= cap:
        return info, []
    ranked = sorted(info.regions, key=lambda r: (-r.pixel_count, r.index))
    shown = sorted(ranked[:cap], key=lambda r: r.index)
    trimmed = ParsedInfo(
        step_index=info.step_index,
        regions=shown,
        image_dims=info.image_dims,
        dimension_mismatch=info.dimension_mismatch,
        warnings=[*info.warnings, f"showing {cap} of {len(info.regions)} regions"],
    )
    return trimmed, sorted(r.index for r in ranked[cap:])


@dataclass
class _Finding:
    step_index: int
    region_index: int
    report_key: str
    title: str
    description: str
    reasoning: str


def detect_bugs(
    trace: ExecutionTrace,
    parsed: Sequence[ParsedInfo],
    annotated_pairs: Sequence[tuple[bytes, bytes]],
    ctx: ChangeContext,
    analysis: ImpactAnalysis,
    llm: LlmGateway,
    *,
    max_prompt_regions: int = MAX_PROMPT_REGIONS,
) -> DetectionResult:
    paired = trace.paired_steps()
    if len(parsed) != len(paired) or len(annotated_pairs) != len(parsed):
        raise ValueError(
            f"{trace.scenario_id}: {len(paired)} paired step(s), {len(parsed)} parsed record(s), "
            f"{len(annotated_pairs)} annotated pair(s)"
        )
    result = DetectionResult(scenario_id=trace.scenario_id)
    if all(not p.regions for p in parsed):
        logger.info("%s: no visual differences, nothing to analyze", trace.scenario_id)
        return result

    session: SessionHandle | None = None
    findings: list[_Finding] = []
    change_intent = _change_intent_text(ctx)
    analyzed = [i for i, p in enumerate(parsed) if p.regions]

    for n, i in enumerate(analyzed, start=1):
        step, info = paired[i], parsed[i]
        if info.step_index != step.step_index:
            raise ValueError(
                f"{trace.scenario_id}: parsed step {info.step_index} != trace step {step.step_index}"
            )
        logger.info(
            "[%d/%d] %s step %d: %d region(s)",
            n,
            len(analyzed),
            trace.scenario_id,
            step.step_index,
            len(info.regions),
        )
        shown, capped = _prompt_regions(info, max_prompt_regions)
        for r in capped:
            result.verdicts.append(
                DifferenceVerdict(step.step_index, r, "expected", source=SOURCE_REGION_CAP)
            )
        if capped:
            result.flags.append(
                {"step_index": step.step_index, "flag": "region_cap", "regions": capped}
            )

        if session is None:
            session = llm.open_session("detector")
        prompt = render_prompt(
            "detect_step",
            step_index=step.step_index,
            change_intent=change_intent,
            intent_explanation=analysis.intent_explanation or "(none)",
            instruction=step.instruction.canonical_json(),
            parsed_info=shown.to_json().rstrip(),
        )
        pre_png, post_png = annotated_pairs[i]
        try:
            payload = llm.ask_json(
                session, prompt, images=[pre_png, post_png], validate=validate_detection_payload
            )
        except LlmFormatError as e:
            logger.warning(
                "%s step %d: %s; marking regions expected", trace.scenario_id, step.step_index, e
            )
            for r in shown.regions:
                result.verdicts.append(
                    DifferenceVerdict(
                        step.step_index, r.index, "expected", source=SOURCE_FORMAT_ERROR
                    )
                )
            result.flags.append(
                {"step_index": step.step_index, "flag": "llm_format_error", "error": str(e)}
            )
            continue

        if payload.get("holistic_summary"):
            result.holistic_summaries[step.step_index] = str(payload["holistic_summary"])
        shown_ids = {r.index for r in shown.regions}
        decided: dict[int, dict[str, Any]] = {}
        dropped: list[int] = []
        for v in payload["verdicts"]:
            idx = int(v["region_index"])
            if idx == WHOLE_STEP:
                if v["classification"] == "bug":
                    findings.append(_finding(step.step_index, WHOLE_STEP, v))
                continue
            if idx not in shown_ids:
                dropped.append(idx)
                continue
            decided.setdefault(idx, v)
        if dropped:
            logger.debug(
                "%s step %d: ignoring verdicts for unknown regions %s",
                trace.scenario_id,
                step.step_index,
                dropped,
            )

        unreviewed: list[int] = []
        for r in shown.regions:
            v = decided.get(r.index)
            if v is None:
                unreviewed.append(r.index)
                result.verdicts.append(
                    DifferenceVerdict(step.step_index, r.index, "expected", source=SOURCE_UNREVIEWED)
                )
                continue
            result.verdicts.append(
                DifferenceVerdict(
                    step_index=step.step_index,
                    region_index=r.index,
                    classification=v["classification"],
                    description=str(v.get("description") or ""),
                    reasoning=str(v.get("reasoning") or ""),
                )
            )
            if v["classification"] == "bug":
                findings.append(_finding(step.step_index, r.index, v))
        if unreviewed:
            logger.warning(
                "%s step %d: %d region(s) left unreviewed, defaulting to expected",
                trace.scenario_id,
                step.step_index,
                len(unreviewed),
            )
            result.flags.append(
                {"step_index": step.step_index, "flag": "unreviewed_regions", "regions": unreviewed}
            )

    result.candidates = _group_findings(trace.scenario_id, ctx.pr_id, findings)
    logger.info("%s: %d candidate report(s)", trace.scenario_id, len(result.candidates))
    return result


def _finding(step_index: int, region_index: int, verdict: dict[str, Any]) -> _Finding:
    key = verdict.get("report_key") or f"step{step_index}-region{region_index}"
    return _Finding(
        step_index=step_index,
        region_index=region_index,
        report_key=str(key),
        title=str(verdict.get("title") or ""),
        description=str(verdict.get("description") or ""),
        reasoning=str(verdict.get("reasoning") or ""),
    )


def _group_findings(scenario_id: str, pr_id: str, findings: list[_Finding]) -> list[BugReport]:
    groups: dict[str, list[_Finding]] = {}
    for f in findings:
        groups.setdefault(f.report_key, []).append(f)

    reports: list[BugReport] = []
    for n, members in enumerate(groups.values(), start=1):
        title = next((m.title for m in members if m.title), "") or members[0].description[:80]
        descriptions = list(dict.fromkeys(m.description for m in members if m.description))
        reasoning = list(dict.fromkeys(m.reasoning for m in members if m.reasoning))
        evidence = list(dict.fromkeys((m.step_index, m.region_index) for m in members))
        reports.append(
            BugReport(
                report_id=f"{scenario_id}-r{n}",
                pr_id=pr_id,
                scenario_id=scenario_id,
                title=title or "Unintended GUI difference",
                description="\n".join(descriptions),
                evidence=evidence,
                reasoning="\n".join(reasoning),
            )
        )
    return reports


def validate_evidence(report: BugReport, parsed: Sequence[ParsedInfo]) -> list[str]:
    """Evidence pairs that do not resolve to a region of the trace (whole-step anchors resolve)."""
    by_step = {p.step_index: {r.index for r in p.regions} for p in parsed}
    bad = []
    for s, r in report.evidence:
        if s not in by_step or (r != WHOLE_STEP and r not in by_step[s]):
            bad.append(f"({s}, {r})")
    return bad
