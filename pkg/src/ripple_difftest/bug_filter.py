"""Post-processing of candidate reports for one PR.

A single filter dialogue sees every candidate of the PR (text plus evidence
screenshots) and decides per report: keep, duplicate of another report, a
screenshot-timing/rendering artifact, or non-deterministic GUI behaviour.
Duplicate edges are resolved with union-find; each group keeps exactly its
lowest report id.
"""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

from .errors import LlmFormatError
from .llm_gateway import LlmGateway
from .oracle import BugReport
from .prompts import render_prompt
from .validation import validate_filter_payload

logger = logging.getLogger(__name__)

STATUS_BY_OUTCOME = {
    "keep": "kept",
    "duplicate_of": "filtered_duplicate",
    "rendering_artifact": "filtered_rendering",
    "nondeterministic": "filtered_nondeterminism",
}


@dataclass(frozen=True)
class FilterDecision:
    report_id: str
    outcome: str
    rationale: str = ""
    duplicate_of: str | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"report_id": self.report_id, "outcome": self.outcome}
        if self.duplicate_of is not None:
            out["duplicate_of"] = self.duplicate_of
        out["rationale"] = self.rationale
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> FilterDecision:
        return cls(
            report_id=str(raw["report_id"]),
            outcome=str(raw["outcome"]),
            rationale=str(raw.get("rationale") or ""),
            duplicate_of=raw.get("duplicate_of"),
        )


@dataclass
class FilterResult:
    reports: list[BugReport]
    decisions: list[FilterDecision] = field(default_factory=list)
    flags: list[dict[str, Any]] = field(default_factory=list)

    @property
    def kept(self) -> list[BugReport]:
        return [r for r in self.reports if r.status == "kept"]

    def counts(self) -> dict[str, int]:
        out = {status: 0 for status in STATUS_BY_OUTCOME.values()}
        for r in self.reports:
            if r.status in out:
                out[r.status] += 1
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "reports": [r.to_dict() for r in self.reports],
            "decisions": [d.to_dict() for d in self.decisions],
            "flags": list(self.flags),
            "counts": self.counts(),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> FilterResult:
        return cls(
            reports=[BugReport.from_dict(r) for r in raw.get("reports", [])],
            decisions=[FilterDecision.from_dict(d) for d in raw.get("decisions", [])],
            flags=list(raw.get("flags", [])),
        )


def natural_key(report_id: str) -> tuple[Any, ...]:
    """`S02-r10` sorts after `S02-r9`."""
    return tuple(int(p) if p.isdigit() else p for p in re.split(r"(\d+)", report_id))


class _UnionFind:
    def __init__(self, ids: Sequence[str]) -> None:
        self.parent = {i: i for i in ids}

    def find(self, x: str) -> str:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        # lowest id becomes the root
        if natural_key(rb) < natural_key(ra):
            ra, rb = rb, ra
        self.parent[rb] = ra

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for i in self.parent:
            out.setdefault(self.find(i), []).append(i)
        return out


def _candidate_view(report: BugReport) -> dict[str, Any]:
    return {
        "report_id": report.report_id,
        "scenario_id": report.scenario_id,
        "title": report.title,
        "description": report.description,
        "evidence": [{"step_index": s, "region_index": r} for s, r in report.evidence],
    }


def filter_reports(
    candidates: Sequence[BugReport],
    llm: LlmGateway,
    *,
    evidence_images: Mapping[str, Sequence[tuple[str, bytes]]] | None = None,
) -> FilterResult:
    """Assign every candidate exactly one final status; input order is preserved.

    `evidence_images` maps a report id to labelled screenshots (label, PNG bytes)
    attached to the prompt in candidate order. Reports that already left the
    `candidate` status pass through untouched.
    """
    reports = list(candidates)
    pending = [r for r in reports if r.status == "candidate"]
    result = FilterResult(reports=reports)
    if not pending:
        return result

    ids = [r.report_id for r in pending]
    if len(set(ids)) != len(ids):
        raise ValueError("candidate report ids must be unique")

    labels: list[str] = []
    images: list[bytes] = []
    for r in pending:
        for label, data in (evidence_images or {}).get(r.report_id, ()):
            labels.append(f"image {len(images) + 1}: {r.report_id} {label}")
            images.append(data)
    prompt = render_prompt(
        "filter",
        count=len(pending),
        candidates=json.dumps([_candidate_view(r) for r in pending], ensure_ascii=False, indent=2),
        image_index="\n".join(labels) or "(no images attached)",
    )

    decided: dict[str, dict[str, Any]] = {}
    session = llm.open_session("filter")
    try:
        payload = llm.ask_json(session, prompt, images=images, validate=validate_filter_payload)
        for d in payload["decisions"]:
            rid = d["report_id"]
            if rid in decided or rid not in ids:
                continue
            decided[rid] = d
    except LlmFormatError as e:
        logger.warning("filter reply unusable, keeping all %d candidate(s): %s", len(pending), e)
        result.flags.append({"flag": "filter_format_error", "error": str(e)})

    uf = _UnionFind(ids)
    for rid, d in decided.items():
        if d["outcome"] != "duplicate_of":
            continue
        target = d.get("duplicate_of")
        if target in uf.parent and target != rid:
            uf.union(rid, target)
        else:
            result.flags.append({"flag": "bad_duplicate_target", "report_id": rid, "target": target})

    rep_of = {m: root for root, members in uf.groups().items() for m in members}
    group_size = {root: len(members) for root, members in uf.groups().items()}

    for r in pending:
        rid = r.report_id
        root = rep_of[rid]
        d = decided.get(rid)
        rationale = str(d.get("rationale") or "") if d else ""
        if group_size[root] > 1 and rid != root:
            decision = FilterDecision(rid, "duplicate_of", rationale, duplicate_of=root)
        elif group_size[root] > 1:
            if d is not None and d["outcome"] != "keep":
                r.flags.append("representative_forced_keep")
            decision = FilterDecision(rid, "keep", rationale)
        elif d is None:
            if not any(f.get("flag") == "filter_format_error" for f in result.flags):
                result.flags.append({"flag": "undecided", "report_id": rid})
            r.flags.append("undecided_kept")
            decision = FilterDecision(rid, "keep", "no decision returned")
        elif d["outcome"] == "duplicate_of":
            # edge was rejected above
            decision = FilterDecision(rid, "keep", rationale)
        else:
            decision = FilterDecision(rid, d["outcome"], rationale)
        r.transition(STATUS_BY_OUTCOME[decision.outcome], rationale=decision.rationale or None)
        result.decisions.append(decision)

    counts = result.counts()
    logger.info(
        "filtered %d candidate(s): %d kept, %d duplicate, %d rendering, %d nondeterministic",
        len(pending),
        counts["kept"],
        counts["filtered_duplicate"],
        counts["filtered_rendering"],
        counts["filtered_nondeterminism"],
    )
    return result
