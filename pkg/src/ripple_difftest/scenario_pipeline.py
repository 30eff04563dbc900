"""Three-stage scenario generator.

generate_scenarios       change-impact analysis + initial scenarios (stage "generated")
enrich_event_sequences   SKB-backed event-sequence enrichment      (stage "event_enriched")
enrich_test_data         concrete test data for every scenario     (stage "data_enriched")

Each stage opens a fresh generator session.
"""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import TYPE_CHECKING, Any

from .change_context import ChangeContext, format_intents
from .config import SkbSettings
from .errors import LlmFormatError
from .prompts import render_prompt
from .skb import SkbIndex, assert_no_leakage, query
from .validation import (
    forbidden_code_tokens,
    validate_enrichment_payload,
    validate_generation_payload,
    validate_queries_payload,
    validate_test_data_payload,
)

if TYPE_CHECKING:
    from .llm_gateway import LlmGateway

logger = logging.getLogger(__name__)

STAGES = ("generated", "event_enriched", "data_enriched")
MAX_SCENARIOS = 7
_ID_RE = re.compile(r"^S(\d+)$")


@dataclass
class ImpactAnalysis:
    intent_explanation: str
    affected_behaviors: list[str] = field(default_factory=list)
    high_risk_cases: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "intent_explanation": self.intent_explanation,
            "affected_behaviors": list(self.affected_behaviors),
            "high_risk_cases": list(self.high_risk_cases),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> ImpactAnalysis:
        return cls(
            intent_explanation=str(raw.get("intent_explanation") or ""),
            affected_behaviors=[str(x) for x in raw.get("affected_behaviors", [])],
            high_risk_cases=[str(x) for x in raw.get("high_risk_cases", [])],
        )


@dataclass(frozen=True)
class ScenarioStep:
    description: str
    expected_observation: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"description": self.description, "expected_observation": self.expected_observation}


@dataclass(frozen=True)
class TestDatum:
    __test__ = False

    name: str
    constraint: str = ""
    concrete_value: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "constraint": self.constraint, "concrete_value": self.concrete_value}


@dataclass
class TestScenario:
    __test__ = False

    scenario_id: str
    title: str
    stage: str
    preconditions: list[str]
    steps: list[ScenarioStep]
    test_data: list[TestDatum] = field(default_factory=list)
    provenance: list[str] = field(default_factory=list)
    replaces: str | None = None

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"unknown scenario stage: {self.stage}")
        if not self.steps:
            raise ValueError(f"scenario {self.scenario_id} has no steps")
        if self.stage == "data_enriched":
            missing = [d.name for d in self.test_data if not d.concrete_value.strip()]
            if missing:
                raise ValueError(f"scenario {self.scenario_id}: no concrete value for {missing}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "title": self.title,
            "stage": self.stage,
            "preconditions": list(self.preconditions),
            "steps": [s.to_dict() for s in self.steps],
            "test_data": [d.to_dict() for d in self.test_data],
            "provenance": list(self.provenance),
            "replaces": self.replaces,
        }

    def prompt_view(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "title": self.title,
            "preconditions": list(self.preconditions),
            "steps": [s.to_dict() for s in self.steps],
            "test_data": [d.to_dict() for d in self.test_data],
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> TestScenario:
        return cls(
            scenario_id=str(raw["scenario_id"]),
            title=str(raw["title"]),
            stage=str(raw.get("stage") or "generated"),
            preconditions=[str(p) for p in raw.get("preconditions", [])],
            steps=[_step(s) for s in raw.get("steps", [])],
            test_data=[_datum(d) for d in raw.get("test_data", [])],
            provenance=[str(p) for p in raw.get("provenance", [])],
            replaces=raw.get("replaces"),
        )


def _step(raw: dict[str, Any]) -> ScenarioStep:
    obs = raw.get("expected_observation")
    return ScenarioStep(description=str(raw["description"]), expected_observation=obs or None)


def _datum(raw: dict[str, Any]) -> TestDatum:
    return TestDatum(
        name=str(raw["name"]),
        constraint=str(raw.get("constraint") or ""),
        concrete_value=str(raw.get("concrete_value") or ""),
    )


@dataclass
class ScenarioBatch:
    pr_id: str
    analysis: ImpactAnalysis
    scenarios: list[TestScenario]
    retrieval_log: list[dict[str, Any]] = field(default_factory=list)
    max_scenarios: int = MAX_SCENARIOS

    def __post_init__(self) -> None:
        if self.max_scenarios < 1:
            raise ValueError("max_scenarios must be >= 1")
        if len(self.scenarios) > self.max_scenarios:
            logger.warning(
                "PR %s: truncating %d scenarios to %d",
                self.pr_id,
                len(self.scenarios),
                self.max_scenarios,
            )
            self.scenarios = self.scenarios[: self.max_scenarios]
        ids = [s.scenario_id for s in self.scenarios]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate scenario ids in batch: {ids}")

    @property
    def stages(self) -> set[str]:
        return {s.stage for s in self.scenarios}

    def to_dict(self) -> dict[str, Any]:
        return {
            "pr_id": self.pr_id,
            "max_scenarios": self.max_scenarios,
            "analysis": self.analysis.to_dict(),
            "scenarios": [s.to_dict() for s in self.scenarios],
            "retrieval_log": list(self.retrieval_log),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> ScenarioBatch:
        return cls(
            pr_id=str(raw["pr_id"]),
            analysis=ImpactAnalysis.from_dict(raw["analysis"]),
            scenarios=[TestScenario.from_dict(s) for s in raw.get("scenarios", [])],
            retrieval_log=list(raw.get("retrieval_log", [])),
            max_scenarios=int(raw.get("max_scenarios", MAX_SCENARIOS)),
        )


class _IdAllocator:
    def __init__(self, taken: Iterable[str]) -> None:
        nums = [int(m.group(1)) for t in taken if t and (m := _ID_RE.match(t))]
        self._next = max(nums, default=0) + 1

    def __call__(self) -> str:
        sid = f"S{self._next:02d}"
        self._next += 1
        return sid


def _require_stage(batch: ScenarioBatch, stage: str) -> None:
    bad = sorted({s.stage for s in batch.scenarios} - {stage})
    if bad:
        raise ValueError(f"batch {batch.pr_id}: expected stage {stage!r}, found {bad}")


def _scenarios_json(scenarios: Sequence[TestScenario]) -> str:
    return json.dumps([s.prompt_view() for s in scenarios], ensure_ascii=False, indent=2)


def _patches(ctx: ChangeContext) -> str:
    parts = []
    for f in ctx.code_change.files:
        if f.binary:
            parts.append(f"(binary file) {f.path}")
        else:
            parts.append(f.patch.rstrip())
    return "\n\n".join(parts) or "(no textual changes)"


# generation


def generate_scenarios(
    ctx: ChangeContext, llm: LlmGateway, *, max_scenarios: int = MAX_SCENARIOS
) -> ScenarioBatch:
    forbidden = forbidden_code_tokens(ctx.code_change.paths)
    prompt = render_prompt(
        "generate",
        pr_title=ctx.pr_intent.title,
        pr_description=ctx.pr_intent.description or "(no description)",
        resolved_issues=format_intents(ctx.resolved_issues),
        commit_messages="\n".join(f"- {m.strip()}" for m in ctx.code_change.commit_messages) or "(none)",
        file_paths="\n".join(f"- {p}" for p in ctx.code_change.paths) or "(none)",
        patches=_patches(ctx),
        preceding_intents=format_intents([p.intent for p in ctx.preceding]),
        max_scenarios=max_scenarios,
    )
    session = llm.open_session("generator")
    payload = llm.ask_json(
        session, prompt, validate=lambda p: validate_generation_payload(p, forbidden=forbidden)
    )

    next_id = _IdAllocator(())
    scenarios = [
        TestScenario(
            scenario_id=next_id(),
            title=s["title"],
            stage="generated",
            preconditions=list(s.get("preconditions", [])),
            steps=[_step(x) for x in s["steps"]],
            test_data=[_datum(d) for d in s.get("test_data", [])],
        )
        for s in payload["test_scenarios"][:max_scenarios]
    ]
    if len(payload["test_scenarios"]) > max_scenarios:
        logger.warning(
            "PR %s: generator returned %d scenarios, keeping the first %d",
            ctx.pr_id,
            len(payload["test_scenarios"]),
            max_scenarios,
        )
    logger.info("PR %s: generated %d scenario(s)", ctx.pr_id, len(scenarios))
    return ScenarioBatch(
        pr_id=ctx.pr_id,
        analysis=ImpactAnalysis.from_dict(payload["change_impact_analysis"]),
        scenarios=scenarios,
        max_scenarios=max_scenarios,
    )


# event-sequence enrichment


def _retrieve(
    queries: Sequence[str],
    index: SkbIndex,
    llm: LlmGateway,
    cutoff: datetime,
    k: int,
) -> tuple[dict[str, str], list[dict[str, Any]]]:
    chunks: dict[str, str] = {}
    log: list[dict[str, Any]] = []
    for q in queries:
        results = query(index, q, cutoff, k, embedder=llm) if index.chunks else []
        assert_no_leakage(results, cutoff)
        log.append({"query": q, "chunk_ids": [r.chunk.chunk_id for r in results]})
        for r in results:
            chunks.setdefault(r.chunk.chunk_id, r.chunk.text)
    return chunks, log


def _knowledge_block(chunks: dict[str, str]) -> str:
    if not chunks:
        return "(no historical usage scenarios were retrieved)"
    return "\n\n".join(f"[{cid}]\n{text.strip()}" for cid, text in chunks.items())


def _request_replacement(
    llm: LlmGateway,
    session: Any,
    scenario: TestScenario,
    *,
    max_steps: int,
    forbidden: Sequence[str],
) -> dict[str, Any] | None:
    prompt = render_prompt(
        "replace_scenario",
        scenario=json.dumps(scenario.prompt_view(), ensure_ascii=False, indent=2),
        max_steps=max_steps,
    )
    try:
        payload = llm.ask_json(
            session, prompt, validate=lambda p: validate_enrichment_payload(p, forbidden=forbidden)
        )
    except LlmFormatError as e:
        logger.warning("replacement for %s failed: %s", scenario.scenario_id, e)
        return None
    for s in payload["scenarios"]:
        if len(s["steps"]) <= max_steps:
            return s
    return None


def enrich_event_sequences(
    batch: ScenarioBatch,
    index: SkbIndex,
    llm: LlmGateway,
    cutoff: datetime,
    *,
    settings: SkbSettings | None = None,
    forbidden: Sequence[str] = (),
) -> ScenarioBatch:
    """Diversify event sequences with retrieved historical usage.

    Scenarios the reply does not mention carry over unchanged. A scenario whose
    enriched form exceeds `settings.max_steps` is replaced by a fresh, shorter
    one (new id, `replaces` set); if no acceptable replacement comes back the
    pre-enrichment scenario is kept.
    """
    settings = settings or SkbSettings()
    _require_stage(batch, "generated")
    if not batch.scenarios:
        return replace(batch, scenarios=[], retrieval_log=[])

    session = llm.open_session("generator")
    scenarios_json = _scenarios_json(batch.scenarios)
    q_payload = llm.ask_json(
        session,
        render_prompt(
            "enrich_queries",
            intent_explanation=batch.analysis.intent_explanation,
            scenarios=scenarios_json,
            max_queries=settings.queries_per_batch,
        ),
        validate=validate_queries_payload,
    )
    queries: list[str] = []
    for q in q_payload["queries"]:
        q = q.strip()
        if q and q not in queries:
            queries.append(q)
    queries = queries[: settings.queries_per_batch]

    chunks, log = _retrieve(queries, index, llm, cutoff, settings.k)
    retrieved = set(chunks)
    logger.info(
        "PR %s: %d quer(ies), %d distinct chunk(s) retrieved", batch.pr_id, len(queries), len(chunks)
    )

    payload = llm.ask_json(
        session,
        render_prompt(
            "enrich_events",
            scenarios=scenarios_json,
            knowledge=_knowledge_block(chunks),
            max_steps=settings.max_steps,
        ),
        validate=lambda p: validate_enrichment_payload(p, forbidden=forbidden),
    )

    originals = {s.scenario_id: s for s in batch.scenarios}
    allocate = _IdAllocator(
        [*originals, *(s.get("replaces") or "" for s in payload["scenarios"])]
    )
    slots: dict[str, TestScenario] = {}
    extra: list[TestScenario] = []

    def _make(raw: dict[str, Any], sid: str, replaces: str | None) -> TestScenario:
        return TestScenario(
            scenario_id=sid,
            title=raw["title"],
            stage="event_enriched",
            preconditions=list(raw.get("preconditions", [])),
            steps=[_step(x) for x in raw["steps"]],
            test_data=[_datum(d) for d in raw.get("test_data", [])],
            provenance=[str(c) for c in raw.get("provenance", []) if str(c) in retrieved],
            replaces=replaces,
        )

    for raw in payload["scenarios"]:
        sid = raw.get("scenario_id")
        target = raw.get("replaces")
        if target in originals and target not in slots:
            slots[target] = _make(raw, allocate(), target)
        elif sid in originals and sid not in slots:
            slots[sid] = _make(raw, sid, None)
            if len(slots[sid].steps) < len(originals[sid].steps):
                logger.warning(
                    "%s shrank from %d to %d steps during enrichment",
                    sid,
                    len(originals[sid].steps),
                    len(slots[sid].steps),
                )
        else:
            extra.append(_make(raw, allocate(), None))

    out: list[TestScenario] = []
    for sid, original in originals.items():
        s = slots.get(sid) or replace(original, stage="event_enriched", provenance=[])
        if len(s.steps) > settings.max_steps:
            logger.info(
                "%s grew to %d steps (> %d); requesting a replacement",
                sid,
                len(s.steps),
                settings.max_steps,
            )
            raw = _request_replacement(
                llm, session, s, max_steps=settings.max_steps, forbidden=forbidden
            )
            if raw is not None:
                s = _make(raw, allocate(), sid)
            else:
                s = replace(original, stage="event_enriched", provenance=[])
        out.append(s)
    out.extend(s for s in extra if len(s.steps) <= settings.max_steps)

    return ScenarioBatch(
        pr_id=batch.pr_id,
        analysis=batch.analysis,
        scenarios=out,
        retrieval_log=log,
        max_scenarios=batch.max_scenarios,
    )


# test-data enrichment


def enrich_test_data(batch: ScenarioBatch, llm: LlmGateway) -> ScenarioBatch:
    _require_stage(batch, "event_enriched")
    if not batch.scenarios:
        return replace(batch, scenarios=[])

    known = {s.scenario_id for s in batch.scenarios}
    incomplete = {
        s.scenario_id for s in batch.scenarios if any(not d.concrete_value.strip() for d in s.test_data)
    }
    session = llm.open_session("generator")
    payload = llm.ask_json(
        session,
        render_prompt("test_data", scenarios=_scenarios_json(batch.scenarios)),
        validate=lambda p: validate_test_data_payload(p, known_ids=known, incomplete_ids=incomplete),
    )
    data = {s["scenario_id"]: [_datum(d) for d in s["test_data"]] for s in payload["scenarios"]}

    out = [
        replace(s, stage="data_enriched", test_data=data.get(s.scenario_id, s.test_data))
        for s in batch.scenarios
    ]
    return ScenarioBatch(
        pr_id=batch.pr_id,
        analysis=batch.analysis,
        scenarios=out,
        retrieval_log=list(batch.retrieval_log),
        max_scenarios=batch.max_scenarios,
    )
