from __future__ import annotations

from datetime import datetime, timezone

UTC = timezone.utc
from pathlib import Path

import pytest

from conftest import gateway, sample_context
from ripple_difftest.errors import LlmFormatError
from ripple_difftest.protocol import HistoricalReport
from ripple_difftest.scenario_pipeline import (
    ImpactAnalysis,
    ScenarioBatch,
    ScenarioStep,
    TestDatum,
    TestScenario,
    enrich_event_sequences,
    enrich_test_data,
    generate_scenarios,
)
from ripple_difftest.skb import SkbIndex, build_index
from ripple_difftest.validation import forbidden_code_tokens

CUTOFF = datetime(2024, 3, 1, 10, tzinfo=UTC)


def _on(match: str, reply: dict) -> dict:
    return {"match": match, "reply": reply}


def _value(name: str, value: str) -> dict:
    return {"name": name, "constraint": "", "concrete_value": value}


def _steps(n: int, what: str = "Click Save") -> list[dict]:
    return [{"description": f"{what} ({i + 1})", "expected_observation": "Saved"} for i in range(n)]


def _scenario(
    sid: str, stage: str = "generated", data: list[TestDatum] | None = None
) -> TestScenario:
    return TestScenario(
        scenario_id=sid,
        title=f"Scenario {sid}",
        stage=stage,
        preconditions=["The app is open"],
        steps=[ScenarioStep("Type a note"), ScenarioStep("Click Save", "The status shows it")],
        test_data=data or [],
    )


def _batch(*sids: str, stage: str = "generated") -> ScenarioBatch:
    return ScenarioBatch(
        pr_id="7",
        analysis=ImpactAnalysis("Saved notes move to a profile folder"),
        scenarios=[_scenario(s, stage) for s in sids],
    )


def _generation(n: int, step_text: str = "Click Save") -> dict:
    return {
        "change_impact_analysis": {
            "intent_explanation": "Saving writes the note somewhere else",
            "affected_behaviors": ["saving a note"],
            "high_risk_cases": ["saving twice"],
        },
        "test_scenarios": [
            {"title": f"Save flow {i}", "steps": _steps(2, step_text), "test_data": []}
            for i in range(n)
        ],
    }


def test_forbidden_code_tokens() -> None:
    tokens = forbidden_code_tokens(["app/layout.json", "Makefile", "src/app", ""])
    assert tokens == ["app/layout.json", "layout.json", "Makefile", "src/app"]


def test_generate_numbers_scenarios_and_records_analysis(tmp_path: Path) -> None:
    llm = gateway(tmp_path, generator=[_on("## Change Impact Analysis", _generation(2))])
    batch = generate_scenarios(sample_context(), llm)
    assert [s.scenario_id for s in batch.scenarios] == ["S01", "S02"]
    assert batch.stages == {"generated"}
    assert batch.analysis.affected_behaviors == ["saving a note"]
    assert ScenarioBatch.from_dict(batch.to_dict()).to_dict() == batch.to_dict()


def test_generate_truncates_to_the_scenario_cap(tmp_path: Path) -> None:
    llm = gateway(tmp_path, generator=[{"reply": _generation(5)}])
    batch = generate_scenarios(sample_context(), llm, max_scenarios=3)
    assert [s.scenario_id for s in batch.scenarios] == ["S01", "S02", "S03"]


def test_generate_rejects_code_level_steps(tmp_path: Path) -> None:
    leaky = _generation(1, step_text="Edit layout.json and reload")
    llm = gateway(tmp_path, generator=[{"reply": leaky}, {"reply": _generation(1)}])
    batch = generate_scenarios(sample_context(), llm)
    assert len(batch.scenarios) == 1

    llm = gateway(tmp_path / "b", generator=[{"reply": leaky}, {"reply": leaky}])
    with pytest.raises(LlmFormatError):
        generate_scenarios(sample_context(), llm)


def _index(tmp_path: Path, llm) -> SkbIndex:
    reports = [
        HistoricalReport("issue/11", "Save twice", "Type, save, retype, save again.", "2023-11-02"),
        HistoricalReport("issue/12", "Long status", "Type a long note, click save.", "2023-12-14"),
        HistoricalReport("issue/21", "Profile folder", "Notes vanish after upgrade.", "2024-03-10"),
    ]
    return build_index(reports, llm, 64, 8, out_path=tmp_path / "skb.bin", workers=1)


def test_enrichment_merges_replaces_and_filters_provenance(tmp_path: Path) -> None:
    enrichment = {
        "scenarios": [
            {
                "scenario_id": "S01",
                "title": "Save twice",
                "steps": _steps(3),
                "provenance": ["issue/11#0", "issue/99#0", "issue/21#0"],
            },
            {"scenario_id": "S02", "title": "Very long flow", "steps": _steps(16)},
            {"title": "Long note", "steps": _steps(2), "provenance": ["issue/12#0"]},
        ]
    }
    llm = gateway(
        tmp_path,
        generator=[
            _on("## Retrieval Queries", {"queries": ["save note", "save note", " "]}),
            {"match": "## Event Sequence Enrichment", "reply": enrichment},
            _on("## Scenario Replacement", {"scenarios": [{"title": "Short", "steps": _steps(4)}]}),
        ],
    )
    out = enrich_event_sequences(_batch("S01", "S02", "S03"), _index(tmp_path, llm), llm, CUTOFF)

    assert [s.scenario_id for s in out.scenarios] == ["S01", "S05", "S03", "S04"]
    s01, s05, s03, s04 = out.scenarios
    assert out.stages == {"event_enriched"}
    assert len(s01.steps) == 3
    assert s01.provenance == ["issue/11#0"]
    assert s05.replaces == "S02" and len(s05.steps) == 4
    assert s03.steps == _batch("S03").scenarios[0].steps
    assert s03.provenance == []
    assert s04.provenance == ["issue/12#0"]

    assert [row["query"] for row in out.retrieval_log] == ["save note"]
    retrieved = {cid for row in out.retrieval_log for cid in row["chunk_ids"]}
    assert retrieved == {"issue/11#0", "issue/12#0"}


def test_failed_replacement_keeps_the_original(tmp_path: Path) -> None:
    llm = gateway(
        tmp_path,
        generator=[
            {"match": "## Retrieval Queries", "reply": {"queries": ["save"]}},
            _on(
                "## Event Sequence Enrichment",
                {"scenarios": [{"scenario_id": "S01", "title": "Huge", "steps": _steps(20)}]},
            ),
            _on("## Scenario Replacement", {"scenarios": [{"title": "S", "steps": _steps(16)}]}),
        ],
    )
    out = enrich_event_sequences(_batch("S01"), SkbIndex.empty(), llm, CUTOFF)
    (s,) = out.scenarios
    assert s.scenario_id == "S01"
    assert len(s.steps) == 2
    assert s.stage == "event_enriched"
    assert out.retrieval_log == [{"query": "save", "chunk_ids": []}]


def test_enrichment_that_drops_steps_is_logged(
    tmp_path: Path, caplog: pytest.LogCaptureFixture
) -> None:
    llm = gateway(
        tmp_path,
        generator=[
            _on("## Retrieval Queries", {"queries": ["save"]}),
            _on(
                "## Event Sequence Enrichment",
                {"scenarios": [{"scenario_id": "S01", "title": "Short", "steps": _steps(1)}]},
            ),
        ],
    )
    with caplog.at_level("WARNING", logger="ripple_difftest.scenario_pipeline"):
        out = enrich_event_sequences(_batch("S01"), SkbIndex.empty(), llm, CUTOFF)
    assert len(out.scenarios[0].steps) == 1
    assert "S01 shrank from 2 to 1 steps" in caplog.text

def test_enrichment_needs_generated_scenarios(tmp_path: Path) -> None:
    with pytest.raises(ValueError):
        batch = _batch("S01", stage="event_enriched")
        enrich_event_sequences(batch, SkbIndex.empty(), gateway(tmp_path), CUTOFF)


def test_test_data_fills_every_incomplete_scenario(tmp_path: Path) -> None:
    batch = ScenarioBatch(
        pr_id="7",
        analysis=ImpactAnalysis("x"),
        scenarios=[
            _scenario("S01", "event_enriched", [TestDatum("note", "short text")]),
            _scenario("S02", "event_enriched"),
        ],
    )
    partial = {"scenarios": [{"scenario_id": "S02", "test_data": [_value("n", "x")]}]}
    full = {"scenarios": [{"scenario_id": "S01", "test_data": [_value("note", "hello")]}]}
    llm = gateway(tmp_path, generator=[{"reply": partial}, {"reply": full}])
    out = enrich_test_data(batch, llm)
    assert out.stages == {"data_enriched"}
    assert out.scenarios[0].test_data == [TestDatum("note", "", "hello")]
    assert out.scenarios[1].test_data == []

    llm = gateway(tmp_path / "b", generator=[{"reply": partial}, {"reply": partial}])
    with pytest.raises(LlmFormatError):
        enrich_test_data(batch, llm)


def test_data_enriched_scenarios_need_concrete_values() -> None:
    with pytest.raises(ValueError):
        _scenario("S01", "data_enriched", [TestDatum("note", "short", " ")])
    with pytest.raises(ValueError):
        TestScenario("S01", "t", "generated", [], [])
