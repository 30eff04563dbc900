from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Any

import pytest

from conftest import gateway
from ripple_difftest.config import Budgets, ExecutorSettings, SutConfig
from ripple_difftest.drivers import XdotoolDriver
from ripple_difftest.errors import DriverError, InstructionError
from ripple_difftest.executor import (
    ExecutionEnv,
    ExecutionTrace,
    ScenarioComplete,
    UiInstruction,
    build_sut,
    execute_instruction,
    load_trace,
    run_scenario,
    save_trace,
    stream_sha256,
    translate_next,
)
from ripple_difftest.protocol import BuildArtifact, ContainerSession
from ripple_difftest.runtimes import LocalRuntime
from ripple_difftest.scenario_pipeline import ScenarioStep, TestDatum, TestScenario
from ripple_difftest.vcs import GitClient

GEOMETRY = (640, 480)


def _layout(save_x: int) -> dict[str, Any]:
    return {
        "title": "Notes",
        "geometry": list(GEOMETRY),
        "widgets": [
            {"id": "field", "type": "text_field", "bbox": [40, 80, 600, 120], "text": ""},
            {
                "id": "save",
                "type": "button",
                "bbox": [save_x, 140, save_x + 120, 180],
                "text": "Save",
                "on_click": [{"action": "set_text", "target": "status", "value": "Saved: {field}"}],
            },
            {"id": "status", "type": "label", "bbox": [40, 200, 600, 240], "text": "Ready"},
        ],
    }


def _artifact(tmp_path: Path, name: str, save_x: int) -> BuildArtifact:
    d = tmp_path / "builds" / name
    d.mkdir(parents=True)
    (d / "layout.json").write_text(json.dumps(_layout(save_x)), encoding="utf-8")
    return BuildArtifact(f"local/notes:{name}", f"{name}-rev", "mock-sut layout.json", str(d))


def _runtime(tmp_path: Path) -> LocalRuntime:
    return LocalRuntime(
        ExecutorSettings(runtime="local"), repo=GitClient(tmp_path), work_dir=tmp_path / "work"
    )


def _scenario(stage: str = "data_enriched") -> TestScenario:
    return TestScenario(
        scenario_id="S01",
        title="Save a note",
        stage=stage,
        preconditions=[],
        steps=[ScenarioStep("Type the note"), ScenarioStep("Click Save", "Status shows the note")],
        test_data=[TestDatum("note", "", "hello")],
    )


def _continue(*instructions: dict[str, Any]) -> dict[str, Any]:
    return {"reply": {"status": "continue", "instructions": list(instructions)}}


COMPLETE = {"reply": {"status": "complete", "instructions": []}}
TYPE_HELLO = {"kind": "input", "target_name": "note field", "position": [300, 100], "text": "hello"}
CLICK_SAVE = {"kind": "click", "target_name": "Save button", "position": [520, 160]}
WAIT = {"kind": "wait", "wait_ms": 10}


def _env(tmp_path: Path, driver_factory=XdotoolDriver) -> ExecutionEnv:
    return ExecutionEnv(
        geometry=GEOMETRY, driver_factory=driver_factory, out_dir=tmp_path / "trace", settle_ms=0
    )


def _run(tmp_path: Path, records: list[dict], budgets: Budgets | None = None, **env_kw):
    llm = gateway(tmp_path, executor=records)
    runtime = _runtime(tmp_path)
    return run_scenario(
        _scenario(),
        _artifact(tmp_path, "post", 460),
        _artifact(tmp_path, "pre", 40),
        budgets or Budgets(),
        llm,
        runtime,
        env=_env(tmp_path, **env_kw),
    )


VALID = [
    {"kind": "click", "position": [1, 2]},
    {"kind": "right_click", "position": [1, 2]},
    {"kind": "long_click", "position": [1, 2]},
    {"kind": "double_click", "position": [1, 2]},
    {"kind": "triple_click", "position": [1, 2]},
    {"kind": "move", "position": [1, 2]},
    {"kind": "input", "position": [1, 2], "text": "hi"},
    {"kind": "scroll", "direction": "down"},
    {"kind": "keypress", "keys": ["ctrl", "a"]},
    {"kind": "drag", "position": [1, 2], "end_position": [639, 479]},
    {"kind": "wait", "wait_ms": 250},
]

INVALID = [
    {"kind": "click"},
    {"kind": "click", "position": [1, 2], "text": "x"},
    {"kind": "click", "position": [640, 2]},
    {"kind": "click", "position": [True, 2]},
    {"kind": "click", "position": [1, 2], "color": "red"},
    {"kind": "input", "position": [1, 2], "text": ""},
    {"kind": "scroll", "direction": "sideways"},
    {"kind": "keypress", "keys": []},
    {"kind": "drag", "position": [1, 2]},
    {"kind": "wait", "wait_ms": 0},
    {"kind": "teleport", "position": [1, 2]},
    "click",
]


@pytest.mark.parametrize("raw", VALID, ids=[v["kind"] for v in VALID])
def test_valid_instructions(raw: dict[str, Any]) -> None:
    instr = UiInstruction.from_dict(raw, GEOMETRY)
    assert UiInstruction.from_dict(json.loads(instr.canonical_json()), GEOMETRY) == instr


@pytest.mark.parametrize("raw", INVALID)
def test_invalid_instructions(raw: Any) -> None:
    with pytest.raises(InstructionError):
        UiInstruction.from_dict(raw, GEOMETRY)


def test_null_arguments_count_as_absent() -> None:
    instr = UiInstruction.from_dict({"kind": "click", "position": [3, 4], "text": None}, GEOMETRY)
    assert instr.text is None


class _CountingRuntime:
    name = "counting"

    def __init__(self) -> None:
        self.artifacts: dict = {}
        self.lock = threading.Lock()
        self.builds: list[str] = []

    def build_image(self, cfg, revision: str) -> BuildArtifact:
        self.builds.append(revision)
        return BuildArtifact(f"img:{revision}", revision, cfg.launch_command, "/nowhere")


def test_builds_are_cached_per_revision() -> None:
    rt = _CountingRuntime()
    cfg = SutConfig(
        "notes", "/repo", "base:latest", "sh build.sh", "mock-sut layout.json", GEOMETRY, "mock"
    )
    a = build_sut(cfg, "abc", rt)
    assert build_sut(cfg, "abc", rt) is a
    build_sut(cfg, "def", rt)
    assert rt.builds == ["abc", "def"]


def test_translate_next_needs_concrete_test_data(tmp_path: Path) -> None:
    llm = gateway(tmp_path, executor=[COMPLETE])
    chat = llm.open_session("executor")
    with pytest.raises(ValueError):
        translate_next(_scenario("event_enriched"), b"png", chat, llm, geometry=GEOMETRY)


def test_translate_next_reports_completion(tmp_path: Path) -> None:
    llm = gateway(tmp_path, executor=[COMPLETE])
    chat = llm.open_session("executor")
    assert translate_next(_scenario(), b"png", chat, llm, geometry=GEOMETRY) == ScenarioComplete()


def test_play_then_replay_the_same_stream(tmp_path: Path) -> None:
    trace = _run(
        tmp_path,
        [
            {"match": "## Scenario Execution", **_continue(TYPE_HELLO, CLICK_SAVE)},
            {"match": "## Next Instructions", **COMPLETE},
        ],
    )
    assert trace.termination == "completed"
    assert trace.llm_turns_used == 2
    assert [s.instruction.kind for s in trace.steps] == ["input", "click"]
    assert [s.llm_turn_index for s in trace.steps] == [0, 0]
    assert trace.replay_failure_at is None
    assert trace.play_stream_sha256 == trace.replay_stream_sha256
    assert trace.play_stream_sha256 == stream_sha256(trace.instructions)
    assert len(trace.paired_steps()) == 2
    assert trace.build_ids == {"pre": "pre-rev", "post": "post-rev"}

    out = tmp_path / "trace"
    for step in trace.steps:
        assert (out / step.post_screenshot).is_file()
        assert (out / step.pre_screenshot).is_file()
    # the relocated Save button only reacts on the post-change build
    assert trace.steps[1].post_sha256 != trace.steps[1].pre_sha256

    save_trace(trace, out)
    assert load_trace(out).to_dict() == trace.to_dict()


def test_instruction_budget_stops_mid_batch(tmp_path: Path) -> None:
    batch = _continue(*[WAIT] * 10)
    trace = _run(tmp_path, [batch] * 6)
    assert trace.termination == "ui_budget_exhausted"
    assert len(trace.steps) == 35
    assert trace.llm_turns_used == 4


def test_batch_landing_on_the_budget_may_still_complete(tmp_path: Path) -> None:
    batch = _continue(*[WAIT] * 5)
    trace = _run(tmp_path, [batch] * 7 + [COMPLETE])
    assert trace.termination == "completed"
    assert len(trace.steps) == 35
    assert trace.llm_turns_used == 8

    trace = _run(tmp_path / "more", [batch] * 8)
    assert trace.termination == "ui_budget_exhausted"
    assert len(trace.steps) == 35
    assert trace.llm_turns_used == 8


def test_llm_turn_budget(tmp_path: Path) -> None:
    trace = _run(tmp_path, [_continue(WAIT)] * 25)
    assert trace.termination == "llm_budget_exhausted"
    assert trace.llm_turns_used == 20
    assert len(trace.steps) == 20

    small = Budgets(max_llm_turns_per_scenario=2, max_ui_instructions_per_scenario=35)
    trace = _run(tmp_path / "small", [_continue(WAIT)] * 5, budgets=small)
    assert trace.llm_turns_used == 2


def test_unusable_translation_ends_the_scenario(tmp_path: Path) -> None:
    off_screen = _continue({"kind": "click", "position": [900, 10]})
    trace = _run(tmp_path, [off_screen, off_screen])
    assert trace.termination == "execution_error"
    assert trace.steps == []
    assert "after repair" in (trace.error or "")


class _FailingDriver(XdotoolDriver):
    fail_revision = "pre-rev"
    fail_kind = "click"

    def inject(self, instr: UiInstruction, session: ContainerSession) -> None:
        if session.sut_revision == self.fail_revision and instr.kind == self.fail_kind:
            raise DriverError("window not responding")
        super().inject(instr, session)


def test_replay_failure_is_recorded(tmp_path: Path) -> None:
    trace = _run(
        tmp_path,
        [_continue(TYPE_HELLO, CLICK_SAVE, WAIT), COMPLETE],
        driver_factory=_FailingDriver,
    )
    assert trace.termination == "completed"
    assert trace.replay_failure_at == 1
    assert [s.step_index for s in trace.paired_steps()] == [0]
    assert trace.play_stream_sha256 != trace.replay_stream_sha256


class _PlayFailingDriver(_FailingDriver):
    fail_revision = "post-rev"
    fail_kind = "input"


def test_driver_failure_during_play(tmp_path: Path) -> None:
    trace = _run(tmp_path, [_continue(TYPE_HELLO), COMPLETE], driver_factory=_PlayFailingDriver)
    assert trace.termination == "execution_error"
    assert trace.error.startswith("step 0:")
    assert trace.steps == []


class _Flaky:
    def __init__(self, failures: int) -> None:
        self.failures = failures
        self.calls = 0

    def inject(self, instr, session) -> None:
        self.calls += 1
        if self.calls <= self.failures:
            raise DriverError("busy")

    def screenshot(self, session) -> bytes:
        return b"shot"


def test_execute_instruction_retries_injection_once() -> None:
    session = ContainerSession("s", "img", "rev", GEOMETRY, state="running")
    instr = UiInstruction.from_dict(WAIT)
    slept: list[float] = []
    flaky = _Flaky(1)
    assert execute_instruction(instr, session, flaky, settle_ms=250, sleep=slept.append) == b"shot"
    assert flaky.calls == 2
    assert slept == [0.25]
    with pytest.raises(DriverError):
        execute_instruction(instr, session, _Flaky(2), settle_ms=0)


def test_trace_rejects_unknown_terminations() -> None:
    with pytest.raises(ValueError):
        ExecutionTrace("S01", [], "gave_up", 0, {})
