"""Scenario execution: LLM-driven play on the post-change build, verbatim replay on the pre-change one."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

from .config import Budgets, SutConfig
from .errors import DriverError, InstructionError, LlmFormatError
from .prompts import render_prompt
from .protocol import BuildArtifact, ContainerRuntime, ContainerSession, InputDriver
from .validation import SchemaValidationError, _require, _require_list

if TYPE_CHECKING:
    from .llm_gateway import LlmGateway, SessionHandle
    from .scenario_pipeline import TestScenario

logger = logging.getLogger(__name__)

KINDS = (
    "click",
    "right_click",
    "long_click",
    "double_click",
    "triple_click",
    "input",
    "scroll",
    "drag",
    "move",
    "keypress",
    "wait",
)
DIRECTIONS = ("up", "down", "left", "right")
TERMINATIONS = ("completed", "llm_budget_exhausted", "ui_budget_exhausted", "execution_error")

_ARGS = ("position", "text", "keys", "direction", "end_position", "wait_ms")
_REQUIRED: dict[str, frozenset[str]] = {
    "click": frozenset({"position"}),
    "right_click": frozenset({"position"}),
    "long_click": frozenset({"position"}),
    "double_click": frozenset({"position"}),
    "triple_click": frozenset({"position"}),
    "move": frozenset({"position"}),
    "input": frozenset({"position", "text"}),
    "scroll": frozenset({"direction"}),
    "keypress": frozenset({"keys"}),
    "drag": frozenset({"position", "end_position"}),
    "wait": frozenset({"wait_ms"}),
}

Point = tuple[int, int]


def _point(value: Any, name: str) -> Point:
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    ):
        raise InstructionError(f"{name} must be [x, y] integers, got {value!r}")
    return (int(value[0]), int(value[1]))


@dataclass(frozen=True)
class UiInstruction:
    kind: str
    target_name: str = ""
    position: Point | None = None
    text: str | None = None
    keys: tuple[str, ...] | None = None
    direction: str | None = None
    end_position: Point | None = None
    wait_ms: int | None = None

    def validate(self, geometry: tuple[int, int] | None = None) -> UiInstruction:
        if self.kind not in KINDS:
            raise InstructionError(f"unknown instruction kind {self.kind!r}")
        required = _REQUIRED[self.kind]
        present = {name for name in _ARGS if getattr(self, name) is not None}
        missing = sorted(required - present)
        if missing:
            raise InstructionError(f"{self.kind} requires {', '.join(missing)}")
        extra = sorted(present - required)
        if extra:
            raise InstructionError(f"{self.kind} does not take {', '.join(extra)}")

        if self.direction is not None and self.direction not in DIRECTIONS:
            raise InstructionError(f"scroll direction must be one of {list(DIRECTIONS)}")
        if self.keys is not None and (not self.keys or not all(k.strip() for k in self.keys)):
            raise InstructionError("keypress needs at least one non-empty key")
        if self.wait_ms is not None and self.wait_ms <= 0:
            raise InstructionError("wait_ms must be a positive integer")
        if self.kind == "input" and self.text == "":
            raise InstructionError("input text must be non-empty")

        if geometry is not None:
            width, height = geometry
            for name in ("position", "end_position"):
                p = getattr(self, name)
                if p is not None and not (0 <= p[0] < width and 0 <= p[1] < height):
                    raise InstructionError(f"{name} {list(p)} outside display {width}x{height}")
        return self

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind, "target_name": self.target_name}
        for name in _ARGS:
            value = getattr(self, name)
            if value is not None:
                out[name] = list(value) if isinstance(value, tuple) else value
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_dict(cls, raw: Any, geometry: tuple[int, int] | None = None) -> UiInstruction:
        if not isinstance(raw, dict):
            raise InstructionError("instruction must be an object")
        unknown = sorted(set(raw) - {"kind", "target_name", *_ARGS})
        if unknown:
            raise InstructionError(f"unknown instruction fields: {unknown}")

        # Explicit nulls count as absent.
        kwargs: dict[str, Any] = {}
        if raw.get("position") is not None:
            kwargs["position"] = _point(raw["position"], "position")
        if raw.get("end_position") is not None:
            kwargs["end_position"] = _point(raw["end_position"], "end_position")
        if raw.get("text") is not None:
            if not isinstance(raw["text"], str):
                raise InstructionError("text must be a string")
            kwargs["text"] = raw["text"]
        if raw.get("keys") is not None:
            keys = raw["keys"]
            if isinstance(keys, str):
                keys = [keys]
            if not isinstance(keys, list) or not all(isinstance(k, str) for k in keys):
                raise InstructionError("keys must be a list of key names")
            kwargs["keys"] = tuple(keys)
        if raw.get("direction") is not None:
            kwargs["direction"] = str(raw["direction"])
        if raw.get("wait_ms") is not None:
            if not isinstance(raw["wait_ms"], int) or isinstance(raw["wait_ms"], bool):
                raise InstructionError("wait_ms must be an integer")
            kwargs["wait_ms"] = raw["wait_ms"]

        instr = cls(kind=str(raw.get("kind")), target_name=str(raw.get("target_name") or ""), **kwargs)
        return instr.validate(geometry)


def stream_sha256(instructions: Sequence[UiInstruction]) -> str:
    data = "\n".join(i.canonical_json() for i in instructions)
    return hashlib.sha256(data.encode("utf-8")).hexdigest()


class ScenarioComplete:
    """Completion signal returned by translate_next."""

    def __repr__(self) -> str:
        return "ScenarioComplete()"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ScenarioComplete)

    def __hash__(self) -> int:
        return hash(ScenarioComplete)


@dataclass
class StepRecord:
    step_index: int
    instruction: UiInstruction
    post_screenshot: str
    post_sha256: str
    llm_turn_index: int
    pre_screenshot: str | None = None
    pre_sha256: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "step_index": self.step_index,
            "llm_turn_index": self.llm_turn_index,
            "instruction": self.instruction.to_dict(),
            "post_screenshot": self.post_screenshot,
            "post_sha256": self.post_sha256,
            "pre_screenshot": self.pre_screenshot,
            "pre_sha256": self.pre_sha256,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> StepRecord:
        return cls(
            step_index=int(raw["step_index"]),
            instruction=UiInstruction.from_dict(raw["instruction"]),
            post_screenshot=str(raw["post_screenshot"]),
            post_sha256=str(raw["post_sha256"]),
            llm_turn_index=int(raw["llm_turn_index"]),
            pre_screenshot=raw.get("pre_screenshot"),
            pre_sha256=raw.get("pre_sha256"),
        )


@dataclass
class ExecutionTrace:
    """Play and replay record of one scenario.

    A batch cut short by the instruction budget ends as `ui_budget_exhausted`. A batch that lands
    exactly on the budget gets one more turn, which counts against the turn budget and can only
    turn the result into `completed`.
    """

    scenario_id: str
    steps: list[StepRecord]
    termination: str
    llm_turns_used: int
    build_ids: dict[str, str]
    replay_failure_at: int | None = None
    error: str | None = None
    play_stream_sha256: str = ""
    replay_stream_sha256: str = ""

    def __post_init__(self) -> None:
        if self.termination not in TERMINATIONS:
            raise ValueError(f"unknown termination: {self.termination}")
        for i, step in enumerate(self.steps):
            if step.step_index != i:
                raise ValueError(f"trace {self.scenario_id}: step_index {step.step_index} at position {i}")

    @property
    def instructions(self) -> list[UiInstruction]:
        return [s.instruction for s in self.steps]

    def paired_steps(self) -> list[StepRecord]:
        return [s for s in self.steps if s.pre_screenshot is not None]

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "termination": self.termination,
            "llm_turns_used": self.llm_turns_used,
            "build_ids": dict(self.build_ids),
            "replay_failure_at": self.replay_failure_at,
            "error": self.error,
            "play_stream_sha256": self.play_stream_sha256,
            "replay_stream_sha256": self.replay_stream_sha256,
            "steps": [s.to_dict() for s in self.steps],
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> ExecutionTrace:
        return cls(
            scenario_id=str(raw["scenario_id"]),
            steps=[StepRecord.from_dict(s) for s in raw.get("steps", [])],
            termination=str(raw["termination"]),
            llm_turns_used=int(raw["llm_turns_used"]),
            build_ids={str(k): str(v) for k, v in raw.get("build_ids", {}).items()},
            replay_failure_at=raw.get("replay_failure_at"),
            error=raw.get("error"),
            play_stream_sha256=str(raw.get("play_stream_sha256") or ""),
            replay_stream_sha256=str(raw.get("replay_stream_sha256") or ""),
        )


# builds


def build_sut(cfg: SutConfig, revision: str, runtime: ContainerRuntime) -> BuildArtifact:
    """Build (or reuse) the SUT image for `revision`; cached per (base image, revision)."""
    key = (cfg.container_image_ref, revision)
    with runtime.lock:
        cached = runtime.artifacts.get(key)
        if cached is not None:
            logger.debug("build cache hit for %s@%s", cfg.name, revision[:12])
            return cached
        logger.info("building %s at %s (%s runtime)", cfg.name, revision[:12], runtime.name)
        artifact = runtime.build_image(cfg, revision)
        runtime.artifacts[key] = artifact
        return artifact


# translation


def _validate_translation(payload: Any, geometry: tuple[int, int]) -> None:
    errors: list[str] = []
    _require(isinstance(payload, dict), "reply", "must be an object", errors)
    if not isinstance(payload, dict):
        raise SchemaValidationError(errors)
    status = payload.get("status")
    _require(status in ("continue", "complete"), "reply.status", "must be 'continue' or 'complete'", errors)
    instructions = _require_list(payload.get("instructions", []), "reply.instructions", errors)
    if status == "continue":
        _require(len(instructions) > 0, "reply.instructions", "must be non-empty to continue", errors)
    if errors:
        raise SchemaValidationError(errors)
    for i, raw in enumerate(instructions):
        try:
            UiInstruction.from_dict(raw, geometry)
        except InstructionError as e:
            raise InstructionError(f"reply.instructions[{i}]: {e}") from e


def translate_next(
    scenario: TestScenario,
    screenshot: bytes,
    session_memory: SessionHandle,
    llm: LlmGateway,
    *,
    geometry: tuple[int, int],
    executed_steps: int = 0,
    remaining_instructions: int | None = None,
) -> list[UiInstruction] | ScenarioComplete:
    """One executor turn: current screenshot in, an instruction batch (or completion) out."""
    if scenario.stage != "data_enriched":
        raise ValueError(f"scenario {scenario.scenario_id} is not data_enriched")

    if not session_memory.memory:
        prompt = render_prompt(
            "translate",
            scenario=json.dumps(scenario.prompt_view(), ensure_ascii=False, indent=2),
            width=geometry[0],
            height=geometry[1],
        )
    else:
        prompt = render_prompt(
            "translate_next",
            executed_steps=executed_steps,
            remaining=remaining_instructions if remaining_instructions is not None else "unbounded",
        )

    payload = llm.ask_json(
        session_memory,
        prompt,
        images=[screenshot],
        validate=lambda p: _validate_translation(p, geometry),
    )
    if payload["status"] == "complete":
        return ScenarioComplete()
    return [UiInstruction.from_dict(raw, geometry) for raw in payload["instructions"]]


# execution


def execute_instruction(
    instr: UiInstruction,
    session: ContainerSession,
    driver: InputDriver,
    *,
    settle_ms: int = 800,
    sleep: Callable[[float], None] = time.sleep,
) -> bytes:
    """Inject one action, wait for the GUI to settle, return a full-display screenshot."""
    try:
        driver.inject(instr, session)
    except DriverError as e:
        logger.warning("%s failed on %s, retrying once: %s", instr.kind, session.session_id, e)
        driver.inject(instr, session)
    if settle_ms > 0:
        sleep(settle_ms / 1000.0)
    return driver.screenshot(session)


@dataclass
class ExecutionEnv:
    """Everything run_scenario needs besides the scenario, builds and budgets."""

    geometry: tuple[int, int]
    driver_factory: Callable[[ContainerRuntime], InputDriver]
    out_dir: Path
    settle_ms: int = 800
    sleep: Callable[[float], None] = field(default=time.sleep)


def _save_png(out_dir: Path, name: str, data: bytes) -> str:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _completes(
    scenario: TestScenario,
    screenshot: bytes,
    chat: SessionHandle,
    llm: LlmGateway,
    geometry: tuple[int, int],
    executed: int,
) -> bool:
    try:
        result = translate_next(
            scenario,
            screenshot,
            chat,
            llm,
            geometry=geometry,
            executed_steps=executed,
            remaining_instructions=0,
        )
    except LlmFormatError:
        return False
    return isinstance(result, ScenarioComplete)


def run_scenario(
    scenario: TestScenario,
    post_build: BuildArtifact,
    pre_build: BuildArtifact,
    budgets: Budgets,
    llm: LlmGateway,
    runtime: ContainerRuntime,
    *,
    env: ExecutionEnv,
) -> ExecutionTrace:
    out_dir = env.out_dir
    steps: list[StepRecord] = []
    turns = 0
    termination: str | None = None
    error: str | None = None
    max_ui = budgets.max_ui_instructions_per_scenario
    max_turns = budgets.max_llm_turns_per_scenario

    # play: post-change build, live translation
    session = runtime.start_session(post_build, env.geometry)
    try:
        driver = env.driver_factory(runtime)
        screenshot = driver.screenshot(session)
        chat = llm.open_session("executor")
        while termination is None:
            if len(steps) >= max_ui:
                # batch ended exactly on the budget: one more turn may only declare completion
                termination = "ui_budget_exhausted"
                if turns < max_turns:
                    turns += 1
                    if _completes(scenario, screenshot, chat, llm, env.geometry, len(steps)):
                        termination = "completed"
                break
            if turns >= max_turns:
                termination = "llm_budget_exhausted"
                break

            turns += 1
            try:
                result = translate_next(
                    scenario,
                    screenshot,
                    chat,
                    llm,
                    geometry=env.geometry,
                    executed_steps=len(steps),
                    remaining_instructions=max_ui - len(steps),
                )
            except LlmFormatError as e:
                termination, error = "execution_error", str(e)
                break
            if isinstance(result, ScenarioComplete):
                termination = "completed"
                break

            logger.info(
                "[%s] turn %d/%d: %d instruction(s)", scenario.scenario_id, turns, max_turns, len(result)
            )
            for instr in result:
                if len(steps) >= max_ui:
                    termination = "ui_budget_exhausted"
                    break
                index = len(steps)
                try:
                    screenshot = execute_instruction(
                        instr, session, driver, settle_ms=env.settle_ms, sleep=env.sleep
                    )
                except DriverError as e:
                    termination, error = "execution_error", f"step {index}: {e}"
                    break
                name = f"step_{index}_post.png"
                steps.append(
                    StepRecord(
                        step_index=index,
                        instruction=instr,
                        post_screenshot=name,
                        post_sha256=_save_png(out_dir, name, screenshot),
                        llm_turn_index=turns - 1,
                    )
                )
    finally:
        runtime.teardown(session)

    # replay: pre-change build, recorded stream verbatim
    replay_failure_at: int | None = None
    replayed: list[UiInstruction] = []
    session = runtime.start_session(pre_build, env.geometry)
    try:
        driver = env.driver_factory(runtime)
        for step in steps:
            try:
                shot = execute_instruction(
                    step.instruction, session, driver, settle_ms=env.settle_ms, sleep=env.sleep
                )
            except DriverError as e:
                logger.warning(
                    "[%s] replay failed at step %d: %s", scenario.scenario_id, step.step_index, e
                )
                replay_failure_at = step.step_index
                break
            replayed.append(step.instruction)
            step.pre_screenshot = f"step_{step.step_index}_pre.png"
            step.pre_sha256 = _save_png(out_dir, step.pre_screenshot, shot)
    finally:
        runtime.teardown(session)

    trace = ExecutionTrace(
        scenario_id=scenario.scenario_id,
        steps=steps,
        termination=termination or "completed",
        llm_turns_used=turns,
        build_ids={"pre": pre_build.revision, "post": post_build.revision},
        replay_failure_at=replay_failure_at,
        error=error,
        play_stream_sha256=stream_sha256([s.instruction for s in steps]),
        replay_stream_sha256=stream_sha256(replayed),
    )
    logger.info(
        "[%s] %s after %d step(s), %d turn(s)",
        scenario.scenario_id,
        trace.termination,
        len(steps),
        turns,
    )
    return trace


def save_trace(trace: ExecutionTrace, out_dir: str | Path) -> Path:
    p = Path(out_dir) / "trace.json"
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(trace.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    return p


def load_trace(trace_dir: str | Path) -> ExecutionTrace:
    raw = json.loads((Path(trace_dir) / "trace.json").read_text(encoding="utf-8"))
    return ExecutionTrace.from_dict(raw)
