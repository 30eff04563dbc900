from __future__ import annotations

import json
import shutil
from pathlib import Path
from typing import Any

import pytest

from ripple_difftest.change_context import ChangeContext, CodeChange
from ripple_difftest.config import Config, ModelEndpoint, ModelRoles, config_from_dict
from ripple_difftest.diff_engine import DiffRegion, ParsedInfo
from ripple_difftest.executor import ExecutionTrace, StepRecord, UiInstruction
from ripple_difftest.llm_gateway import LlmGateway
from ripple_difftest.mock_sut import FixtureRepo, build_fixture_repo
from ripple_difftest.protocol import ChangeIntent
from ripple_difftest.vcs import FileChange

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures" / "mock-sut"
HISTORY = FIXTURES / "history.json"
SCRIPTS = FIXTURES / "scripts"

requires_git = pytest.mark.skipif(shutil.which("git") is None, reason="git executable not found")


def write_script(path: Path, records: list[dict[str, Any]]) -> str:
    """Write a scripted-provider file and return its `fake:` model id."""
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps({"records": records}, ensure_ascii=False, indent=2)
    path.write_text(payload, encoding="utf-8")
    return f"fake:{path}"


def gateway(tmp_path: Path, **scripts: list[dict[str, Any]]) -> LlmGateway:
    """Gateway whose roles each walk their own inline script; embeddings are hashed."""
    roles: dict[str, ModelEndpoint] = {"embedding": ModelEndpoint(model="fake:embedding")}
    for role, records in scripts.items():
        script = tmp_path / "scripts" / f"{role}.json"
        roles[role] = ModelEndpoint(model=write_script(script, records))
    return LlmGateway(ModelRoles(**roles), sleep=lambda _s: None)


def sut_section(**overrides: Any) -> dict[str, Any]:
    base = {
        "name": "quick-notes",
        "repo_location": "/tmp/does-not-matter",
        "container_image_ref": "local/none",
        "build_command": "sh build.sh {revision}",
        "launch_command": "mock-sut layout.json",
        "display_geometry": [640, 480],
        "issue_tracker_kind": "mock",
        "settle_ms": 0,
    }
    base.update(overrides)
    return base


def mock_config_dict(tmp_path: Path, fixture: FixtureRepo, **sut_overrides: Any) -> dict[str, Any]:
    return {
        "sut": sut_section(repo_location=str(fixture.repo_dir), **sut_overrides),
        "models": {
            role: f"fake:{SCRIPTS / f'{role}.json'}"
            for role in ("generator", "executor", "detector", "filter", "classifier")
        }
        | {"embedding": "fake:embedding"},
        "executor": {"runtime": "local", "workers": 2},
        "tracker": {"fixtures_dir": str(fixture.tracker_dir)},
        "llm": {"backoff_sec": 0.0},
        "paths": {
            "runs_root": str(tmp_path / "runs"),
            "cache_dir": str(tmp_path / "cache"),
        },
    }


def mock_config(tmp_path: Path, fixture: FixtureRepo, **sut_overrides: Any) -> Config:
    return config_from_dict(mock_config_dict(tmp_path, fixture, **sut_overrides), environ={})


@pytest.fixture
def fixture_repo(tmp_path: Path) -> FixtureRepo:
    if shutil.which("git") is None:
        pytest.skip("git executable not found")
    return build_fixture_repo(tmp_path / "fixture", HISTORY)


@pytest.fixture
def regression_free_repo(tmp_path: Path) -> FixtureRepo:
    if shutil.which("git") is None:
        pytest.skip("git executable not found")
    return build_fixture_repo(tmp_path / "fixture-clean", HISTORY, regression=False)


def sample_context(pr_id: str = "7") -> ChangeContext:
    """A hand-built change context for stages that do not touch git."""
    return ChangeContext(
        pr_id=pr_id,
        pr_intent=ChangeIntent(
            f"pr/{pr_id}", "Keep saved notes in their own profile folder", "", "2024-03-01T10:00:00"
        ),
        resolved_issues=[ChangeIntent("issue/6", "Notes clutter home", "", "2024-02-20")],
        code_change=CodeChange(
            ["Keep saved notes in their own profile folder"],
            [FileChange("app/layout.json", "app/layout.json", "@@ -7 +7 @@\n-old\n+new\n")],
        ),
        preceding=[],
        pre_revision="c6",
        post_revision="c7",
    )


def paired_trace(n_steps: int, scenario_id: str = "S01") -> ExecutionTrace:
    click = UiInstruction.from_dict({"kind": "click", "position": [10, 10]})
    steps = [
        StepRecord(
            step_index=i,
            instruction=click,
            post_screenshot=f"step_{i}_post.png",
            post_sha256="0" * 64,
            llm_turn_index=0,
            pre_screenshot=f"step_{i}_pre.png",
            pre_sha256="1" * 64,
        )
        for i in range(n_steps)
    ]
    return ExecutionTrace(scenario_id, steps, "completed", 1, {"pre": "c6", "post": "c7"})


def parsed_step(step_index: int, *pixel_counts: int) -> ParsedInfo:
    regions = [
        DiffRegion(index=i, bbox=(i * 20, 0, i * 20 + 10, 10), pixel_count=n)
        for i, n in enumerate(pixel_counts)
    ]
    return ParsedInfo(step_index=step_index, regions=regions, image_dims=(640, 480))
