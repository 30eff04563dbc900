from __future__ import annotations

from pathlib import Path

import pytest

from conftest import sut_section
from ripple_difftest.config import (
    ConfigParseError,
    ConfigValidationError,
    apply_env_overrides,
    config_from_dict,
    config_to_dict,
    load_config,
)
from ripple_difftest.errors import UnknownRole


def _raw(**sections) -> dict:
    return {"sut": sut_section(), "models": {"generator": "gpt-4o", "filter": "gpt-4o-mini"}, **sections}


def test_defaults_match_documented_budgets() -> None:
    cfg = config_from_dict(_raw(), environ={})
    assert cfg.budgets.max_llm_turns_per_scenario == 20
    assert cfg.budgets.max_ui_instructions_per_scenario == 35
    assert cfg.budgets.max_scenarios_per_pr == 7
    assert cfg.budgets.pixel_diff_threshold == 30
    assert cfg.skb.chunk_tokens == 512
    assert cfg.skb.overlap_tokens == 64
    assert cfg.sut.display_geometry == (640, 480)


def test_detector_and_classifier_fall_back() -> None:
    cfg = config_from_dict(_raw(), environ={})
    assert cfg.models.resolve("detector").model == "gpt-4o"
    assert cfg.models.resolve("classifier").model == "gpt-4o-mini"
    with pytest.raises(UnknownRole):
        cfg.models.resolve("executor")
    with pytest.raises(UnknownRole):
        cfg.models.resolve("planner")


@pytest.mark.parametrize(
    ("mutate", "field"),
    [
        (lambda r: r["sut"].update(build_command="make"), "sut.build_command"),
        (lambda r: r["sut"].update(build_command="make {revision} {revision}"), "sut.build_command"),
        (lambda r: r["sut"].update(display_geometry=[100, 480]), "sut.display_geometry.width"),
        (lambda r: r["sut"].update(issue_tracker_kind="jira"), "sut.issue_tracker_kind"),
        (lambda r: r.update(budgets={"pixel_diff_threshold": 300}), "budgets.pixel_diff_threshold"),
        (lambda r: r.update(budgets={"max_llm_turns_per_scenario": 0}), "budgets.max_llm_turns_per_scenario"),
        (lambda r: r.update(skb={"chunk_tokens": 64, "overlap_tokens": 64}), "skb.chunk_tokens"),
        (lambda r: r.update(executor={"runtime": "lxc"}), "executor.runtime"),
        (lambda r: r.update(bogus={}), "bogus"),
    ],
)
def test_invalid_configs_name_the_field(mutate, field: str) -> None:
    raw = _raw()
    mutate(raw)
    with pytest.raises(ConfigValidationError) as exc:
        config_from_dict(raw, environ={})
    assert exc.value.field == field


def test_env_overrides_apply_per_section() -> None:
    env = {
        "RIPPLE_BUDGETS_PIXEL_DIFF_THRESHOLD": "12",
        "RIPPLE_EXECUTOR_RUNTIME": "podman",
        "RIPPLE_SUT_SETTLE_MS": "250",
        "UNRELATED": "1",
    }
    cfg = config_from_dict(_raw(), environ=env)
    assert cfg.budgets.pixel_diff_threshold == 12
    assert cfg.executor.runtime == "podman"
    assert cfg.settle_ms == 250


def test_env_override_does_not_mutate_input() -> None:
    raw = {"budgets": {"pixel_diff_threshold": 30}}
    out = apply_env_overrides(raw, {"RIPPLE_BUDGETS_PIXEL_DIFF_THRESHOLD": "5"})
    assert out["budgets"]["pixel_diff_threshold"] == 5
    assert raw["budgets"]["pixel_diff_threshold"] == 30


def test_settle_ms_falls_back_to_executor_setting() -> None:
    raw = _raw(executor={"settle_ms": 900})
    del raw["sut"]["settle_ms"]
    assert config_from_dict(raw, environ={}).settle_ms == 900


def test_model_entry_object_form_and_prices() -> None:
    raw = _raw(prices={"gpt-4o": {"input_per_1k": 0.0025, "output_per_1k": 0.01}})
    raw["models"]["executor"] = {"model": "ui-tars", "endpoint": "http://localhost:8000/v1"}
    cfg = config_from_dict(raw, environ={})
    assert cfg.models.resolve("executor").endpoint == "http://localhost:8000/v1"
    assert cfg.prices["gpt-4o"].output_per_1k == 0.01

    again = config_from_dict(config_to_dict(cfg), environ={})
    assert again == cfg


def test_load_config_reports_parse_errors(tmp_path: Path) -> None:
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigParseError):
        load_config(bad, environ={})
    with pytest.raises(ConfigParseError):
        load_config(tmp_path / "missing.json", environ={})


def test_bundled_mock_config_is_valid() -> None:
    root = Path(__file__).resolve().parent.parent
    cfg = load_config(root / "configs" / "mock-sut.json", environ={})
    assert cfg.executor.runtime == "local"
    assert cfg.models.resolve("detector").is_fake
