from __future__ import annotations

import json
import os
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import RippleError, UnknownRole
from .validation import SchemaValidationError, _is_int, _is_number, _require, _require_non_empty_str

ENV_PREFIX = "RIPPLE_"
TRACKER_KINDS = ("github", "bugzilla", "mock")
RUNTIME_KINDS = ("docker", "podman", "local")
MODEL_ROLES = ("generator", "executor", "detector", "filter", "classifier", "embedding")
FAKE_PREFIX = "fake:"

_MIN_DIM = 320
_MAX_DIM = 8192


class ConfigParseError(RippleError):
    code = "CONFIG_PARSE_ERROR"
    category = "config"


class ConfigValidationError(SchemaValidationError):
    code = "CONFIG_VALIDATION_ERROR"
    category = "config"
    retryable = False

    def __init__(self, errors: list[str]) -> None:
        self.field = errors[0].split(":", 1)[0] if errors else ""
        super().__init__(errors)


@dataclass(frozen=True)
class SutConfig:
    name: str
    repo_location: str
    container_image_ref: str
    build_command: str
    launch_command: str
    display_geometry: tuple[int, int]
    issue_tracker_kind: str
    settle_ms: int | None = None


@dataclass(frozen=True)
class Budgets:
    max_llm_turns_per_scenario: int = 20
    max_ui_instructions_per_scenario: int = 35
    max_scenarios_per_pr: int = 7
    pixel_diff_threshold: int = 30


@dataclass(frozen=True)
class ModelEndpoint:
    model: str
    endpoint: str | None = None
    api_key_env_var: str | None = None

    @property
    def is_fake(self) -> bool:
        return self.model.startswith(FAKE_PREFIX)


@dataclass(frozen=True)
class ModelRoles:
    generator: ModelEndpoint | None = None
    executor: ModelEndpoint | None = None
    detector: ModelEndpoint | None = None
    filter: ModelEndpoint | None = None
    classifier: ModelEndpoint | None = None
    embedding: ModelEndpoint | None = None

    def resolve(self, role: str) -> ModelEndpoint:
        if role not in MODEL_ROLES:
            raise UnknownRole(f"unknown role: {role}")
        entry = getattr(self, role)
        if entry is None:
            raise UnknownRole(f"role not configured: {role}")
        return entry


@dataclass(frozen=True)
class Price:
    input_per_1k: float = 0.0
    output_per_1k: float = 0.0
    per_image: float = 0.0


@dataclass(frozen=True)
class SkbSettings:
    chunk_tokens: int = 512
    overlap_tokens: int = 64
    timestamp_ratio: float = 0.30
    stop_keywords: tuple[str, ...] = ("intermittent",)
    queries_per_batch: int = 5
    k: int = 8
    embed_attempts: int = 3
    max_steps: int = 15


@dataclass(frozen=True)
class DiffSettings:
    radius: int = 3
    max_prompt_regions: int = 40


@dataclass(frozen=True)
class ExecutorSettings:
    runtime: str = "docker"
    runtime_executable: str = "docker"
    settle_ms: int = 800
    workers: int = 2


@dataclass(frozen=True)
class TrackerSettings:
    base_url: str | None = None
    project: str | None = None
    token_env_var: str | None = None
    fixtures_dir: str | None = None
    issue_key_pattern: str = r"(?:[Bb]ug|#)\s*(\d+)"
    max_attempts: int = 3
    backoff_sec: float = 1.0


@dataclass(frozen=True)
class LlmSettings:
    max_attempts: int = 3
    backoff_sec: float = 1.0
    audit: bool = True
    embedding_dim: int = 64


@dataclass(frozen=True)
class PathSettings:
    runs_root: str = "runs"
    skb_index: str | None = None
    cache_dir: str = ".ripple-cache"


@dataclass(frozen=True)
class Config:
    sut: SutConfig
    budgets: Budgets = field(default_factory=Budgets)
    models: ModelRoles = field(default_factory=ModelRoles)
    prices: Mapping[str, Price] = field(default_factory=dict)
    skb: SkbSettings = field(default_factory=SkbSettings)
    diff: DiffSettings = field(default_factory=DiffSettings)
    executor: ExecutorSettings = field(default_factory=ExecutorSettings)
    tracker: TrackerSettings = field(default_factory=TrackerSettings)
    llm: LlmSettings = field(default_factory=LlmSettings)
    paths: PathSettings = field(default_factory=PathSettings)

    @property
    def settle_ms(self) -> int:
        if self.sut.settle_ms is not None:
            return self.sut.settle_ms
        return self.executor.settle_ms


_SECTIONS: dict[str, type] = {
    "budgets": Budgets,
    "skb": SkbSettings,
    "diff": DiffSettings,
    "executor": ExecutorSettings,
    "tracker": TrackerSettings,
    "llm": LlmSettings,
    "paths": PathSettings,
}


def _parse_env_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env_overrides(raw: dict[str, Any], environ: Mapping[str, str]) -> dict[str, Any]:
    """Apply `RIPPLE_<SECTION>_<KEY>` variables onto the parsed file.

    Section names never contain an underscore, so the first `_` after the prefix
    splits section from key.
    """
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, sep, key = rest.partition("_")
        if not sep or not key or section not in ("sut", "models", *_SECTIONS):
            continue
        target = out.setdefault(section, {})
        if not isinstance(target, dict):
            continue
        target[key] = _parse_env_value(environ[name])
    return out


def _model_entry(value: Any, path: str, errors: list[str]) -> ModelEndpoint | None:
    if value is None:
        return None
    if isinstance(value, str):
        _require_non_empty_str(value, path, errors)
        return ModelEndpoint(model=value) if value.strip() else None
    if not isinstance(value, dict):
        errors.append(f"{path}: must be a model identifier or an object")
        return None
    _require_non_empty_str(value.get("model"), f"{path}.model", errors)
    for key in ("endpoint", "api_key_env_var"):
        v = value.get(key)
        _require(v is None or isinstance(v, str), f"{path}.{key}", "must be a string", errors)
    for key in value:
        _require(key in ("model", "endpoint", "api_key_env_var"), f"{path}.{key}", "unknown key", errors)
    if not isinstance(value.get("model"), str):
        return None
    return ModelEndpoint(
        model=value["model"],
        endpoint=value.get("endpoint"),
        api_key_env_var=value.get("api_key_env_var"),
    )


def _build_section(cls: type, raw: Any, path: str, errors: list[str]) -> Any:
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        errors.append(f"{path}: must be an object")
        return cls()

    defaults = cls()
    kwargs: dict[str, Any] = {}
    known = {f.name for f in fields(cls)}
    for key, value in raw.items():
        if key not in known:
            errors.append(f"{path}.{key}: unknown key")
            continue
        default = getattr(defaults, key)
        if isinstance(default, tuple):
            if not isinstance(value, list) or not all(isinstance(x, str) for x in value):
                errors.append(f"{path}.{key}: must be a list of strings")
                continue
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                errors.append(f"{path}.{key}: must be a boolean")
                continue
        elif isinstance(default, int):
            if not _is_int(value):
                errors.append(f"{path}.{key}: must be an integer")
                continue
        elif isinstance(default, float):
            if not _is_number(value):
                errors.append(f"{path}.{key}: must be a number")
                continue
            value = float(value)
        elif value is not None and not isinstance(value, str):
            errors.append(f"{path}.{key}: must be a string")
            continue
        kwargs[key] = value
    return cls(**{**asdict(defaults), **kwargs})


def _build_sut(raw: Any, errors: list[str]) -> SutConfig | None:
    if not isinstance(raw, dict):
        errors.append("sut: must be an object")
        return None

    for key in ("name", "repo_location", "container_image_ref", "build_command", "launch_command"):
        _require_non_empty_str(raw.get(key), f"sut.{key}", errors)

    build = raw.get("build_command")
    if isinstance(build, str):
        _require(
            build.count("{revision}") == 1,
            "sut.build_command",
            "must contain exactly one {revision} placeholder",
            errors,
        )

    geometry = raw.get("display_geometry")
    dims: tuple[int, int] = (0, 0)
    if (
        isinstance(geometry, list)
        and len(geometry) == 2
        and all(_is_int(v) for v in geometry)
    ):
        dims = (int(geometry[0]), int(geometry[1]))
        for axis, v in zip(("width", "height"), dims):
            _require(
                _MIN_DIM <= v <= _MAX_DIM,
                f"sut.display_geometry.{axis}",
                f"must be in [{_MIN_DIM}, {_MAX_DIM}]",
                errors,
            )
    else:
        errors.append("sut.display_geometry: must be [width, height] integers")

    kind = raw.get("issue_tracker_kind")
    _require(kind in TRACKER_KINDS, "sut.issue_tracker_kind", f"must be one of {list(TRACKER_KINDS)}", errors)

    settle = raw.get("settle_ms")
    _require(settle is None or (_is_int(settle) and settle >= 0), "sut.settle_ms", "must be >= 0", errors)

    known = {f.name for f in fields(SutConfig)}
    for key in raw:
        _require(key in known, f"sut.{key}", "unknown key", errors)

    if errors:
        return None
    return SutConfig(
        name=raw["name"],
        repo_location=raw["repo_location"],
        container_image_ref=raw["container_image_ref"],
        build_command=raw["build_command"],
        launch_command=raw["launch_command"],
        display_geometry=dims,
        issue_tracker_kind=kind,
        settle_ms=settle,
    )


def _validate_settings(cfg_parts: dict[str, Any], errors: list[str]) -> None:
    b: Budgets = cfg_parts["budgets"]
    for name in ("max_llm_turns_per_scenario", "max_ui_instructions_per_scenario", "max_scenarios_per_pr"):
        _require(getattr(b, name) > 0, f"budgets.{name}", "must be a positive integer", errors)
    _require(0 <= b.pixel_diff_threshold <= 255, "budgets.pixel_diff_threshold", "must be in [0, 255]", errors)

    s: SkbSettings = cfg_parts["skb"]
    _require(s.overlap_tokens >= 0, "skb.overlap_tokens", "must be >= 0", errors)
    _require(s.chunk_tokens > s.overlap_tokens, "skb.chunk_tokens", "must exceed overlap_tokens", errors)
    _require(0.0 <= s.timestamp_ratio <= 1.0, "skb.timestamp_ratio", "must be in [0, 1]", errors)
    for name in ("queries_per_batch", "k", "embed_attempts", "max_steps"):
        _require(getattr(s, name) > 0, f"skb.{name}", "must be a positive integer", errors)

    d: DiffSettings = cfg_parts["diff"]
    _require(d.radius >= 0, "diff.radius", "must be >= 0", errors)
    _require(d.max_prompt_regions > 0, "diff.max_prompt_regions", "must be a positive integer", errors)

    e: ExecutorSettings = cfg_parts["executor"]
    _require(e.runtime in RUNTIME_KINDS, "executor.runtime", f"must be one of {list(RUNTIME_KINDS)}", errors)
    _require(e.workers > 0, "executor.workers", "must be a positive integer", errors)
    _require(e.settle_ms >= 0, "executor.settle_ms", "must be >= 0", errors)

    t: TrackerSettings = cfg_parts["tracker"]
    _require(t.max_attempts > 0, "tracker.max_attempts", "must be a positive integer", errors)

    lm: LlmSettings = cfg_parts["llm"]
    _require(lm.max_attempts > 0, "llm.max_attempts", "must be a positive integer", errors)
    _require(lm.backoff_sec >= 0, "llm.backoff_sec", "must be >= 0", errors)
    _require(lm.embedding_dim > 0, "llm.embedding_dim", "must be a positive integer", errors)


def config_from_dict(raw: Any, *, environ: Mapping[str, str] | None = None) -> Config:
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigValidationError(["config: must be an object"])

    raw = apply_env_overrides(raw, os.environ if environ is None else environ)

    for key in raw:
        _require(
            key in ("sut", "models", "prices", *_SECTIONS),
            key,
            "unknown section",
            errors,
        )

    sut = _build_sut(raw.get("sut"), errors)
    parts = {name: _build_section(cls, raw.get(name), name, errors) for name, cls in _SECTIONS.items()}

    models_raw = raw.get("models") or {}
    if not isinstance(models_raw, dict):
        errors.append("models: must be an object")
        models_raw = {}
    entries: dict[str, ModelEndpoint | None] = {}
    for role in models_raw:
        _require(role in MODEL_ROLES, f"models.{role}", "unknown role", errors)
    for role in MODEL_ROLES:
        entries[role] = _model_entry(models_raw.get(role), f"models.{role}", errors)
    if entries["detector"] is None:
        entries["detector"] = entries["generator"]
    if entries["classifier"] is None:
        entries["classifier"] = entries["filter"]

    prices_raw = raw.get("prices") or {}
    prices: dict[str, Price] = {}
    if not isinstance(prices_raw, dict):
        errors.append("prices: must be an object")
    else:
        for model_id, entry in sorted(prices_raw.items()):
            price = _build_section(Price, entry, f"prices.{model_id}", errors)
            for name in ("input_per_1k", "output_per_1k", "per_image"):
                _require(getattr(price, name) >= 0, f"prices.{model_id}.{name}", "must be >= 0", errors)
            prices[model_id] = price

    _validate_settings(parts, errors)

    if errors or sut is None:
        raise ConfigValidationError(errors or ["sut: invalid"])

    return Config(sut=sut, models=ModelRoles(**entries), prices=prices, **parts)


def load_config(path: str | Path, *, environ: Mapping[str, str] | None = None) -> Config:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigParseError(f"cannot read config {p}: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigParseError(f"malformed config {p}: {e}") from e
    return config_from_dict(raw, environ=environ)


def config_to_dict(cfg: Config) -> dict[str, Any]:
    out: dict[str, Any] = {
        "sut": {**asdict(cfg.sut), "display_geometry": list(cfg.sut.display_geometry)},
        "models": {
            role: asdict(entry)
            for role in MODEL_ROLES
            if (entry := getattr(cfg.models, role)) is not None
        },
        "prices": {k: asdict(v) for k, v in sorted(cfg.prices.items())},
    }
    for name in _SECTIONS:
        section = asdict(getattr(cfg, name))
        out[name] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in section.items()}
    return out
