from __future__ import annotations

import hashlib
import json
import platform
import subprocess
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone

UTC = timezone.utc
from pathlib import Path
from typing import Any

from . import __version__

SCHEMA = "ripple-difftest/run-manifest/v0.1"
MANIFEST_NAME = "manifest.json"

STAGES = ("ingest", "generate", "execute", "diff", "detect", "filter", "report")
STAGE_STATES = ("pending", "done", "failed")

_SECRET_HINTS = ("token", "secret", "password", "apikey", "api_key")
# Names of environment variables are fine to record; their values never reach config.
_SECRET_ALLOW_SUFFIXES = ("_env_var",)


def _now_utc() -> str:
    return datetime.now(UTC).isoformat()


def _looks_secret(key: str) -> bool:
    k = key.lower()
    if k.endswith(_SECRET_ALLOW_SUFFIXES):
        return False
    return any(h in k for h in _SECRET_HINTS)


def sanitize_config(config: dict[str, Any]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in config.items():
        if _looks_secret(key):
            out[key] = "***REDACTED***"
            continue
        out[key] = sanitize_config(value) if isinstance(value, dict) else value
    return out


def file_sha256(path: str | Path) -> str:
    p = Path(path)
    h = hashlib.sha256()
    with p.open("rb") as f:
        for chunk in iter(lambda: f.read(1024 * 1024), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_git_commit(repo_dir: str | Path) -> str | None:
    try:
        cp = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=str(repo_dir),
            capture_output=True,
            text=True,
            check=True,
        )
        commit = cp.stdout.strip()
        return commit or None
    except Exception:
        return None


@dataclass
class RunManifest:
    run_id: str
    pr_id: str
    stage_status: dict[str, str] = field(default_factory=lambda: dict.fromkeys(STAGES, "pending"))
    timestamps: dict[str, dict[str, str]] = field(default_factory=dict)
    artifact_paths: dict[str, str] = field(default_factory=dict)
    meter_snapshot: dict[str, dict[str, Any]] = field(default_factory=dict)
    failures: dict[str, dict[str, Any]] = field(default_factory=dict)
    config: dict[str, Any] = field(default_factory=dict)
    toolkit: dict[str, Any] = field(default_factory=dict)
    runtime: dict[str, Any] = field(default_factory=dict)
    created_at_utc: str = field(default_factory=_now_utc)

    def is_done(self, stage: str) -> bool:
        return self.stage_status.get(stage) == "done"

    def predecessors_done(self, stage: str) -> list[str]:
        """Predecessor stages that are not done yet (empty list means runnable)."""
        idx = STAGES.index(stage)
        return [s for s in STAGES[:idx] if not self.is_done(s)]

    def mark_started(self, stage: str) -> None:
        self.timestamps[stage] = {"started_at": _now_utc()}
        self.failures.pop(stage, None)

    def mark_done(self, stage: str, artifact_path: str) -> None:
        self.stage_status[stage] = "done"
        self.timestamps.setdefault(stage, {})["finished_at"] = _now_utc()
        self.artifact_paths[stage] = artifact_path

    def mark_failed(self, stage: str, failure: dict[str, Any]) -> None:
        self.stage_status[stage] = "failed"
        self.timestamps.setdefault(stage, {})["finished_at"] = _now_utc()
        self.failures[stage] = failure

    def reset_from(self, stage: str) -> list[str]:
        """Set `stage` and every later stage back to pending; returns those stages."""
        idx = STAGES.index(stage)
        reset = list(STAGES[idx:])
        for s in reset:
            self.stage_status[s] = "pending"
            self.timestamps.pop(s, None)
            self.artifact_paths.pop(s, None)
            self.failures.pop(s, None)
        return reset

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": SCHEMA,
            "run_id": self.run_id,
            "pr_id": self.pr_id,
            "created_at_utc": self.created_at_utc,
            "toolkit": self.toolkit,
            "runtime": self.runtime,
            "config": self.config,
            "stage_status": {s: self.stage_status.get(s, "pending") for s in STAGES},
            "timestamps": self.timestamps,
            "artifact_paths": self.artifact_paths,
            "failures": self.failures,
            "meter_snapshot": self.meter_snapshot,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> RunManifest:
        if raw.get("schema") != SCHEMA:
            raise ValueError(f"unsupported manifest schema: {raw.get('schema')!r}")
        status = {s: str(raw.get("stage_status", {}).get(s, "pending")) for s in STAGES}
        for s, v in status.items():
            if v not in STAGE_STATES:
                raise ValueError(f"manifest: stage {s} has unknown status {v!r}")
        return cls(
            run_id=str(raw["run_id"]),
            pr_id=str(raw["pr_id"]),
            stage_status=status,
            timestamps=dict(raw.get("timestamps", {})),
            artifact_paths=dict(raw.get("artifact_paths", {})),
            meter_snapshot=dict(raw.get("meter_snapshot", {})),
            failures=dict(raw.get("failures", {})),
            config=dict(raw.get("config", {})),
            toolkit=dict(raw.get("toolkit", {})),
            runtime=dict(raw.get("runtime", {})),
            created_at_utc=str(raw.get("created_at_utc") or _now_utc()),
        )

    def save(self, run_dir: str | Path) -> Path:
        p = Path(run_dir) / MANIFEST_NAME
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
        tmp.replace(p)
        return p

    @classmethod
    def load(cls, run_dir: str | Path) -> RunManifest:
        p = Path(run_dir) / MANIFEST_NAME
        return cls.from_dict(json.loads(p.read_text(encoding="utf-8")))


def new_manifest(
    *, run_id: str, pr_id: str, config: dict[str, Any], repo_dir: str | Path
) -> RunManifest:
    return RunManifest(
        run_id=run_id,
        pr_id=pr_id,
        config=sanitize_config(config),
        toolkit={
            "name": "ripple-difftest",
            "version": __version__,
            "git_commit": resolve_git_commit(repo_dir),
        },
        runtime={
            "python": platform.python_version(),
            "platform": platform.platform(),
            "executable": sys.executable,
        },
    )


@dataclass(frozen=True)
class RunPaths:
    """The run directory layout shared by every stage."""

    root: Path

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage

    @property
    def change_context(self) -> Path:
        return self.root / "ingest" / "change_context.json"

    @property
    def scenarios(self) -> Path:
        return self.root / "generate" / "scenarios.json"

    def trace_dir(self, scenario_id: str) -> Path:
        return self.root / "execute" / scenario_id

    def diff_dir(self, scenario_id: str) -> Path:
        return self.root / "diff" / scenario_id

    def detection(self, scenario_id: str) -> Path:
        return self.root / "detect" / f"{scenario_id}.json"

    @property
    def filter_result(self) -> Path:
        return self.root / "filter" / "filter.json"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    @property
    def audit_dir(self) -> Path:
        return self.root / "audit"

    def step_stem(self, step_index: int) -> str:
        return f"step_{step_index}"
