"""Resumable per-PR pipeline: ingest -> generate -> execute -> diff -> detect -> filter -> report.

Every stage reads its predecessors' artifacts from the run directory and writes
its own under `<run_dir>/<stage>/`; the manifest records stage status, timing,
failure records and the usage meter, so a re-invocation resumes at the first
stage that is not done.
"""

from __future__ import annotations

import json
import logging
import shutil
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any

from .bug_filter import FilterResult, filter_reports
from .change_context import ChangeContext, fetch_change_context, intent_cutoff
from .config import Config, config_to_dict
from .diff_engine import ParsedInfo, write_comparison
from .drivers import XdotoolDriver
from .errors import StageFailed, StageNotReady, classify_failure
from .executor import ExecutionEnv, ExecutionTrace, build_sut, load_trace, run_scenario, save_trace
from .llm_gateway import LlmGateway
from .manifest import STAGES, RunManifest, RunPaths, new_manifest
from .oracle import BugReport, DetectionResult, detect_bugs
from .protocol import ContainerRuntime, InputDriver, IssueTrackerClient
from .report import emit_report
from .runtimes import available_runtimes
from .scenario_pipeline import (
    ScenarioBatch,
    enrich_event_sequences,
    enrich_test_data,
    generate_scenarios,
)
from .skb import SkbIndex, load_index
from .trackers import available_trackers
from .validation import forbidden_code_tokens
from .vcs import GitClient

logger = logging.getLogger(__name__)


def default_run_id(pr_id: str) -> str:
    return f"pr-{pr_id}"


def _write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    return path


def _read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


class Pipeline:
    """One PR's run directory plus the adapters its stages need.

    Adapters are created lazily from the config unless injected, so stages that
    only read artifacts (diff, report) never touch the tracker, repo or runtime.
    """

    def __init__(
        self,
        cfg: Config,
        pr_id: str,
        *,
        run_dir: str | Path | None = None,
        workers: int | None = None,
        llm: LlmGateway | None = None,
        tracker: IssueTrackerClient | None = None,
        repo: GitClient | None = None,
        runtime: ContainerRuntime | None = None,
        driver_factory: Callable[[ContainerRuntime], InputDriver] = XdotoolDriver,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.cfg = cfg
        self.pr_id = str(pr_id)
        root = Path(run_dir) if run_dir else Path(cfg.paths.runs_root) / default_run_id(self.pr_id)
        self.paths = RunPaths(root)
        self.workers = workers or cfg.executor.workers
        self.driver_factory = driver_factory
        self.sleep = sleep
        self._llm = llm
        self._tracker = tracker
        self._repo = repo
        self._runtime = runtime

        if (root / "manifest.json").is_file():
            self.manifest = RunManifest.load(root)
            if self.manifest.pr_id != self.pr_id:
                raise ValueError(
                    f"run directory {root} belongs to PR {self.manifest.pr_id}, not {self.pr_id}"
                )
        else:
            self.manifest = new_manifest(
                run_id=root.name,
                pr_id=self.pr_id,
                config=config_to_dict(cfg),
                repo_dir=Path(__file__).resolve().parent,
            )
        if self._llm is not None and self.manifest.meter_snapshot:
            self._llm.meter.restore(self.manifest.meter_snapshot)

    # adapters

    @property
    def llm(self) -> LlmGateway:
        if self._llm is None:
            self._llm = LlmGateway.from_config(self.cfg, audit_dir=self.paths.audit_dir)
            if self.manifest.meter_snapshot:
                self._llm.meter.restore(self.manifest.meter_snapshot)
        return self._llm

    @property
    def tracker(self) -> IssueTrackerClient:
        if self._tracker is None:
            cls = available_trackers()[self.cfg.sut.issue_tracker_kind]
            self._tracker = cls(self.cfg.tracker)
        return self._tracker

    @property
    def repo(self) -> GitClient:
        if self._repo is None:
            self._repo = GitClient.ensure_local(self.cfg.sut.repo_location, self.cfg.paths.cache_dir)
        return self._repo

    @property
    def runtime(self) -> ContainerRuntime:
        if self._runtime is None:
            cls = available_runtimes()[self.cfg.executor.runtime]
            self._runtime = cls(
                self.cfg.executor,
                repo=self.repo,
                work_dir=Path(self.cfg.paths.cache_dir) / "runtime",
            )
        return self._runtime

    # stage control

    def _save(self) -> None:
        if self._llm is not None:
            self.manifest.meter_snapshot = self._llm.meter.snapshot()
        self.manifest.save(self.paths.root)

    def _clear(self, stages: Sequence[str]) -> None:
        for s in stages:
            d = self.paths.stage_dir(s)
            if d.exists():
                shutil.rmtree(d)

    def run_stage(self, stage: str, *, force: bool = False) -> Path | None:
        """Run one stage; returns its artifact path, or None when it was already done."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage: {stage}")
        if force:
            reset = self.manifest.reset_from(stage)
            self._clear(reset)
            logger.info("forcing %s; reset %s", stage, ", ".join(reset))
        elif self.manifest.is_done(stage):
            logger.info("stage %s already done, skipping", stage)
            return None

        missing = self.manifest.predecessors_done(stage)
        if missing:
            raise StageNotReady(f"stage {stage} needs {', '.join(missing)} to be done first")

        # a failed or interrupted attempt may have left partial output
        self._clear([stage])
        self.manifest.mark_started(stage)
        self._save()
        logger.info("stage %s: start", stage)
        handler = getattr(self, f"_stage_{stage}")
        try:
            artifact = handler()
        except Exception as e:
            failure = classify_failure(e, stage=stage)
            self.manifest.mark_failed(stage, failure)
            self._save()
            logger.error("stage %s failed (%s): %s", stage, failure["error_code"], e)
            raise StageFailed(stage, failure) from e
        self.manifest.mark_done(stage, artifact.relative_to(self.paths.root).as_posix())
        self._save()
        logger.info("stage %s: done", stage)
        return artifact

    def run(self, *, force: bool = False, until: str | None = None) -> RunManifest:
        if force:
            self._clear(self.manifest.reset_from(STAGES[0]))
        for stage in STAGES:
            self.run_stage(stage)
            if stage == until:
                break
        return self.manifest

    # artifacts

    def change_context(self) -> ChangeContext:
        return ChangeContext.from_dict(_read_json(self.paths.change_context))

    def scenarios(self) -> ScenarioBatch:
        return ScenarioBatch.from_dict(_read_json(self.paths.scenarios))

    def traces(self) -> list[ExecutionTrace]:
        out = []
        for s in self.scenarios().scenarios:
            d = self.paths.trace_dir(s.scenario_id)
            if (d / "trace.json").is_file():
                out.append(load_trace(d))
        return out

    def parsed_infos(self, trace: ExecutionTrace) -> list[ParsedInfo]:
        d = self.paths.diff_dir(trace.scenario_id)
        return [
            ParsedInfo.from_dict(_read_json(d / f"{self.paths.step_stem(s.step_index)}.json"))
            for s in trace.paired_steps()
        ]

    def annotated_pairs(self, trace: ExecutionTrace) -> list[tuple[bytes, bytes]]:
        d = self.paths.diff_dir(trace.scenario_id)
        pairs = []
        for s in trace.paired_steps():
            stem = self.paths.step_stem(s.step_index)
            pairs.append(
                (
                    (d / f"{stem}_pre.annotated.png").read_bytes(),
                    (d / f"{stem}_post.annotated.png").read_bytes(),
                )
            )
        return pairs

    # stages

    def _stage_ingest(self) -> Path:
        ctx = fetch_change_context(
            self.pr_id,
            self.tracker,
            self.repo,
            issue_key_pattern=self.cfg.tracker.issue_key_pattern,
        )
        for w in ctx.warnings:
            logger.warning("ingest: %s", w)
        return _write_json(self.paths.change_context, ctx.to_dict())

    def _stage_generate(self) -> Path:
        ctx = self.change_context()
        out = self.paths.stage_dir("generate")
        batch = generate_scenarios(ctx, self.llm, max_scenarios=self.cfg.budgets.max_scenarios_per_pr)
        _write_json(out / "generated.json", batch.to_dict())

        index = self._skb_index()
        batch = enrich_event_sequences(
            batch,
            index,
            self.llm,
            intent_cutoff(ctx),
            settings=self.cfg.skb,
            forbidden=forbidden_code_tokens(ctx.code_change.paths),
        )
        _write_json(out / "event_enriched.json", batch.to_dict())

        batch = enrich_test_data(batch, self.llm)
        return _write_json(self.paths.scenarios, batch.to_dict())

    def _skb_index(self) -> SkbIndex:
        location = self.cfg.paths.skb_index
        if location and Path(location).is_file():
            return load_index(location)
        if location:
            logger.warning("SKB index %s not found; enriching without historical context", location)
        return SkbIndex.empty(self.cfg.llm.embedding_dim)

    def _stage_execute(self) -> Path:
        ctx = self.change_context()
        batch = self.scenarios()
        runtime = self.runtime
        pre = build_sut(self.cfg.sut, ctx.pre_revision, runtime)
        post = build_sut(self.cfg.sut, ctx.post_revision, runtime)

        def _one(idx: int, scenario: Any) -> dict[str, Any]:
            logger.info("[%d/%d] %s :: play/replay", idx, len(batch.scenarios), scenario.scenario_id)
            env = ExecutionEnv(
                geometry=self.cfg.sut.display_geometry,
                driver_factory=self.driver_factory,
                out_dir=self.paths.trace_dir(scenario.scenario_id),
                settle_ms=self.cfg.settle_ms,
                sleep=self.sleep,
            )
            trace = run_scenario(
                scenario, post, pre, self.cfg.budgets, self.llm, runtime, env=env
            )
            save_trace(trace, env.out_dir)
            return {
                "scenario_id": trace.scenario_id,
                "termination": trace.termination,
                "steps": len(trace.steps),
                "replay_failure_at": trace.replay_failure_at,
            }

        rows, failures, errors = self._pooled(
            list(enumerate(batch.scenarios, start=1)),
            lambda item: _one(*item),
            key=lambda item: item[1].scenario_id,
            phase="execute",
        )
        index = {
            "pre_revision": ctx.pre_revision,
            "post_revision": ctx.post_revision,
            "traces": rows,
            "failures": failures,
        }
        path = _write_json(self.paths.stage_dir("execute") / "index.json", index)
        if errors:
            raise errors[0]
        return path

    def _stage_diff(self) -> Path:
        rows = []
        for trace in self.traces():
            src = self.paths.trace_dir(trace.scenario_id)
            dst = self.paths.diff_dir(trace.scenario_id)
            dst.mkdir(parents=True, exist_ok=True)
            region_counts = []
            for step in trace.paired_steps():
                parsed = write_comparison(
                    src / str(step.pre_screenshot),
                    src / step.post_screenshot,
                    dst,
                    threshold=self.cfg.budgets.pixel_diff_threshold,
                    radius=self.cfg.diff.radius,
                    step_index=step.step_index,
                    stem=self.paths.step_stem(step.step_index),
                )
                region_counts.append(len(parsed.regions))
            rows.append({"scenario_id": trace.scenario_id, "regions_per_step": region_counts})
        return _write_json(self.paths.stage_dir("diff") / "index.json", {"traces": rows})

    def _stage_detect(self) -> Path:
        ctx = self.change_context()
        analysis = self.scenarios().analysis
        traces = self.traces()

        def _one(trace: ExecutionTrace) -> dict[str, Any]:
            result = detect_bugs(
                trace,
                self.parsed_infos(trace),
                self.annotated_pairs(trace),
                ctx,
                analysis,
                self.llm,
                max_prompt_regions=self.cfg.diff.max_prompt_regions,
            )
            _write_json(self.paths.detection(trace.scenario_id), result.to_dict())
            return {
                "scenario_id": trace.scenario_id,
                "verdicts": len(result.verdicts),
                "candidates": [c.report_id for c in result.candidates],
            }

        rows, failures, errors = self._pooled(
            traces, _one, key=lambda t: t.scenario_id, phase="detect"
        )
        path = _write_json(
            self.paths.stage_dir("detect") / "index.json", {"traces": rows, "failures": failures}
        )
        if errors:
            raise errors[0]
        return path

    def _stage_filter(self) -> Path:
        candidates: list[BugReport] = []
        images: dict[str, list[tuple[str, bytes]]] = {}
        for s in self.scenarios().scenarios:
            p = self.paths.detection(s.scenario_id)
            if not p.is_file():
                continue
            detection = DetectionResult.from_dict(_read_json(p))
            d = self.paths.diff_dir(s.scenario_id)
            for report in detection.candidates:
                candidates.append(report)
                images[report.report_id] = [
                    (f"step {step} {side}", (d / f"step_{step}_{side}.annotated.png").read_bytes())
                    for step in report.steps
                    for side in ("pre", "post")
                ]
        result = filter_reports(candidates, self.llm, evidence_images=images)
        return _write_json(self.paths.filter_result, result.to_dict())

    def _stage_report(self) -> Path:
        # the report reads meter totals from the manifest
        self.manifest.meter_snapshot = self.llm.meter.snapshot()
        emit_report(self.manifest, self.paths.root)
        return self.paths.report_dir / "summary.json"

    # helpers

    def _pooled(
        self,
        items: Sequence[Any],
        fn: Callable[[Any], dict[str, Any]],
        *,
        key: Callable[[Any], str],
        phase: str,
    ) -> tuple[list[dict[str, Any]], list[dict[str, Any]], list[Exception]]:
        """Run `fn` over items on the worker pool; rows keep input order."""
        rows: list[dict[str, Any]] = []
        failures: list[dict[str, Any]] = []
        errors: list[Exception] = []
        with ThreadPoolExecutor(max_workers=max(1, self.workers)) as pool:
            futures = [(item, pool.submit(fn, item)) for item in items]
            for item, fut in futures:
                try:
                    rows.append(fut.result())
                except Exception as e:
                    failures.append({"scenario_id": key(item), **classify_failure(e, stage=phase)})
                    errors.append(e)
                    logger.error("  ! %s failed for %s: %s", phase, key(item), e)
        return rows, failures, errors

    def filter_result(self) -> FilterResult:
        return FilterResult.from_dict(_read_json(self.paths.filter_result))


def run_pipeline(pr_id: str, cfg: Config, **kwargs: Any) -> RunManifest:
    force = bool(kwargs.pop("force", False))
    return Pipeline(cfg, pr_id, **kwargs).run(force=force)
