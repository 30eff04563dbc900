from __future__ import annotations

import argparse
import json
import logging
import platform
import shutil
import sys
from collections import Counter
from datetime import datetime, timezone

UTC = timezone.utc
from pathlib import Path
from typing import Any

from .config import Budgets, ConfigParseError, ConfigValidationError, DiffSettings, load_config
from .diff_engine import write_comparison
from .errors import PROVIDER_ERRORS, RippleError, StageFailed
from .llm_gateway import LlmGateway
from .manifest import STAGES, RunManifest
from .orchestrator import Pipeline
from .protocol import format_timestamp, parse_timestamp
from .providers import available_providers
from .runtimes import available_runtimes
from .skb import build_index, filter_reports, load_index, load_reports_dir, query
from .trackers import available_trackers

logger = logging.getLogger("ripple_difftest")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_PROVIDER = 4

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _print(payload: dict[str, Any]) -> None:
    print(json.dumps(payload, ensure_ascii=False, indent=2))


def _pipeline(args: argparse.Namespace) -> Pipeline:
    cfg = load_config(args.config)
    pr_id = args.pr
    if pr_id is None and args.run_dir and (Path(args.run_dir) / "manifest.json").is_file():
        pr_id = RunManifest.load(args.run_dir).pr_id
    if pr_id is None:
        raise SystemExit("--pr is required (or --run-dir pointing at an existing run)")
    return Pipeline(cfg, pr_id, run_dir=args.run_dir, workers=args.workers)


def _status_payload(pipe: Pipeline) -> dict[str, Any]:
    m = pipe.manifest
    return {
        "ok": all(v != "failed" for v in m.stage_status.values()),
        "run_id": m.run_id,
        "pr_id": m.pr_id,
        "run_dir": str(pipe.paths.root),
        "stage_status": dict(m.stage_status),
        "artifact_paths": dict(m.artifact_paths),
    }


def cmd_doctor(args: argparse.Namespace) -> int:
    payload = {
        "ok": True,
        "python": platform.python_version(),
        "platform": platform.platform(),
        "runtimes": sorted(available_runtimes()),
        "trackers": sorted(available_trackers()),
        "providers": sorted(available_providers()),
        "executables": {
            name: shutil.which(name) for name in ("git", "docker", "podman", "xdotool", "Xvfb")
        },
        "timestamp_utc": datetime.now(UTC).isoformat(),
    }
    _print(payload)
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    pipe = _pipeline(args)
    pipe.run(force=args.force)
    payload = _status_payload(pipe)
    summary = pipe.paths.report_dir / "summary.json"
    if summary.is_file():
        report = json.loads(summary.read_text(encoding="utf-8"))
        payload["kept_bugs"] = report["summary"]["kept"]
        payload["report"] = str(summary)
    _print(payload)
    return EXIT_OK


def cmd_stage(args: argparse.Namespace) -> int:
    pipe = _pipeline(args)
    artifact = pipe.run_stage(args.stage, force=args.force)
    payload = _status_payload(pipe)
    payload["stage"] = args.stage
    payload["skipped"] = artifact is None
    _print(payload)
    return EXIT_OK


def cmd_diff(args: argparse.Namespace) -> int:
    if args.a is None and args.b is None:
        if args.config is None:
            raise SystemExit("--config is required to run the diff stage")
        return cmd_stage(args)
    if args.a is None or args.b is None or args.out is None:
        raise SystemExit("--a, --b and --out are required to compare two screenshots")

    threshold, radius = args.threshold, args.radius
    if args.config is not None and (threshold is None or radius is None):
        cfg = load_config(args.config)
        threshold = cfg.budgets.pixel_diff_threshold if threshold is None else threshold
        radius = cfg.diff.radius if radius is None else radius
    threshold = Budgets().pixel_diff_threshold if threshold is None else threshold
    radius = DiffSettings().radius if radius is None else radius
    if not 0 <= threshold <= 255 or radius < 0:
        raise SystemExit("--threshold must be in [0, 255] and --radius >= 0")

    out = Path(args.out)
    parsed = write_comparison(
        Path(args.a), Path(args.b), out, threshold=threshold, radius=radius, stem="diff"
    )
    _print(
        {
            "ok": True,
            "threshold": threshold,
            "radius": radius,
            "parsed": str(out / "diff.json"),
            "annotated": {
                "a": str(out / "diff_pre.annotated.png"),
                "b": str(out / "diff_post.annotated.png"),
            },
            "parsed_info": parsed.to_dict(),
        }
    )
    return EXIT_OK


def cmd_skb_build(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    out = args.out or cfg.paths.skb_index
    if not out:
        raise SystemExit("--out is required when paths.skb_index is not configured")

    if args.source == "tracker":
        tracker = available_trackers()[cfg.sut.issue_tracker_kind](cfg.tracker)
        raw = list(tracker.iter_reports())
    elif Path(args.source).is_dir():
        raw = load_reports_dir(args.source)
    else:
        raise SystemExit(f"--source must be 'tracker' or a directory of reports: {args.source}")

    llm = LlmGateway.from_config(cfg, audit_dir=Path(out).parent / "audit")
    screened = list(filter_reports(raw, llm, cfg.skb))
    kept = [r for r in screened if r.kept]
    reasons = Counter(r.rejection_reason for r in screened if not r.kept)

    log_path = Path(f"{out}.screening.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with log_path.open("w", encoding="utf-8") as f:
        for r in screened:
            f.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")

    index = build_index(
        kept,
        llm,
        cfg.skb.chunk_tokens,
        cfg.skb.overlap_tokens,
        out_path=out,
        embed_attempts=cfg.skb.embed_attempts,
        backoff_sec=cfg.llm.backoff_sec,
        workers=args.workers or 4,
    )
    _print(
        {
            "ok": True,
            "index": str(out),
            "screening_log": str(log_path),
            "reports_total": len(screened),
            "reports_kept": len(kept),
            "rejected_by_reason": dict(sorted(reasons.items())),
            "chunks": len(index.chunks),
        }
    )
    return EXIT_OK


def cmd_skb_query(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    location = args.index or cfg.paths.skb_index
    if not location:
        raise SystemExit("--index is required when paths.skb_index is not configured")
    index = load_index(location)
    cutoff = parse_timestamp(args.cutoff)
    llm = LlmGateway.from_config(cfg)
    results = query(index, args.text, cutoff, args.k or cfg.skb.k, embedder=llm)
    _print(
        {
            "ok": True,
            "index": str(location),
            "cutoff": format_timestamp(cutoff),
            "results": [r.to_dict() for r in results],
        }
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ripple", description="Change-aware differential GUI testing for pull requests"
    )
    sub = p.add_subparsers(dest="cmd", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Path to the JSON config")
    common.add_argument("--log-level", default="INFO", help="DEBUG | INFO | WARNING | ERROR")
    common.add_argument("--workers", type=int, default=None, help="Worker pool size")

    run_opts = argparse.ArgumentParser(add_help=False)
    run_opts.add_argument("--pr", default=None, help="Pull request id under test")
    run_opts.add_argument("--run-dir", default=None, help="Run directory (default runs/pr-<id>)")
    run_opts.add_argument(
        "--force", action="store_true", help="Re-run the stage and reset every later stage"
    )

    doctor = sub.add_parser("doctor", help="Show environment and registered adapters")
    doctor.add_argument("--log-level", default="INFO")
    doctor.set_defaults(func=cmd_doctor)

    run = sub.add_parser("run", parents=[common, run_opts], help="Run (or resume) the pipeline")
    run.set_defaults(func=cmd_run)

    for stage in STAGES:
        if stage == "diff":
            continue
        sp = sub.add_parser(stage, parents=[common, run_opts], help=f"Run the {stage} stage only")
        sp.set_defaults(func=cmd_stage, stage=stage)

    diff = sub.add_parser(
        "diff",
        parents=[run_opts],
        help="Run the diff stage, or compare two screenshots with --a/--b",
    )
    diff.add_argument("--config", default=None, help="Path to the JSON config")
    diff.add_argument("--log-level", default="INFO", help="DEBUG | INFO | WARNING | ERROR")
    diff.add_argument("--workers", type=int, default=None, help="Worker pool size")
    diff.add_argument("--a", default=None, help="Pre-change screenshot (PNG)")
    diff.add_argument("--b", default=None, help="Post-change screenshot (PNG)")
    diff.add_argument("--threshold", type=int, default=None, help="Per-channel threshold")
    diff.add_argument("--radius", type=int, default=None, help="Dilation radius in pixels")
    diff.add_argument("--out", default=None, help="Directory for the record and annotated images")
    diff.set_defaults(func=cmd_diff, stage="diff")

    skb = sub.add_parser("skb", help="Scenario knowledge base")
    skb_sub = skb.add_subparsers(dest="skb_cmd", required=True)

    build = skb_sub.add_parser("build", parents=[common], help="Screen reports and build an index")
    build.add_argument(
        "--source", required=True, help="'tracker' or a directory of report JSON files"
    )
    build.add_argument("--out", default=None, help="Index path (default paths.skb_index)")
    build.set_defaults(func=cmd_skb_build)

    q = skb_sub.add_parser("query", parents=[common], help="Hybrid retrieval with a date cutoff")
    q.add_argument("--index", default=None)
    q.add_argument("text", help="Query text")
    q.add_argument("--cutoff", required=True, help="ISO-8601 timestamp; only older chunks return")
    q.add_argument("--k", type=int, default=None)
    q.set_defaults(func=cmd_skb_query)

    return p


def _fail(code: int, exc: BaseException, **extra: Any) -> int:
    payload = {
        "ok": False,
        "error_code": getattr(exc, "code", type(exc).__name__),
        "error": str(exc),
        **extra,
    }
    _print(payload)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format=LOG_FORMAT,
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ConfigParseError, ConfigValidationError) as e:
        logger.error("config error: %s", e)
        return _fail(EXIT_CONFIG, e)
    except StageFailed as e:
        code = EXIT_PROVIDER if isinstance(e.__cause__, PROVIDER_ERRORS) else EXIT_STAGE
        return _fail(code, e, stage=e.stage, failure=e.failure)
    except PROVIDER_ERRORS as e:
        logger.error("provider failure: %s", e)
        return _fail(EXIT_PROVIDER, e)
    except (RippleError, ValueError, OSError) as e:
        logger.error("%s", e)
        return _fail(EXIT_STAGE, e)


if __name__ == "__main__":
    raise SystemExit(main())
