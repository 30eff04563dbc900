from __future__ import annotations

import argparse
import json
import shutil
from pathlib import Path

from ripple_difftest.mock_sut import build_fixture_repo

DEFAULT_HISTORY = Path("fixtures/mock-sut/history.json")
DEFAULT_DEST = Path(".ripple-cache/mock-sut")


def main() -> int:
    ap = argparse.ArgumentParser(
        description="Materialize the bundled mock SUT history as a git repo plus tracker records"
    )
    ap.add_argument("--history", default=str(DEFAULT_HISTORY))
    ap.add_argument("--dest", default=str(DEFAULT_DEST))
    ap.add_argument(
        "--no-regression",
        action="store_true",
        help="Build the variant whose PR 7 leaves the Save button in place",
    )
    args = ap.parse_args()

    dest = Path(args.dest)
    if dest.exists():
        shutil.rmtree(dest)
    fixture = build_fixture_repo(dest, args.history, regression=not args.no_regression)
    print(
        json.dumps(
            {
                "ok": True,
                "repo_dir": str(fixture.repo_dir),
                "tracker_dir": str(fixture.tracker_dir),
                "commits": fixture.shas,
            },
            ensure_ascii=False,
            indent=2,
        )
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
