from __future__ import annotations

import hashlib
import logging
import re
import subprocess
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import BlameUnavailable

logger = logging.getLogger(__name__)

_HUNK_RE = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")
_DIFF_HEADER_RE = re.compile(r"^diff --git a/(.*) b/(.*)$")
_BLAME_HEADER_RE = re.compile(r"^([0-9a-f]{7,64}) (\d+) (\d+)(?: (\d+))?$")


@dataclass
class FileChange:
    path: str
    old_path: str | None
    patch: str
    binary: bool = False
    old_lines: list[int] = field(default_factory=list)
    new_lines: list[int] = field(default_factory=list)

    @property
    def old_ranges(self) -> list[tuple[int, int]]:
        return collapse_ranges(self.old_lines)

    @property
    def new_ranges(self) -> list[tuple[int, int]]:
        return collapse_ranges(self.new_lines)

    @property
    def changed_line_ranges(self) -> dict[str, list[tuple[int, int]]]:
        return {"old": self.old_ranges, "new": self.new_ranges}

    def to_dict(self) -> dict[str, Any]:
        return {
            "path": self.path,
            "old_path": self.old_path,
            "binary": self.binary,
            "patch": self.patch,
            "changed_line_ranges": {
                side: [list(r) for r in ranges] for side, ranges in self.changed_line_ranges.items()
            },
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> FileChange:
        ranges = raw.get("changed_line_ranges") or {}
        return cls(
            path=str(raw["path"]),
            old_path=raw.get("old_path"),
            patch=str(raw.get("patch") or ""),
            binary=bool(raw.get("binary", False)),
            old_lines=expand_ranges([tuple(r) for r in ranges.get("old", [])]),
            new_lines=expand_ranges([tuple(r) for r in ranges.get("new", [])]),
        )


def collapse_ranges(lines: Sequence[int]) -> list[tuple[int, int]]:
    out: list[tuple[int, int]] = []
    for n in sorted(set(lines)):
        if out and n == out[-1][1] + 1:
            out[-1] = (out[-1][0], n)
        else:
            out.append((n, n))
    return out


def expand_ranges(ranges: Sequence[tuple[int, int]]) -> list[int]:
    return [n for start, end in ranges for n in range(start, end + 1)]


def _strip_prefix(path: str) -> str | None:
    if path == "/dev/null":
        return None
    if path.startswith(("a/", "b/")):
        return path[2:]
    return path


def _finish(current: FileChange | None, lines: list[str], out: list[FileChange]) -> None:
    if current is None:
        return
    current.patch = "".join(lines) if not current.binary else ""
    out.append(current)


def parse_unified_diff(text: str) -> list[FileChange]:
    """Split `git diff` output per file and compute changed line numbers per side.

    Old-side numbers are the modified or deleted lines of the pre-change file;
    new-side numbers are the added lines of the post-change file. Binary files
    get an empty patch and no line numbers.
    """
    out: list[FileChange] = []
    current: FileChange | None = None
    buf: list[str] = []
    old_no = new_no = 0
    in_hunk = False

    for line in text.splitlines(keepends=True):
        stripped = line.rstrip("\n")
        header = _DIFF_HEADER_RE.match(stripped)
        if header:
            _finish(current, buf, out)
            current = FileChange(path=header.group(2), old_path=header.group(1), patch="")
            buf = [line]
            in_hunk = False
            continue
        if current is None:
            continue
        buf.append(line)

        if not in_hunk:
            if stripped.startswith("rename from "):
                current.old_path = stripped[len("rename from ") :]
            elif stripped.startswith("rename to "):
                current.path = stripped[len("rename to ") :]
            elif stripped.startswith("new file mode"):
                current.old_path = None
            elif stripped.startswith("Binary files ") or stripped == "GIT binary patch":
                current.binary = True
            elif stripped.startswith("--- "):
                current.old_path = _strip_prefix(stripped[4:].split("\t", 1)[0])
            elif stripped.startswith("+++ "):
                new_path = _strip_prefix(stripped[4:].split("\t", 1)[0])
                if new_path is None:
                    # deleted file keeps its old path as the identifier
                    current.path = current.old_path or current.path
                else:
                    current.path = new_path

        hunk = _HUNK_RE.match(stripped)
        if hunk:
            old_no = int(hunk.group(1))
            new_no = int(hunk.group(3))
            in_hunk = True
            continue
        if not in_hunk:
            continue

        if stripped.startswith("-"):
            current.old_lines.append(old_no)
            old_no += 1
        elif stripped.startswith("+"):
            current.new_lines.append(new_no)
            new_no += 1
        elif stripped.startswith("\\"):
            continue
        else:
            old_no += 1
            new_no += 1

    _finish(current, buf, out)
    return out


def parse_blame_porcelain(text: str) -> dict[int, str]:
    """Map final line number -> commit sha from `git blame --porcelain` output."""
    out: dict[int, str] = {}
    expect_header = True
    for line in text.splitlines():
        if line.startswith("\t"):
            expect_header = True
            continue
        if not expect_header:
            continue
        m = _BLAME_HEADER_RE.match(line)
        if m:
            out[int(m.group(3))] = m.group(1)
            expect_header = False
    return out


class GitClient:
    """VcsClient backed by the `git` executable."""

    def __init__(
        self, repo_dir: str | Path, *, executable: str = "git", timeout_sec: int = 120
    ) -> None:
        self.repo_dir = Path(repo_dir)
        self.executable = executable
        self.timeout_sec = timeout_sec

    @classmethod
    def ensure_local(cls, location: str, cache_dir: str | Path, **kwargs: object) -> GitClient:
        """Use a local clone of `location`, cloning URLs into `cache_dir` once."""
        p = Path(location).expanduser()
        if p.exists():
            return cls(p, **kwargs)  # type: ignore[arg-type]
        digest = hashlib.sha256(location.encode("utf-8")).hexdigest()[:12]
        dest = Path(cache_dir) / "repos" / digest
        if not (dest / ".git").exists() and not (dest / "HEAD").exists():
            dest.parent.mkdir(parents=True, exist_ok=True)
            logger.info("cloning %s into %s", location, dest)
            subprocess.run(["git", "clone", "--quiet", location, str(dest)], check=True)
        return cls(dest, **kwargs)  # type: ignore[arg-type]

    def _run(self, *args: str) -> str:
        cmd = [self.executable, "-C", str(self.repo_dir), *args]
        proc = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout_sec)
        if proc.returncode != 0:
            raise RuntimeError(
                f"command failed: {' '.join(cmd)}\nstdout:\n{proc.stdout}\nstderr:\n{proc.stderr}"
            )
        return proc.stdout

    def diff(self, pre: str, post: str, paths: Sequence[str] | None = None) -> str:
        args = ["diff", "-M", "--no-color", "--no-ext-diff", pre, post]
        if paths:
            args += ["--", *paths]
        return self._run(*args)

    def blame(self, revision: str, path: str, ranges: Sequence[tuple[int, int]]) -> dict[int, str]:
        if not ranges:
            return {}
        args = ["blame", "--porcelain"]
        for start, end in ranges:
            args += ["-L", f"{start},{end}"]
        args += [revision, "--", path]
        try:
            return parse_blame_porcelain(self._run(*args))
        except RuntimeError as e:
            raise BlameUnavailable(f"blame failed for {path}@{revision}: {e}") from e

    def resolve_parent(self, revision: str) -> str:
        return self._run("rev-parse", f"{revision}^").strip()

    def commit_message(self, sha: str) -> str:
        return self._run("log", "-1", "--format=%B", sha).strip()

    def archive(self, revision: str, out_path: str | Path) -> Path:
        out = Path(out_path)
        self._run("archive", "--format=tar", "-o", str(out), revision)
        return out
