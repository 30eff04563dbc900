"""Deterministic mock GUI application and its fixture repository.

The app renders a JSON layout of labels, buttons and text fields with Pillow and
understands the subset of `xdotool` the input driver emits, so the local runtime
can drive it without an X server. A button's `on_click` actions may set another
widget's text (`{field_id}` placeholders expand to current texts) or write a
marker file into the session's private profile directory.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import shlex
import subprocess
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from PIL import Image, ImageDraw, ImageFont

logger = logging.getLogger(__name__)

WIDGET_TYPES = ("label", "button", "text_field")

BACKGROUND = (240, 240, 240)
TEXT = (20, 20, 20)
BUTTON_FILL = (200, 205, 225)
BUTTON_OUTLINE = (70, 70, 90)
FIELD_FILL = (255, 255, 255)
FIELD_OUTLINE = (120, 120, 120)
FOCUS_OUTLINE = (0, 110, 210)
SELECTION_FILL = (170, 200, 245)


@dataclass
class Widget:
    id: str
    type: str
    bbox: tuple[int, int, int, int]
    text: str = ""
    on_click: list[dict[str, Any]] = field(default_factory=list)

    def contains(self, x: int, y: int) -> bool:
        x1, y1, x2, y2 = self.bbox
        return x1 <= x < x2 and y1 <= y < y2


def parse_layout(raw: dict[str, Any]) -> tuple[str, tuple[int, int], list[Widget]]:
    title = str(raw.get("title") or "")
    w, h = (int(v) for v in raw.get("geometry", [640, 480]))
    widgets: list[Widget] = []
    for i, item in enumerate(raw.get("widgets", [])):
        kind = item.get("type")
        if kind not in WIDGET_TYPES:
            raise ValueError(f"widget {i}: unknown type {kind!r}")
        x1, y1, x2, y2 = (int(v) for v in item["bbox"])
        widgets.append(
            Widget(
                id=str(item["id"]),
                type=kind,
                bbox=(x1, y1, x2, y2),
                text=str(item.get("text") or ""),
                on_click=list(item.get("on_click") or []),
            )
        )
    return title, (w, h), widgets


class MockGuiApp:
    def __init__(self, layout: dict[str, Any], profile_dir: str | Path) -> None:
        self.title, self.geometry, self.widgets = parse_layout(layout)
        self.profile_dir = Path(profile_dir)
        self.profile_dir.mkdir(parents=True, exist_ok=True)
        self.pointer = (0, 0)
        self.focus: Widget | None = None
        self.select_all = False
        self._font = ImageFont.load_default()

    @classmethod
    def from_file(cls, layout_path: str | Path, profile_dir: str | Path) -> MockGuiApp:
        return cls(json.loads(Path(layout_path).read_text(encoding="utf-8")), profile_dir)

    def widget(self, widget_id: str) -> Widget:
        for w in self.widgets:
            if w.id == widget_id:
                return w
        raise KeyError(widget_id)

    def widget_at(self, x: int, y: int) -> Widget | None:
        for w in reversed(self.widgets):
            if w.contains(x, y):
                return w
        return None

    # input

    def _expand(self, template: str) -> str:
        return template.format_map({w.id: w.text for w in self.widgets})

    def _press(self, w: Widget) -> None:
        for action in w.on_click:
            kind = action.get("action")
            if kind == "set_text":
                self.widget(action["target"]).text = self._expand(str(action.get("value", "")))
            elif kind == "write_marker":
                path = self.profile_dir / str(action["name"])
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(self._expand(str(action.get("value", ""))), encoding="utf-8")
            else:
                logger.debug("ignoring unknown on_click action %r", kind)

    def click(self, button: int, repeat: int = 1) -> None:
        if button in (4, 5, 6, 7):
            return  # nothing scrolls
        target = self.widget_at(*self.pointer)
        if button != 1:
            return
        if target is None or target.type == "label":
            self.focus = None
            self.select_all = False
            return
        if target.type == "text_field":
            self.focus = target
            # double/triple click selects the whole field
            self.select_all = repeat >= 2
            return
        for _ in range(repeat):
            self._press(target)

    def type_text(self, text: str) -> None:
        if self.focus is None:
            return
        if self.select_all:
            self.focus.text = text
            self.select_all = False
        else:
            self.focus.text += text

    def key(self, combo: str) -> None:
        parts = [p.lower() for p in combo.split("+")]
        if self.focus is None:
            return
        if parts == ["ctrl", "a"]:
            self.select_all = True
        elif parts[-1] in ("backspace", "delete"):
            self.focus.text = "" if self.select_all else self.focus.text[:-1]
            self.select_all = False

    def run_xdotool(self, args: Sequence[str]) -> None:
        """Interpret one chained xdotool command line (without the leading `xdotool`)."""
        i = 0
        args = list(args)
        while i < len(args):
            cmd = args[i]
            if cmd == "mousemove":
                self.pointer = (int(args[i + 1]), int(args[i + 2]))
                i += 3
            elif cmd == "click":
                repeat = 1
                i += 1
                if args[i] == "--repeat":
                    repeat = int(args[i + 1])
                    i += 2
                self.click(int(args[i]), repeat)
                i += 1
            elif cmd in ("mousedown", "mouseup"):
                i += 2
            elif cmd == "type":
                i += 1
                if args[i] == "--":
                    i += 1
                self.type_text(args[i])
                i += 1
            elif cmd == "key":
                self.key(args[i + 1])
                i += 2
            elif cmd == "sleep":
                i += 2
            else:
                raise ValueError(f"unsupported xdotool command {cmd!r}")

    # rendering

    def render(self) -> Image.Image:
        img = Image.new("RGB", self.geometry, BACKGROUND)
        draw = ImageDraw.Draw(img)
        for w in self.widgets:
            x1, y1, x2, y2 = w.bbox
            box = [x1, y1, x2 - 1, y2 - 1]
            if w.type == "button":
                draw.rectangle(box, fill=BUTTON_FILL, outline=BUTTON_OUTLINE)
                draw.text((x1 + 10, y1 + (y2 - y1) // 2 - 6), w.text, fill=TEXT, font=self._font)
            elif w.type == "text_field":
                focused = w is self.focus
                fill = SELECTION_FILL if focused and self.select_all and w.text else FIELD_FILL
                draw.rectangle(box, fill=fill, outline=FOCUS_OUTLINE if focused else FIELD_OUTLINE)
                draw.text((x1 + 6, y1 + (y2 - y1) // 2 - 6), w.text, fill=TEXT, font=self._font)
            else:
                draw.text((x1, y1 + (y2 - y1) // 2 - 6), w.text, fill=TEXT, font=self._font)
        return img

    def screenshot_png(self) -> bytes:
        buf = io.BytesIO()
        self.render().save(buf, format="PNG")
        return buf.getvalue()


def parse_launch_command(command: str) -> str:
    """`mock-sut <layout>` -> layout path."""
    argv = shlex.split(command)
    if len(argv) != 2 or argv[0] != "mock-sut":
        raise ValueError(f"local runtime can only launch `mock-sut <layout>`, got {command!r}")
    return argv[1]


# fixture repository


@dataclass
class FixtureRepo:
    repo_dir: Path
    tracker_dir: Path
    shas: dict[str, str]


def _git(repo: Path, *args: str, env: dict[str, str] | None = None) -> str:
    cp = subprocess.run(
        ["git", "-C", str(repo), *args],
        capture_output=True,
        text=True,
        env={**os.environ, **(env or {})},
    )
    if cp.returncode != 0:
        raise RuntimeError(f"command failed: git {' '.join(args)}\n{cp.stderr}")
    return cp.stdout


def _file_text(value: str | list[str]) -> str:
    if isinstance(value, list):
        return "\n".join(value) + "\n"
    return value


def build_fixture_repo(
    dest: str | Path, history_path: str | Path, *, regression: bool = True
) -> FixtureRepo:
    """Materialize a history file into a git repository plus a mock tracker directory.

    Commits get fixed author/committer identities and dates, so SHAs are stable
    across machines. With `regression=False` a commit's `regression_free_files`
    replace its `files`.
    """
    history = json.loads(Path(history_path).read_text(encoding="utf-8"))
    root = Path(dest)
    repo = root / "repo"
    tracker = root / "tracker"
    repo.mkdir(parents=True, exist_ok=True)
    _git(repo, "init", "-q")
    _git(repo, "checkout", "-q", "-b", "main")

    shas: dict[str, str] = {}
    for commit in history["commits"]:
        files = dict(commit.get("files", {}))
        if not regression:
            files.update(commit.get("regression_free_files", {}))
        for rel, content in files.items():
            p = repo / rel
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(_file_text(content), encoding="utf-8")
        _git(repo, "add", "-A")
        env = {
            "GIT_AUTHOR_NAME": "Fixture Author",
            "GIT_AUTHOR_EMAIL": "fixture@example.invalid",
            "GIT_COMMITTER_NAME": "Fixture Author",
            "GIT_COMMITTER_EMAIL": "fixture@example.invalid",
            "GIT_AUTHOR_DATE": commit["date"],
            "GIT_COMMITTER_DATE": commit["date"],
        }
        _git(repo, "commit", "-q", "--no-gpg-sign", "-m", commit["message"], env=env)
        shas[commit["id"]] = _git(repo, "rev-parse", "HEAD").strip()

    (tracker / "prs").mkdir(parents=True, exist_ok=True)
    (tracker / "issues").mkdir(parents=True, exist_ok=True)
    messages = {c["id"]: c["message"] for c in history["commits"]}
    for pr in history.get("prs", []):
        commits = [{"sha": shas[c], "message": messages[c]} for c in pr.get("commits", [])]
        record = {
            "number": pr["number"],
            "title": pr["title"],
            "body": pr.get("body", ""),
            "created_at": pr["created_at"],
            "head": commits[-1]["sha"] if commits else None,
            "commits": commits,
            "linked_issues": pr.get("linked_issues", []),
            "files": pr.get("files", []),
            "state": pr.get("state", "merged"),
        }
        (tracker / "prs" / f"{pr['number']}.json").write_text(
            json.dumps(record, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
        )
    for issue in history.get("issues", []):
        (tracker / "issues" / f"{issue['number']}.json").write_text(
            json.dumps(issue, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
        )
    xrefs = {shas[cid]: [str(p) for p in prs] for cid, prs in history.get("xrefs", {}).items()}
    (tracker / "xrefs.json").write_text(
        json.dumps(xrefs, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    logger.info("fixture repository with %d commit(s) at %s", len(shas), repo)
    return FixtureRepo(repo_dir=repo, tracker_dir=tracker, shas=shas)


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="mock-sut", description="Render the mock GUI app")
    ap.add_argument("layout")
    ap.add_argument("--profile", default=".mock-sut-profile")
    ap.add_argument("--xdotool", action="append", default=[], help="xdotool command line to apply")
    ap.add_argument("--out", required=True, help="PNG output path")
    args = ap.parse_args(argv)

    app = MockGuiApp.from_file(args.layout, args.profile)
    for line in args.xdotool:
        app.run_xdotool(shlex.split(line))
    Path(args.out).write_bytes(app.screenshot_png())
    print(json.dumps({"ok": True, "out": args.out}, ensure_ascii=False, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
