"""In-process runtime for the bundled mock SUT.

Builds run the SUT's build command on the host against a `git archive` of the
revision; sessions are `MockGuiApp` instances, each with its own profile
directory, driven by the same xdotool command lines a container would receive.
"""

from __future__ import annotations

import logging
import os
import shutil
import subprocess
import tarfile
from collections.abc import Sequence
from pathlib import Path

from ..config import SutConfig
from ..errors import BuildFailure
from ..mock_sut import MockGuiApp, parse_launch_command
from ..protocol import BuildArtifact, ContainerSession
from .base import BaseRuntime, slugify

logger = logging.getLogger(__name__)


class LocalRuntime(BaseRuntime):
    name = "local"

    def build_image(self, cfg: SutConfig, revision: str) -> BuildArtifact:
        build_dir = self._build_dir(cfg, revision)
        if build_dir.exists():
            shutil.rmtree(build_dir)
        src = build_dir / "src"
        src.mkdir(parents=True)
        tar_path = self.repo.archive(revision, build_dir / "src.tar")
        with tarfile.open(tar_path) as tf:
            tf.extractall(src, filter="data")

        env = {
            **os.environ,
            "SUT_REPO_DIR": str(self.repo.repo_dir),
            "SUT_REVISION": revision,
            "SUT_BUILD_DIR": str(build_dir),
        }
        cp = subprocess.run(
            ["sh", "-c", self._build_script(cfg, revision)],
            cwd=src,
            env=env,
            capture_output=True,
            text=True,
            check=False,
        )
        log = cp.stdout + cp.stderr
        (build_dir / "build.log").write_text(log, encoding="utf-8")
        if cp.returncode != 0:
            raise BuildFailure(
                f"build failed for {revision[:12]} (exit {cp.returncode})",
                revision=revision,
                log=log,
            )
        layout = build_dir / parse_launch_command(cfg.launch_command)
        if not layout.is_file():
            raise BuildFailure(
                f"build for {revision[:12]} produced no {layout.name}",
                revision=revision,
                log=log,
            )
        return BuildArtifact(
            image_ref=f"local/{slugify(cfg.name)}:{revision[:12]}",
            revision=revision,
            launch_command=cfg.launch_command,
            location=str(build_dir),
        )

    def start_session(self, artifact: BuildArtifact, geometry: tuple[int, int]) -> ContainerSession:
        session = ContainerSession(
            session_id=self._next_session_id(artifact),
            image_ref=artifact.image_ref,
            sut_revision=artifact.revision,
            display_geometry=geometry,
            state="starting",
        )
        layout = Path(artifact.location) / parse_launch_command(artifact.launch_command)
        profile = self.work_dir / "sessions" / session.session_id / "profile"
        if profile.exists():
            shutil.rmtree(profile)
        app = MockGuiApp.from_file(layout, profile)
        if app.geometry != tuple(geometry):
            raise RuntimeError(
                f"mock SUT renders at {app.geometry}, session asked for {tuple(geometry)}"
            )
        session.handle = app
        return self._mark_running(session)

    def _app(self, session: ContainerSession) -> MockGuiApp:
        if session.state != "running" or not isinstance(session.handle, MockGuiApp):
            raise RuntimeError(f"session {session.session_id} is {session.state}")
        return session.handle

    def exec_in_session(self, session: ContainerSession, argv: Sequence[str]) -> str:
        app = self._app(session)
        if not argv or argv[0] != "xdotool":
            raise RuntimeError(f"command failed: local runtime only runs xdotool, got {argv[:1]}")
        try:
            app.run_xdotool(argv[1:])
        except (ValueError, IndexError) as e:
            raise RuntimeError(f"command failed: {e}") from e
        return ""

    def capture_screenshot(self, session: ContainerSession) -> bytes:
        return self._app(session).screenshot_png()

    def copy_in(self, session: ContainerSession, src: str, dest: str) -> None:
        app = self._app(session)
        target = app.profile_dir / dest.lstrip("/")
        target.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src, target)

    def teardown(self, session: ContainerSession) -> None:
        if session.state == "torn_down":
            return
        if isinstance(session.handle, MockGuiApp):
            shutil.rmtree(session.handle.profile_dir.parent, ignore_errors=True)
        session.handle = None
        session.state = "torn_down"
