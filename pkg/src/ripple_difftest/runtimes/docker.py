"""OCI runtime driven through the `docker` (or `podman`) command line.

Each revision is built into its own image from the base image ref plus a
`git archive` of the revision; each session is a fresh `--rm` container running
Xvfb on display :99 with the SUT launched on it.
"""

from __future__ import annotations

import logging
import shutil
import subprocess
from collections.abc import Sequence
from pathlib import Path

from ..config import SutConfig
from ..errors import BuildFailure
from ..protocol import BuildArtifact, ContainerSession
from .base import BaseRuntime, slugify

logger = logging.getLogger(__name__)

DISPLAY = ":99"

_DOCKERFILE = """\
FROM {base}
WORKDIR /sut
ADD src.tar /sut/
RUN {build}
"""


class DockerRuntime(BaseRuntime):
    name = "docker"

    @property
    def executable(self) -> str:
        exe = self.settings.runtime_executable
        return self.name if not exe or exe == "docker" else exe

    def _cli(
        self,
        *args: str,
        timeout: float | None = None,
        text: bool = True,
        check: bool = True,
    ) -> subprocess.CompletedProcess:
        cmd = [self.executable, *args]
        cp = subprocess.run(cmd, capture_output=True, text=text, timeout=timeout, check=False)
        if check and cp.returncode != 0:
            err = cp.stderr if text else cp.stderr.decode("utf-8", "replace")
            raise RuntimeError(f"command failed: {' '.join(cmd[:3])} ...\n{err.strip()}")
        return cp

    def build_image(self, cfg: SutConfig, revision: str) -> BuildArtifact:
        ctx = self._build_dir(cfg, revision)
        if ctx.exists():
            shutil.rmtree(ctx)
        ctx.mkdir(parents=True)
        self.repo.archive(revision, ctx / "src.tar")
        (ctx / "Dockerfile").write_text(
            _DOCKERFILE.format(base=cfg.container_image_ref, build=self._build_script(cfg, revision)),
            encoding="utf-8",
        )
        tag = f"ripple/{slugify(cfg.name)}:{revision[:12]}"
        cp = self._cli("build", "-f", str(ctx / "Dockerfile"), "-t", tag, str(ctx), check=False)
        log = (cp.stdout or "") + (cp.stderr or "")
        (ctx / "build.log").write_text(log, encoding="utf-8")
        if cp.returncode != 0:
            raise BuildFailure(
                f"image build failed for {revision[:12]} (exit {cp.returncode})",
                revision=revision,
                log=log,
            )
        return BuildArtifact(
            image_ref=tag,
            revision=revision,
            launch_command=cfg.launch_command,
            location=str(ctx),
        )

    def start_session(self, artifact: BuildArtifact, geometry: tuple[int, int]) -> ContainerSession:
        w, h = geometry
        session = ContainerSession(
            session_id=self._next_session_id(artifact),
            image_ref=artifact.image_ref,
            sut_revision=artifact.revision,
            display_geometry=geometry,
            state="starting",
        )
        boot = (
            f"Xvfb {DISPLAY} -screen 0 {w}x{h}x24 -nolisten tcp & "
            f"sleep 1; exec {artifact.launch_command}"
        )
        cp = self._cli(
            "run", "-d", "--rm",
            "--name", session.session_id,
            "-e", f"DISPLAY={DISPLAY}",
            artifact.image_ref,
            "sh", "-c", boot,
        )  # fmt: skip
        session.handle = cp.stdout.strip() or session.session_id
        return self._mark_running(session)

    def exec_in_session(self, session: ContainerSession, argv: Sequence[str]) -> str:
        if session.state != "running":
            raise RuntimeError(f"session {session.session_id} is {session.state}")
        cp = self._cli("exec", "-e", f"DISPLAY={DISPLAY}", session.handle, *argv, timeout=60)
        return cp.stdout

    def capture_screenshot(self, session: ContainerSession) -> bytes:
        if session.state != "running":
            raise RuntimeError(f"session {session.session_id} is {session.state}")
        cp = self._cli(
            "exec", "-e", f"DISPLAY={DISPLAY}", session.handle,
            "import", "-window", "root", "png:-",
            timeout=60, text=False,
        )  # fmt: skip
        return cp.stdout

    def copy_in(self, session: ContainerSession, src: str, dest: str) -> None:
        self._cli("cp", str(Path(src)), f"{session.handle}:{dest}")

    def teardown(self, session: ContainerSession) -> None:
        if session.state == "torn_down":
            return
        try:
            self._cli("rm", "-f", session.handle or session.session_id, timeout=60)
        except (RuntimeError, OSError, subprocess.TimeoutExpired) as e:
            logger.warning("teardown of %s failed: %s", session.session_id, e)
        session.state = "torn_down"


class PodmanRuntime(DockerRuntime):
    name = "podman"

