from __future__ import annotations

import itertools
import logging
import re
import threading
from pathlib import Path

from ..config import ExecutorSettings, SutConfig
from ..protocol import BuildArtifact, ContainerSession
from ..vcs import GitClient

logger = logging.getLogger(__name__)


def slugify(name: str) -> str:
    return re.sub(r"[^a-z0-9_.-]+", "-", name.lower()).strip("-") or "sut"


class BaseRuntime:
    """Shared state for runtimes: the per-revision build cache and session ids."""

    name = "base"

    def __init__(
        self,
        settings: ExecutorSettings,
        *,
        repo: GitClient,
        work_dir: str | Path,
    ) -> None:
        self.settings = settings
        self.repo = repo
        self.work_dir = Path(work_dir)
        self.artifacts: dict[tuple[str, str], BuildArtifact] = {}
        self.lock = threading.Lock()
        self._ids = itertools.count(1)
        self._id_lock = threading.Lock()

    def _next_session_id(self, artifact: BuildArtifact) -> str:
        with self._id_lock:
            n = next(self._ids)
        return f"{self.name}-{artifact.revision[:8]}-{n:04d}"

    def _build_dir(self, cfg: SutConfig, revision: str) -> Path:
        return self.work_dir / "builds" / f"{slugify(cfg.name)}-{revision[:12]}"

    def _build_script(self, cfg: SutConfig, revision: str) -> str:
        return cfg.build_command.replace("{revision}", revision)

    def _mark_running(self, session: ContainerSession) -> ContainerSession:
        session.state = "running"
        logger.debug("session %s running %s", session.session_id, session.image_ref)
        return session
