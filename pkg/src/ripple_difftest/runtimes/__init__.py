"""Container runtimes that build SUT revisions and host isolated GUI sessions."""

from __future__ import annotations

from .base import BaseRuntime
from .docker import DockerRuntime, PodmanRuntime
from .local import LocalRuntime


def available_runtimes() -> dict[str, type[BaseRuntime]]:
    return {
        "docker": DockerRuntime,
        "podman": PodmanRuntime,
        "local": LocalRuntime,
    }


__all__ = ["BaseRuntime", "DockerRuntime", "LocalRuntime", "PodmanRuntime", "available_runtimes"]
