"""Versioned prompt templates.

Each `<name>.<version>.md` file is a `string.Template`; placeholders are `$name`.
Role system prompts live in `<role>.system.<version>.md`.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Template

PROMPT_VERSION = "v1"


@lru_cache(maxsize=64)
def load_prompt(name: str, version: str = PROMPT_VERSION) -> str:
    path = resources.files(__name__).joinpath(f"{name}.{version}.md")
    return path.read_text(encoding="utf-8")


def render_prompt(name: str, /, **values: object) -> str:
    return Template(load_prompt(name)).substitute({k: str(v) for k, v in values.items()})


def system_prompt(role: str) -> str:
    return load_prompt(f"{role}.system").strip()
