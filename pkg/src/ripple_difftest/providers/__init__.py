from .openai_compat import OpenAICompatProvider, TiktokenTokenizer
from .scripted import ScriptedProvider, WhitespaceTokenizer, fake_embedding


def available_providers() -> dict[str, type]:
    return {
        "openai": OpenAICompatProvider,
        "scripted": ScriptedProvider,
    }


__all__ = [
    "OpenAICompatProvider",
    "ScriptedProvider",
    "TiktokenTokenizer",
    "WhitespaceTokenizer",
    "available_providers",
    "fake_embedding",
]
