"""TOML reading that works on Python 3.10 and later."""
from __future__ import annotations

from pathlib import Path

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

TOMLDecodeError = tomllib.TOMLDecodeError


def loads_toml(text: str) -> dict:
    return tomllib.loads(text)


def load_toml(path) -> dict:
    return tomllib.loads(Path(path).read_text())
