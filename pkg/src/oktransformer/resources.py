"""Paths to the files shipped inside the package."""

from __future__ import annotations

from importlib import resources
from pathlib import Path


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("oktransformer") / "data" / name))
