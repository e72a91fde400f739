"""Shared configuration errors and JSON helpers."""

from __future__ import annotations

import json
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending field (dotted for nesting)."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def check_keys(data: dict, known, prefix: str = "") -> None:
    for key in data:
        if key not in known:
            raise ConfigError(prefix + key, "unknown key")


def read_json_object(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be an object")
    return data
