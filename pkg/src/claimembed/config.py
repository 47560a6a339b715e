"""Plain ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Values are read as JSON when
possible (numbers, ``true``/``false``, lists) and as strings otherwise. A key
may be scoped to one model as ``model.key``, e.g. ``simple-attention.max_epochs``.
"""

from __future__ import annotations

import json
from pathlib import Path


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"{path}:{lineno}: empty key")
        out[key] = parse_value(value)
    return out


def model_config(config: dict, model: str, accepted: set[str]) -> dict:
    """Settings for one model.

    Unscoped keys apply when the model accepts them; scoped keys must be
    accepted by their model.
    """
    out = {}
    for key, value in config.items():
        if "." in key:
            scope, name = key.split(".", 1)
            if scope != model:
                continue
            if name not in accepted:
                raise ValueError(f"{model} has no setting {name!r}")
            out[name] = value
        elif key in accepted:
            out.setdefault(key, value)
    for key, value in config.items():
        if key.startswith(f"{model}."):
            out[key.split(".", 1)[1]] = value
    return out
