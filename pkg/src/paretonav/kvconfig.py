"""Flat key-value config files: `key = value` lines, `#` comments.

Values are stored as plain decimal text. Vector-valued settings use one
key per component (suffix `_1`, `_2`, ...), so every key maps to a single
scalar or string. Files written by this module are deterministic: keys
appear in the order given.
"""

from __future__ import annotations

import os
import tempfile


def format_float(x: float) -> str:
    """Shortest decimal text that round-trips to the same float64."""
    return repr(float(x))


def dumps_kv(items: dict[str, str]) -> str:
    lines = [f"{k} = {v}" for k, v in items.items()]
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def read_kv(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv(fh.read())


def write_text_atomic(path: str, text: str) -> None:
    """Write via temp file + rename so a crash never leaves a partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_kv(path: str, items: dict[str, str]) -> None:
    write_text_atomic(path, dumps_kv(items))
