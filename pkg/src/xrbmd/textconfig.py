"""Flat ``key = value`` text files used for run configs, geometry and calibrations."""

from __future__ import annotations

from pathlib import Path

from .errors import ParseError

__all__ = ["parse_kv", "read_kv", "format_kv", "get_floats", "get_ints", "get_float", "get_int"]


def parse_kv(text, path=None):
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ParseError(f"line {lineno} is not 'key = value'", path=path)
        if key == "include":
            raise ParseError("'include' is not supported", key=key, path=path)
        if key in out:
            raise ParseError("duplicate key", key=key, path=path)
        out[key] = value.strip()
    return out


def read_kv(path):
    path = Path(path)
    if not path.is_file():
        raise ParseError("file not found", path=path)
    return parse_kv(path.read_text(encoding="utf-8"), path=path)


def format_kv(items):
    return "".join(f"{k} = {v}\n" for k, v in items)


def _values(fields, key, n, conv, path, kind):
    if key not in fields:
        raise ParseError("missing required key", key=key, path=path)
    raw = fields[key].replace(",", " ").split()
    if n is not None and len(raw) != n:
        raise ParseError(f"expected {n} values, got {len(raw)}", key=key, path=path)
    try:
        return [conv(v) for v in raw]
    except ValueError:
        raise ParseError(f"expected {kind} values, got '{fields[key]}'", key=key, path=path) from None


def get_floats(fields, key, n=None, path=None):
    return _values(fields, key, n, float, path, "numeric")


def get_ints(fields, key, n=None, path=None):
    return _values(fields, key, n, int, path, "integer")


def get_float(fields, key, default=None, path=None):
    if key not in fields and default is not None:
        return float(default)
    return get_floats(fields, key, 1, path)[0]


def get_int(fields, key, default=None, path=None):
    if key not in fields and default is not None:
        return int(default)
    return get_ints(fields, key, 1, path)[0]
