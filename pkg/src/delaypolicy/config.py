"""Plain ``key = value`` configuration helpers shared by task files and experiment configs."""

from __future__ import annotations

from dataclasses import fields, replace

from .errors import DataError


def coerce(value: str, current):
    """Parse ``value`` to the type of ``current``.

    Tuples are comma or space separated; they hold ints if ``current`` is a
    non-empty tuple of ints and floats otherwise.
    """
    if isinstance(current, tuple):
        parts = [p for p in value.replace(",", " ").split() if p]
        kind = int if current and all(isinstance(x, int) for x in current) else float
        return tuple(kind(p) for p in parts)
    if isinstance(current, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value.strip()


def update_dataclass(obj, values: dict, section: str):
    """Copy of the frozen dataclass ``obj`` with ``values`` (strings) applied by field name."""
    known = {f.name for f in fields(obj)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise DataError(f"[{section}] unknown keys: {unknown}")
    kwargs = {}
    for key, raw in values.items():
        try:
            kwargs[key] = coerce(str(raw), getattr(obj, key))
        except ValueError as exc:
            raise DataError(f"[{section}] {key}: {exc}") from exc
    return replace(obj, **kwargs)


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    return str(v)


def dataclass_lines(obj, skip: tuple[str, ...] = ()) -> list[str]:
    return [f"{f.name} = {format_value(getattr(obj, f.name))}" for f in fields(obj) if f.name not in skip]
