"""Flat ``key=value`` configuration files and the CSV conventions of the harness.

Lines look like ``lam = 3e-3``; ``#`` starts a comment.  Tuples are written
comma-separated (``seeds = 0,1,2``).  Every CSV the harness writes ends with a
``# config-hash: <sha256>`` comment so a result can be traced to its settings.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import typing
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence


class ConfigError(ValueError):
    """Malformed config file, unknown key or a value of the wrong type."""


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def read_config(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def _convert(name: str, tp, value: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:      # Optional[X]
        inner = [a for a in args if a is not type(None)][0]
        return None if value.lower() in ("", "none") else _convert(name, inner, value)
    if origin is tuple:
        inner = args[0] if args else str
        items = [v.strip() for v in value.split(",") if v.strip()]
        return tuple(_convert(name, inner, v) for v in items)
    try:
        if tp is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {value!r} as {tp.__name__}") from None
    return value


def build(cls, values: Mapping[str, str], base=None):
    """Instantiate dataclass ``cls`` from string values, starting from ``base`` (or defaults)."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {k: _convert(k, hints[k], v) for k, v in values.items()}
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "none" if value is None else str(value)


def dump(obj, exclude: Iterable[str] = ()) -> str:
    """Canonical ``key = value`` text for a config dataclass (sorted keys)."""
    skip = set(exclude)
    lines = [f"{f.name} = {_fmt(getattr(obj, f.name))}" for f in dataclasses.fields(obj) if f.name not in skip]
    return "\n".join(sorted(lines)) + "\n"


def config_hash(obj, exclude: Iterable[str] = ()) -> str:
    return hashlib.sha256(dump(obj, exclude).encode()).hexdigest()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], config_hash: Optional[str] = None) -> None:
    """Write a CSV with a header row and, when given, a trailing config-hash comment."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
        if config_hash is not None:
            fh.write(f"# config-hash: {config_hash}\n")


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item"):          # numpy scalars
        return _cell(v.item())
    return v


def read_csv(path) -> tuple[list[str], list[dict[str, str]], Optional[str]]:
    """Rows of a harness CSV plus its config hash (``None`` when absent)."""
    lines = Path(path).read_text().splitlines()
    digest = None
    body = []
    for line in lines:
        if line.startswith("# config-hash:"):
            digest = line.split(":", 1)[1].strip()
        elif not line.startswith("#"):
            body.append(line)
    reader = csv.DictReader(body)
    return list(reader.fieldnames or []), list(reader), digest
