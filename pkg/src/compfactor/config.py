"""Flat ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Keys are case-insensitive and may
use dashes or underscores (``omega-y`` and ``omega_y`` are the same key).
Values stay strings; the command-line parser converts them with the same
rules it applies to flags, so a config entry behaves exactly like its flag.
"""
from __future__ import annotations

from pathlib import Path

from .core_ops import ValidationError


def normalize_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = normalize_key(key)
        if not key:
            raise ValidationError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ValidationError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path: str | Path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), str(path))


def parse_bool(value: str | bool) -> bool:
    if isinstance(value, bool):
        return value
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {value!r}")


def int_list(value: str) -> tuple[int, ...]:
    try:
        items = tuple(int(v) for v in value.replace(" ", "").split(",") if v)
    except ValueError:
        raise ValidationError(f"expected comma-separated integers, got {value!r}") from None
    if not items:
        raise ValidationError("empty list")
    return items


def float_list(value: str) -> tuple[float, ...]:
    try:
        items = tuple(float(v) for v in value.replace(" ", "").split(",") if v)
    except ValueError:
        raise ValidationError(f"expected comma-separated numbers, got {value!r}") from None
    if not items:
        raise ValidationError("empty list")
    return items


def model_list(value: str) -> tuple[tuple[int, int], ...]:
    """``"1:1,2:2"`` -> ((1, 1), (2, 2))."""
    out = []
    for item in value.replace(" ", "").split(","):
        if not item:
            continue
        try:
            kx, ku = item.split(":")
            out.append((int(kx), int(ku)))
        except ValueError:
            raise ValidationError(f"model entries look like kx:ku, got {item!r}") from None
    if not out:
        raise ValidationError("empty model list")
    return tuple(out)
