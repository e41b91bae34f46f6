"""Value rendering shared by the export artifact and result files."""

from __future__ import annotations

import json
import re

Value = int | float | str | None

_INT_RE = re.compile(r"^-?\d+$")


def render_float(x: float) -> str:
    """17 significant digits; always recognisable as a float."""
    text = format(x, ".17g")
    if not any(ch in text for ch in ".eni"):
        text += ".0"
    return text


def render_value(value: Value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        raise TypeError("booleans have no canonical rendering")
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return render_float(value)
    return json.dumps(value)


def parse_value(text: str) -> Value:
    """Inverse of :func:`render_value`; raises ``ValueError`` on junk."""
    if text == "none":
        return None
    if text.startswith('"'):
        value = json.loads(text)
        if not isinstance(value, str):
            raise ValueError(f"not a string literal: {text}")
        return value
    if _INT_RE.match(text):
        return int(text)
    return float(text)
