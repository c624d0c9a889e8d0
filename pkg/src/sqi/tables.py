"""Line-oriented key/value tables.

The same grammar backs constraint spec files and run config files::

    # full-line comments start with '#'
    [section]
    key = "a quoted string, JSON escapes allowed"
    other = bare value running to end of line

Sections may repeat (each ``[constraint]`` opens a new table). Keys are
``[A-Za-z_][A-Za-z0-9_-]*`` and may appear once per table.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .core import SqiError

_HEADER = re.compile(r"\[\s*([A-Za-z_][A-Za-z0-9_-]*)\s*\]\s*$")
_KEY = re.compile(r"([A-Za-z_][A-Za-z0-9_-]*)\s*=\s*")


class SpecSyntaxError(SqiError):
    def __init__(self, message: str, line: int, column: int, source: str | None = None):
        self.message = message
        self.line = line
        self.column = column
        self.source = source
        where = f"{source}:" if source else ""
        super().__init__(f"{where}{line}:{column}: {message}")


@dataclass
class Table:
    name: str
    line: int
    values: dict[str, str] = field(default_factory=dict)
    lines: dict[str, int] = field(default_factory=dict)


def _parse_quoted(text: str, start: int, lineno: int, source: str | None) -> tuple[str, int]:
    """Decode the JSON string literal starting at ``text[start]``; return (value, end)."""
    i = start + 1
    while i < len(text):
        ch = text[i]
        if ch == "\\":
            i += 2
            continue
        if ch == '"':
            try:
                return json.loads(text[start : i + 1]), i + 1
            except json.JSONDecodeError as exc:
                raise SpecSyntaxError(
                    f"bad string literal: {exc.msg}", lineno, start + exc.pos + 1, source
                ) from None
        i += 1
    raise SpecSyntaxError("unterminated string", lineno, start + 1, source)


def parse_tables(text: str, source: str | None = None) -> list[Table]:
    tables: list[Table] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        indent = len(line) - len(line.lstrip())
        if stripped.startswith("["):
            m = _HEADER.match(stripped)
            if not m:
                raise SpecSyntaxError("malformed section header", lineno, indent + 1, source)
            tables.append(Table(m.group(1), lineno))
            continue
        m = _KEY.match(line, indent)
        if not m:
            raise SpecSyntaxError("expected 'key = value'", lineno, indent + 1, source)
        if not tables:
            raise SpecSyntaxError("key outside of any [section]", lineno, indent + 1, source)
        key = m.group(1)
        table = tables[-1]
        if key in table.values:
            raise SpecSyntaxError(f"duplicate key {key!r} in table", lineno, indent + 1, source)
        pos = m.end()
        if pos < len(line) and line[pos] == '"':
            value, end = _parse_quoted(line, pos, lineno, source)
            rest = line[end:]
            if rest.strip():
                col = end + len(rest) - len(rest.lstrip()) + 1
                raise SpecSyntaxError("unexpected text after string", lineno, col, source)
        else:
            value = line[pos:].strip()
            if not value:
                raise SpecSyntaxError(f"missing value for {key!r}", lineno, pos + 1, source)
        table.values[key] = value
        table.lines[key] = lineno
    return tables


# str.splitlines() breaks on these too, so they must never appear raw in a value
_LINE_BREAKS = re.compile("[\x0b\x0c\x1c\x1d\x1e\x85\u2028\u2029]")


def quote(value: str) -> str:
    text = json.dumps(value, ensure_ascii=False)
    return _LINE_BREAKS.sub(lambda m: f"\\u{ord(m.group()):04x}", text)


def dump_tables(tables: list[tuple[str, list[tuple[str, str]]]]) -> str:
    """Serialize ``[(section, [(key, value), ...]), ...]``; every value is quoted."""
    chunks = []
    for name, items in tables:
        body = "\n".join(f"{k} = {quote(v)}" for k, v in items)
        chunks.append(f"[{name}]\n{body}\n" if body else f"[{name}]\n")
    return "\n".join(chunks)
