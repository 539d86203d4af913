"""Plain-text metric exposition.

One sample per line: ``name{label="value",...} <float>``. The label block
is omitted when there are no labels. Lines starting with ``#`` and blank
lines are ignored on parse. Label values may contain backslash, quote and
newline escaped as ``\\\\``, ``\\"`` and ``\\n``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

NAME_RE = re.compile(r"^[a-zA-Z_:][a-zA-Z0-9_:]*$")
_LINE_RE = re.compile(r"^(?P<name>[a-zA-Z_:][a-zA-Z0-9_:]*)(?:\{(?P<labels>.*)\})?\s+(?P<value>\S+)$")
_LABEL_RE = re.compile(r'([a-zA-Z_][a-zA-Z0-9_]*)="((?:[^"\\]|\\.)*)"')


class ExpositionError(Exception):
    """Raised when a metrics payload cannot be parsed."""


@dataclass
class Sample:
    name: str
    labels: dict[str, str] = field(default_factory=dict)
    value: float = 0.0


def _escape(value: str) -> str:
    return value.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")


def _unescape(value: str) -> str:
    out = []
    i = 0
    while i < len(value):
        ch = value[i]
        if ch == "\\" and i + 1 < len(value):
            nxt = value[i + 1]
            out.append({"n": "\n", '"': '"', "\\": "\\"}.get(nxt, nxt))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def render_exposition(samples: list[Sample]) -> str:
    """Render samples, labels in sorted order; trailing newline included."""
    lines = []
    for sample in samples:
        if not NAME_RE.match(sample.name):
            raise ExpositionError(f"bad metric name {sample.name!r}")
        if sample.labels:
            pairs = ",".join(f'{k}="{_escape(v)}"' for k, v in sorted(sample.labels.items()))
            lines.append(f"{sample.name}{{{pairs}}} {sample.value}")
        else:
            lines.append(f"{sample.name} {sample.value}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_exposition(text: str) -> list[Sample]:
    samples = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        match = _LINE_RE.match(line)
        if not match:
            raise ExpositionError(f"line {lineno}: cannot parse {raw!r}")
        labels = {}
        block = match.group("labels")
        if block:
            consumed = 0
            for lab in _LABEL_RE.finditer(block):
                labels[lab.group(1)] = _unescape(lab.group(2))
                consumed = lab.end()
            rest = block[consumed:].strip().strip(",")
            if rest:
                raise ExpositionError(f"line {lineno}: bad label block {block!r}")
        try:
            value = float(match.group("value"))
        except ValueError as exc:
            raise ExpositionError(f"line {lineno}: bad value {match.group('value')!r}") from exc
        samples.append(Sample(name=match.group("name"), labels=labels, value=value))
    return samples
