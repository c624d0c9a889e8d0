"""Parsing model output into a ReasoningTrace.

Expected shape (one marker per line, in this order)::

    DECOMPOSITION: ...
    INITIAL: ...
    COUNTERFACTUAL: ...
    FINAL: YES

Markers are uppercase, may be decorated with markdown (``**FINAL:**``,
``- INITIAL:``) and are only recognized at the start of a line. When a
marker occurs more than once, its first occurrence is used.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .core import Answer, ParseStatus, ReasoningTrace, SqiError, Verdict

DECOMPOSITION = "DECOMPOSITION"
INITIAL = "INITIAL"
COUNTERFACTUAL = "COUNTERFACTUAL"
FINAL = "FINAL"

DEFAULT_FALLBACK_WINDOW = 200


@dataclass(frozen=True)
class ResponseGrammar:
    markers: tuple[str, ...] = (DECOMPOSITION, INITIAL, COUNTERFACTUAL, FINAL)
    final_tokens: tuple[str, ...] = ("YES", "NO")
    hints: tuple[str, ...] = (
        "the target objects, and the background elements you are setting aside",
        "your first impression",
        "the strongest case for the opposite answer, and how you resolve it",
        "",
    )

    def format_lines(self) -> list[str]:
        lines = []
        for marker, hint in zip(self.markers, self.hints):
            if marker == FINAL:
                lines.append(f"{marker}: " + " or ".join(self.final_tokens))
            else:
                lines.append(f"{marker}: <{hint}>")
        return lines


GRAMMAR = ResponseGrammar()

_MARKER_RE = re.compile(
    r"^[ \t>#*_-]*(DECOMPOSITION|INITIAL|COUNTERFACTUAL|FINAL)[*_]*:[*_]*",
    re.MULTILINE,
)
_MARKER_ANYWHERE_RE = re.compile(r"(DECOMPOSITION|INITIAL|COUNTERFACTUAL|FINAL)[*_]*:")
_FINAL_TOKEN_RE = re.compile(r"^[\s*_\"'`]*(yes|no)(?![A-Za-z0-9])", re.IGNORECASE)
_HEDGE_RE = re.compile(
    r"^[\s*_\"'`]*(maybe|unsure|uncertain|unknown|unclear|undetermined|cannot|can't|not sure|perhaps|possibly)(?![A-Za-z0-9])",
    re.IGNORECASE,
)
_STANDALONE_RE = re.compile(r"(?<![A-Za-z0-9])(yes|no)(?![A-Za-z0-9])", re.IGNORECASE)


class RenderError(SqiError):
    pass


def answer_format_block(grammar: ResponseGrammar = GRAMMAR) -> str:
    """Instructions for the reply layout, generated from the grammar."""
    return "\n".join(
        [
            "Reply using exactly these four sections, in this order, each starting on its own line:",
            *grammar.format_lines(),
            f"The {FINAL} line must contain only " + " or ".join(grammar.final_tokens) + ".",
        ]
    )


def format_reminder(grammar: ResponseGrammar = GRAMMAR) -> str:
    return "\n".join(
        [
            "FORMAT REMINDER: your previous reply could not be read.",
            "Answer again using only these section markers, in order:",
            *grammar.format_lines(),
            "Do not add anything after the " + FINAL + " line.",
        ]
    )


def find_markers(text: str) -> list[tuple[str, int, int]]:
    """All line-initial markers as (name, start, body_start)."""
    return [(m.group(1), m.start(), m.end()) for m in _MARKER_RE.finditer(text)]


def extract_sections(text: str) -> dict[str, str]:
    """First-occurrence body of each marker, stripped."""
    found = find_markers(text)
    sections: dict[str, str] = {}
    for i, (name, _, body_start) in enumerate(found):
        if name in sections:
            continue
        end = found[i + 1][1] if i + 1 < len(found) else len(text)
        sections[name] = text[body_start:end].strip()
    return sections


def parse_final_token(body: str) -> Answer | None:
    m = _FINAL_TOKEN_RE.match(body)
    if not m:
        return None
    return Answer.YES if m.group(1).lower() == "yes" else Answer.NO


def fallback_answer(text: str, window: int = DEFAULT_FALLBACK_WINDOW) -> Answer | None:
    """Best-effort answer for text that does not follow the grammar.

    A FINAL marker with a readable token is trusted first; otherwise the
    last standalone yes/no in the trailing ``window`` characters is used.
    A hedged FINAL ("maybe", "unsure", ...) yields no answer at all.
    """
    final = extract_sections(text).get(FINAL)
    if final is not None:
        answer = parse_final_token(final)
        if answer is not None:
            return answer
        if _HEDGE_RE.match(final):
            return None
    last = None
    for m in _STANDALONE_RE.finditer(text[-window:] if window > 0 else ""):
        last = m
    if last is None:
        return None
    return Answer.YES if last.group(1).lower() == "yes" else Answer.NO


def _is_clean(text: str, sections: dict[str, str]) -> Answer | None:
    found = find_markers(text)
    firsts: dict[str, int] = {}
    for idx, (name, _, _) in enumerate(found):
        firsts.setdefault(name, idx)
    order = [firsts.get(name) for name in GRAMMAR.markers]
    if any(i is None for i in order) or order != sorted(order):
        return None
    if order[-1] != len(found) - 1:
        return None
    if not all(sections[name] for name in GRAMMAR.markers):
        return None
    return parse_final_token(sections[FINAL])


def parse_response(text: str | bytes, window: int = DEFAULT_FALLBACK_WINDOW) -> ReasoningTrace:
    """Parse backend text; never raises, the verdict's status records failure."""
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    sections = extract_sections(text)
    answer = _is_clean(text, sections)
    if answer is not None:
        verdict = Verdict(answer, ParseStatus.CLEAN)
    else:
        answer = fallback_answer(text, window)
        verdict = (
            Verdict(answer, ParseStatus.RECOVERED) if answer is not None else Verdict.unparseable()
        )
    return ReasoningTrace(
        decomposition=sections.get(DECOMPOSITION, ""),
        initial_judgment=sections.get(INITIAL, ""),
        counterfactual=sections.get(COUNTERFACTUAL, ""),
        final=verdict,
        raw=text,
    )


def body_is_renderable(body: str) -> bool:
    return bool(body) and body == body.strip() and not _MARKER_ANYWHERE_RE.search(body)


def render_trace(trace: ReasoningTrace) -> str:
    if trace.final.parse_status is not ParseStatus.CLEAN:
        raise RenderError(f"only clean traces render, got {trace.final.parse_status.value}")
    bodies = (trace.decomposition, trace.initial_judgment, trace.counterfactual)
    for name, body in zip(GRAMMAR.markers, bodies):
        if not body_is_renderable(body):
            raise RenderError(f"{name} section is empty, padded, or contains a marker")
    token = "YES" if trace.final.answer is Answer.YES else "NO"
    return (
        f"{DECOMPOSITION}: {trace.decomposition}\n"
        f"{INITIAL}: {trace.initial_judgment}\n"
        f"{COUNTERFACTUAL}: {trace.counterfactual}\n"
        f"{FINAL}: {token}"
    )
