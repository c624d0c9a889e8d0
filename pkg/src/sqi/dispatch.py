"""Keyword dispatch from question text to an illusion query type.

Rules live in a plain text file, one per line::

    alignment := collinear, aligned, line up

Rules are tried top to bottom and the first one with a keyword present in
the question wins. Keywords match whole words, case-insensitively; an
unmatched question falls back to ``QueryType.OTHER``.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable

from .core import SqiError, Stage


class QueryType(enum.Enum):
    ALIGNMENT = "alignment"
    LENGTH = "length"
    SIZE = "size"
    COLOR = "color"
    COUNT = "count"
    ORIENTATION = "orientation"
    CURVATURE = "curvature"
    OTHER = "other"

    @classmethod
    def parse(cls, name: str) -> "QueryType":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown query type {name!r}") from None


class RuleSyntaxError(SqiError):
    pass


def normalize(text: str) -> str:
    # upper() first so that case variants of the same text fold identically
    return " ".join(text.upper().lower().split())


@dataclass(frozen=True)
class DispatchRule:
    query_type: QueryType
    keywords: tuple[str, ...]
    pattern: re.Pattern = field(compare=False, repr=False)

    @classmethod
    def build(cls, query_type: QueryType, keywords: tuple[str, ...]) -> "DispatchRule":
        alts = "|".join(
            r"\s+".join(re.escape(w) for w in normalize(kw).split()) for kw in keywords
        )
        return cls(query_type, keywords, re.compile(rf"(?<!\w)(?:{alts})(?!\w)"))


@dataclass(frozen=True)
class DispatchRules:
    rules: tuple[DispatchRule, ...]

    def classify(self, question: str) -> QueryType:
        text = normalize(question)
        for rule in self.rules:
            if rule.pattern.search(text):
                return rule.query_type
        return QueryType.OTHER


def parse_rules(text: str, source: str | None = None) -> DispatchRules:
    rules = []
    where = f"{source}:" if source else "line "
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, sep, rest = line.partition(":=")
        if not sep:
            raise RuleSyntaxError(f"{where}{lineno}: expected '<query-type> := <keyword>, ...'")
        try:
            qt = QueryType.parse(name)
        except ValueError as exc:
            raise RuleSyntaxError(f"{where}{lineno}: {exc}") from None
        keywords = tuple(k.strip() for k in rest.split(","))
        if not keywords or any(not normalize(k) for k in keywords):
            raise RuleSyntaxError(f"{where}{lineno}: empty keyword")
        rules.append(DispatchRule.build(qt, keywords))
    return DispatchRules(tuple(rules))


def load_rules(path: str | Path) -> DispatchRules:
    path = Path(path)
    return parse_rules(path.read_text(encoding="utf-8"), source=str(path))


@lru_cache(maxsize=1)
def default_rules() -> DispatchRules:
    text = resources.files("sqi.data").joinpath("dispatch_rules.txt").read_text(encoding="utf-8")
    return parse_rules(text, source="dispatch_rules.txt")


def classify_query(question: str, rules: DispatchRules | None = None) -> QueryType:
    return (rules or default_rules()).classify(question)


# --- heuristic profiles -----------------------------------------------------

ALIGNMENT_DIRECTION_DIRECTIVE = (
    "Follow the direction of each target segment and confirm that all of them run "
    "along one consistent line; disregard background grids and crossing hatch lines."
)
OCCLUDER_ISOLATION_DIRECTIVE = (
    "Separate the visible pieces of each target from any shape lying on top of them; "
    "the occluder is background and says nothing about where the pieces lead."
)
EXTENSION_CHECK_DIRECTIVE = (
    "Extend each visible segment through the occluded region in your mind and check "
    "whether the extensions meet before trusting the apparent offset."
)
COLOR_ISOLATION_DIRECTIVE = (
    "Cut each target surface out mentally and compare the two colors as if both sat on "
    "a plain neutral background; disregard shadows, gradients and neighboring tiles."
)


@dataclass(frozen=True)
class ProfileDirective:
    stage: Stage
    text: str


ConstraintFilter = Callable[[object], bool]


@dataclass(frozen=True)
class HeuristicProfile:
    """Specialization applied on top of the base constraint set.

    ``filters`` are extra predicates over constraint records; a constraint
    is kept only if every filter accepts it (applicability to
    ``query_type`` is always checked by the compiler).
    """

    query_type: QueryType
    extra_directives: tuple[ProfileDirective, ...] = ()
    filters: tuple[ConstraintFilter, ...] = ()


_PROFILE_TABLE: dict[QueryType, tuple[ProfileDirective, ...]] = {
    QueryType.ALIGNMENT: (
        ProfileDirective(Stage.DECOMPOSITION, ALIGNMENT_DIRECTION_DIRECTIVE),
        ProfileDirective(Stage.DECOMPOSITION, OCCLUDER_ISOLATION_DIRECTIVE),
        ProfileDirective(Stage.COUNTERFACTUAL, EXTENSION_CHECK_DIRECTIVE),
    ),
    QueryType.COLOR: (ProfileDirective(Stage.DECOMPOSITION, COLOR_ISOLATION_DIRECTIVE),),
}


def heuristic_profile(query_type: QueryType) -> HeuristicProfile:
    return HeuristicProfile(query_type, _PROFILE_TABLE.get(query_type, ()))
