"""Qualitative constraint sets and their compilation into a prompt protocol."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .core import (
    FAILURE_MODE_FOR_STAGE,
    STAGE_FOR_FAILURE_MODE,
    FailureMode,
    IllusionQuery,
    ImageRef,
    SqiError,
    Stage,
)
from .dispatch import HeuristicProfile, QueryType
from .parser import answer_format_block
from .tables import dump_tables, parse_tables

log = logging.getLogger(__name__)

CONSTRAINT_KEYS = {"id", "target", "directive", "applies_to"}
REQUIRED_KEYS = ("id", "target", "directive")

# Verbs that ask the model for numeric estimates. A directive may forbid them
# ("do not measure") but must never open a sentence with one.
QUANTITATIVE_VERBS = ("measure", "count", "estimate", "calculate", "compute", "quantify")


class ValidationError(SqiError):
    pass


class EmptyStageError(SqiError):
    def __init__(self, stage: Stage, query_type: QueryType):
        self.stage = stage
        self.query_type = query_type
        super().__init__(
            f"stage {stage.value} has no directives for query type {query_type.value}"
        )


@dataclass(frozen=True)
class Constraint:
    id: str
    target: FailureMode
    directive: str
    applies_to: tuple[QueryType, ...] | None = None

    @property
    def stage(self) -> Stage:
        return STAGE_FOR_FAILURE_MODE[self.target]

    def applies(self, query_type: QueryType) -> bool:
        return self.applies_to is None or query_type in self.applies_to


@dataclass(frozen=True)
class ConstraintSet:
    constraints: tuple[Constraint, ...]

    def __post_init__(self) -> None:
        if not self.constraints:
            raise ValidationError("constraint set is empty")
        seen = set()
        for c in self.constraints:
            if c.id in seen:
                raise ValidationError(f"duplicate constraint id {c.id!r}")
            seen.add(c.id)
            if not c.directive.strip():
                raise ValidationError(f"constraint {c.id!r} has an empty directive")

    def for_stage(self, stage: Stage) -> tuple[Constraint, ...]:
        return tuple(c for c in self.constraints if c.stage is stage)

    def missing_failure_modes(self) -> set[FailureMode]:
        return set(FailureMode) - {c.target for c in self.constraints}


def _constraint_from_table(table, source: str | None) -> Constraint:
    where = f"{source}:" if source else "line "
    at = f"{where}{table.line}"
    unknown = set(table.values) - CONSTRAINT_KEYS
    if unknown:
        key = sorted(unknown, key=lambda k: table.lines[k])[0]
        raise ValidationError(f"{where}{table.lines[key]}: unknown key {key!r}")
    for key in REQUIRED_KEYS:
        if key not in table.values:
            raise ValidationError(f"{at}: constraint is missing {key!r}")
    cid = table.values["id"].strip()
    if not cid:
        raise ValidationError(f"{at}: constraint id is empty")
    try:
        target = FailureMode(table.values["target"].strip())
    except ValueError:
        raise ValidationError(
            f"{where}{table.lines['target']}: unknown failure mode {table.values['target']!r}"
        ) from None
    directive = table.values["directive"]
    if not directive.strip():
        raise ValidationError(f"{where}{table.lines['directive']}: empty directive for {cid!r}")
    applies_to = None
    if "applies_to" in table.values:
        try:
            applies_to = tuple(
                QueryType.parse(name) for name in table.values["applies_to"].split(",")
            )
        except ValueError as exc:
            raise ValidationError(f"{where}{table.lines['applies_to']}: {exc}") from None
    return Constraint(cid, target, directive, applies_to)


def parse_constraint_spec(text: str, source: str | None = None) -> ConstraintSet:
    tables = parse_tables(text, source)
    constraints = []
    for table in tables:
        if table.name != "constraint":
            where = f"{source}:" if source else "line "
            raise ValidationError(f"{where}{table.line}: unknown section [{table.name}]")
        constraints.append(_constraint_from_table(table, source))
    if not constraints:
        raise ValidationError("no constraints defined")
    ids = [c.id for c in constraints]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ValidationError(f"duplicate constraint id {dupes[0]!r}")
    return ConstraintSet(tuple(constraints))


def serialize_constraint_spec(cs: ConstraintSet) -> str:
    tables = []
    for c in cs.constraints:
        items = [("id", c.id), ("target", c.target.value), ("directive", c.directive)]
        if c.applies_to is not None:
            items.append(("applies_to", ", ".join(q.value for q in c.applies_to)))
        tables.append(("constraint", items))
    return dump_tables(tables)


def load_constraint_spec(path: str | Path) -> ConstraintSet:
    path = Path(path)
    cs = parse_constraint_spec(path.read_text(encoding="utf-8"), source=str(path))
    for problem in lint_constraints(cs):
        log.warning("%s: %s", path, problem)
    return cs


@lru_cache(maxsize=1)
def default_constraints() -> ConstraintSet:
    text = resources.files("sqi.data").joinpath("default.constraints").read_text(encoding="utf-8")
    cs = parse_constraint_spec(text, source="default.constraints")
    problems = lint_constraints(cs)
    if problems:
        raise ValidationError("; ".join(problems))
    missing = cs.missing_failure_modes()
    if missing:
        raise ValidationError(f"default constraints miss {sorted(m.value for m in missing)}")
    return cs


_SENTENCE_SPLIT = re.compile(r"[.;:!?]\s+|\n+")


def lint_directive(text: str) -> list[str]:
    """Sentences that open with a quantitative verb."""
    problems = []
    for sentence in _SENTENCE_SPLIT.split(text):
        words = re.findall(r"[A-Za-z']+", sentence)
        if words and words[0].lower() in QUANTITATIVE_VERBS:
            problems.append(f"directive asks for numeric estimation: {sentence.strip()!r}")
    return problems


def lint_constraints(cs: ConstraintSet) -> list[str]:
    return [f"{c.id}: {p}" for c in cs.constraints for p in lint_directive(c.directive)]


# --- compilation ------------------------------------------------------------

STAGE_HEADERS = {
    Stage.AXIOMS: "### STAGE 1 - QUALITATIVE AXIOMS",
    Stage.DECOMPOSITION: "### STAGE 2 - SCENE DECOMPOSITION",
    Stage.COUNTERFACTUAL: "### STAGE 3 - COUNTERFACTUAL SELF-CHECK",
    Stage.ANSWER_FORMAT: "### STAGE 4 - ANSWER FORMAT",
}
STAGE_INTROS = {
    Stage.AXIOMS: "Follow these rules throughout your reasoning:",
    Stage.DECOMPOSITION: "Before judging, split the scene into targets and background:",
    Stage.COUNTERFACTUAL: "After forming an initial judgment, challenge it:",
}
STAGE_ORDER = (Stage.AXIOMS, Stage.DECOMPOSITION, Stage.COUNTERFACTUAL, Stage.ANSWER_FORMAT)

SYSTEM_TEXT = (
    "You are a careful visual analyst. Illusion images are built to make appearance "
    "disagree with reality; answer about what is actually drawn."
)
QUESTION_PREFIX = "QUESTION: "


@dataclass(frozen=True)
class Segment:
    stage: Stage
    text: str


@dataclass(frozen=True)
class ConstraintProtocol:
    query_type: QueryType
    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        if tuple(s.stage for s in self.segments) != STAGE_ORDER:
            raise ValueError("protocol segments must follow the fixed stage order")

    def block(self, stage: Stage) -> str:
        return self.segments[STAGE_ORDER.index(stage)].text

    def text(self) -> str:
        return "\n\n".join(s.text for s in self.segments)


def stage_directives(cs: ConstraintSet, profile: HeuristicProfile, stage: Stage) -> list[str]:
    kept = [
        c.directive
        for c in cs.for_stage(stage)
        if c.applies(profile.query_type) and all(f(c) for f in profile.filters)
    ]
    kept.extend(d.text for d in profile.extra_directives if d.stage is stage)
    return kept


def render_block(stage: Stage, directives: list[str]) -> str:
    if stage is Stage.ANSWER_FORMAT:
        return f"{STAGE_HEADERS[stage]}\n{answer_format_block()}"
    bullets = "\n".join(f"- {d}" for d in directives)
    return f"{STAGE_HEADERS[stage]}\n{STAGE_INTROS[stage]}\n{bullets}"


def compile_protocol(cs: ConstraintSet, profile: HeuristicProfile) -> ConstraintProtocol:
    segments = []
    for stage in STAGE_ORDER:
        directives = []
        if stage in FAILURE_MODE_FOR_STAGE:
            directives = stage_directives(cs, profile, stage)
            if not directives:
                raise EmptyStageError(stage, profile.query_type)
        segments.append(Segment(stage, render_block(stage, directives)))
    return ConstraintProtocol(profile.query_type, tuple(segments))


@dataclass(frozen=True)
class PromptDocument:
    system_text: str
    user_text: str
    image: ImageRef


def render_prompt(
    protocol: ConstraintProtocol, query: IllusionQuery, axioms_in_system: bool = False
) -> PromptDocument:
    """Fuse the protocol and the question into one prompt.

    With ``axioms_in_system`` the axioms block moves into the system text
    and the user text carries the remaining three blocks.
    """
    blocks = [s.text for s in protocol.segments]
    system_text = SYSTEM_TEXT
    if axioms_in_system:
        system_text = f"{SYSTEM_TEXT}\n\n{blocks.pop(0)}"
    user_text = "\n\n".join(blocks) + "\n\n" + QUESTION_PREFIX + query.question
    return PromptDocument(system_text, user_text, query.image)
