"""Structured qualitative inference for frozen vision-language models."""

from .constraints import (
    ConstraintProtocol,
    ConstraintSet,
    PromptDocument,
    compile_protocol,
    default_constraints,
    parse_constraint_spec,
    render_prompt,
)
from .core import (
    Answer,
    FailureMode,
    IllusionQuery,
    ImageRef,
    ParseStatus,
    ReasoningTrace,
    Stage,
    Verdict,
    verdict_from_label,
    verdict_to_label,
)
from .dispatch import HeuristicProfile, QueryType, classify_query, heuristic_profile
from .parser import parse_response, render_trace

__version__ = "0.1.0"
