"""End-to-end orchestration for one query: dispatch, compile, render, call, parse."""

from __future__ import annotations

import enum
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .backend import Backend, BackendError, ChatRequest, Reply
from .constraints import (
    QUESTION_PREFIX,
    SYSTEM_TEXT,
    ConstraintProtocol,
    ConstraintSet,
    compile_protocol,
    render_prompt,
)
from .core import IllusionQuery, ParseStatus, ReasoningTrace, Stage, Verdict
from .dispatch import DispatchRules, QueryType, classify_query, heuristic_profile
from .parser import (
    COUNTERFACTUAL,
    DECOMPOSITION,
    DEFAULT_FALLBACK_WINDOW,
    FINAL,
    GRAMMAR,
    INITIAL,
    extract_sections,
    format_reminder,
    parse_final_token,
    parse_response,
)


class Mode(enum.Enum):
    SINGLE_PASS = "single-pass"
    MULTI_TURN = "multi-turn"

    @classmethod
    def parse(cls, text: str) -> "Mode":
        norm = text.strip().lower().replace("_", "-")
        aliases = {"singlepass": "single-pass", "multiturn": "multi-turn"}
        try:
            return cls(aliases.get(norm, norm))
        except ValueError:
            raise ValueError(f"unknown mode {text!r} (use single-pass or multi-turn)") from None


@dataclass(frozen=True)
class PipelineConfig:
    mode: Mode = Mode.SINGLE_PASS
    max_parse_retries: int = 1
    backend_id: str = ""
    temperature: float = 0.0
    seed: int | None = None
    axioms_in_system: bool = False
    fallback_window: int = DEFAULT_FALLBACK_WINDOW

    def __post_init__(self) -> None:
        if not 0 <= self.max_parse_retries <= 3:
            raise ValueError("max_parse_retries must be between 0 and 3")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.fallback_window < 0:
            raise ValueError("fallback_window must be non-negative")


@dataclass(frozen=True)
class PipelineResult:
    query: IllusionQuery
    query_type: QueryType
    trace: ReasoningTrace
    verdict: Verdict
    backend_calls: int
    cache_hit: bool

    def log_record(self) -> dict:
        return {
            "item_id": self.query.item_id,
            "query_type": self.query_type.value,
            "backend_calls": self.backend_calls,
            "cache_hit": self.cache_hit,
            "parse_status": self.verdict.parse_status.value,
            "answer": self.verdict.answer.value if self.verdict.answer else None,
            "decomposition": self.trace.decomposition,
            "initial": self.trace.initial_judgment,
            "counterfactual": self.trace.counterfactual,
            "raw": self.trace.raw,
        }


def _request(cfg: PipelineConfig, backend: Backend, system: str, user: str, q: IllusionQuery):
    return ChatRequest(
        system_text=system,
        user_text=user,
        image_b64=q.image.data_b64,
        media_type=q.image.media_type,
        temperature=cfg.temperature,
        seed=cfg.seed,
        model_name=backend.model_name,
    )


def _send(backend: Backend, request: ChatRequest, q: IllusionQuery) -> Reply:
    try:
        return backend.send(request)
    except BackendError as exc:
        if exc.item_id is None:
            exc.item_id = q.item_id
        raise


def _prepare(q, cs, rules) -> tuple[QueryType, ConstraintProtocol]:
    qt = classify_query(q.question, rules)
    return qt, compile_protocol(cs, heuristic_profile(qt))


def run_sqi(
    q: IllusionQuery,
    cs: ConstraintSet,
    cfg: PipelineConfig,
    backend: Backend,
    rules: DispatchRules | None = None,
) -> PipelineResult:
    if cfg.mode is Mode.MULTI_TURN:
        return run_sqi_multiturn(q, cs, cfg, backend, rules)
    qt, protocol = _prepare(q, cs, rules)
    doc = render_prompt(protocol, q, cfg.axioms_in_system)
    hits = []
    for attempt in range(1 + cfg.max_parse_retries):
        user = doc.user_text if attempt == 0 else f"{doc.user_text}\n\n{format_reminder()}"
        reply = _send(backend, _request(cfg, backend, doc.system_text, user, q), q)
        hits.append(reply.cache_hit)
        trace = parse_response(reply.text, cfg.fallback_window)
        if trace.final.parse_status is not ParseStatus.UNPARSEABLE:
            break
    return PipelineResult(q, qt, trace, trace.final, len(hits), all(hits))


# --- multi-turn ablation ----------------------------------------------------

_TURN_MARKERS = ((DECOMPOSITION,), (INITIAL,), (COUNTERFACTUAL, FINAL))
_TURN_TASKS = (
    "Work only on the scene decomposition for now.",
    "Using the decomposition above, give only your first impression.",
    "Challenge your first impression, then commit to an answer.",
)


def _turn_format(markers: tuple[str, ...]) -> str:
    lines = [line for line in GRAMMAR.format_lines() if line.split(":", 1)[0] in markers]
    return "Reply with only these sections:\n" + "\n".join(lines)


def _turn_ok(markers: tuple[str, ...], text: str) -> bool:
    sections = extract_sections(text)
    if not all(sections.get(m) for m in markers):
        return False
    return FINAL not in markers or parse_final_token(sections[FINAL]) is not None


def _turn_header(n: int, kind: str) -> str:
    return f"[TURN {n} {kind}]"


def run_sqi_multiturn(
    q: IllusionQuery,
    cs: ConstraintSet,
    cfg: PipelineConfig,
    backend: Backend,
    rules: DispatchRules | None = None,
) -> PipelineResult:
    """Three sequential exchanges; every later turn repeats the earlier ones verbatim."""
    qt, protocol = _prepare(q, cs, rules)
    system = SYSTEM_TEXT
    opening = [protocol.block(Stage.DECOMPOSITION)]
    if cfg.axioms_in_system:
        system = f"{SYSTEM_TEXT}\n\n{protocol.block(Stage.AXIOMS)}"
    else:
        opening.insert(0, protocol.block(Stage.AXIOMS))
    turn_bodies = (
        "\n\n".join(opening + [QUESTION_PREFIX + q.question, _TURN_TASKS[0]]),
        _TURN_TASKS[1],
        "\n\n".join([protocol.block(Stage.COUNTERFACTUAL), _TURN_TASKS[2]]),
    )
    transcript: list[str] = []
    replies: list[str] = []
    hits = []
    for n, (markers, body) in enumerate(zip(_TURN_MARKERS, turn_bodies), 1):
        prompt = f"{_turn_header(n, 'PROMPT')}\n{body}\n\n{_turn_format(markers)}"
        base = "\n\n".join(transcript + [prompt])
        for attempt in range(1 + cfg.max_parse_retries):
            user = base if attempt == 0 else f"{base}\n\n{format_reminder()}"
            reply = _send(backend, _request(cfg, backend, system, user, q), q)
            hits.append(reply.cache_hit)
            if _turn_ok(markers, reply.text):
                break
        transcript += [prompt, f"{_turn_header(n, 'REPLY')}\n{reply.text}"]
        replies.append(reply.text)
    trace = parse_response("\n".join(replies), cfg.fallback_window)
    return PipelineResult(q, qt, trace, trace.final, len(hits), all(hits))


# --- batches ----------------------------------------------------------------


def run_many(
    queries: Iterable[IllusionQuery],
    cs: ConstraintSet,
    cfg: PipelineConfig,
    backend: Backend,
    rules: DispatchRules | None = None,
    concurrency: int = 1,
) -> list[PipelineResult]:
    """Run every query with at most ``concurrency`` in flight; results sorted by item_id."""
    ordered = sorted(queries, key=lambda q: q.item_id)
    if concurrency <= 1:
        return [run_sqi(q, cs, cfg, backend, rules) for q in ordered]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        return list(pool.map(lambda q: run_sqi(q, cs, cfg, backend, rules), ordered))


def write_traces(results: Iterable[PipelineResult], trace_dir: str | Path) -> Path:
    trace_dir = Path(trace_dir)
    trace_dir.mkdir(parents=True, exist_ok=True)
    path = trace_dir / "traces.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for result in sorted(results, key=lambda r: r.query.item_id):
            fh.write(json.dumps(result.log_record(), sort_keys=True, ensure_ascii=False) + "\n")
    return path
