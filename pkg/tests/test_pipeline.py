import copy
import json
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sqi.backend import (
    BackendError,
    CacheStore,
    RecordingBackend,
    ReplayBackend,
    ScriptedBackend,
)
from sqi.constraints import STAGE_HEADERS, STAGE_ORDER, default_constraints
from sqi.core import Answer, IllusionQuery, ParseStatus, Stage, Verdict
from sqi.parser import format_reminder
from sqi.pipeline import Mode, PipelineConfig, run_many, run_sqi, write_traces

CS = default_constraints()
SINGLE = PipelineConfig()
MULTI = PipelineConfig(mode=Mode.MULTI_TURN)
GARBAGE = "I am not able to see the picture clearly, sorry."


def test_occluded_alignment_walkthrough(make_query, occluded_text):
    backend = ScriptedBackend({"*": occluded_text})
    result = run_sqi(make_query(), CS, SINGLE, backend)
    assert result.verdict == Verdict(Answer.YES, ParseStatus.CLEAN)
    assert "occluder" in result.trace.decomposition.lower()
    assert result.backend_calls == 1 and not result.cache_hit


def test_garbage_twice_is_unparseable_after_one_retry(make_query):
    backend = ScriptedBackend({"*": GARBAGE})
    result = run_sqi(make_query(), CS, SINGLE, backend)
    assert result.verdict.parse_status is ParseStatus.UNPARSEABLE
    assert result.backend_calls == 2 == backend.request_count
    first, second = backend.requests
    assert second.user_text == first.user_text + "\n\n" + format_reminder()


@pytest.mark.parametrize("retries", [0, 1, 2, 3])
def test_call_count_is_bounded_by_retries(make_query, retries):
    backend = ScriptedBackend({"*": GARBAGE})
    result = run_sqi(make_query(), CS, PipelineConfig(max_parse_retries=retries), backend)
    assert result.backend_calls == 1 + retries


def test_retry_stops_at_first_parseable_reply(make_query, occluded_text):
    backend = ScriptedBackend({"*": [GARBAGE, occluded_text]})
    result = run_sqi(make_query(), CS, SINGLE, backend)
    assert result.verdict.parse_status is ParseStatus.CLEAN
    assert result.backend_calls == 2


def test_recovered_reply_is_not_retried(make_query):
    backend = ScriptedBackend({"*": "Hard to say, but the answer is no."})
    result = run_sqi(make_query(), CS, SINGLE, backend)
    assert result.verdict == Verdict(Answer.NO, ParseStatus.RECOVERED)
    assert result.backend_calls == 1


def test_max_parse_retries_is_validated():
    with pytest.raises(ValueError):
        PipelineConfig(max_parse_retries=4)


def test_mode_aliases():
    assert Mode.parse("multiturn") is Mode.MULTI_TURN
    assert Mode.parse("Single_Pass") is Mode.SINGLE_PASS
    with pytest.raises(ValueError):
        Mode.parse("two-pass")


def test_backend_error_carries_item_id(make_query):
    backend = ScriptedBackend({})
    with pytest.raises(BackendError) as info:
        run_sqi(make_query(item_id="item-42"), CS, SINGLE, backend)
    assert info.value.item_id == "item-42"
    assert "item-42" in str(info.value)


def test_inputs_are_not_mutated(make_query, occluded_text):
    q = make_query()
    before_q, before_cs = copy.deepcopy(q), copy.deepcopy(CS)
    run_sqi(q, CS, SINGLE, ScriptedBackend({"*": occluded_text}))
    assert q == before_q and CS == before_cs


def test_replay_is_deterministic(tmp_path, make_query, occluded_text, no_network):
    store = CacheStore(tmp_path)
    q = make_query()
    live = run_sqi(q, CS, SINGLE, RecordingBackend(ScriptedBackend({"*": occluded_text}), store))
    replay = ReplayBackend(store, "scripted", "scripted")
    again = [run_sqi(q, CS, SINGLE, replay) for _ in range(3)]
    assert all(r.trace == live.trace and r.verdict == live.verdict for r in again)
    assert all(r.cache_hit for r in again)
    assert no_network == []


def test_journal_counts_every_backend_call(tmp_path, make_query, occluded_text):
    store = CacheStore(tmp_path)
    backend = RecordingBackend(ScriptedBackend({"~top line longer": GARBAGE, "*": occluded_text}), store)
    queries = [
        make_query(item_id="a"),
        make_query("Is the top line longer?", item_id="b"),
        make_query(item_id="c"),
    ]
    results = [run_sqi(q, CS, SINGLE, backend) for q in queries]
    assert len(store.journal_records()) == sum(r.backend_calls for r in results) == 4


# --- multi-turn -------------------------------------------------------------

TURN_REPLIES = {
    1: "DECOMPOSITION: Two red segments; the gray bar is an occluder.",
    2: "INITIAL: They look offset.",
    3: "COUNTERFACTUAL: Extended through the bar, they meet.\nFINAL: YES",
}


def _turn(user_text: str) -> int:
    return max(int(n) for n in re.findall(r"\[TURN (\d) PROMPT\]", user_text))


def turn_responder(overrides=None):
    replies = {**TURN_REPLIES, **(overrides or {})}
    return lambda req: replies[_turn(req.user_text)]


def test_multiturn_counterfactual_is_turn_three_body(make_query):
    backend = ScriptedBackend(responder=turn_responder())
    result = run_sqi(make_query(), CS, MULTI, backend)
    assert result.trace.counterfactual == "Extended through the bar, they meet."
    assert result.verdict == Verdict(Answer.YES, ParseStatus.CLEAN)
    assert result.backend_calls == 3


def test_multiturn_later_turns_carry_earlier_exchanges(make_query):
    backend = ScriptedBackend(responder=turn_responder())
    run_sqi(make_query(), CS, MULTI, backend)
    first, second, third = (r.user_text for r in backend.requests)
    assert second.startswith(first)
    assert TURN_REPLIES[1] in second
    assert third.startswith(second)
    assert TURN_REPLIES[2] in third
    assert STAGE_HEADERS[Stage.COUNTERFACTUAL] in third
    assert STAGE_HEADERS[Stage.COUNTERFACTUAL] not in second


def test_multiturn_garbage_turn_two_degrades_status(make_query):
    backend = ScriptedBackend(responder=turn_responder({2: GARBAGE}))
    result = run_sqi(make_query(), CS, MULTI, backend)
    assert result.verdict.parse_status in (ParseStatus.RECOVERED, ParseStatus.UNPARSEABLE)
    assert result.verdict.parse_status is not ParseStatus.CLEAN
    assert 3 <= result.backend_calls <= 3 * (1 + MULTI.max_parse_retries)
    assert result.backend_calls == 4


def test_single_and_multi_turn_agree_on_the_verdict(make_query, occluded_text):
    single = run_sqi(make_query(), CS, SINGLE, ScriptedBackend({"*": occluded_text}))
    multi = run_sqi(make_query(), CS, MULTI, ScriptedBackend(responder=turn_responder()))
    assert single.verdict == multi.verdict


@pytest.mark.parametrize("retries", [0, 1, 2])
def test_multiturn_call_bounds(make_query, retries):
    backend = ScriptedBackend({"*": GARBAGE})
    cfg = PipelineConfig(mode=Mode.MULTI_TURN, max_parse_retries=retries)
    result = run_sqi(make_query(), CS, cfg, backend)
    assert result.backend_calls == 3 * (1 + retries)
    assert result.verdict.parse_status is ParseStatus.UNPARSEABLE


# --- properties -------------------------------------------------------------

questions = st.text(min_size=1, max_size=80).filter(lambda s: s.strip())


@settings(max_examples=50, deadline=None)
@given(questions)
def test_prompt_sends_stages_in_order(question):
    from sqi.core import ImageRef

    image = ImageRef.from_bytes(b"\x89PNG\r\n\x1a\n" + b"\0" * 8)
    backend = ScriptedBackend({"*": "FINAL: NO"})
    run_sqi(IllusionQuery("q", image, question), CS, SINGLE, backend)
    (request,) = backend.requests
    text = request.system_text + "\n" + request.user_text
    positions = [text.find(STAGE_HEADERS[s]) for s in STAGE_ORDER]
    assert -1 not in positions and positions == sorted(positions)
    assert request.user_text.endswith(question)


# --- batches ----------------------------------------------------------------


def test_run_many_is_ordered_by_item_id_for_any_concurrency(make_query, occluded_text):
    queries = [make_query(item_id=f"q{i:02d}") for i in (5, 3, 9, 1, 7)]
    expected = sorted(q.item_id for q in queries)
    for concurrency in (1, 4):
        results = run_many(queries, CS, SINGLE, ScriptedBackend({"*": occluded_text}), concurrency=concurrency)
        assert [r.query.item_id for r in results] == expected


def test_write_traces(tmp_path, make_query, occluded_text):
    results = run_many([make_query(item_id="b"), make_query(item_id="a")], CS, SINGLE, ScriptedBackend({"*": occluded_text}))
    path = write_traces(results, tmp_path / "traces")
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["item_id"] for r in records] == ["a", "b"]
    assert records[0]["parse_status"] == "clean" and records[0]["answer"] == "yes"
