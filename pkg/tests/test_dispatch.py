import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sqi.constraints import compile_protocol, default_constraints
from sqi.core import Stage
from sqi.dispatch import (
    ALIGNMENT_DIRECTION_DIRECTIVE,
    COLOR_ISOLATION_DIRECTIVE,
    QueryType,
    RuleSyntaxError,
    classify_query,
    default_rules,
    heuristic_profile,
    parse_rules,
)


@pytest.mark.parametrize(
    "question, expected",
    [
        ("Are the red segments collinear behind the rectangle?", QueryType.ALIGNMENT),
        ("", QueryType.OTHER),
        ("Is circle A the same size as circle B?", QueryType.SIZE),
        ("Is the top line longer than the bottom line?", QueryType.LENGTH),
        ("Are squares A and B the same colour?", QueryType.COLOR),
        ("How many dots are black?", QueryType.COUNT),
        ("Are the horizontal lines parallel?", QueryType.ORIENTATION),
        ("Are the lines curved?", QueryType.CURVATURE),
        ("Is this a duck or a rabbit?", QueryType.OTHER),
        # whole words only: "realigned" is not "aligned", "sizeable" is not "size"
        ("Was the picture realigned to be sizeable?", QueryType.OTHER),
    ],
)
def test_classify_query(question, expected):
    assert classify_query(question) is expected


def test_first_matching_rule_wins():
    # the alignment rule precedes the color rule in the bundled table
    assert classify_query("Are the gray segments aligned?") is QueryType.ALIGNMENT
    rules = parse_rules("color := gray\nalignment := aligned\n")
    assert rules.classify("Are the gray segments aligned?") is QueryType.COLOR


def test_multiword_keywords_tolerate_extra_whitespace():
    assert classify_query("Are they the   SAME\tSIZE?") is QueryType.SIZE


@settings(max_examples=500, deadline=None)
@given(st.text(max_size=80))
def test_classification_ignores_case_and_outer_whitespace(text):
    qt = classify_query(text)
    assert classify_query(text.upper()) is qt
    assert classify_query("  " + text + "  ") is qt


keyword_pieces = st.sampled_from(
    ["collinear", "same size", "Color", "longer", "how many", "PARALLEL", "bent", "duck"]
)


@settings(max_examples=300, deadline=None)
@given(st.lists(keyword_pieces | st.text(max_size=10), max_size=6).map(" ".join))
def test_classification_invariance_on_keyword_rich_text(text):
    qt = classify_query(text)
    assert classify_query(text.upper()) is qt
    assert classify_query(text.lower()) is qt
    assert classify_query("\n " + text + "\t ") is qt


def test_rule_file_errors():
    with pytest.raises(RuleSyntaxError, match="line 1"):
        parse_rules("alignment collinear")
    with pytest.raises(RuleSyntaxError, match="unknown query type"):
        parse_rules("shape := round")
    with pytest.raises(RuleSyntaxError, match="empty keyword"):
        parse_rules("size := big, , small")


def test_bundled_rules_cover_every_specialized_type():
    covered = {r.query_type for r in default_rules().rules}
    assert covered == set(QueryType) - {QueryType.OTHER}


def test_profiles():
    align = heuristic_profile(QueryType.ALIGNMENT)
    assert any(
        d.stage is Stage.DECOMPOSITION and d.text == ALIGNMENT_DIRECTION_DIRECTIVE
        for d in align.extra_directives
    )
    color = heuristic_profile(QueryType.COLOR)
    assert [d.text for d in color.extra_directives if d.stage is Stage.DECOMPOSITION] == [
        COLOR_ISOLATION_DIRECTIVE
    ]
    assert heuristic_profile(QueryType.OTHER).extra_directives == ()


def test_direction_directive_mentions_direction_and_grids():
    text = ALIGNMENT_DIRECTION_DIRECTIVE.lower()
    assert "direction" in text and "consistent" in text and "grid" in text


@pytest.mark.parametrize("qt", list(QueryType))
def test_no_builtin_profile_empties_a_stage(qt):
    compile_protocol(default_constraints(), heuristic_profile(qt))


def test_dispatch_is_pure_over_a_manifest():
    questions = [
        "Are the red segments collinear?",
        "Is A bigger than B?",
        "Are the squares the same shade?",
        "What is this?",
    ]
    first = [classify_query(q) for q in questions]
    second = [classify_query(q) for q in questions]
    assert first == second
