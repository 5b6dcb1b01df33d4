import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from callrl.callspec import (
    CallList,
    FunctionCall,
    ParamSpec,
    ParseError,
    SchemaError,
    ToolSchema,
    calls_match,
    parse_call_list,
    serialize_call_list,
    tools_from_json,
    validate_against_schema,
)

from cases import TEAM_RANK_JSON
from strategies import call_lists, structurally_equal


@pytest.fixture
def team_tools():
    return tools_from_json(TEAM_RANK_JSON)


def brute_force_match(a: CallList, b: CallList) -> bool:
    """Multiset oracle: some permutation of ``a`` equals ``b`` call by call."""
    if len(a.calls) != len(b.calls):
        return False

    def same_call(x, y):
        return x.name == y.name and structurally_equal(dict(x.args), dict(y.args))

    return any(all(same_call(x, y) for x, y in zip(perm, b.calls)) for perm in itertools.permutations(a.calls))


# -- parsing ---------------------------------------------------------------


def test_parse_case_study_answer():
    calls = parse_call_list('[get_team_rank(team_name="LA Lakers", league="NBA", season="2021", type="regular")]')
    assert len(calls) == 1
    call = calls.calls[0]
    assert call.name == "get_team_rank"
    assert call.args == {"team_name": "LA Lakers", "league": "NBA", "season": "2021", "type": "regular"}
    assert all(isinstance(v, str) for v in call.args.values())


def test_parse_nested_literals_round_trip():
    text = '[f(a=1), g(b=[1, 2], c={"k": "v"})]'
    calls = parse_call_list(text)
    assert [c.name for c in calls] == ["f", "g"]
    b = calls.calls[1].args["b"]
    assert b == [1, 2] and all(type(x) is int for x in b)
    assert calls.calls[1].args["c"] == {"k": "v"}
    again = parse_call_list(serialize_call_list(calls))
    assert again.strict_key() == calls.strict_key()


@pytest.mark.parametrize(
    "text, reason",
    [
        ("[]", "empty bracket pair"),
        ("[ ]", "empty bracket pair"),
        ("[f(1)]", "positional argument"),
        ("[f(a)]", "positional argument"),
        ('[f("x", b=2)]', "positional argument"),
        ('[f(a="x)]', "unterminated string"),
        ("[f(a=1)] extra", "trailing garbage after ']'"),
        ("[f(a=1, a=2)]", "duplicate keyword 'a'"),
    ],
)
def test_parse_errors(text, reason):
    with pytest.raises(ParseError) as info:
        parse_call_list(text)
    assert info.value.reason == reason


def test_parse_error_offset_is_in_bytes():
    # "é" is two bytes in UTF-8
    with pytest.raises(ParseError) as info:
        parse_call_list('[f(a="é") x]')
    assert info.value.offset == len('[f(a="é") '.encode())


def test_literal_kinds():
    calls = parse_call_list("[f(a=1, b=1.0, c=2e3, d=true, e=False, f='q\\'s', g=-4, h=.5)]")
    args = calls.calls[0].args
    assert type(args["a"]) is int
    assert type(args["b"]) is float and type(args["c"]) is float
    assert args["d"] is True and args["e"] is False
    assert args["f"] == "q's"
    assert args["g"] == -4 and args["h"] == 0.5


def test_whitespace_tolerated():
    calls = parse_call_list(' [ f ( a = 1 , b = [ 1 , 2 ] ) , g ( ) ] ')
    assert [c.name for c in calls] == ["f", "g"]


def test_free_text_fails():
    for text in ("I cannot answer with these tools.", "", "get_weather(city='x')", "[[f(a=1)]]"):
        with pytest.raises(ParseError):
            parse_call_list(text)


def test_deep_nesting_is_a_parse_error():
    with pytest.raises(ParseError):
        parse_call_list("[f(a=" + "[" * 5000 + "]" * 5000 + ")]")


def test_invalid_utf8_bytes():
    with pytest.raises(ParseError):
        parse_call_list(b"[f(a=\xff)]")


# -- serialization ---------------------------------------------------------


def test_serialize_minimal():
    assert serialize_call_list(CallList((FunctionCall("f", {"a": 1}),))) == "[f(a=1)]"


def test_serialize_formatting():
    cl = CallList((FunctionCall("f", {"a": "x"}), FunctionCall("g", {})))
    assert serialize_call_list(cl) == '[f(a="x"), g()]'


def test_serialize_single_quotes_become_double():
    assert serialize_call_list(parse_call_list("[f(a='x')]")) == '[f(a="x")]'


@settings(max_examples=300, deadline=None)
@given(call_lists)
def test_round_trip_property(cl):
    again = parse_call_list(serialize_call_list(cl))
    assert again.strict_key() == cl.strict_key()


# -- validation ------------------------------------------------------------


def test_case_study_validates(team_tools):
    call = parse_call_list('[get_team_rank(team_name="LA Lakers", league="NBA", season="2021", type="regular")]').calls[0]
    assert validate_against_schema(call, team_tools) == []


def test_integer_season_is_type_mismatch(team_tools):
    call = FunctionCall("get_team_rank", {"team_name": "LA Lakers", "league": "NBA", "season": 2021, "type": "regular"})
    errors = validate_against_schema(call, team_tools)
    assert [(e.kind, e.param, e.expected, e.got) for e in errors] == [("TypeMismatch", "season", "string", "integer")]


def test_unknown_function(team_tools):
    errors = validate_against_schema(FunctionCall("h", {"x": 1}), team_tools)
    assert [e.kind for e in errors] == ["UnknownFunction"]


def test_missing_unknown_and_enum(team_tools):
    call = FunctionCall("get_team_rank", {"team_name": "x", "league": "y", "type": "preseason", "extra": 1})
    kinds = sorted(e.kind for e in validate_against_schema(call, team_tools))
    assert kinds == ["EnumViolation", "MissingRequired", "UnknownParam"]


def test_int_float_strictness():
    tool = ToolSchema("f", params=(ParamSpec("x", "float"), ParamSpec("n", "integer"), ParamSpec("b", "boolean")))
    assert validate_against_schema(FunctionCall("f", {"x": 1.0, "n": 1, "b": True}), [tool]) == []
    errors = validate_against_schema(FunctionCall("f", {"x": 1, "n": 1.0, "b": 1}), [tool])
    assert sorted(e.param for e in errors if e.kind == "TypeMismatch") == ["b", "n", "x"]


def test_empty_toolset_rejected():
    with pytest.raises(ValueError):
        validate_against_schema(FunctionCall("f"), [])


# -- ingestion -------------------------------------------------------------


def test_ingestion_maps_type_literals():
    data = [{"name": "t", "parameters": {"type": "dict", "properties": {
        "a": {"type": "dict"}, "b": {"type": "list"}, "c": {"type": "number"}, "d": {"type": "array"},
        "e": {"type": "string", "enum": ["x"]}}, "required": ["a"]}}]
    (tool,) = tools_from_json(json.dumps(data))
    assert [p.type_tag for p in tool.params] == ["object", "array", "float", "array", "enum"]
    assert [p.required for p in tool.params] == [True, False, False, False, False]


def test_ingestion_round_trips(team_tools):
    assert tools_from_json(json.dumps([t.to_wire() for t in team_tools])) == team_tools


@pytest.mark.parametrize(
    "props",
    [{"a": {"type": "tuple"}}, {"a": {"type": "string", "enum": []}}],
)
def test_ingestion_errors(props):
    with pytest.raises(SchemaError):
        tools_from_json([{"name": "t", "parameters": {"type": "dict", "properties": props}}])


def test_schema_invariants():
    with pytest.raises(SchemaError):
        ParamSpec("1bad", "string")
    with pytest.raises(SchemaError):
        ParamSpec("a", "string", enum_values=("x",))
    with pytest.raises(SchemaError):
        ToolSchema("t", params=(ParamSpec("a", "string"), ParamSpec("a", "integer")))
    with pytest.raises(SchemaError):
        tools_from_json([{"name": "t"}, {"name": "t"}])


# -- matching --------------------------------------------------------------


def test_kwarg_order_irrelevant():
    assert calls_match(parse_call_list("[f(a=1, b=2)]"), parse_call_list("[f(b=2, a=1)]"))


def test_call_order_irrelevant():
    a, b = parse_call_list("[f(a=1), g(b=2)]"), parse_call_list("[g(b=2), f(a=1)]")
    assert brute_force_match(a, b)
    assert calls_match(a, b)


def test_int_float_distinct():
    assert not calls_match(parse_call_list("[f(a=1)]"), parse_call_list("[f(a=1.0)]"))
    assert not calls_match(parse_call_list("[f(a=1)]"), parse_call_list("[f(a=true)]"))


def test_multiplicity_matters():
    assert not calls_match(parse_call_list("[f(a=1), f(a=1)]"), parse_call_list("[f(a=1)]"))
    assert not calls_match(parse_call_list("[f(a=1), f(a=1), g()]"), parse_call_list("[f(a=1), g(), g()]"))


@settings(max_examples=200, deadline=None)
@given(call_lists, call_lists, st.randoms(use_true_random=False))
def test_match_agrees_with_oracle(a, b, rnd):
    assert calls_match(a, b) == brute_force_match(a, b)
    shuffled = list(a.calls)
    rnd.shuffle(shuffled)
    shuffled = [FunctionCall(c.name, dict(rnd.sample(list(c.args.items()), len(c.args)))) for c in shuffled]
    perm = CallList(tuple(shuffled))
    assert calls_match(perm, a) and brute_force_match(perm, a)
    assert calls_match(perm, b) == calls_match(a, b)


@settings(max_examples=100, deadline=None)
@given(call_lists, call_lists, call_lists)
def test_match_is_equivalence(a, b, c):
    assert calls_match(a, a)
    assert calls_match(a, b) == calls_match(b, a)
    if calls_match(a, b) and calls_match(b, c):
        assert calls_match(a, c)


@settings(max_examples=500, deadline=None)
@given(st.binary(max_size=64))
def test_parse_never_crashes(data):
    try:
        parse_call_list(data)
    except ParseError:
        pass
