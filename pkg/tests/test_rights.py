import copy
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from codecaps.rights import (
    ALLOW,
    DENY,
    MAX_NESTING,
    MAX_SOURCE_BYTES,
    NORMAL,
    PARSE_ERROR,
    RUNTIME_ERROR,
    STEP_BUDGET_EXCEEDED,
    EvalContext,
    RFLSyntaxError,
    builtin_table,
    evaluate,
    parse_program,
    truthy,
)
from fuzzgen import gen_program


def ctx(request=None, idx=0, n=1, state=None, now=1_000, heritage=None):
    if heritage is None:
        heritage = [{"pubkey": f"k{i}", "subject": f"s{i}", "pLength": n - i} for i in range(n)]
    return EvalContext(heritage=heritage, idx=idx, request=request or {"type": "READ"}, now=now, state=state)


# -- parsing -----------------------------------------------------------------------


def test_constant_true():
    assert evaluate("1", ctx()).decision == ALLOW


def test_offset_expression_parses():
    parse_program('request.type == "READ" && request.offset >= 256')


@pytest.mark.parametrize("src", ["while (1) {}", "for (;;) 1", "function f() { 1 }", "1 +", "(1", "var = 3; 1", "", "1; 2"])
def test_syntax_errors(src):
    with pytest.raises(RFLSyntaxError):
        parse_program(src)
    assert evaluate(src, ctx()).cause == PARSE_ERROR


def test_syntax_error_position():
    with pytest.raises(RFLSyntaxError) as exc:
        parse_program("1 +\n  ) ")
    assert (exc.value.line, exc.value.col) == (2, 3)


def test_unknown_identifier_is_parse_error():
    assert evaluate("x == 1", ctx()).cause == PARSE_ERROR


def test_comments_allowed():
    assert evaluate('// header\nrequest.type == "READ" // trailing', ctx()).allowed


def test_source_size_cap():
    src = "1" + " " * MAX_SOURCE_BYTES
    assert evaluate(src, ctx()).cause == PARSE_ERROR


def test_nesting_cap():
    ok = "(" * (MAX_NESTING - 1) + "1" + ")" * (MAX_NESTING - 1)  # the outer expression is one level
    deep = "(" * (MAX_NESTING + 5) + "1" + ")" * (MAX_NESTING + 5)
    assert evaluate(ok, ctx()).allowed
    assert evaluate(deep, ctx()).cause == PARSE_ERROR


def test_long_flat_chain_parses_without_recursion_trouble():
    out = evaluate(" + ".join(["1"] * 3000) + " > 0", ctx())
    assert out.cause in (NORMAL, PARSE_ERROR, STEP_BUDGET_EXCEEDED)


# -- evaluation examples ----------------------------------------------------------


def test_offset_rule():
    src = 'request.type == "READ" && request.offset >= 256'
    assert evaluate(src, ctx({"type": "READ", "offset": 300})).allowed
    assert evaluate(src, ctx({"type": "READ", "offset": 256})).allowed
    assert not evaluate(src, ctx({"type": "READ", "offset": 100})).allowed
    assert not evaluate(src, ctx({"type": "WRITE", "offset": 300})).allowed


def test_uri_matches_subject():
    src = "var allow = heritage[idx].subject;\nif (request.uri == allow) 1; else 0;"
    c = ctx({"type": "READ", "uri": "s0"})
    assert evaluate(src, c).allowed
    assert not evaluate(src, ctx({"type": "READ", "uri": "/other"})).allowed


@pytest.mark.parametrize("src", ["idx == len(heritage) - 1", "isLast", "isLast()"])
def test_last_certificate_predicate(src):
    assert evaluate(src, ctx(idx=2, n=3)).allowed
    assert not evaluate(src, ctx(idx=1, n=3)).allowed
    assert not evaluate(src, ctx(idx=0, n=3)).allowed


def test_missing_field_denies_with_runtime_error():
    out = evaluate("request.offset", ctx({"type": "READ"}))
    assert (out.decision, out.cause) == (DENY, RUNTIME_ERROR)


def test_increment_rule_with_state():
    src = "int(request.value) == int(state.body) + 1"
    st41 = {"length": 2, "body": "41"}
    assert evaluate(src, ctx({"type": "WRITE", "value": "42"}, state=st41)).allowed
    assert not evaluate(src, ctx({"type": "WRITE", "value": "43"}, state=st41)).allowed
    assert evaluate(src, ctx({"type": "WRITE", "value": "42"}, state=None)).cause == RUNTIME_ERROR


@pytest.mark.parametrize(
    "src",
    [
        "-7 / 2 == -3",
        "-7 % 2 == -1",
        "7 % -2 == 1",
        "7 / -2 == -3",
        "2 + 3 * 4 == 14",
        "(2 + 3) * 4 == 20",
        '"ab" + "c" == "abc"',
        '"ab" < "b"',
        "1 ? true : false",
        "0 ? false : true",
        '"" ? false : true',
        "null == null",
        "!(1 == true)",
        "1 != true",
        '"1" != 1',
        "!null",
        "len(\"\") == 0",
        'int("42") == 42',
        'int("-7") == -7',
        'str(12) == "12"',
        'str(true) == "true"',
        'startsWith("/a/b", "/a")',
        '!startsWith("/a/b", "/b")',
        '"a\\"b" == "a" + "\\"" + "b"',
        'len("a\\nb") == 3',
        "var a = 2; var b = a * a; b == 4",
        "if (idx == 0) 1; else 0;",
        "len(heritage) == 1",
        "len(request) == 1",
        "heritage[0].pubkey == \"k0\"",
        'request["type"] == "READ"',
        "now == 1000",
        "true || 1 / 0",
        "!(false && 1 / 0)",
        "9223372036854775807 > 0",
        "-9223372036854775807 - 1 < 0",
    ],
)
def test_expression_semantics(src):
    out = evaluate(src, ctx())
    assert (out.decision, out.cause) == (ALLOW, NORMAL), out.detail


@pytest.mark.parametrize(
    "src",
    [
        "1 / 0",
        "1 % 0",
        "9223372036854775807 + 1",
        "-9223372036854775807 - 2",
        "3037000500 * 3037000500",
        '"a" + 1',
        "true < false",
        '-"a"',
        'int("x")',
        'int("4 2")',
        "len(1)",
        "startsWith(1, 2)",
        "heritage[5]",
        "heritage[-1]",
        "request.missing",
        "null.x",
        "len(1, 2)",
        "nosuch(1)",
    ],
)
def test_runtime_errors_deny(src):
    out = evaluate(src, ctx())
    assert out.decision == DENY
    assert out.cause in (RUNTIME_ERROR, PARSE_ERROR)


def test_string_length_cap():
    src = 'var s = "' + "a" * 40_000 + '"; len(s + s) > 0'
    assert evaluate(src, ctx()).cause == RUNTIME_ERROR


@pytest.mark.parametrize(
    "v,expected",
    [(True, True), (False, False), (0, False), (5, True), (-1, True), ("", False), ("x", True), (None, False), ([], True), ({}, True)],
)
def test_truthiness(v, expected):
    assert truthy(v) is expected


# -- budget -------------------------------------------------------------------------


def test_budget_exhaustion():
    src = " + ".join(["1"] * 200) + " > 0"
    assert evaluate(src, ctx()).allowed
    out = evaluate(src, ctx(), budget=50)
    assert (out.decision, out.cause, out.steps_used) == (DENY, STEP_BUDGET_EXCEEDED, 50)


def test_steps_counted_per_node():
    assert evaluate("1", ctx()).steps_used == 1
    assert evaluate("1 + 1", ctx()).steps_used == 3


def test_budget_must_be_positive():
    with pytest.raises(ValueError):
        evaluate("1", ctx(), budget=0)


def test_context_index_range():
    with pytest.raises(ValueError):
        ctx(idx=1, n=1)


# -- builtins -----------------------------------------------------------------------


def test_builtin_table_exact():
    names = {(name, arity) for name, arity, _ in builtin_table()}
    assert names == {("len", 1), ("int", 1), ("str", 1), ("startsWith", 2), ("isLast", 0)}


# -- properties --------------------------------------------------------------------

R = 'request.type == "READ"'
W = 'request.type == "WRITE"'
RW = 'request.type == "READ" || request.type == "WRITE"'


@pytest.mark.parametrize("rtype", ["READ", "WRITE"])
def test_rw_partition(rtype):
    c = ctx({"type": rtype})
    assert evaluate(R, c).allowed == (rtype == "READ")
    assert evaluate(W, c).allowed == (rtype == "WRITE")
    assert evaluate(RW, c).allowed
    assert evaluate(R, c).allowed != evaluate(W, c).allowed


def rich_ctx():
    return ctx(
        {"type": "WRITE", "offset": 3, "value": "7", "uri": "/a"},
        idx=1,
        n=3,
        state={"length": 1, "body": "6"},
    )


@given(st.integers(0, 2**32))
def test_fuzzed_programs_terminate_purely(seed):
    rng = random.Random(seed)
    src = gen_program(rng)
    c = rich_ctx()
    before = copy.deepcopy(c)
    out1 = evaluate(src, c)
    out2 = evaluate(src, c)
    assert out1 == out2
    assert c == before
    assert out1.steps_used <= 10_000
    if out1.cause != NORMAL:
        assert out1.decision == DENY


@given(st.text(max_size=300))
def test_arbitrary_text_never_raises(src):
    out = evaluate(src, rich_ctx())
    assert out.decision in (ALLOW, DENY)
    if out.cause != NORMAL:
        assert out.decision == DENY


@given(st.integers(-(2**62), 2**62), st.integers(-(2**62), 2**62))
def test_integer_ops_match_truncating_reference(a, b):
    c = ctx({"type": "READ", "a": a, "b": b})
    assert evaluate(f"request.a + request.b == {a + b}", c).allowed
    if b != 0:
        q = abs(a) // abs(b) * (1 if (a >= 0) == (b >= 0) else -1)
        r = a - b * q
        assert evaluate(f"request.a / request.b == {q}", c).allowed
        assert evaluate(f"request.a % request.b == {r}", c).allowed
