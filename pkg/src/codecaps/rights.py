"""The rights-function language (RFL).

Rights functions are small loop-free expression programs embedded in
certificates.  A program is a run of ``var name = expr;`` bindings and
one final expression (or ``if (e) a; else b;``) whose truthiness is the
decision.  Evaluation is pure and charged one step per AST node visited,
so every program finishes within a fixed budget; anything that goes
wrong denies.

    var allow = heritage[idx].subject;
    if (request.uri == allow) 1; else 0;
"""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

from .certchain import INT64_MAX, INT64_MIN

DEFAULT_BUDGET = 10_000
MAX_SOURCE_BYTES = 64 * 1024
MAX_STRING_LENGTH = 64 * 1024
MAX_NESTING = 40
MAX_AST_DEPTH = 256

ALLOW = "allow"
DENY = "deny"

NORMAL = "normal"
PARSE_ERROR = "parse_error"
RUNTIME_ERROR = "runtime_error"
STEP_BUDGET_EXCEEDED = "step_budget_exceeded"

CONTEXT_NAMES = frozenset({"heritage", "idx", "request", "now", "state"})
KEYWORDS = frozenset({"var", "if", "else", "true", "false", "null"})


class RFLSyntaxError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.message = message
        self.line = line
        self.col = col


class RFLRuntimeError(Exception):
    pass


class _BudgetExceeded(Exception):
    pass


# -- builtins -----------------------------------------------------------------


@dataclass(frozen=True)
class Builtin:
    name: str
    arity: int
    semantics: str


BUILTINS = (
    Builtin("len", 1, "length of a string, list or record"),
    Builtin("int", 1, "decimal string to integer; error on non-numeric text"),
    Builtin("str", 1, "decimal/textual rendering of an integer, string, boolean or null"),
    Builtin("startsWith", 2, "true iff string s begins with string p"),
    Builtin("isLast", 0, "idx == len(heritage) - 1"),
)
_BUILTIN_ARITY = {b.name: b.arity for b in BUILTINS}


def builtin_table() -> list[tuple[str, int, str]]:
    return [(b.name, b.arity, b.semantics) for b in BUILTINS]


# -- lexer --------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+|//[^\n]*)
  | (?P<int>[0-9]+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<op>==|!=|<=|>=|&&|\|\||[<>+\-*/%!?:.\[\](),;=])
    """,
    re.VERBOSE,
)
_ESCAPES = {'"': '"', "\\": "\\", "n": "\n"}


@dataclass(frozen=True)
class _Tok:
    kind: str  # int | ident | string | op | eof
    text: str
    value: Any
    line: int
    col: int


def _tokenize(source: str) -> list[_Tok]:
    toks = []
    pos, line, line_start = 0, 1, 0
    n = len(source)
    while pos < n:
        m = _TOKEN_RE.match(source, pos)
        col = pos - line_start + 1
        if m is None:
            raise RFLSyntaxError(f"unexpected character {source[pos]!r}", line, col)
        kind = m.lastgroup
        text = m.group()
        if kind == "int":
            value = int(text)
            if value > INT64_MAX:
                raise RFLSyntaxError("integer literal out of range", line, col)
            toks.append(_Tok("int", text, value, line, col))
        elif kind == "string":
            out, i = [], 1
            while i < len(text) - 1:
                ch = text[i]
                if ch == "\\":
                    esc = text[i + 1]
                    if esc not in _ESCAPES:
                        raise RFLSyntaxError(f"unknown escape \\{esc}", line, col + i)
                    out.append(_ESCAPES[esc])
                    i += 2
                else:
                    out.append(ch)
                    i += 1
            toks.append(_Tok("string", text, "".join(out), line, col))
        elif kind in ("ident", "op"):
            toks.append(_Tok(kind, text, text, line, col))
        newlines = text.count("\n")
        if newlines:
            line += newlines
            line_start = pos + text.rfind("\n") + 1
        pos = m.end()
    toks.append(_Tok("eof", "", None, line, pos - line_start + 1))
    return toks


# -- AST ----------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    kind: str  # const | name | unary | binary | and | or | cond | attr | index | call
    args: tuple
    line: int
    col: int
    depth: int


def _node(kind, args, tok: _Tok, children=()) -> Node:
    depth = 1 + max((c.depth for c in children), default=0)
    if depth > MAX_AST_DEPTH:
        raise RFLSyntaxError("expression nested too deeply", tok.line, tok.col)
    return Node(kind, tuple(args), tok.line, tok.col, depth)


@dataclass(frozen=True)
class RightsProgram:
    source: str
    bindings: tuple  # ((name, Node), ...)
    result: Node = field(repr=False)

    def __str__(self) -> str:
        return self.source


_BINARY_PREC = {
    "||": 1,
    "&&": 2,
    "==": 3, "!=": 3, "<": 3, "<=": 3, ">": 3, ">=": 3,
    "+": 4, "-": 4,
    "*": 5, "/": 5, "%": 5,
}


class _Parser:
    def __init__(self, source: str):
        self.toks = _tokenize(source)
        self.pos = 0
        self.nesting = 0
        self.scope = set(CONTEXT_NAMES) | {"isLast"}

    @property
    def tok(self) -> _Tok:
        return self.toks[self.pos]

    def error(self, message: str, tok: Optional[_Tok] = None):
        tok = tok or self.tok
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        raise RFLSyntaxError(f"{message} (found {found})", tok.line, tok.col)

    def at(self, text: str) -> bool:
        return self.tok.kind in ("op", "ident") and self.tok.text == text

    def expect(self, text: str) -> _Tok:
        if not self.at(text):
            self.error(f"expected {text!r}")
        t = self.tok
        self.pos += 1
        return t

    def enter(self):
        self.nesting += 1
        if self.nesting > MAX_NESTING:
            self.error("expression nested too deeply")

    def program(self, source: str) -> RightsProgram:
        bindings = []
        while self.at("var"):
            self.pos += 1
            name_tok = self.tok
            if name_tok.kind != "ident" or name_tok.text in KEYWORDS:
                self.error("expected a variable name")
            if name_tok.text in self.scope or name_tok.text in _BUILTIN_ARITY:
                self.error(f"cannot rebind {name_tok.text!r}", name_tok)
            self.pos += 1
            self.expect("=")
            value = self.expr()
            self.expect(";")
            bindings.append((name_tok.text, value))
            self.scope.add(name_tok.text)

        if self.at("if"):
            if_tok = self.tok
            self.pos += 1
            self.expect("(")
            test = self.expr()
            self.expect(")")
            then = self.expr()
            self.expect(";")
            self.expect("else")
            other = self.expr()
            self.expect(";")
            result = _node("cond", (test, then, other), if_tok, (test, then, other))
        else:
            result = self.expr()
            if self.at(";"):
                self.pos += 1
        if self.tok.kind != "eof":
            self.error("unexpected input after the final expression")
        return RightsProgram(source=source, bindings=tuple(bindings), result=result)

    def expr(self) -> Node:
        self.enter()
        test = self.binary(1)
        if self.at("?"):
            q = self.tok
            self.pos += 1
            then = self.expr()
            self.expect(":")
            other = self.expr()
            test = _node("cond", (test, then, other), q, (test, then, other))
        self.nesting -= 1
        return test

    def binary(self, min_prec: int) -> Node:
        left = self.unary()
        while self.tok.kind == "op" and _BINARY_PREC.get(self.tok.text, 0) >= min_prec:
            op_tok = self.tok
            prec = _BINARY_PREC[op_tok.text]
            self.pos += 1
            right = self.binary(prec + 1)
            if op_tok.text == "&&":
                left = _node("and", (left, right), op_tok, (left, right))
            elif op_tok.text == "||":
                left = _node("or", (left, right), op_tok, (left, right))
            else:
                left = _node("binary", (op_tok.text, left, right), op_tok, (left, right))
        return left

    def unary(self) -> Node:
        if self.tok.kind == "op" and self.tok.text in ("!", "-"):
            op_tok = self.tok
            self.pos += 1
            self.enter()
            operand = self.unary()
            self.nesting -= 1
            return _node("unary", (op_tok.text, operand), op_tok, (operand,))
        return self.postfix()

    def postfix(self) -> Node:
        node = self.primary()
        while True:
            if self.at("."):
                dot = self.tok
                self.pos += 1
                if self.tok.kind != "ident":
                    self.error("expected a field name")
                node = _node("attr", (node, self.tok.text), dot, (node,))
                self.pos += 1
            elif self.at("["):
                br = self.tok
                self.pos += 1
                index = self.expr()
                self.expect("]")
                node = _node("index", (node, index), br, (node, index))
            elif self.at("("):
                self.error("only builtin functions can be called")
            else:
                return node

    def primary(self) -> Node:
        t = self.tok
        if t.kind == "int":
            self.pos += 1
            return _node("const", (t.value,), t)
        if t.kind == "string":
            self.pos += 1
            return _node("const", (t.value,), t)
        if t.kind == "ident":
            if t.text in ("true", "false", "null"):
                self.pos += 1
                return _node("const", ({"true": True, "false": False, "null": None}[t.text],), t)
            if t.text in ("var", "if", "else"):
                self.error("unexpected keyword")
            self.pos += 1
            if self.at("("):
                return self.call(t)
            if t.text not in self.scope:
                if t.text in _BUILTIN_ARITY:
                    self.error(f"builtin {t.text!r} must be called", t)
                self.error(f"unknown name {t.text!r}", t)
            return _node("name", (t.text,), t)
        if self.at("("):
            self.pos += 1
            inner = self.expr()
            self.expect(")")
            return inner
        self.error("expected an expression")

    def call(self, name_tok: _Tok) -> Node:
        name = name_tok.text
        if name not in _BUILTIN_ARITY:
            self.error(f"unknown function {name!r}", name_tok)
        self.expect("(")
        args = []
        if not self.at(")"):
            args.append(self.expr())
            while self.at(","):
                self.pos += 1
                args.append(self.expr())
        self.expect(")")
        if len(args) != _BUILTIN_ARITY[name]:
            self.error(f"{name} takes {_BUILTIN_ARITY[name]} argument(s), got {len(args)}", name_tok)
        return _node("call", (name, tuple(args)), name_tok, args)


@functools.lru_cache(maxsize=1024)
def parse_program(source: str) -> RightsProgram:
    """Parse RFL source, raising :class:`RFLSyntaxError` with line/column."""
    if not isinstance(source, str):
        raise TypeError("rights source must be a string")
    if len(source.encode("utf-8", "surrogatepass")) > MAX_SOURCE_BYTES:
        raise RFLSyntaxError("program exceeds 64 KiB", 1, 1)
    return _Parser(source).program(source)


def check_program(source: str) -> None:
    parse_program(source)


# -- evaluation ---------------------------------------------------------------


@dataclass
class EvalContext:
    heritage: Sequence[Mapping[str, Any]]
    idx: int
    request: Mapping[str, Any]
    now: int
    state: Optional[Mapping[str, Any]] = None

    def __post_init__(self):
        if not 0 <= self.idx < len(self.heritage):
            raise ValueError("idx outside the heritage")


@dataclass(frozen=True)
class EvalOutcome:
    decision: str
    cause: str
    steps_used: int
    detail: str = ""

    @property
    def allowed(self) -> bool:
        return self.decision == ALLOW


def attr_value_to_rfl(value):
    """Map a certificate attribute to an RFL value; undecodable bytes vanish."""
    if isinstance(value, (bytes, bytearray)):
        try:
            return bytes(value).decode("utf-8")
        except UnicodeDecodeError:
            return _MISSING
    return value


_MISSING = object()


def attrs_record(attrs: Mapping[str, Any]) -> dict:
    out = {}
    for k, v in attrs.items():
        v = attr_value_to_rfl(v)
        if v is not _MISSING:
            out[k] = v
    return out


def certificate_view(attrs: Mapping[str, Any]) -> dict:
    view = attrs_record(attrs)
    view["subject"] = view.get("subjectName")
    view["issuer"] = view.get("issuerName")
    return view


def _type_name(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "boolean"
    if isinstance(v, int):
        return "integer"
    if isinstance(v, str):
        return "string"
    if isinstance(v, (list, tuple)):
        return "list"
    return "record"


def truthy(v) -> bool:
    if v is None or v is False:
        return False
    if v is True:
        return True
    if isinstance(v, int):
        return v != 0
    if isinstance(v, str):
        return v != ""
    return True  # lists and records, even empty ones


def _same(a, b) -> bool:
    ta, tb = _type_name(a), _type_name(b)
    if ta != tb:
        return False
    if ta == "list":
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    if ta == "record":
        return a.keys() == b.keys() and all(_same(a[k], b[k]) for k in a)
    return a == b


def _check_int(v: int) -> int:
    if not INT64_MIN <= v <= INT64_MAX:
        raise RFLRuntimeError("integer overflow")
    return v


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


_INT_TEXT = re.compile(r"-?[0-9]+")


class _Evaluator:
    def __init__(self, ctx: EvalContext, budget: int):
        self.budget = budget
        self.steps = 0
        self.env = {
            "heritage": ctx.heritage,
            "idx": ctx.idx,
            "request": ctx.request,
            "now": ctx.now,
            "state": ctx.state,
            "isLast": ctx.idx == len(ctx.heritage) - 1,
        }

    def charge(self):
        self.steps += 1
        if self.steps > self.budget:
            raise _BudgetExceeded()

    def run(self, p: RightsProgram):
        for name, value in p.bindings:
            self.charge()
            self.env[name] = self.eval(value)
        return self.eval(p.result)

    def eval(self, n: Node):
        self.charge()
        k = n.kind
        if k == "const":
            return n.args[0]
        if k == "name":
            return self.env[n.args[0]]
        if k == "and":
            return truthy(self.eval(n.args[0])) and truthy(self.eval(n.args[1]))
        if k == "or":
            return truthy(self.eval(n.args[0])) or truthy(self.eval(n.args[1]))
        if k == "cond":
            test, then, other = n.args
            return self.eval(then) if truthy(self.eval(test)) else self.eval(other)
        if k == "unary":
            op, operand = n.args
            v = self.eval(operand)
            if op == "!":
                return not truthy(v)
            if not _is_int(v):
                raise RFLRuntimeError(f"cannot negate {_type_name(v)}")
            return _check_int(-v)
        if k == "binary":
            op, left, right = n.args
            return self.binary(op, self.eval(left), self.eval(right))
        if k == "attr":
            obj, name = n.args
            v = self.eval(obj)
            if not isinstance(v, Mapping):
                raise RFLRuntimeError(f"{_type_name(v)} has no field {name!r}")
            if name not in v:
                raise RFLRuntimeError(f"missing field {name!r}")
            return v[name]
        if k == "index":
            return self.index(self.eval(n.args[0]), self.eval(n.args[1]))
        if k == "call":
            name, args = n.args
            return self.call(name, [self.eval(a) for a in args])
        raise RFLRuntimeError(f"bad node {k}")  # pragma: no cover

    def binary(self, op, a, b):
        if op == "==":
            return _same(a, b)
        if op == "!=":
            return not _same(a, b)
        if op in ("<", "<=", ">", ">="):
            if not ((_is_int(a) and _is_int(b)) or (isinstance(a, str) and isinstance(b, str))):
                raise RFLRuntimeError(f"cannot compare {_type_name(a)} with {_type_name(b)}")
            return {"<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b}[op]
        if op == "+" and isinstance(a, str) and isinstance(b, str):
            if len(a) + len(b) > MAX_STRING_LENGTH:
                raise RFLRuntimeError("string too long")
            return a + b
        if not (_is_int(a) and _is_int(b)):
            raise RFLRuntimeError(f"operator {op} needs integers, got {_type_name(a)} and {_type_name(b)}")
        if op == "+":
            return _check_int(a + b)
        if op == "-":
            return _check_int(a - b)
        if op == "*":
            return _check_int(a * b)
        if b == 0:
            raise RFLRuntimeError("division by zero")
        # truncating division; remainder takes the dividend's sign
        q = abs(a) // abs(b)
        if (a < 0) != (b < 0):
            q = -q
        if op == "/":
            return _check_int(q)
        return a - b * q

    def index(self, obj, key):
        if isinstance(obj, Mapping):
            if not isinstance(key, str):
                raise RFLRuntimeError("record index must be a string")
            if key not in obj:
                raise RFLRuntimeError(f"missing field {key!r}")
            return obj[key]
        if isinstance(obj, (list, tuple, str)):
            if not _is_int(key):
                raise RFLRuntimeError("index must be an integer")
            if not 0 <= key < len(obj):
                raise RFLRuntimeError("index out of range")
            return obj[key]
        raise RFLRuntimeError(f"cannot index {_type_name(obj)}")

    def call(self, name, args):
        if name == "isLast":
            return self.env["isLast"]
        if name == "len":
            (x,) = args
            if isinstance(x, (str, list, tuple)) or isinstance(x, Mapping):
                return len(x)
            raise RFLRuntimeError(f"len of {_type_name(x)}")
        if name == "int":
            (x,) = args
            if _is_int(x):
                return x
            if isinstance(x, str) and _INT_TEXT.fullmatch(x):
                return _check_int(int(x))
            raise RFLRuntimeError(f"int of non-numeric {_type_name(x)}")
        if name == "str":
            (x,) = args
            if x is None:
                return "null"
            if isinstance(x, bool):
                return "true" if x else "false"
            if isinstance(x, (int, str)):
                return str(x)
            raise RFLRuntimeError(f"str of {_type_name(x)}")
        if name == "startsWith":
            s, p = args
            if not (isinstance(s, str) and isinstance(p, str)):
                raise RFLRuntimeError("startsWith needs two strings")
            return s.startswith(p)
        raise RFLRuntimeError(f"unknown builtin {name}")  # pragma: no cover


def evaluate(p, ctx: EvalContext, budget: int = DEFAULT_BUDGET) -> EvalOutcome:
    """Run a rights program against a context.

    ``p`` may be a parsed :class:`RightsProgram` or source text.  Never
    raises for program faults: parse errors, runtime errors and budget
    exhaustion all come back as a deny with the matching cause.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    if not isinstance(p, RightsProgram):
        try:
            p = parse_program(p)
        except (RFLSyntaxError, TypeError) as exc:
            return EvalOutcome(DENY, PARSE_ERROR, 0, str(exc))
    ev = _Evaluator(ctx, budget)
    try:
        value = ev.run(p)
    except _BudgetExceeded:
        return EvalOutcome(DENY, STEP_BUDGET_EXCEEDED, budget, "step budget exhausted")
    except RFLRuntimeError as exc:
        return EvalOutcome(DENY, RUNTIME_ERROR, ev.steps, str(exc))
    except (RecursionError, MemoryError) as exc:  # pragma: no cover - defensive
        return EvalOutcome(DENY, RUNTIME_ERROR, ev.steps, type(exc).__name__)
    return EvalOutcome(ALLOW if truthy(value) else DENY, NORMAL, ev.steps)
