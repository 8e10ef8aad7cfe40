"""Reference expression language for user computation modules.

A module is a single pure expression over the current window of telemetry
values, bound to the identifier ``xs``, and assignment parameters, bound as
``p_<key>``. The grammar:

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := "-" unary | power
    power   := primary ("^" unary)?          right-associative
    primary := NUMBER | IDENT | IDENT "(" expr ")" | "(" expr ")"

Functions come from a fixed whitelist: aggregates consume the window,
scalar functions consume a number. There is no other way to touch the
host environment, so evaluation is side-effect free by construction.
Termination is enforced with an interpreter step budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, Union

from .errors import EvaluationError, ResourceLimitError

DEFAULT_STEP_LIMIT = 1_000_000
# Kept well under Python's recursion limit: the parser burns a handful of
# frames per nesting level.
MAX_NESTING_DEPTH = 100

# Probe inputs for the dynamic half of validate_code.
PROBE_BATCH = (1.0, 2.0, 3.0)
PROBE_PARAM_VALUE = 1.0

Value = Union[float, tuple]


def _population_sd(values: Sequence[float]) -> float:
    m = math.fsum(values) / len(values)
    return math.sqrt(math.fsum((v - m) ** 2 for v in values) / len(values))


def _median(values: Sequence[float]) -> float:
    ordered = sorted(values)
    n = len(ordered)
    mid = n // 2
    if n % 2:
        return ordered[mid]
    return (ordered[mid - 1] + ordered[mid]) / 2.0


# name -> (kind, implementation); kind is "window" or "scalar"
FUNCTIONS: dict[str, tuple[str, Callable]] = {
    "mean": ("window", lambda xs: math.fsum(xs) / len(xs)),
    "median": ("window", _median),
    "sum": ("window", math.fsum),
    "count": ("window", lambda xs: float(len(xs))),
    "min": ("window", min),
    "max": ("window", max),
    "sd": ("window", _population_sd),
    "first": ("window", lambda xs: xs[0]),
    "last": ("window", lambda xs: xs[-1]),
    "abs": ("scalar", abs),
    "sqrt": ("scalar", math.sqrt),
}

AGGREGATE_FUNCTIONS = frozenset(
    name for name, (kind, _) in FUNCTIONS.items() if kind == "window"
)

# Builtin assignment methods are exactly the window aggregates: a builtin
# method keyword k behaves like the module "k(xs)".
BUILTIN_METHODS = AGGREGATE_FUNCTIONS

WINDOW_NAME = "xs"
PARAM_PREFIX = "p_"


@dataclass(frozen=True)
class Diagnostic:
    line: int
    column: int
    message: str

    def __str__(self) -> str:
        return f"{self.line}:{self.column}: {self.message}"


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------

_OPERATORS = frozenset("+-*/^(),")


@dataclass(frozen=True)
class Token:
    kind: str  # "number" | "ident" | one of the operator characters | "eof"
    text: str
    line: int
    column: int


class ExpressionSyntaxError(Exception):
    """Internal: carries position info for a diagnostic."""

    def __init__(self, line: int, column: int, message: str):
        super().__init__(message)
        self.diagnostic = Diagnostic(line, column, message)


def tokenize(code: str) -> list[Token]:
    tokens: list[Token] = []
    line, col = 1, 1
    i, n = 0, len(code)
    while i < n:
        ch = code[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        start_col = col
        if ch.isdigit():
            j = i
            while j < n and code[j].isdigit():
                j += 1
            if j < n and code[j] == "." and j + 1 < n and code[j + 1].isdigit():
                j += 1
                while j < n and code[j].isdigit():
                    j += 1
            if j < n and code[j] in "eE":
                k = j + 1
                if k < n and code[k] in "+-":
                    k += 1
                if k < n and code[k].isdigit():
                    j = k
                    while j < n and code[j].isdigit():
                        j += 1
            text = code[i:j]
            tokens.append(Token("number", text, line, start_col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (code[j].isalnum() or code[j] == "_"):
                j += 1
            text = code[i:j]
            tokens.append(Token("ident", text, line, start_col))
            col += j - i
            i = j
            continue
        if ch in _OPERATORS:
            tokens.append(Token(ch, ch, line, start_col))
            i += 1
            col += 1
            continue
        raise ExpressionSyntaxError(line, start_col, f"unexpected character {ch!r}")
    tokens.append(Token("eof", "", line, col))
    return tokens


# ---------------------------------------------------------------------------
# AST and parser
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float
    line: int
    column: int


@dataclass(frozen=True)
class Name:
    ident: str
    line: int
    column: int


@dataclass(frozen=True)
class Unary:
    operand: "Node"
    line: int
    column: int


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"
    line: int
    column: int


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple
    line: int
    column: int


Node = Union[Num, Name, Unary, BinOp, Call]


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0

    @property
    def current(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str) -> Token:
        tok = self.current
        if tok.kind != kind:
            shown = tok.text if tok.kind != "eof" else "end of input"
            raise ExpressionSyntaxError(
                tok.line, tok.column, f"expected {kind!r}, found {shown!r}"
            )
        return self.advance()

    def parse(self) -> Node:
        node = self.expr(0)
        tok = self.current
        if tok.kind != "eof":
            raise ExpressionSyntaxError(
                tok.line, tok.column, f"unexpected trailing input {tok.text!r}"
            )
        return node

    def _check_depth(self, depth: int, tok: Token) -> None:
        if depth > MAX_NESTING_DEPTH:
            raise ExpressionSyntaxError(
                tok.line,
                tok.column,
                f"expression nests deeper than {MAX_NESTING_DEPTH} levels",
            )

    def expr(self, depth: int) -> Node:
        node = self.term(depth)
        while self.current.kind in ("+", "-"):
            op = self.advance()
            right = self.term(depth)
            node = BinOp(op.kind, node, right, op.line, op.column)
        return node

    def term(self, depth: int) -> Node:
        node = self.unary(depth)
        while self.current.kind in ("*", "/"):
            op = self.advance()
            right = self.unary(depth)
            node = BinOp(op.kind, node, right, op.line, op.column)
        return node

    def unary(self, depth: int) -> Node:
        tok = self.current
        if tok.kind == "-":
            self._check_depth(depth + 1, tok)
            self.advance()
            operand = self.unary(depth + 1)
            return Unary(operand, tok.line, tok.column)
        return self.power(depth)

    def power(self, depth: int) -> Node:
        base = self.primary(depth)
        tok = self.current
        if tok.kind == "^":
            self._check_depth(depth + 1, tok)
            self.advance()
            exponent = self.unary(depth + 1)
            return BinOp("^", base, exponent, tok.line, tok.column)
        return base

    def primary(self, depth: int) -> Node:
        tok = self.current
        if tok.kind == "number":
            self.advance()
            return Num(float(tok.text), tok.line, tok.column)
        if tok.kind == "ident":
            self.advance()
            if self.current.kind == "(":
                self._check_depth(depth + 1, tok)
                self.advance()
                args = [self.expr(depth + 1)]
                while self.current.kind == ",":
                    self.advance()
                    args.append(self.expr(depth + 1))
                self.expect(")")
                return Call(tok.text, tuple(args), tok.line, tok.column)
            return Name(tok.text, tok.line, tok.column)
        if tok.kind == "(":
            self._check_depth(depth + 1, tok)
            self.advance()
            node = self.expr(depth + 1)
            self.expect(")")
            return node
        shown = tok.text if tok.kind != "eof" else "end of input"
        raise ExpressionSyntaxError(
            tok.line, tok.column, f"expected an expression, found {shown!r}"
        )


def parse(code: str) -> Node:
    """Parse source text, raising ExpressionSyntaxError on the first defect."""
    try:
        return _Parser(tokenize(code)).parse()
    except RecursionError:  # depth guard should fire first; belt and braces
        raise ExpressionSyntaxError(1, 1, "expression nests too deeply") from None


# ---------------------------------------------------------------------------
# Static checks
# ---------------------------------------------------------------------------


def _walk(node: Node):
    stack = [node]
    while stack:
        cur = stack.pop()
        yield cur
        if isinstance(cur, Unary):
            stack.append(cur.operand)
        elif isinstance(cur, BinOp):
            stack.append(cur.left)
            stack.append(cur.right)
        elif isinstance(cur, Call):
            stack.extend(cur.args)


def static_diagnostics(tree: Node) -> list[Diagnostic]:
    """Reject unknown identifiers and functions, and bad arity."""
    found: list[Diagnostic] = []
    for node in _walk(tree):
        if isinstance(node, Name):
            if node.ident != WINDOW_NAME and not _is_param(node.ident):
                found.append(
                    Diagnostic(node.line, node.column, f"unknown identifier {node.ident}")
                )
        elif isinstance(node, Call):
            if node.func not in FUNCTIONS:
                found.append(
                    Diagnostic(node.line, node.column, f"unknown function {node.func}")
                )
            elif len(node.args) != 1:
                found.append(
                    Diagnostic(
                        node.line,
                        node.column,
                        f"{node.func}() expects exactly 1 argument, got {len(node.args)}",
                    )
                )
    found.sort(key=lambda d: (d.line, d.column))
    return found


def _is_param(ident: str) -> bool:
    return ident.startswith(PARAM_PREFIX) and len(ident) > len(PARAM_PREFIX)


def referenced_params(tree: Node) -> set[str]:
    """Parameter keys (without the ``p_`` prefix) the expression reads."""
    return {
        node.ident[len(PARAM_PREFIX):]
        for node in _walk(tree)
        if isinstance(node, Name) and _is_param(node.ident)
    }


# ---------------------------------------------------------------------------
# Evaluator
# ---------------------------------------------------------------------------


def evaluate(
    tree: Node,
    window: Sequence[float],
    params: Mapping[str, float],
    step_limit: int = DEFAULT_STEP_LIMIT,
) -> Value:
    """Evaluate a parsed expression over a window.

    Returns a float, or the window tuple itself for expressions like ``xs``
    (callers decide whether non-scalar results are acceptable). Uses an
    explicit stack so adversarially deep input cannot exhaust the host
    call stack, and a step budget so evaluation always terminates.
    """
    xs = tuple(float(v) for v in window)
    steps = 0

    # Two-phase post-order traversal: (node, False) schedules children,
    # (node, True) pops their results off the value stack.
    work: list[tuple[Node, bool]] = [(tree, False)]
    values: list[Value] = []
    while work:
        node, ready = work.pop()
        steps += 1
        if steps > step_limit:
            raise ResourceLimitError(
                f"evaluation exceeded the step limit of {step_limit}"
            )
        if not ready:
            if isinstance(node, Num):
                values.append(node.value)
            elif isinstance(node, Name):
                values.append(_lookup(node, xs, params))
            elif isinstance(node, Unary):
                work.append((node, True))
                work.append((node.operand, False))
            elif isinstance(node, BinOp):
                work.append((node, True))
                work.append((node.right, False))
                work.append((node.left, False))
            elif isinstance(node, Call):
                work.append((node, True))
                for arg in node.args:
                    work.append((arg, False))
            else:  # pragma: no cover - parser only builds the above
                raise EvaluationError(f"unknown node {node!r}")
        elif isinstance(node, Unary):
            operand = values.pop()
            values.append(-_require_scalar(operand, "unary minus"))
        elif isinstance(node, BinOp):
            right = values.pop()
            left = values.pop()
            values.append(_apply_binop(node.op, left, right))
        elif isinstance(node, Call):
            args = [values.pop() for _ in node.args]
            args.reverse()
            result, cost = _apply_call(node, args)
            values.append(result)
            steps += cost

    (result,) = values
    if isinstance(result, float) and not math.isfinite(result):
        raise EvaluationError("result is not finite")
    return result


def _lookup(node: Name, xs: tuple, params: Mapping[str, float]) -> Value:
    if node.ident == WINDOW_NAME:
        return xs
    if _is_param(node.ident):
        key = node.ident[len(PARAM_PREFIX):]
        if key not in params:
            raise EvaluationError(f"unbound parameter {node.ident}")
        return float(params[key])
    raise EvaluationError(f"unknown identifier {node.ident}")


def _require_scalar(value: Value, context: str) -> float:
    if isinstance(value, tuple):
        raise EvaluationError(f"the window cannot be used in {context}")
    return value


def _apply_binop(op: str, left: Value, right: Value) -> float:
    a = _require_scalar(left, f"operator {op!r}")
    b = _require_scalar(right, f"operator {op!r}")
    try:
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            if b == 0.0:
                raise EvaluationError("division by zero")
            return a / b
        if op == "^":
            return math.pow(a, b)
    except OverflowError:
        raise EvaluationError("arithmetic overflow") from None
    except ValueError as exc:
        raise EvaluationError(f"math domain error in {a} ^ {b}") from exc
    raise EvaluationError(f"unknown operator {op!r}")  # pragma: no cover


def _apply_call(node: Call, args: list[Value]) -> tuple[float, int]:
    if node.func not in FUNCTIONS:
        raise EvaluationError(f"unknown function {node.func}")
    if len(args) != 1:
        raise EvaluationError(
            f"{node.func}() expects exactly 1 argument, got {len(args)}"
        )
    kind, impl = FUNCTIONS[node.func]
    (arg,) = args
    if kind == "window":
        if not isinstance(arg, tuple):
            raise EvaluationError(f"{node.func}() expects a window of values")
        if not arg:
            raise EvaluationError(f"{node.func}() of an empty window")
        return float(impl(arg)), len(arg)
    value = _require_scalar(arg, f"{node.func}()")
    try:
        return float(impl(value)), 1
    except ValueError as exc:
        raise EvaluationError(f"math domain error in {node.func}({value})") from exc
    except OverflowError:
        raise EvaluationError("arithmetic overflow") from None


# ---------------------------------------------------------------------------
# validate_code: static pass plus dynamic probe
# ---------------------------------------------------------------------------


def validate_code(code: str) -> list[Diagnostic]:
    """Run the static and dynamic checks; an empty list means the code is ok.

    The static pass parses the source and rejects unknown identifiers and
    functions. The dynamic pass evaluates once against the probe batch
    [1.0, 2.0, 3.0]. The user supplies no parameters at validation time, so
    any ``p_*`` identifier is bound to a neutral probe value; this keeps
    parameterized modules deployable while still catching non-scalar results
    and most arity and type mistakes.
    """
    try:
        tree = parse(code)
    except ExpressionSyntaxError as exc:
        return [exc.diagnostic]

    diagnostics = static_diagnostics(tree)
    if diagnostics:
        return diagnostics

    probe_params = {key: PROBE_PARAM_VALUE for key in referenced_params(tree)}
    try:
        result = evaluate(tree, PROBE_BATCH, probe_params)
    except EvaluationError as exc:
        return [Diagnostic(1, 1, f"dynamic check failed: {exc}")]
    if isinstance(result, tuple):
        return [Diagnostic(1, 1, "result is not a scalar number")]
    return []
