"""A tiny While-language: lexer, span-annotated parser, pretty-printer and a
step-budgeted interpreter used as the labelling oracle.

Grammar::

    program := stmt ( ";" stmt )* ;
    stmt    := "skip" | ident ":=" expr
             | "while" cmp "{" program "}"
             | "if" cmp "{" program "}" "else" "{" program "}" ;
    cmp     := expr ( ">" | "<" | "==" | "!=" ) expr ;
    expr    := term ( ("+"|"-") term )* ;
    term    := atom ( "*" atom )* ;
    atom    := integer | ident | "(" expr ")" ;
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Union

from .errors import ParseError, RuntimeFault

KEYWORDS = frozenset({"skip", "while", "if", "else"})
OPERATORS = (":=", "==", "!=", "+", "-", "*", ">", "<", "(", ")", "{", "}", ";")
COMPARISONS = (">", "<", "==", "!=")

LEAF_KINDS = frozenset({"Var", "IntLit", "Skip"})
NODE_KINDS = frozenset(
    {"Program", "Assign", "While", "If", "Skip", "Seq", "BinOp", "Compare", "Var", "IntLit"}
)

_TOKEN_RE = re.compile(
    r"(?P<ws>\s+)"
    r"|(?P<ident>[a-z][a-z0-9_]*)"
    r"|(?P<int>[0-9]+)"
    r"|(?P<op>:=|==|!=|[-+*><(){};])"
)


class Span(NamedTuple):
    start: int
    end: int

    def contains(self, other: "Span") -> bool:
        return self.start <= other.start and other.end <= self.end

    def overlaps(self, other: "Span") -> bool:
        return self.start < other.end and other.start < self.end


class Lexeme(NamedTuple):
    kind: str  # "kw" | "ident" | "int" | "op" | "unk" | "eof"
    text: str
    span: Span


def lex(source: str, strict: bool = True) -> list[Lexeme]:
    """Split ``source`` into lexemes with byte-exact spans.

    With ``strict=False`` unrecognised characters become ``unk`` lexemes
    instead of raising.
    """
    out: list[Lexeme] = []
    pos = 0
    n = len(source)
    while pos < n:
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            if strict:
                line, col = _line_col(source, pos)
                raise ParseError(f"unexpected character {source[pos]!r}", line, col)
            out.append(Lexeme("unk", source[pos], Span(pos, pos + 1)))
            pos += 1
            continue
        kind = m.lastgroup
        text = m.group()
        if kind != "ws":
            if kind == "ident" and text in KEYWORDS:
                kind = "kw"
            out.append(Lexeme(kind, text, Span(m.start(), m.end())))
        pos = m.end()
    return out


def _line_col(source: str, pos: int) -> tuple[int, int]:
    line = source.count("\n", 0, pos) + 1
    col = pos - (source.rfind("\n", 0, pos) + 1) + 1
    return line, col


@dataclass(frozen=True)
class AstNode:
    id: int
    kind: str
    span: Span
    children: tuple[int, ...]
    label: str


@dataclass(frozen=True)
class Ast:
    nodes: tuple[AstNode, ...]
    root: int = 0
    source: str = field(default="", compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, node_id: int) -> AstNode:
        return self.nodes[node_id]

    def parents(self) -> dict[int, int]:
        return {c: node.id for node in self.nodes for c in node.children}

    def walk(self, start: int | None = None) -> Iterator[AstNode]:
        """Depth-first pre-order traversal."""
        stack = [self.root if start is None else start]
        while stack:
            node = self.nodes[stack.pop()]
            yield node
            stack.extend(reversed(node.children))

    def subtree(self, node_id: int) -> list[int]:
        return [n.id for n in self.walk(node_id)]

    def shape(self, node_id: int | None = None):
        """Nested ``(kind, label, children)`` tuple ignoring spans."""
        node = self.nodes[self.root if node_id is None else node_id]
        return (node.kind, node.label, tuple(self.shape(c) for c in node.children))


# ---------------------------------------------------------------------------
# Parser


@dataclass
class _Tmp:
    kind: str
    span: Span
    label: str
    children: list["_Tmp"] = field(default_factory=list)
    outer: Span | None = None  # includes surrounding parentheses

    @property
    def extent(self) -> Span:
        return self.outer or self.span


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.toks = lex(source)
        self.i = 0
        end = len(source)
        self.eof = Lexeme("eof", "", Span(end, end))

    def peek(self) -> Lexeme:
        return self.toks[self.i] if self.i < len(self.toks) else self.eof

    def advance(self) -> Lexeme:
        tok = self.peek()
        self.i += 1
        return tok

    def fail(self, expected: set[str]) -> ParseError:
        tok = self.peek()
        line, col = _line_col(self.source, tok.span.start)
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        return ParseError(f"unexpected {found}", line, col, frozenset(expected))

    def expect(self, text: str) -> Lexeme:
        tok = self.peek()
        if tok.text != text or tok.kind not in ("op", "kw"):
            raise self.fail({text})
        return self.advance()

    def program(self, kind: str, closing: str | None) -> _Tmp:
        stmts = [self.stmt()]
        while self.peek().kind == "op" and self.peek().text == ";":
            self.advance()
            stmts.append(self.stmt())
        tok = self.peek()
        if closing is None and tok.kind != "eof":
            raise self.fail({";", "end of input"})
        if closing is not None and tok.text != closing:
            raise self.fail({";", closing})
        return _Tmp(kind, Span(stmts[0].span.start, stmts[-1].span.end), kind.lower(), stmts)

    def stmt(self) -> _Tmp:
        tok = self.peek()
        if tok.kind == "kw" and tok.text == "skip":
            self.advance()
            return _Tmp("Skip", tok.span, "skip")
        if tok.kind == "ident":
            self.advance()
            target = _Tmp("Var", tok.span, tok.text)
            self.expect(":=")
            value = self.expr()
            return _Tmp("Assign", Span(tok.span.start, value.extent.end), ":=", [target, value])
        if tok.kind == "kw" and tok.text == "while":
            self.advance()
            guard = self.cmp()
            self.expect("{")
            body = self.program("Seq", "}")
            close = self.expect("}")
            return _Tmp("While", Span(tok.span.start, close.span.end), "while", [guard, body])
        if tok.kind == "kw" and tok.text == "if":
            self.advance()
            guard = self.cmp()
            self.expect("{")
            then = self.program("Seq", "}")
            self.expect("}")
            self.expect("else")
            self.expect("{")
            other = self.program("Seq", "}")
            close = self.expect("}")
            return _Tmp("If", Span(tok.span.start, close.span.end), "if", [guard, then, other])
        raise self.fail({"skip", "while", "if", "identifier"})

    def cmp(self) -> _Tmp:
        left = self.expr()
        tok = self.peek()
        if tok.kind != "op" or tok.text not in COMPARISONS:
            raise self.fail(set(COMPARISONS))
        self.advance()
        right = self.expr()
        return _Tmp("Compare", Span(left.extent.start, right.extent.end), tok.text, [left, right])

    def expr(self) -> _Tmp:
        node = self.term()
        while self.peek().kind == "op" and self.peek().text in ("+", "-"):
            op = self.advance().text
            right = self.term()
            node = _Tmp("BinOp", Span(node.extent.start, right.extent.end), op, [node, right])
        return node

    def term(self) -> _Tmp:
        node = self.atom()
        while self.peek().kind == "op" and self.peek().text == "*":
            self.advance()
            right = self.atom()
            node = _Tmp("BinOp", Span(node.extent.start, right.extent.end), "*", [node, right])
        return node

    def atom(self) -> _Tmp:
        tok = self.peek()
        if tok.kind == "int":
            self.advance()
            return _Tmp("IntLit", tok.span, str(int(tok.text)))
        if tok.kind == "ident":
            self.advance()
            return _Tmp("Var", tok.span, tok.text)
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            inner = self.expr()
            close = self.expect(")")
            inner.outer = Span(tok.span.start, close.span.end)
            return inner
        raise self.fail({"integer", "identifier", "("})


def _flatten(root: _Tmp, source: str) -> Ast:
    nodes: list[AstNode | None] = []

    def visit(tmp: _Tmp) -> int:
        my_id = len(nodes)
        nodes.append(None)
        child_ids = tuple(visit(c) for c in tmp.children)
        nodes[my_id] = AstNode(my_id, tmp.kind, tmp.span, child_ids, tmp.label)
        return my_id

    visit(root)
    return Ast(tuple(nodes), 0, source)


def parse(source: str) -> Ast:
    """Parse ``source`` into a span-annotated :class:`Ast`.

    Node ids follow depth-first pre-order, so the root is always 0.
    """
    if not lex(source):
        line, col = _line_col(source, len(source))
        raise ParseError("empty program", line, col, frozenset({"skip", "while", "if", "identifier"}))
    parser = _Parser(source)
    return _flatten(parser.program("Program", None), source)


def ast_leaf_partition(ast: Ast) -> list[tuple[int, Span]]:
    """All nodes in depth-first order with their spans."""
    return [(node.id, node.span) for node in ast.walk()]


# ---------------------------------------------------------------------------
# Pretty printing

_PREC = {"+": 1, "-": 1, "*": 2}


def _expr_text(ast: Ast, node_id: int) -> str:
    node = ast[node_id]
    if node.kind in ("Var", "IntLit"):
        return node.label
    left_id, right_id = node.children
    prec = _PREC[node.label]
    left = _expr_text(ast, left_id)
    right = _expr_text(ast, right_id)
    if ast[left_id].kind == "BinOp" and _PREC[ast[left_id].label] < prec:
        left = f"({left})"
    if ast[right_id].kind == "BinOp" and _PREC[ast[right_id].label] <= prec:
        right = f"({right})"
    return f"{left} {node.label} {right}"


def pretty(ast: Ast, node_id: int | None = None) -> str:
    """Render ``ast`` back to canonical source text."""
    node = ast[ast.root if node_id is None else node_id]
    kind = node.kind
    if kind in ("Program", "Seq"):
        return "; ".join(pretty(ast, c) for c in node.children)
    if kind == "Skip":
        return "skip"
    if kind == "Assign":
        target, value = node.children
        return f"{ast[target].label} := {_expr_text(ast, value)}"
    if kind == "Compare":
        left, right = node.children
        return f"{_expr_text(ast, left)} {node.label} {_expr_text(ast, right)}"
    if kind == "While":
        guard, body = node.children
        return f"while {pretty(ast, guard)} {{ {pretty(ast, body)} }}"
    if kind == "If":
        guard, then, other = node.children
        return f"if {pretty(ast, guard)} {{ {pretty(ast, then)} }} else {{ {pretty(ast, other)} }}"
    return _expr_text(ast, node.id)


# ---------------------------------------------------------------------------
# Interpreter


@dataclass(frozen=True)
class Halted:
    steps: int


@dataclass(frozen=True)
class BudgetExhausted:
    budget: int


@dataclass(frozen=True)
class Fault:
    """Internal invariant violation observed while interpreting."""

    description: str


ExecutionOutcome = Union[Halted, BudgetExhausted, Fault]


class _OutOfFuel(Exception):
    pass


# Values stay arbitrary precision; this only stops `x := x * x` loops from
# exhausting memory long before the step budget runs out.
MAX_INT_BITS = 1 << 20


class _Machine:
    def __init__(self, ast: Ast, budget: int):
        self.nodes = ast.nodes
        self.budget = budget
        self.steps = 0
        self.env: dict[str, int] = {}

    def tick(self) -> None:
        if self.steps >= self.budget:
            raise _OutOfFuel
        self.steps += 1

    def run_block(self, node: AstNode) -> None:
        nodes = self.nodes
        for c in node.children:
            self.run_stmt(nodes[c])

    def run_stmt(self, node: AstNode) -> None:
        kind = node.kind
        nodes = self.nodes
        if kind == "Assign":
            self.tick()
            target, value = node.children
            self.env[nodes[target].label] = self.eval(nodes[value])
        elif kind == "Skip":
            self.tick()
        elif kind == "While":
            guard, body = (nodes[c] for c in node.children)
            while True:
                self.tick()
                if not self.test(guard):
                    break
                self.run_block(body)
        elif kind == "If":
            self.tick()
            guard, then, other = (nodes[c] for c in node.children)
            self.run_block(then if self.test(guard) else other)
        else:
            raise RuntimeFault(f"node {node.id} of kind {kind} is not a statement")

    def test(self, node: AstNode) -> bool:
        if node.kind != "Compare":
            raise RuntimeFault(f"guard node {node.id} is {node.kind}, not Compare")
        left, right = (self.eval(self.nodes[c]) for c in node.children)
        op = node.label
        if op == ">":
            return left > right
        if op == "<":
            return left < right
        if op == "==":
            return left == right
        if op == "!=":
            return left != right
        raise RuntimeFault(f"unknown comparison {op!r}")

    def eval(self, node: AstNode) -> int:
        kind = node.kind
        if kind == "IntLit":
            return int(node.label)
        if kind == "Var":
            return self.env.get(node.label, 0)
        if kind == "BinOp":
            left, right = (self.eval(self.nodes[c]) for c in node.children)
            op = node.label
            if op == "+":
                return left + right
            if op == "-":
                return left - right
            if op == "*":
                if left.bit_length() + right.bit_length() > MAX_INT_BITS:
                    raise RuntimeFault(f"product at node {node.id} exceeds {MAX_INT_BITS} bits")
                return left * right
            raise RuntimeFault(f"unknown operator {op!r}")
        raise RuntimeFault(f"node {node.id} of kind {kind} is not an expression")


def interpret(ast: Ast, budget: int) -> ExecutionOutcome:
    """Run ``ast`` charging one step per statement and per loop-guard check.

    Returns :class:`BudgetExhausted` when the next step would exceed
    ``budget``; a program needing exactly ``budget`` steps halts.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    machine = _Machine(ast, budget)
    root = ast[ast.root]
    try:
        if root.kind != "Program":
            raise RuntimeFault(f"root is {root.kind}, not Program")
        machine.run_block(root)
    except _OutOfFuel:
        return BudgetExhausted(budget)
    except RuntimeFault as exc:
        return Fault(str(exc))
    except RecursionError:
        return Fault("nesting too deep")
    return Halted(machine.steps)


def terminates(source: str, budget: int) -> bool:
    return isinstance(interpret(parse(source), budget), Halted)
