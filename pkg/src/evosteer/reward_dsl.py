"""A small, terminating expression language for steering rewards.

Grammar (EBNF)::

    expr    = term { ("+" | "-") term } ;
    term    = unary { ("*" | "/") unary } ;
    unary   = "-" unary | postfix ;
    postfix = primary { "[" INT "]" } ;
    primary = NUMBER | IDENT | IDENT "(" [ expr { "," expr } ] ")" | "(" expr ")" ;

Calls: ``vec(e, ...)``, ``dist(v, v)``, ``dot(v, v)``, ``norm(v)``,
``min(e, ...)``, ``max(e, ...)``, ``abs(x)``, ``exp(x)``, ``neg(x)``,
``clamp(x, lo, hi)`` and ``gate(c, then, else)`` (``then`` when ``c > 0``).

Values are scalars or vectors. ``+``/``-`` need matching kinds; ``*`` and
``/`` allow a scalar on either side (``/`` only a scalar divisor). A program
must evaluate to a finite scalar; higher is better.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Union

import numpy as np


class DslError(ValueError):
    pass


class ParseError(DslError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class EvalError(DslError):
    pass


# -- AST -------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Ident:
    name: str


@dataclass(frozen=True)
class Vec:
    items: tuple["Node", ...]


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple["Node", ...]


@dataclass(frozen=True)
class Index:
    target: "Node"
    index: int


Node = Union[Num, Ident, Vec, Neg, BinOp, Call, Index]

# name -> (min arity, max arity or None for variadic)
FUNCTIONS: dict[str, tuple[int, int | None]] = {
    "dist": (2, 2),
    "dot": (2, 2),
    "norm": (1, 1),
    "min": (1, None),
    "max": (1, None),
    "abs": (1, 1),
    "exp": (1, 1),
    "clamp": (3, 3),
    "gate": (3, 3),
}


@dataclass(frozen=True)
class RewardProgram:
    source: str
    ast: Node = field(compare=False)

    def __eq__(self, other):
        return isinstance(other, RewardProgram) and self.ast == other.ast

    def __hash__(self):
        return hash(self.ast)

    @property
    def text(self) -> str:
        return to_text(self.ast)

    def identifiers(self) -> set[str]:
        return set(_idents(self.ast))


def _idents(node: Node) -> Iterator[str]:
    if isinstance(node, Ident):
        yield node.name
    elif isinstance(node, (Vec, Call)):
        for a in node.items if isinstance(node, Vec) else node.args:
            yield from _idents(a)
    elif isinstance(node, Neg):
        yield from _idents(node.operand)
    elif isinstance(node, BinOp):
        yield from _idents(node.left)
        yield from _idents(node.right)
    elif isinstance(node, Index):
        yield from _idents(node.target)


# -- lexer / parser ---------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/(),\[\]])"
    r")"
)


def _tokenize(src: str) -> list[tuple[str, str, int]]:
    toks = []
    pos = 0
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        m = _TOKEN.match(src, pos)
        if m is None or m.end() == pos:
            # skip leading whitespace to report the offending character
            bad = pos + (len(src[pos:]) - len(src[pos:].lstrip()))
            raise ParseError(f"unexpected character {src[bad]!r}", bad)
        kind = m.lastgroup
        start = m.start(kind)
        toks.append((kind, m.group(kind), start))
        pos = m.end()
    toks.append(("eof", "", len(src)))
    return toks


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.toks = _tokenize(src)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.toks[self.i]

    def next(self) -> tuple[str, str, int]:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, text: str, context: str) -> None:
        kind, val, pos = self.next()
        if val != text or kind != "op":
            found = "end of input" if kind == "eof" else repr(val)
            raise ParseError(f"expected {text!r} {context}, found {found}", pos)

    def parse(self) -> Node:
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "eof":
            raise ParseError(f"unexpected {val!r}", pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.next()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.next()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.next()
            return Neg(self.unary())
        return self.postfix()

    def postfix(self) -> Node:
        node = self.primary()
        while self.peek()[0] == "op" and self.peek()[1] == "[":
            self.next()
            kind, val, pos = self.next()
            if kind != "num" or not re.fullmatch(r"\d+", val):
                raise ParseError("component index must be a nonnegative integer", pos)
            self.expect("]", "to close component access")
            node = Index(node, int(val))
        return node

    def primary(self) -> Node:
        kind, val, pos = self.next()
        if kind == "num":
            return Num(float(val))
        if kind == "ident":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                return self.call(val, pos)
            return Ident(val)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")", "to close parenthesis")
            return node
        found = "end of input" if kind == "eof" else repr(val)
        raise ParseError(f"expected an expression, found {found}", pos)

    def call(self, name: str, pos: int) -> Node:
        if name not in FUNCTIONS and name not in ("vec", "neg"):
            raise ParseError(f"unknown function {name!r}", pos)
        self.next()  # "("
        args: list[Node] = []
        if not (self.peek()[0] == "op" and self.peek()[1] == ")"):
            args.append(self.expr())
            while self.peek()[0] == "op" and self.peek()[1] == ",":
                self.next()
                args.append(self.expr())
        kind, val, end = self.next()
        if not (kind == "op" and val == ")"):
            if kind == "eof":
                raise ParseError(f"unclosed call to {name!r}", end)
            raise ParseError(f"expected ',' or ')' in call to {name!r}, found {val!r}", end)
        if name == "vec":
            if not args:
                raise ParseError("vec() needs at least one component", pos)
            return Vec(tuple(args))
        if name == "neg":
            if len(args) != 1:
                raise ParseError(f"neg expects 1 argument, got {len(args)}", pos)
            return Neg(args[0])
        lo, hi = FUNCTIONS[name]
        if len(args) < lo or (hi is not None and len(args) > hi):
            want = str(lo) if lo == hi else (f"at least {lo}" if hi is None else f"{lo}..{hi}")
            raise ParseError(f"{name} expects {want} argument(s), got {len(args)}", pos)
        return Call(name, tuple(args))


def parse(source: str) -> RewardProgram:
    return RewardProgram(source, _Parser(source).parse())


# -- printer ------------------------------------------------------------------


def _num_text(v: float) -> str:
    if not math.isfinite(v) or v < 0:
        raise DslError(f"literal {v!r} has no canonical form")
    if v.is_integer() and v < 1e15:
        return str(int(v))
    return repr(v)


def to_text(node: Node, nested: bool = False) -> str:
    """Canonical text; nested binary operations are always parenthesized."""
    if isinstance(node, Num):
        return _num_text(node.value)
    if isinstance(node, Ident):
        return node.name
    if isinstance(node, Vec):
        return "vec(" + ", ".join(to_text(a) for a in node.items) + ")"
    if isinstance(node, Neg):
        return f"neg({to_text(node.operand)})"
    if isinstance(node, Call):
        return f"{node.name}(" + ", ".join(to_text(a) for a in node.args) + ")"
    if isinstance(node, Index):
        inner = to_text(node.target, nested=True)
        return f"{inner}[{node.index}]"
    if isinstance(node, BinOp):
        s = f"{to_text(node.left, True)} {node.op} {to_text(node.right, True)}"
        return f"({s})" if nested else s
    raise TypeError(f"not an AST node: {node!r}")


def print_program(prog: RewardProgram) -> str:
    return to_text(prog.ast)


# -- evaluation ---------------------------------------------------------------


@dataclass(frozen=True)
class EvalScope:
    """Bindings for one evaluation: the candidate action plus named points and scalars."""

    action: np.ndarray
    vectors: Mapping[str, np.ndarray] = field(default_factory=dict)
    scalars: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "action", np.asarray(self.action, dtype=np.float64))
        vecs = {k: np.asarray(v, dtype=np.float64) for k, v in self.vectors.items()}
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "scalars", {k: float(v) for k, v in self.scalars.items()})
        names = ["action", *vecs, *self.scalars]
        if len(set(names)) != len(names):
            raise ValueError(f"names bound more than once: {names}")
        for k, v in [("action", self.action), *vecs.items()]:
            if not np.all(np.isfinite(v)):
                raise ValueError(f"binding {k!r} is not finite")
        for k, v in self.scalars.items():
            if not math.isfinite(v):
                raise ValueError(f"binding {k!r} is not finite")

    def names(self) -> set[str]:
        return {"action", *self.vectors, *self.scalars}

    def lookup(self, name: str):
        if name == "action":
            return self.action
        if name in self.vectors:
            return self.vectors[name]
        if name in self.scalars:
            return self.scalars[name]
        raise EvalError(f"unbound identifier {name!r}")


def _scalar(v, what: str) -> float:
    if isinstance(v, np.ndarray):
        raise EvalError(f"{what} expects a scalar, got a vector of length {v.size}")
    return v


def _vector(v, what: str) -> np.ndarray:
    if not isinstance(v, np.ndarray):
        raise EvalError(f"{what} expects a vector, got a scalar")
    return v


def _same_len(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise EvalError(f"{what}: vector lengths {a.size} and {b.size} differ")


def _binop(op: str, a, b):
    va, vb = isinstance(a, np.ndarray), isinstance(b, np.ndarray)
    if op in "+-":
        if va != vb:
            raise EvalError(f"'{op}' mixes a scalar and a vector")
        if va:
            _same_len(a, b, op)
        return a + b if op == "+" else a - b
    if op == "*":
        if va and vb:
            raise EvalError("'*' between two vectors; use dot()")
        return a * b
    if vb:
        raise EvalError("'/' by a vector")
    if b == 0:
        raise EvalError("division by zero")
    return a / b


def _eval(node: Node, scope: EvalScope):
    out = _eval_node(node, scope)
    # python floats overflow to inf silently and a later min() could hide it
    if not np.all(np.isfinite(out)):
        raise EvalError(f"non-finite intermediate value in {to_text(node)}")
    return out


def _eval_node(node: Node, scope: EvalScope):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Ident):
        return scope.lookup(node.name)
    if isinstance(node, Vec):
        return np.array([_scalar(_eval(a, scope), "vec") for a in node.items])
    if isinstance(node, Neg):
        return -_eval(node.operand, scope)
    if isinstance(node, Index):
        v = _vector(_eval(node.target, scope), "component access")
        if node.index >= v.size:
            raise EvalError(f"component {node.index} out of range for length {v.size}")
        return float(v[node.index])
    if isinstance(node, BinOp):
        return _binop(node.op, _eval(node.left, scope), _eval(node.right, scope))
    if isinstance(node, Call):
        args = [_eval(a, scope) for a in node.args]
        name = node.name
        if name in ("dist", "dot"):
            a, b = _vector(args[0], name), _vector(args[1], name)
            _same_len(a, b, name)
            return float(np.linalg.norm(a - b)) if name == "dist" else float(a @ b)
        if name == "norm":
            return float(np.linalg.norm(_vector(args[0], name)))
        if name in ("min", "max"):
            xs = [_scalar(x, name) for x in args]
            return min(xs) if name == "min" else max(xs)
        if name == "abs":
            return abs(_scalar(args[0], name))
        if name == "exp":
            x = _scalar(args[0], name)
            if x > 709.0:
                raise EvalError("exp overflow")
            return math.exp(x)
        if name == "clamp":
            x, lo, hi = (_scalar(v, name) for v in args)
            if lo > hi:
                raise EvalError(f"clamp bounds reversed ({lo} > {hi})")
            return min(max(x, lo), hi)
        if name == "gate":
            c, a, b = (_scalar(v, name) for v in args)
            return a if c > 0 else b
    raise EvalError(f"cannot evaluate {node!r}")


def evaluate(prog: RewardProgram, scope: EvalScope) -> float:
    with np.errstate(all="raise"):
        try:
            value = _eval(prog.ast, scope)
        except FloatingPointError as exc:
            raise EvalError(f"floating point error: {exc}") from None
    if isinstance(value, np.ndarray):
        raise EvalError("program evaluates to a vector, expected a scalar")
    value = float(value)
    if not math.isfinite(value):
        raise EvalError("program evaluated to a non-finite value")
    return value


def unbound_names(prog: RewardProgram, names) -> list[str]:
    return sorted(prog.identifiers() - set(names))


def validate(prog: RewardProgram, scope: EvalScope) -> None:
    """Scope check plus a trial evaluation; raises :class:`EvalError`."""
    missing = unbound_names(prog, scope.names())
    if missing:
        raise EvalError(f"unbound identifier(s): {', '.join(missing)}")
    evaluate(prog, scope)
