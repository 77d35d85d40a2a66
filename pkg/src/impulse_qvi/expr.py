"""Arithmetic expression language for problem coefficients.

Expressions are parsed once into a small AST and compiled to a closure that
evaluates element-wise on numpy arrays.  Grammar, lowest precedence first::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | '+' unary | power
    power   := atom ('^' unary)?          # right associative, binds tighter than unary minus
    atom    := NUMBER | NAME | NAME '[' INT ']' | NAME '(' args ')' | '(' expr ')'

so ``-x[0]^2`` is ``-(x[0]^2)`` and ``2^-1`` is ``0.5``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Expression", "ExpressionError", "compile_expression"]


class ExpressionError(ValueError):
    """Raised on a malformed expression; carries the 1-based column."""

    def __init__(self, message: str, source: str = "", column: int = 0):
        self.source = source
        self.column = column
        if source:
            message = f"{message} at column {column} in {source!r}"
        super().__init__(message)


_FUNCTIONS = {
    "exp": (1, np.exp),
    "log": (1, np.log),
    "abs": (1, np.abs),
    "sqrt": (1, np.sqrt),
    "min": (2, np.minimum),
    "max": (2, np.maximum),
    "pow": (2, np.power),
}
_CONSTANTS = {"pi": np.pi}
SCALAR_SYMBOLS = ("t", "s")
VECTOR_SYMBOLS = ("x", "xi")

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>\*\*|[-+*/^()\[\],]))"
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    col: int


def _tokenize(src: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        m = _TOKEN.match(src, pos)
        if m is None or m.end() == pos:
            col = pos + len(src[pos:]) - len(src[pos:].lstrip()) + 1
            raise ExpressionError(f"unexpected character {src[col - 1]!r}", src, col)
        kind = m.lastgroup
        text = m.group(kind)
        col = m.start(kind) + 1
        if text == "**":
            text = "^"
        toks.append(_Tok(kind, text, col))
        pos = m.end()
    toks.append(_Tok("end", "", len(src) + 1))
    return toks


# AST nodes are plain tuples: ("num", v) ("sym", name, col) ("idx", name, i, col)
# ("neg", a) ("bin", op, a, b) ("call", fname, [args])


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.toks = _tokenize(src)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> _Tok:
        tok = self.take()
        if tok.text != text:
            found = tok.text or "end of input"
            raise ExpressionError(f"expected {text!r}, found {found!r}", self.src, tok.col)
        return tok

    def parse(self):
        if self.peek().kind == "end":
            raise ExpressionError("empty expression", self.src, 1)
        node = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ExpressionError(f"unexpected token {tok.text!r}", self.src, tok.col)
        return node

    def expr(self):
        node = self.term()
        while self.peek().text in ("+", "-"):
            op = self.take().text
            node = ("bin", op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek().text in ("*", "/"):
            op = self.take().text
            node = ("bin", op, node, self.unary())
        return node

    def unary(self):
        tok = self.peek()
        if tok.text == "-":
            self.take()
            return ("neg", self.unary())
        if tok.text == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek().text == "^":
            self.take()
            return ("bin", "^", base, self.unary())
        return base

    def atom(self):
        tok = self.take()
        if tok.kind == "num":
            return ("num", float(tok.text))
        if tok.text == "(":
            node = self.expr()
            self.expect(")")
            return node
        if tok.kind == "name":
            name = tok.text
            nxt = self.peek()
            if nxt.text == "(":
                if name not in _FUNCTIONS:
                    raise ExpressionError(f"unknown function {name!r}", self.src, tok.col)
                self.take()
                args = [self.expr()]
                while self.peek().text == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                arity = _FUNCTIONS[name][0]
                if len(args) != arity:
                    raise ExpressionError(
                        f"{name} takes {arity} argument(s), got {len(args)}", self.src, tok.col
                    )
                return ("call", name, args)
            if nxt.text == "[":
                if name not in VECTOR_SYMBOLS:
                    raise ExpressionError(f"unknown symbol {name!r}", self.src, tok.col)
                self.take()
                idx = self.take()
                if idx.kind != "num" or not re.fullmatch(r"\d+", idx.text):
                    raise ExpressionError("index must be a non-negative integer", self.src, idx.col)
                self.expect("]")
                return ("idx", name, int(idx.text), tok.col)
            if name in SCALAR_SYMBOLS:
                return ("sym", name, tok.col)
            if name in _CONSTANTS:
                return ("num", _CONSTANTS[name])
            if name in VECTOR_SYMBOLS:
                raise ExpressionError(f"vector symbol {name!r} needs an index", self.src, tok.col)
            raise ExpressionError(f"unknown symbol {name!r}", self.src, tok.col)
        found = tok.text or "end of input"
        raise ExpressionError(f"unexpected token {found!r}", self.src, tok.col)


def _compile(node):
    kind = node[0]
    if kind == "num":
        v = node[1]
        return lambda env: v
    if kind == "sym":
        name = node[1]
        return lambda env: env[name]
    if kind == "idx":
        name, i = node[1], node[2]
        return lambda env: env[name][..., i]
    if kind == "neg":
        a = _compile(node[1])
        return lambda env: -a(env)
    if kind == "bin":
        op, a, b = node[1], _compile(node[2]), _compile(node[3])
        if op == "+":
            return lambda env: a(env) + b(env)
        if op == "-":
            return lambda env: a(env) - b(env)
        if op == "*":
            return lambda env: a(env) * b(env)
        if op == "/":
            return lambda env: np.divide(a(env), b(env))
        return lambda env: np.power(np.asarray(a(env), dtype=float), b(env))
    if kind == "call":
        fn = _FUNCTIONS[node[1]][1]
        args = [_compile(arg) for arg in node[2]]
        if len(args) == 1:
            (a,) = args
            return lambda env: fn(a(env))
        a, b = args
        return lambda env: fn(a(env), b(env))
    raise AssertionError(kind)


def _walk(node):
    yield node
    if node[0] == "neg":
        yield from _walk(node[1])
    elif node[0] == "bin":
        yield from _walk(node[2])
        yield from _walk(node[3])
    elif node[0] == "call":
        for arg in node[2]:
            yield from _walk(arg)


@dataclass(frozen=True)
class Expression:
    """A compiled expression.

    ``symbols`` lists the scalar symbols used; ``indices`` maps each vector
    symbol to the largest index referenced.
    """

    source: str
    symbols: frozenset = field(compare=False)
    indices: dict = field(compare=False)
    _fn: object = field(repr=False, compare=False)

    def uses(self, name: str) -> bool:
        return name in self.symbols or name in self.indices

    def __reduce__(self):
        # the compiled closure cannot be pickled; rebuild it from the source
        return compile_expression, (self.source,)

    def __call__(self, x=None, t=None, xi=None, s=None):
        env = {"x": x, "t": t, "xi": xi, "s": s}
        for name in self.symbols:
            if env[name] is None:
                raise ExpressionError(f"symbol {name!r} has no value", self.source, 0)
        for name in self.indices:
            if env[name] is None:
                raise ExpressionError(f"symbol {name!r} has no value", self.source, 0)
            env[name] = np.asarray(env[name], dtype=float)
        with np.errstate(all="ignore"):
            return self._fn(env)


def compile_expression(source: str, allowed=None) -> Expression:
    """Parse and compile ``source``.

    ``allowed`` optionally restricts the symbol set, e.g. ``{"x", "t"}``.
    """
    if not isinstance(source, str):
        raise ExpressionError(f"expression must be a string, got {type(source).__name__}")
    tree = _Parser(source).parse()
    symbols = set()
    indices: dict[str, int] = {}
    for node in _walk(tree):
        if node[0] not in ("sym", "idx"):
            continue
        if allowed is not None and node[1] not in allowed:
            raise ExpressionError(f"unknown symbol {node[1]!r} in this context", source, node[-1])
        if node[0] == "sym":
            symbols.add(node[1])
        else:
            indices[node[1]] = max(indices.get(node[1], -1), node[2])
    return Expression(source, frozenset(symbols), indices, _compile(tree))
