"""Scalar expressions in ``x1..xd``: parsing, exact differentiation, evaluation.

Grammar (whitespace insignificant)::

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := ("-" | "+") unary | power
    power   := atom ["^" exponent]
    exponent:= ["-" | "+"] INTEGER | "(" ["-" | "+"] INTEGER ")"
    atom    := NUMBER | "pi" | VARIABLE | FUNC "(" expr ")" | "(" expr ")"

``VARIABLE`` is ``x1`` .. ``xd``; ``FUNC`` is one of ``exp log sin cos sqrt``.
``**`` is accepted as a synonym of ``^``. Chained powers must be
parenthesized.

Trees are immutable and built from five node kinds: :class:`Const`,
:class:`Var`, :class:`Unary`, :class:`Binary` and :class:`Pow` (integer
exponents only, so differentiation stays closed over the node set).
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DimensionMismatch, EvalError, ParseError

UNARY_OPS = ("neg", "exp", "log", "sin", "cos", "sqrt")
BINARY_OPS = ("add", "sub", "mul", "div")
FUNCTIONS = ("exp", "log", "sin", "cos", "sqrt")

Number = Union[int, float]


class Expr:
    """Base class of expression nodes. Supports arithmetic with folding."""

    __slots__ = ()

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, n: int):
        return power(self, n)

    def __str__(self) -> str:
        return to_string(self)


@dataclass(frozen=True, repr=False)
class Const(Expr):
    value: float

    def __repr__(self):
        return f"Const({self.value!r})"


@dataclass(frozen=True, repr=False)
class Var(Expr):
    index: int  # 1-based axis

    def __repr__(self):
        return f"Var({self.index})"


@dataclass(frozen=True, repr=False)
class Unary(Expr):
    op: str
    arg: Expr

    def __repr__(self):
        return f"Unary({self.op!r}, {self.arg!r})"


@dataclass(frozen=True, repr=False)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr

    def __repr__(self):
        return f"Binary({self.op!r}, {self.left!r}, {self.right!r})"


@dataclass(frozen=True, repr=False)
class Pow(Expr):
    base: Expr
    exponent: int

    def __repr__(self):
        return f"Pow({self.base!r}, {self.exponent})"


ZERO = Const(0.0)
ONE = Const(1.0)


def _wrap(v) -> Expr:
    if isinstance(v, Expr):
        return v
    if isinstance(v, (int, float, np.floating, np.integer)):
        return Const(float(v))
    return NotImplemented


def _is_const(e: Expr, value=None) -> bool:
    return isinstance(e, Const) and (value is None or e.value == value)


# -- smart constructors with light folding -----------------------------------

def const(v: Number) -> Const:
    return Const(float(v))


def var(i: int) -> Var:
    if i < 1:
        raise ValueError("variable index is 1-based")
    return Var(int(i))


def add(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Binary("add", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    return Binary("sub", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a, -1.0):
        return neg(b)
    if _is_const(b, -1.0):
        return neg(a)
    return Binary("mul", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0.0:
        return Const(a.value / b.value)
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return ZERO
    if _is_const(b, 1.0):
        return a
    return Binary("div", a, b)


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Unary) and a.op == "neg":
        return a.arg
    return Unary("neg", a)


def power(a: Expr, n: int) -> Expr:
    if int(n) != n:
        raise ValueError("only integer exponents are supported")
    n = int(n)
    if n == 0:
        return ONE
    if n == 1:
        return a
    if isinstance(a, Const) and (a.value != 0.0 or n > 0):
        try:
            v = a.value ** n
        except OverflowError:
            v = math.inf
        if math.isfinite(v):
            return Const(v)
    return Pow(a, n)


def apply(op: str, a: Expr) -> Expr:
    """Apply a named unary function, folding constant arguments when defined."""
    if op == "neg":
        return neg(a)
    if op not in FUNCTIONS:
        raise ValueError(f"unknown function {op!r}")
    if isinstance(a, Const):
        v = a.value
        ok = not ((op == "log" and v <= 0.0) or (op == "sqrt" and v < 0.0))
        if ok:
            r = float(getattr(math, op)(v)) if op != "exp" or v < 700 else math.inf
            if math.isfinite(r):
                return Const(r)
    return Unary(op, a)


def exp(a: Expr) -> Expr:
    return apply("exp", _wrap(a))


def log(a: Expr) -> Expr:
    return apply("log", _wrap(a))


def sin(a: Expr) -> Expr:
    return apply("sin", _wrap(a))


def cos(a: Expr) -> Expr:
    return apply("cos", _wrap(a))


def sqrt(a: Expr) -> Expr:
    return apply("sqrt", _wrap(a))


# -- printing ------------------------------------------------------------------

_BIN_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/"}


def to_string(e: Expr) -> str:
    """Fully parenthesized text that re-parses to an identically evaluating tree."""
    if isinstance(e, Const):
        s = repr(float(e.value))
        return f"({s})" if e.value < 0 or s.startswith("-") else s
    if isinstance(e, Var):
        return f"x{e.index}"
    if isinstance(e, Unary):
        if e.op == "neg":
            return f"(-{to_string(e.arg)})"
        return f"{e.op}({to_string(e.arg)})"
    if isinstance(e, Binary):
        return f"({to_string(e.left)} {_BIN_SYMBOL[e.op]} {to_string(e.right)})"
    if isinstance(e, Pow):
        n = e.exponent
        return f"({to_string(e.base)}^{n})" if n >= 0 else f"({to_string(e.base)}^({n}))"
    raise TypeError(f"not an expression node: {e!r}")


# -- parsing -------------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>\*\*|[-+*/^(),])
    """,
    re.VERBOSE,
)


class _Parser:
    def __init__(self, source: str, dimension: int):
        self.src = source
        self.dim = dimension
        self.tokens = self._tokenize(source)
        self.pos = 0

    @staticmethod
    def _tokenize(src):
        out = []
        i = 0
        while i < len(src):
            m = _TOKEN.match(src, i)
            if m is None:
                raise ParseError(len(src[:i].encode()), "a token", src[i])
            kind = m.lastgroup
            if kind != "ws":
                text = m.group()
                out.append((kind, "^" if text == "**" else text, i))
            i = m.end()
        out.append(("end", "", len(src)))
        return out

    def _offset(self, tok) -> int:
        return len(self.src[: tok[2]].encode())

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def fail(self, expected, tok=None):
        tok = tok or self.peek()
        raise ParseError(self._offset(tok), expected, tok[1])

    def expect(self, text):
        tok = self.peek()
        if tok[1] != text or tok[0] not in ("op",):
            self.fail(repr(text))
        return self.next()

    def parse(self) -> Expr:
        e = self.expr()
        if self.peek()[0] != "end":
            self.fail("an operator or end of input")
        return e

    def expr(self):
        e = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = "add" if self.next()[1] == "+" else "sub"
            e = Binary(op, e, self.term())
        return e

    def term(self):
        e = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in ("*", "/"):
            op = "mul" if self.next()[1] == "*" else "div"
            e = Binary(op, e, self.unary())
        return e

    def unary(self):
        tok = self.peek()
        if tok[0] == "op" and tok[1] == "-":
            self.next()
            return Unary("neg", self.unary())
        if tok[0] == "op" and tok[1] == "+":
            self.next()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.next()
            n = self.exponent()
            if self.peek()[0] == "op" and self.peek()[1] == "^":
                self.fail("parentheses around a chained power")
            return Pow(base, n)
        return base

    def exponent(self) -> int:
        paren = self.peek()[0] == "op" and self.peek()[1] == "("
        if paren:
            self.next()
        sign = 1
        tok = self.peek()
        if tok[0] == "op" and tok[1] in "+-":
            sign = -1 if tok[1] == "-" else 1
            self.next()
        tok = self.peek()
        if tok[0] != "num":
            self.fail("an integer exponent")
        value = float(tok[1])
        if not math.isfinite(value) or value != int(value):
            self.fail("an integer exponent")
        self.next()
        if paren:
            self.expect(")")
        return sign * int(value)

    def atom(self):
        tok = self.peek()
        kind, text = tok[0], tok[1]
        if kind == "num":
            self.next()
            value = float(text)
            if not math.isfinite(value):
                self.fail("a finite number literal", tok)
            return Const(value)
        if kind == "ident":
            self.next()
            if text == "pi":
                return Const(math.pi)
            m = re.fullmatch(r"x([1-9]\d*)", text)
            if m:
                idx = int(m.group(1))
                if idx > self.dim:
                    self.fail(f"a variable among x1..x{self.dim}", tok)
                return Var(idx)
            if text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                if self.peek()[1] == ",":
                    self.fail(f"')' ({text} takes exactly one argument)")
                self.expect(")")
                return Unary(text, arg)
            self.fail("a known identifier", tok)
        if kind == "op" and text == "(":
            self.next()
            e = self.expr()
            self.expect(")")
            return e
        self.fail("a number, variable, function call or '('")


def parse(source: str, dimension: int) -> Expr:
    """Parse ``source`` into an expression over ``x1..x{dimension}``.

    Raises :class:`ParseError` on malformed input, unknown identifiers,
    variables beyond ``dimension``, wrong function arity and non-integer
    exponents.
    """
    if dimension < 1:
        raise ValueError("dimension must be >= 1")
    try:
        return _Parser(source, dimension).parse()
    except RecursionError:
        raise ParseError(0, "a less deeply nested expression", source[:1]) from None


# -- differentiation -----------------------------------------------------------

def differentiate(e: Expr, axis: int) -> Expr:
    """Exact partial derivative of ``e`` with respect to ``x{axis}``."""
    if axis < 1:
        raise ValueError("axis is 1-based")
    return _diff(e, axis, {})


def _diff(e: Expr, axis: int, memo: dict) -> Expr:
    key = id(e)
    hit = memo.get(key)
    if hit is not None and hit[0] is e:
        return hit[1]
    out = _diff_node(e, axis, memo)
    memo[key] = (e, out)
    return out


def _diff_node(e: Expr, axis: int, memo: dict) -> Expr:
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.index == axis else ZERO
    if isinstance(e, Unary):
        u = e.arg
        du = _diff(u, axis, memo)
        if _is_const(du, 0.0):
            return ZERO
        if e.op == "neg":
            return neg(du)
        if e.op == "exp":
            return mul(e, du)
        if e.op == "log":
            return div(du, u)
        if e.op == "sin":
            return mul(apply("cos", u), du)
        if e.op == "cos":
            return mul(neg(apply("sin", u)), du)
        if e.op == "sqrt":
            return div(du, mul(Const(2.0), e))
        raise ValueError(f"unknown unary op {e.op!r}")
    if isinstance(e, Binary):
        a, b = e.left, e.right
        da, db = _diff(a, axis, memo), _diff(b, axis, memo)
        if e.op == "add":
            return add(da, db)
        if e.op == "sub":
            return sub(da, db)
        if e.op == "mul":
            return add(mul(da, b), mul(a, db))
        if e.op == "div":
            if _is_const(db, 0.0):
                return div(da, b)
            return div(sub(mul(da, b), mul(a, db)), power(b, 2))
        raise ValueError(f"unknown binary op {e.op!r}")
    if isinstance(e, Pow):
        du = _diff(e.base, axis, memo)
        if _is_const(du, 0.0):
            return ZERO
        n = e.exponent
        return mul(mul(Const(float(n)), power(e.base, n - 1)), du)
    raise TypeError(f"not an expression node: {e!r}")


def gradient(e: Expr, dimension: int) -> list[Expr]:
    return [differentiate(e, i) for i in range(1, dimension + 1)]


def hessian(e: Expr, dimension: int) -> list[list[Expr]]:
    """Symbolic Hessian; the (j, i) entry reuses the (i, j) tree."""
    g = gradient(e, dimension)
    H = [[None] * dimension for _ in range(dimension)]
    for i in range(dimension):
        for j in range(i, dimension):
            H[i][j] = differentiate(g[i], j + 1)
            H[j][i] = H[i][j]
    return H


def max_index(e: Expr) -> int:
    """Largest variable index used in ``e`` (0 for constants)."""
    if isinstance(e, Var):
        return e.index
    if isinstance(e, Unary):
        return max_index(e.arg)
    if isinstance(e, Binary):
        return max(max_index(e.left), max_index(e.right))
    if isinstance(e, Pow):
        return max_index(e.base)
    return 0


def node_kinds(e: Expr) -> set:
    """Set of node kinds (class name, op) occurring in ``e``."""
    out = set()
    stack = [e]
    while stack:
        n = stack.pop()
        if isinstance(n, Const):
            out.add(("Const", None))
        elif isinstance(n, Var):
            out.add(("Var", None))
        elif isinstance(n, Unary):
            out.add(("Unary", n.op))
            stack.append(n.arg)
        elif isinstance(n, Binary):
            out.add(("Binary", n.op))
            stack.extend((n.left, n.right))
        elif isinstance(n, Pow):
            out.add(("Pow", None))
            stack.append(n.base)
    return out


# -- evaluation ----------------------------------------------------------------

_UFUNC = {"exp": np.exp, "log": np.log, "sin": np.sin, "cos": np.cos, "sqrt": np.sqrt}


def _first(mask):
    idx = np.argwhere(np.atleast_1d(mask))[0]
    return tuple(int(i) for i in idx)


def evaluate(e: Expr, x):
    """Evaluate ``e`` at a point ``x`` of shape ``(d,)`` or a batch ``(d, ...)``.

    Returns a float for a single point and an array of shape ``x.shape[1:]``
    for a batch. Domain violations raise :class:`EvalError`; with a batch,
    ``EvalError.where`` holds the index of the first offending sample.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        raise ValueError("x must have a leading axis of length d")
    if max_index(e) > x.shape[0]:
        raise DimensionMismatch(
            f"expression uses x{max_index(e)} but the point has {x.shape[0]} coordinates"
        )
    batch = x.ndim > 1
    with np.errstate(all="ignore"):
        out = _eval(e, x, batch, {})
    if batch:
        return np.array(np.broadcast_to(out, x.shape[1:]), dtype=float)
    return float(out)


def _eval(e, x, batch, memo):
    key = id(e)
    hit = memo.get(key)
    if hit is not None and hit[0] is e:
        return hit[1]
    out = _eval_node(e, x, batch, memo)
    memo[key] = (e, out)
    return out


def _eval_node(e, x, batch, memo):
    if isinstance(e, Const):
        return np.float64(e.value)
    if isinstance(e, Var):
        return x[e.index - 1]
    if isinstance(e, Unary):
        a = _eval(e.arg, x, batch, memo)
        if e.op == "neg":
            return -a
        if e.op == "log":
            bad = a <= 0
            if np.any(bad):
                raise EvalError("log-domain", to_string(e), _where(bad, x, batch))
        elif e.op == "sqrt":
            bad = a < 0
            if np.any(bad):
                raise EvalError("sqrt-domain", to_string(e), _where(bad, x, batch))
        return _UFUNC[e.op](a)
    if isinstance(e, Binary):
        a = _eval(e.left, x, batch, memo)
        b = _eval(e.right, x, batch, memo)
        if e.op == "add":
            return a + b
        if e.op == "sub":
            return a - b
        if e.op == "mul":
            return a * b
        bad = b == 0
        if np.any(bad):
            raise EvalError("div-by-zero", to_string(e), _where(bad, x, batch))
        return a / b
    if isinstance(e, Pow):
        a = _eval(e.base, x, batch, memo)
        n = e.exponent
        if n < 0:
            bad = a == 0
            if np.any(bad):
                raise EvalError("div-by-zero", to_string(e), _where(bad, x, batch))
            return 1.0 / _ipow(a, -n)
        return _ipow(a, n)
    raise TypeError(f"not an expression node: {e!r}")


def _ipow(a, n: int):
    # repeated multiplication keeps results reproducible across numpy builds
    if n == 2:
        return a * a
    return np.power(a, n)


def _where(mask, x, batch):
    if not batch:
        return None
    full = np.broadcast_to(mask, x.shape[1:])
    return _first(full)
