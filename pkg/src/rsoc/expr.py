"""Closed-form coefficient expressions with exact second-order derivatives.

Expressions are small immutable trees over the variables ``t, x, y, z, u``.
:func:`eval_jet2` propagates value, gradient and Hessian forward through the
tree, so derivatives of composed elementary functions are exact up to
floating point.

Grammar (``-`` and the unicode minus are interchangeable)::

    expr    := term (("+" | "-") term)*
    term    := "-" term | product
    product := factor (("*" | "/") factor)*
    factor  := "-" factor | atom ("^" ["-"] integer)?
    atom    := number | ident | func "(" expr ")" | "(" expr ")"
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

VARIABLES = ("t", "x", "y", "z", "u")
FUNCTIONS = ("exp", "ln", "sin", "cos", "ch", "th", "abs")


class ExprSyntaxError(ValueError):
    def __init__(self, message: str, position: int, expected: Sequence[str] = ()):
        self.position = position
        self.expected = tuple(expected)
        detail = f" (expected {', '.join(self.expected)})" if self.expected else ""
        super().__init__(f"{message} at position {position}{detail}")


class ExprDomainError(ArithmeticError):
    """Raised when evaluation leaves a function's domain."""

    def __init__(self, message: str, subexpression: "Expression"):
        self.subexpression = subexpression
        super().__init__(f"{message} in '{to_string(subexpression)}'")


class NonDifferentiableError(ValueError):
    pass


# --------------------------------------------------------------------------
# tree


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expression"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: "Expression"
    right: "Expression"


@dataclass(frozen=True)
class Pow:
    base: "Expression"
    exponent: int


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expression"


Expression = Union[Num, Var, Neg, BinOp, Pow, Call]


def free_variables(expr: Expression) -> frozenset:
    if isinstance(expr, Var):
        return frozenset((expr.name,))
    if isinstance(expr, Num):
        return frozenset()
    if isinstance(expr, BinOp):
        return free_variables(expr.left) | free_variables(expr.right)
    if isinstance(expr, Neg):
        return free_variables(expr.operand)
    if isinstance(expr, Pow):
        return free_variables(expr.base)
    return free_variables(expr.arg)


def to_string(expr: Expression) -> str:
    """Print ``expr`` so that :func:`parse` rebuilds the identical tree."""
    if isinstance(expr, Num):
        return repr(float(expr.value))
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Call):
        return f"{expr.func}({to_string(expr.arg)})"
    if isinstance(expr, Neg):
        return "-" + _wrap(expr.operand, allow_product=True)
    if isinstance(expr, Pow):
        return f"{_wrap(expr.base)}^{expr.exponent}"
    return f"{_wrap(expr.left)} {expr.op} {_wrap(expr.right)}"


def _wrap(expr: Expression, allow_product: bool = False) -> str:
    if isinstance(expr, (Var, Call)):
        return to_string(expr)
    if isinstance(expr, Num) and expr.value >= 0:
        return to_string(expr)
    if allow_product and isinstance(expr, BinOp) and expr.op in "*/":
        # "-a*b" reparses as Neg(a*b)
        return to_string(expr)
    return f"({to_string(expr)})"


# --------------------------------------------------------------------------
# parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()−]))"
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    source = source.rstrip()
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            col = pos + len(source[pos:]) - len(source[pos:].lstrip())
            raise ExprSyntaxError(f"unexpected character {source[col]!r}", col)
        kind = m.lastgroup
        text = m.group(kind)
        if text == "−":
            text = "-"
        tokens.append((kind, text, m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str):
        kind, tok, pos = self.take()
        if tok != text:
            raise ExprSyntaxError(f"unexpected {tok or 'end of input'!r}", pos, [repr(text)])

    def parse(self) -> Expression:
        node = self.expr()
        kind, tok, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected {tok!r}", pos, ["operator", "end of input"])
        return node

    def expr(self) -> Expression:
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expression:
        if self.peek()[1] == "-":
            self.take()
            return Neg(self.term())
        return self.product()

    def product(self) -> Expression:
        node = self.factor()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> Expression:
        if self.peek()[1] == "-":
            self.take()
            return Neg(self.factor())
        node = self.atom()
        if self.peek()[1] == "^":
            self.take()
            sign = 1
            if self.peek()[1] == "-":
                self.take()
                sign = -1
            kind, tok, pos = self.take()
            if kind != "num" or not re.fullmatch(r"\d+", tok):
                raise ExprSyntaxError("exponent must be an integer literal", pos, ["integer"])
            node = Pow(node, sign * int(tok))
        return node

    def atom(self) -> Expression:
        kind, tok, pos = self.take()
        if kind == "num":
            return Num(float(tok))
        if kind == "ident":
            if tok in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(tok, arg)
            if tok in VARIABLES:
                return Var(tok)
            raise ExprSyntaxError(f"unknown identifier {tok!r}", pos, list(VARIABLES + FUNCTIONS))
        if tok == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ExprSyntaxError(
            f"unexpected {tok or 'end of input'!r}", pos, ["number", "identifier", "'('"]
        )


def parse(source: str) -> Expression:
    if not source or not source.strip():
        raise ExprSyntaxError("empty expression", 0, ["expression"])
    return _Parser(source).parse()


# --------------------------------------------------------------------------
# second-order forward mode


@dataclass(frozen=True)
class Jet2Value:
    """Value, gradient and Hessian with respect to an ordered variable list.

    ``grad`` has shape ``(k, *S)`` and ``hess`` shape ``(k, k, *S)`` where
    ``S`` is the broadcast shape of the bindings.
    """

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    wrt: tuple

    def _combine(self, other):
        if not isinstance(other, Jet2Value):
            other = Jet2Value.constant(other, self.wrt)
        return other

    @staticmethod
    def constant(value, wrt) -> "Jet2Value":
        value = np.asarray(value, dtype=float)
        k = len(wrt)
        return Jet2Value(value, np.zeros((k,) + value.shape), np.zeros((k, k) + value.shape), wrt)

    @staticmethod
    def variable(value, index: int, wrt) -> "Jet2Value":
        jet = Jet2Value.constant(value, wrt)
        grad = jet.grad.copy()
        grad[index] = 1.0
        return Jet2Value(jet.value, grad, jet.hess, wrt)

    def __add__(self, other):
        other = self._combine(other)
        return Jet2Value(self.value + other.value, self.grad + other.grad, self.hess + other.hess, self.wrt)

    def __sub__(self, other):
        other = self._combine(other)
        return Jet2Value(self.value - other.value, self.grad - other.grad, self.hess - other.hess, self.wrt)

    def __neg__(self):
        return Jet2Value(-self.value, -self.grad, -self.hess, self.wrt)

    def __mul__(self, other):
        other = self._combine(other)
        a, b = self.value, other.value
        grad = b * self.grad + a * other.grad
        hess = (
            b * self.hess
            + a * other.hess
            + _outer(self.grad, other.grad)
            + _outer(other.grad, self.grad)
        )
        return Jet2Value(a * b, grad, hess, self.wrt)

    def reciprocal(self):
        v = self.value
        return self.apply(1.0 / v, -1.0 / v**2, 2.0 / v**3)

    def __truediv__(self, other):
        return self * self._combine(other).reciprocal()

    def apply(self, f0, f1, f2) -> "Jet2Value":
        """Chain rule for a scalar function with derivatives ``f1, f2`` at the value."""
        grad = f1 * self.grad
        hess = f1 * self.hess + f2 * _outer(self.grad, self.grad)
        return Jet2Value(np.asarray(f0, dtype=float), grad, hess, self.wrt)

    def power(self, n: int) -> "Jet2Value":
        v = self.value
        if n == 0:
            return Jet2Value.constant(np.ones_like(v), self.wrt)
        if n == 1:
            return self
        return self.apply(v**n, n * v ** (n - 1), n * (n - 1) * v ** (n - 2))


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[:, None] * b[None, :]


def logcosh(x):
    """``ln ch x`` without overflow for large ``|x|``."""
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)


def sech2(x):
    """``ch(x)^-2`` computed stably for large ``|x|``."""
    e = np.exp(-2.0 * np.abs(x))
    return 4.0 * e / (1.0 + e) ** 2


def _eval(expr: Expression, env: Mapping[str, Jet2Value], wrt: tuple, need_derivs: bool, shape=()) -> Jet2Value:
    if isinstance(expr, Num):
        return Jet2Value.constant(np.full(shape, expr.value), wrt)
    if isinstance(expr, Var):
        return env[expr.name]
    if isinstance(expr, Neg):
        return -_eval(expr.operand, env, wrt, need_derivs, shape)
    if isinstance(expr, BinOp):
        left = _eval(expr.left, env, wrt, need_derivs, shape)
        right = _eval(expr.right, env, wrt, need_derivs, shape)
        if expr.op == "+":
            return left + right
        if expr.op == "-":
            return left - right
        if expr.op == "*":
            return left * right
        if np.any(right.value == 0):
            raise ExprDomainError("division by zero", expr)
        return left / right
    if isinstance(expr, Pow):
        base = _eval(expr.base, env, wrt, need_derivs, shape)
        if expr.exponent < 0:
            if np.any(base.value == 0):
                raise ExprDomainError("negative power of zero", expr)
            return base.power(-expr.exponent).reciprocal()
        return base.power(expr.exponent)

    # Call
    if expr.func == "ln" and isinstance(expr.arg, Call) and expr.arg.func == "ch":
        inner = _eval(expr.arg.arg, env, wrt, need_derivs, shape)
        th = np.tanh(inner.value)
        return inner.apply(logcosh(inner.value), th, sech2(inner.value))
    arg = _eval(expr.arg, env, wrt, need_derivs, shape)
    v = arg.value
    func = expr.func
    if func == "exp":
        e = np.exp(v)
        return arg.apply(e, e, e)
    if func == "ln":
        if np.any(v <= 0):
            raise ExprDomainError("logarithm of non-positive value", expr)
        return arg.apply(np.log(v), 1.0 / v, -1.0 / v**2)
    if func == "sin":
        s, c = np.sin(v), np.cos(v)
        return arg.apply(s, c, -s)
    if func == "cos":
        s, c = np.sin(v), np.cos(v)
        return arg.apply(c, -s, -c)
    if func == "ch":
        return arg.apply(np.cosh(v), np.sinh(v), np.cosh(v))
    if func == "th":
        th = np.tanh(v)
        s2 = sech2(v)
        return arg.apply(th, s2, -2.0 * th * s2)
    if func == "abs":
        if need_derivs and free_variables(expr.arg) & set(wrt):
            raise NonDifferentiableError(
                f"derivative requested through abs in '{to_string(expr)}'"
            )
        return Jet2Value.constant(np.abs(v), wrt)
    raise ValueError(f"unknown function {func!r}")


def eval_jet2(expr: Expression, bindings: Mapping[str, object], wrt: Sequence[str] = ()) -> Jet2Value:
    """Evaluate ``expr`` with exact first and second derivatives along ``wrt``.

    Bindings may be scalars or numpy arrays (broadcast together).
    """
    wrt = tuple(wrt)
    missing = free_variables(expr) - set(bindings)
    if missing:
        raise KeyError(f"unbound variables: {sorted(missing)}")
    unknown = set(wrt) - set(bindings)
    if unknown:
        raise KeyError(f"cannot differentiate along unbound variables: {sorted(unknown)}")
    arrays = np.broadcast_arrays(*[np.asarray(bindings[k], dtype=float) for k in bindings])
    env = {}
    for name, value in zip(bindings, arrays):
        if name in wrt:
            env[name] = Jet2Value.variable(value, wrt.index(name), wrt)
        else:
            env[name] = Jet2Value.constant(value, wrt)
    shape = arrays[0].shape if arrays else ()
    with np.errstate(over="ignore"):
        jet = _eval(expr, env, wrt, bool(wrt), shape)
    k = len(wrt)
    return Jet2Value(
        np.broadcast_to(jet.value, shape).copy(),
        np.broadcast_to(jet.grad, (k,) + shape).copy(),
        np.broadcast_to(jet.hess, (k, k) + shape).copy(),
        wrt,
    )


def evaluate(expr: Expression, bindings: Mapping[str, object]):
    return eval_jet2(expr, bindings, ()).value
