"""Restricted arithmetic expressions used by manifests.

The grammar (see ``docs/grammar.md``) is a subset of Python expression syntax,
parsed with :mod:`ast` and compiled to numpy closures by walking a whitelist
of node types. ``^`` is accepted as an alias of ``**``.

Variables are ``t``, ``u``, ``x``/``xi`` (1-d) or ``x1``, ``x2``, ``xi1``,
``xi2`` (components), and ``pi``, ``I`` (imaginary unit). Inside ``br(...)``
the bare names ``x`` and ``xi`` denote the whole vector, so ``br(xi)`` is the
Japanese bracket ``(1 + |xi|^2)^(1/2)`` in any dimension.
"""
from __future__ import annotations

import ast
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["ExpressionError", "Expression", "parse_expression"]


class ExpressionError(ValueError):
    """Parse or validation error, with a 1-based column into the source text."""

    def __init__(self, message: str, source: str, column: int | None = None):
        self.source = source
        self.column = column
        where = f" at column {column}" if column is not None else ""
        super().__init__(f"{message}{where}: {source!r}")


_FUNCS = {
    "exp": np.exp,
    "sqrt": np.sqrt,
    "log": np.log,
    "abs": np.abs,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
}
_CONSTS = {"pi": np.pi, "I": 1j}
_COMPONENT = re.compile(r"^(x|xi)([1-9])$")


# Each compiled node is (fn(env) -> array, variable set). Variable tags are
# "x", "xi", "t", "u".
Node = tuple[Callable[[dict], np.ndarray], frozenset]


@dataclass(frozen=True)
class Term:
    """One separable product ``coef(t) * p(t, x) * q(t, xi)`` of a top-level sum."""

    x_part: Callable | None
    xi_part: Callable | None
    rest: Callable | None


class Expression:
    """A compiled expression; call with keyword arrays ``t, x, xi, u``."""

    def __init__(self, source: str, dim: int, allowed: frozenset):
        self.source = source
        self.dim = dim
        text = source.replace("^", "**")
        try:
            tree = ast.parse(text.strip(), mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"syntax error ({exc.msg})", source, exc.offset) from None
        self._allowed = allowed
        self._fn, self.variables = self._compile(tree.body)
        self.terms = self._separate(tree.body)

    def __call__(self, t=0.0, x=None, xi=None, u=None):
        env = {"t": t, "x": x, "xi": xi, "u": u}
        return self._fn(env)

    def depends_on(self, var: str) -> bool:
        return var in self.variables

    # -- compilation --------------------------------------------------------
    def _err(self, node, message):
        col = getattr(node, "col_offset", None)
        raise ExpressionError(message, self.source, None if col is None else col + 1)

    def _compile(self, node) -> Node:
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float, complex)):
                self._err(node, "only numeric constants are allowed")
            v = node.value
            return (lambda env: v), frozenset()
        if isinstance(node, ast.Name):
            return self._name(node)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            f, vs = self._compile(node.operand)
            if isinstance(node.op, ast.USub):
                return (lambda env: -f(env)), vs
            return f, vs
        if isinstance(node, ast.BinOp):
            ops = {
                ast.Add: np.add,
                ast.Sub: np.subtract,
                ast.Mult: np.multiply,
                ast.Div: np.divide,
                ast.Pow: np.power,
            }
            op = ops.get(type(node.op))
            if op is None:
                self._err(node, f"operator {type(node.op).__name__} is not allowed")
            fl, vl = self._compile(node.left)
            fr, vr = self._compile(node.right)
            if op is np.power:
                return (lambda env: _power(fl(env), fr(env))), vl | vr
            return (lambda env: op(fl(env), fr(env))), vl | vr
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.keywords or len(node.args) != 1:
                self._err(node, "calls take exactly one positional argument")
            name = node.func.id
            if name == "br":
                return self._bracket(node.args[0])
            fn = _FUNCS.get(name)
            if fn is None:
                self._err(node, f"unknown function {name!r}")
            f, vs = self._compile(node.args[0])
            return (lambda env: fn(f(env))), vs
        self._err(node, f"{type(node).__name__} is not part of the expression grammar")

    def _name(self, node) -> Node:
        name = node.id
        if name in _CONSTS:
            v = _CONSTS[name]
            return (lambda env: v), frozenset()
        if name in ("t", "u"):
            self._require(node, name)
            return (lambda env: env[name]), frozenset({name})
        if name in ("x", "xi"):
            if self.dim != 1:
                self._err(node, f"bare {name!r} is a vector in d={self.dim}; use components or br()")
            self._require(node, name)
            return (lambda env: env[name][..., 0]), frozenset({name})
        m = _COMPONENT.match(name)
        if m:
            var, i = m.group(1), int(m.group(2)) - 1
            if i >= self.dim:
                self._err(node, f"component {name!r} exceeds dimension {self.dim}")
            self._require(node, var)
            return (lambda env: env[var][..., i]), frozenset({var})
        self._err(node, f"unknown name {name!r}")

    def _require(self, node, var):
        if var not in self._allowed:
            self._err(node, f"variable {var!r} is not allowed here")

    def _bracket(self, arg) -> Node:
        if isinstance(arg, ast.Name) and arg.id in ("x", "xi"):
            self._require(arg, arg.id)
            var = arg.id
            return (
                lambda env: np.sqrt(1.0 + np.sum(np.abs(env[var]) ** 2, axis=-1))
            ), frozenset({var})
        f, vs = self._compile(arg)
        return (lambda env: np.sqrt(1.0 + np.abs(f(env)) ** 2)), vs

    # -- separable structure -----------------------------------------------
    def _separate(self, node) -> list[Term] | None:
        """Split a sum of products into x-only / xi-only factors, or ``None``."""
        terms = []
        for sign, term in _flatten_sum(node, 1):
            xs, xis, rest = [], [], []
            for factor in _flatten_product(term):
                _, vs = self._compile(factor)
                if "u" in vs:
                    return None
                space = vs & {"x", "xi"}
                if space == {"x"}:
                    xs.append(factor)
                elif space == {"xi"}:
                    xis.append(factor)
                elif not space:
                    rest.append(factor)
                else:
                    return None
            terms.append(
                Term(
                    self._product(xs),
                    self._product(xis),
                    self._product(rest, sign),
                )
            )
        return terms

    def _product(self, factors, sign=1):
        if not factors and sign == 1:
            return None
        fns = [self._compile(f)[0] for f in factors]

        def prod(env):
            out = sign
            for fn in fns:
                out = out * fn(env)
            return out

        return prod


def _power(base, exponent):
    # keep real arithmetic for real data; negative bases with fractional
    # powers are promoted explicitly
    b = np.asarray(base)
    if np.iscomplexobj(b) or np.iscomplexobj(exponent):
        return np.power(b.astype(complex), exponent)
    if np.ndim(exponent) == 0 and float(exponent) == int(exponent):
        e = int(exponent)
        if e < 0:
            return 1.0 / np.power(b.astype(float), -e)
        return np.power(b, e)
    return np.power(b.astype(float), exponent)


def _flatten_sum(node, sign):
    if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Add, ast.Sub)):
        right_sign = sign if isinstance(node.op, ast.Add) else -sign
        return _flatten_sum(node.left, sign) + _flatten_sum(node.right, right_sign)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
        return _flatten_sum(node.operand, -sign)
    return [(sign, node)]


def _flatten_product(node):
    if isinstance(node, ast.BinOp) and isinstance(node.op, ast.Mult):
        return _flatten_product(node.left) + _flatten_product(node.right)
    if isinstance(node, ast.BinOp) and isinstance(node.op, ast.Div):
        inv = ast.BinOp(left=node.right, op=ast.Pow(), right=ast.Constant(-1))
        ast.copy_location(inv, node.right)
        ast.fix_missing_locations(inv)
        return _flatten_product(node.left) + [inv]
    return [node]


def parse_expression(source: str, dim: int, allowed=("t", "x", "xi")) -> Expression:
    """Compile ``source`` for a ``dim``-dimensional problem.

    ``allowed`` restricts which variables may appear, e.g. ``("xi",)`` for a
    spectral density or ``("t", "x", "u")`` for a nonlinearity.
    """
    if not isinstance(source, str) or not source.strip():
        raise ExpressionError("empty expression", str(source), None)
    return Expression(source, dim, frozenset(allowed))
