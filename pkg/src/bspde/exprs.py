"""Tiny arithmetic expression grammar for coefficient functions in configs.

Supports +, -, *, /, ^ (power), unary minus, parentheses, the functions sin,
cos, exp, log, sqrt, abs, numeric literals, and named variables (coordinates
x or x1..xp, the factor y, jump size z).  Compiled through the Python ast
with a strict node whitelist; no attribute access, no calls beyond the
function table, no names beyond the declared variables.
"""

from __future__ import annotations

import ast
from typing import Callable

import numpy as np

_FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
}

_ALLOWED_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)
_ALLOWED_UNARY = (ast.UAdd, ast.USub)


class ExpressionError(ValueError):
    """Raised for syntax errors or disallowed constructs in an expression."""


def _validate(node: ast.AST, variables: set[str]) -> None:
    if isinstance(node, ast.Expression):
        _validate(node.body, variables)
    elif isinstance(node, ast.BinOp):
        if not isinstance(node.op, _ALLOWED_BINOPS):
            raise ExpressionError(f"operator {type(node.op).__name__} not allowed")
        _validate(node.left, variables)
        _validate(node.right, variables)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, _ALLOWED_UNARY):
            raise ExpressionError(f"unary operator {type(node.op).__name__} not allowed")
        _validate(node.operand, variables)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
            raise ExpressionError("only sin, cos, exp, log, sqrt, abs may be called")
        if node.keywords or len(node.args) != 1:
            raise ExpressionError("functions take exactly one positional argument")
        _validate(node.args[0], variables)
    elif isinstance(node, ast.Name):
        if node.id not in variables:
            raise ExpressionError(f"unknown variable {node.id!r}")
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)):
            raise ExpressionError(f"literal {node.value!r} not allowed")
    else:
        raise ExpressionError(f"construct {type(node).__name__} not allowed")


def compile_expression(text: str, variables: tuple[str, ...]) -> Callable:
    """Compile an expression into a vectorized callable of keyword arrays.

    The returned function takes the declared variables as keyword arguments
    (numpy arrays or scalars) and evaluates elementwise.
    """
    source = text.strip().replace("^", "**")
    try:
        tree = ast.parse(source, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from exc
    varset = set(variables)
    _validate(tree, varset)
    code = compile(tree, "<coefficient>", "eval")

    def fn(**kwargs):
        missing = varset - set(kwargs)
        if missing:
            raise ExpressionError(f"missing variables {sorted(missing)}")
        env = {name: kwargs[name] for name in varset}
        env.update(_FUNCTIONS)
        return eval(code, {"__builtins__": {}}, env)

    fn.source = text.strip()
    return fn


def coefficient_of_x(text: str, p: int) -> Callable[[np.ndarray], np.ndarray]:
    """Coefficient field over node coordinates: variables x (alias x1) and x1..xp."""
    names = tuple(f"x{i + 1}" for i in range(p)) + (("x",) if p >= 1 else ())
    fn = compile_expression(text, names)

    def on_nodes(nodes: np.ndarray) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=float)
        kw = {f"x{i + 1}": nodes[:, i] for i in range(p)}
        kw["x"] = nodes[:, 0]
        out = fn(**kw)
        return np.broadcast_to(np.asarray(out, dtype=float), (nodes.shape[0],)).copy()

    on_nodes.source = text.strip()
    return on_nodes


def coefficient_of_y(text: str) -> Callable[[np.ndarray], np.ndarray]:
    """Coefficient as a function of the scalar factor y (vectorized)."""
    fn = compile_expression(text, ("y",))

    def on_y(y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = fn(y=y)
        return np.broadcast_to(np.asarray(out, dtype=float), y.shape).copy()

    on_y.source = text.strip()
    return on_y
