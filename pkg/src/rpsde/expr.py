"""Small expression grammar for drift and diffusion definitions in config files.

Accepted: numbers, ``pi``, ``t``, ``x`` (only when d = 1) or ``x1 .. xd``,
``+ - * /``, ``**`` with a numeric exponent, and ``sin``/``cos``.
Expressions are checked against this grammar with :mod:`ast` and then handed
to sympy for differentiation and numpy code generation.
"""

from __future__ import annotations

import ast

import numpy as np
import sympy

__all__ = ["ExpressionError", "compile_diffusion", "compile_drift"]

_FUNCS = {"sin": sympy.sin, "cos": sympy.cos}
_BINOPS = {ast.Add: lambda a, b: a + b, ast.Sub: lambda a, b: a - b,
           ast.Mult: lambda a, b: a * b, ast.Div: lambda a, b: a / b}


class ExpressionError(ValueError):
    pass


def _to_sympy(node, symbols: dict):
    if isinstance(node, ast.Expression):
        return _to_sympy(node.body, symbols)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
            and not isinstance(node.value, bool):
        return sympy.nsimplify(node.value) if isinstance(node.value, int) else sympy.Float(node.value)
    if isinstance(node, ast.Name):
        if node.id == "pi":
            return sympy.pi
        if node.id in symbols:
            return symbols[node.id]
        raise ExpressionError(f"unknown name {node.id!r}")
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _to_sympy(node.operand, symbols)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp):
        if isinstance(node.op, ast.Pow):
            exponent = _to_sympy(node.right, {})
            if not exponent.is_number:
                raise ExpressionError("exponents must be numeric")
            return _to_sympy(node.left, symbols) ** exponent
        op = _BINOPS.get(type(node.op))
        if op is None:
            raise ExpressionError(f"operator {type(node.op).__name__} not allowed")
        return op(_to_sympy(node.left, symbols), _to_sympy(node.right, symbols))
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
            and node.func.id in _FUNCS and len(node.args) == 1 and not node.keywords:
        return _FUNCS[node.func.id](_to_sympy(node.args[0], symbols))
    raise ExpressionError(f"unsupported syntax: {ast.dump(node)}")


def parse(text: str, symbols: dict):
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
    return _to_sympy(tree, symbols)


def _state_symbols(dim: int):
    xs = sympy.symbols(f"x1:{dim + 1}", real=True)
    names = {f"x{i + 1}": s for i, s in enumerate(xs)}
    if dim == 1:
        names["x"] = xs[0]
    return xs, names


def compile_drift(exprs: list[str], dim: int, tau: float):
    """Return ``(f, jac)`` callables for a list of ``dim`` component expressions.

    ``f(t, x)`` maps ``x`` of shape ``(..., dim)`` to the same shape; ``jac``
    returns shape ``(..., dim, dim)``.  Time is reduced modulo ``tau`` first.
    """
    if len(exprs) != dim:
        raise ExpressionError(f"expected {dim} drift components, got {len(exprs)}")
    t = sympy.Symbol("t", real=True)
    xs, names = _state_symbols(dim)
    names["t"] = t
    comps = [parse(e, names) for e in exprs]
    jac = [[sympy.diff(c, xj) for xj in xs] for c in comps]
    f_num = sympy.lambdify((t, *xs), comps, modules="numpy")
    j_num = sympy.lambdify((t, *xs), jac, modules="numpy")

    def f(tt, x):
        x = np.asarray(x, dtype=float)
        vals = f_num(tt % tau, *np.moveaxis(x, -1, 0))
        return np.stack([np.broadcast_to(v, x.shape[:-1]) for v in vals], axis=-1).astype(float)

    def jacobian(tt, x):
        x = np.asarray(x, dtype=float)
        rows = j_num(tt % tau, *np.moveaxis(x, -1, 0))
        return np.stack(
            [np.stack([np.broadcast_to(v, x.shape[:-1]) for v in row], axis=-1) for row in rows],
            axis=-2,
        ).astype(float)

    return f, jacobian


def compile_diffusion(expr: str | float, tau: float):
    """Return ``g(t)`` for an expression in ``t`` only."""
    t = sympy.Symbol("t", real=True)
    g_sym = parse(str(expr), {"t": t})
    if g_sym.is_number:
        value = float(g_sym)
        return lambda tt: value
    g_num = sympy.lambdify(t, g_sym, modules="numpy")
    return lambda tt: float(g_num(tt % tau))
