"""Small arithmetic expression language used by config files.

Custom cluster weights (``custom:N/(N+1)``) and covariate-dependent
sensitivity functions (``1 + 0.1*x_1``) are written as plain arithmetic over
named variables. Expressions are parsed with :mod:`ast` and only a whitelist
of node types is accepted, so config files cannot execute arbitrary code.
"""

from __future__ import annotations

import ast
import math
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError

_FUNCS: dict[str, Callable] = {
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "minimum": np.minimum,
    "maximum": np.maximum,
}
_CONSTS = {"pi": math.pi, "e": math.e}

_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.Pow: lambda a, b: a ** b,
}
_UNARY = {ast.UAdd: lambda a: +a, ast.USub: lambda a: -a}


class Expression:
    """A parsed expression; call it with a mapping of variable values."""

    def __init__(self, source: str):
        self.source = source.strip()
        try:
            tree = ast.parse(self.source, mode="eval")
        except SyntaxError as exc:
            raise ConfigError(f"cannot parse expression {source!r}: {exc.msg}") from None
        self._check(tree.body)
        self._tree = tree.body
        self.names = sorted(
            {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)} - set(_FUNCS) - set(_CONSTS)
        )

    def _check(self, node: ast.AST) -> None:
        if isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise ConfigError(f"operator not allowed in {self.source!r}")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp):
            if type(node.op) not in _UNARY:
                raise ConfigError(f"operator not allowed in {self.source!r}")
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS or node.keywords:
                raise ConfigError(f"only {sorted(_FUNCS)} may be called in {self.source!r}")
            for arg in node.args:
                self._check(arg)
        elif isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                raise ConfigError(f"non-numeric constant in {self.source!r}")
        elif not isinstance(node, ast.Name):
            raise ConfigError(f"unsupported syntax in {self.source!r}")

    def _eval(self, node: ast.AST, env: Mapping[str, object]):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](self._eval(node.operand, env))
        if isinstance(node, ast.Call):
            return _FUNCS[node.func.id](*(self._eval(a, env) for a in node.args))
        if isinstance(node, ast.Constant):
            return float(node.value)
        name = node.id
        if name in env:
            return env[name]
        if name in _CONSTS:
            return _CONSTS[name]
        raise ConfigError(f"unknown variable {name!r} in {self.source!r}")

    def __call__(self, env: Mapping[str, object]):
        return self._eval(self._tree, env)

    def __repr__(self) -> str:
        return f"Expression({self.source!r})"
