"""Closed-form periodic coefficient formulas.

Grammar (EBNF), identifiers case-sensitive, whitespace ignored::

    formula    = expression EOF ;
    expression = product { ("+" | "-") product } ;
    product    = unary { ("*" | "/") unary } ;
    unary      = "-" unary | power ;
    power      = primary [ "^" unary ] ;
    primary    = number | name "(" expression ")" | name | "(" expression ")" ;
    name       = "pi" | "y" index | "x" index | function ;
    function   = "sin" | "cos" | "exp" | "log" | "sqrt" | "tanh" ;

Precedence is ``^`` over unary minus over ``* /`` over ``+ -``; ``^`` is
right-associative, so ``2^3^2`` is ``2^(3^2)`` and ``-2^2`` is ``-(2^2)``.
Angles are radians and ``pi`` is the only builtin constant.
"""
import re
from dataclasses import dataclass, field
from typing import Dict, Optional, Set, Tuple

import numpy as np
from arpeggio import EOF, NoMatch, NonTerminal, Optional as Opt, ParserPython, ZeroOrMore
from arpeggio import RegExMatch as _

from utils import EvaluationDomainError, ExpressionSyntaxError, UnknownIdentifierError, VariableIndexError

FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
}

_VARIABLE = re.compile(r"^([xy])([0-9]+)$")


def number():
    return _(r"(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?")

def name():
    return _(r"[A-Za-z_][A-Za-z_0-9]*")

def addop():
    return _(r"[+\-]")

def mulop():
    return _(r"[*/]")

def call():
    return name, "(", expression, ")"

def group():
    return "(", expression, ")"

def primary():
    return [number, call, name, group]

def power():
    return primary, Opt("^", unary)

def negation():
    return "-", unary

def unary():
    return [negation, power]

def product():
    return unary, ZeroOrMore(mulop, unary)

def expression():
    return product, ZeroOrMore(addop, product)

def formula():
    return expression, EOF


_RULES = {"number", "name", "addop", "mulop", "call", "group", "primary", "power",
          "negation", "unary", "product", "expression", "formula"}

_parser = None

def _get_parser():
    global _parser
    if _parser is None:
        _parser = ParserPython(formula, skipws=True)
    return _parser


# AST. `position` is the byte offset in the source text and takes no part in
# structural equality.

@dataclass(frozen=True)
class Const:
    """Non-negative finite literal; signs live in Neg so printed trees parse back unchanged."""
    value: float
    position: int = field(default=-1, compare=False)

    def __post_init__(self):
        if not np.isfinite(self.value) or np.signbit(self.value):
            raise ValueError(f"Const needs a non-negative finite value, got {self.value!r}; use constant()")

@dataclass(frozen=True)
class Pi:
    position: int = field(default=-1, compare=False)

@dataclass(frozen=True)
class Var:
    kind: str
    index: int
    position: int = field(default=-1, compare=False)

@dataclass(frozen=True)
class Neg:
    operand: "Node"
    position: int = field(default=-1, compare=False)

@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"
    position: int = field(default=-1, compare=False)

@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"
    position: int = field(default=-1, compare=False)


def constant(value: float, position: int = -1):
    """Literal node for any finite value; negatives become Neg(Const(|value|))."""
    value = float(value)
    if np.signbit(value):
        return Neg(Const(-value, position), position)
    return Const(value, position)


@dataclass(frozen=True)
class Expression:
    root: object
    dim: int
    source: str = field(default="", compare=False)

    def __str__(self):
        return to_source(self)


def _byte_offset(source: str, char_pos: int) -> int:
    return len(source[:char_pos].encode("utf-8"))


def _rule_children(node):
    for child in node:
        if child.rule_name in _RULES:
            yield child
        elif isinstance(child, NonTerminal):
            yield from _rule_children(child)


class _TreeBuilder:
    def __init__(self, source: str, dim: int, allow_x: bool):
        self.source = source
        self.dim = dim
        self.allow_x = allow_x

    def offset(self, node) -> int:
        return _byte_offset(self.source, node.position)

    def build(self, node):
        rule = node.rule_name
        if rule == "number":
            value = float(node.value)
            if not np.isfinite(value):
                raise ExpressionSyntaxError(self.source, self.offset(node), "number out of range")
            return Const(value, self.offset(node))
        if rule == "name":
            return self.identifier(node)
        if rule in ("expression", "product"):
            return self.fold(node)
        if rule == "negation":
            (operand,) = list(_rule_children(node))
            return Neg(self.build(operand), self.offset(node))
        if rule == "power":
            kids = list(_rule_children(node))
            base = self.build(kids[0])
            if len(kids) == 1:
                return base
            return BinOp("^", base, self.build(kids[1]), self.offset(node))
        if rule == "call":
            fname, arg = list(_rule_children(node))
            if fname.value not in FUNCTIONS:
                raise UnknownIdentifierError(fname.value, self.offset(fname))
            return Call(fname.value, self.build(arg), self.offset(fname))
        # formula, unary, primary, group: single meaningful child
        kids = list(_rule_children(node))
        return self.build(kids[0])

    def fold(self, node):
        kids = list(_rule_children(node))
        result = self.build(kids[0])
        for op_node, operand in zip(kids[1::2], kids[2::2]):
            result = BinOp(op_node.value, result, self.build(operand), self.offset(op_node))
        return result

    def identifier(self, node):
        text = node.value
        if text == "pi":
            return Pi(self.offset(node))
        match = _VARIABLE.match(text)
        if match is None or (match.group(1) == "x" and not self.allow_x):
            raise UnknownIdentifierError(text, self.offset(node))
        index = int(match.group(2))
        if not 1 <= index <= self.dim:
            raise VariableIndexError(text, self.dim, self.offset(node))
        return Var(match.group(1), index, self.offset(node))


def parse_expression(source: str, dim: int, allow_x: bool = False) -> Expression:
    """Parse `source` into an Expression over variables y1..y_dim.

    x1..x_dim are accepted only with `allow_x` (domain data f, g).
    """
    if not source or not source.strip():
        raise ExpressionSyntaxError(source, 0, "empty expression")
    if dim < 1:
        raise VariableIndexError("y1", dim, 0)
    try:
        tree = _get_parser().parse(source)
    except NoMatch as e:
        raise ExpressionSyntaxError(source, _byte_offset(source, e.position), "unexpected input")
    root = _TreeBuilder(source, dim, allow_x).build(tree)
    return Expression(root, dim, source)


def to_source(expr) -> str:
    node = expr.root if isinstance(expr, Expression) else expr
    if isinstance(node, Const):
        return repr(float(node.value))
    if isinstance(node, Pi):
        return "pi"
    if isinstance(node, Var):
        return f"{node.kind}{node.index}"
    if isinstance(node, Neg):
        return f"(-{to_source(node.operand)})"
    if isinstance(node, BinOp):
        return f"({to_source(node.left)} {node.op} {to_source(node.right)})"
    if isinstance(node, Call):
        return f"{node.func}({to_source(node.arg)})"
    raise TypeError(f"not an expression node: {node!r}")


def variables(expr) -> Set[Tuple[str, int]]:
    node = expr.root if isinstance(expr, Expression) else expr
    if isinstance(node, Var):
        return {(node.kind, node.index)}
    if isinstance(node, Neg):
        return variables(node.operand)
    if isinstance(node, BinOp):
        return variables(node.left) | variables(node.right)
    if isinstance(node, Call):
        return variables(node.arg)
    return set()


def _check_domain(node, values, what):
    if not np.all(np.isfinite(values)):
        raise EvaluationDomainError(what, node.position)
    return values


def _eval(node, coords: Dict[str, np.ndarray]):
    if isinstance(node, Const):
        return np.float64(node.value)
    if isinstance(node, Pi):
        return np.float64(np.pi)
    if isinstance(node, Var):
        if node.kind not in coords:
            raise EvaluationDomainError(f"no values bound for {node.kind}{node.index}", node.position)
        return coords[node.kind][node.index - 1]
    if isinstance(node, Neg):
        return -_eval(node.operand, coords)
    if isinstance(node, Call):
        arg = _eval(node.arg, coords)
        if node.func == "log" and np.any(arg <= 0):
            raise EvaluationDomainError("log of a nonpositive value", node.position)
        if node.func == "sqrt" and np.any(arg < 0):
            raise EvaluationDomainError("sqrt of a negative value", node.position)
        with np.errstate(all="ignore"):
            return _check_domain(node, FUNCTIONS[node.func](arg), f"{node.func} overflow")
    if isinstance(node, BinOp):
        left = _eval(node.left, coords)
        right = _eval(node.right, coords)
        if node.op == "/" and np.any(right == 0):
            raise EvaluationDomainError("division by zero", node.position)
        with np.errstate(all="ignore"):
            if node.op == "+":
                out = left + right
            elif node.op == "-":
                out = left - right
            elif node.op == "*":
                out = left * right
            elif node.op == "/":
                out = left / right
            else:
                out = np.power(left, right)
        return _check_domain(node, out, f"non-finite result of '{node.op}'")
    raise TypeError(f"not an expression node: {node!r}")


def evaluate_array(expr: Expression, y: Optional[np.ndarray] = None, x: Optional[np.ndarray] = None) -> np.ndarray:
    """Evaluate over stacked coordinates; `y`/`x` have leading axis of length dim."""
    coords = {}
    if y is not None:
        coords["y"] = np.asarray(y, dtype=float)
    if x is not None:
        coords["x"] = np.asarray(x, dtype=float)
    shape = next((np.shape(c)[1:] for c in coords.values()), ())
    return np.broadcast_to(_eval(expr.root, coords), shape).astype(float)


def evaluate(expr: Expression, point) -> float:
    point = np.asarray(point, dtype=float)
    if point.shape != (expr.dim,):
        raise ValueError(f"point must have length {expr.dim}, got shape {point.shape}")
    bound = {"y": point, "x": point}
    return float(_eval(expr.root, bound))


def sample_scalar(expr: Expression, grid):
    """Sample `expr` at the nodes of a TorusGrid."""
    from torus import ScalarField

    if expr.dim != grid.dim:
        raise ValueError(f"expression dimension {expr.dim} does not match grid dimension {grid.dim}")
    return ScalarField(grid, evaluate_array(expr, y=grid.coordinates))
