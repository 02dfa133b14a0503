import os
import sys
import math

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from expression import (
    FUNCTIONS, BinOp, Call, Const, Expression, Neg, Pi, Var, constant, evaluate, evaluate_array, parse_expression,
    sample_scalar, to_source, variables,
)
from torus import TorusGrid
from utils import (
    ConfigError, EvaluationDomainError, ExpressionSyntaxError, UnknownIdentifierError, VariableIndexError,
)


@pytest.mark.parametrize("source, point, expected", [
    ("2+sin(2*pi*y1)", [0.25], 3.0),
    ("2^3^2", [0.0], 512.0),
    ("-2^2", [0.0], -4.0),
    ("1 - 2 - 3", [0.0], -4.0),
    ("8/4/2", [0.0], 1.0),
    ("1.5e1 + .5", [0.0], 15.5),
    ("exp(log(3))", [0.0], 3.0),
    ("sqrt(y1*y2)", [2.0, 8.0], 4.0),
    ("tanh(0)", [0.0, 0.0], 0.0),
])
def test_evaluate(source, point, expected):
    expr = parse_expression(source, len(point))
    assert evaluate(expr, point) == pytest.approx(expected, rel=1e-14)


def test_whitespace_and_structure():
    a = parse_expression("cos( 2 * pi * y1 )", 1)
    b = parse_expression("cos(2*pi*y1)", 1)
    assert a == b
    assert variables(a) == {("y", 1)}


def test_to_source_round_trip():
    expr = parse_expression("(1+y1)*y2^2 - sin(pi*y2)/3", 2)
    again = parse_expression(to_source(expr), 2)
    assert again == expr


def random_tree(rng, depth, dim, signed=True):
    """Any tree over the grammar, constants possibly negative."""
    roll = rng.random()
    if depth == 0 or roll < 0.25:
        kind = rng.integers(3)
        if kind == 0:
            value = rng.uniform(-5.0, 5.0) if signed else rng.uniform(0.0, 5.0)
            return constant(value)
        if kind == 1:
            return Pi()
        return Var("y", int(rng.integers(1, dim + 1)))
    if roll < 0.45:
        return Neg(random_tree(rng, depth - 1, dim, signed))
    if roll < 0.6:
        return Call(str(rng.choice(sorted(FUNCTIONS))), random_tree(rng, depth - 1, dim, signed))
    op = str(rng.choice(["+", "-", "*", "/", "^"]))
    return BinOp(op, random_tree(rng, depth - 1, dim, signed), random_tree(rng, depth - 1, dim, signed))


def bounded_tree(rng, depth, dim):
    """Random tree whose value stays finite and in-domain on [0, 1)^dim."""
    roll = rng.random()
    if depth == 0 or roll < 0.25:
        kind = rng.integers(3)
        if kind == 0:
            return constant(rng.uniform(-2.0, 2.0))
        if kind == 1:
            return Pi()
        return Var("y", int(rng.integers(1, dim + 1)))
    sub = bounded_tree(rng, depth - 1, dim)
    if roll < 0.4:
        return Neg(sub)
    if roll < 0.6:
        func = str(rng.choice(["sin", "cos", "tanh"]))
        return Call(func, sub)
    if roll < 0.65:
        return Call("exp", Call("tanh", sub))
    if roll < 0.7:
        return Call("log", BinOp("+", Const(2.0), Call("cos", sub)))
    if roll < 0.75:
        return Call("sqrt", BinOp("+", Const(2.0), Call("sin", sub)))
    other = bounded_tree(rng, depth - 1, dim)
    if roll < 0.85:
        return BinOp(str(rng.choice(["+", "-"])), sub, other)
    if roll < 0.9:
        return BinOp("*", Call("tanh", sub), other)
    if roll < 0.95:
        return BinOp("/", sub, BinOp("+", Const(2.0), Call("sin", other)))
    return BinOp("^", BinOp("+", Const(1.5), Call("sin", sub)), Call("tanh", other))


def python_value(tree, point):
    """Evaluate the printed text with Python itself."""
    namespace = {name: getattr(np, name) for name in FUNCTIONS}
    namespace["pi"] = np.pi
    namespace.update({f"y{i + 1}": np.float64(v) for i, v in enumerate(point)})
    return float(eval(to_source(tree).replace("^", "**"), {"__builtins__": {}}, namespace))


@pytest.mark.parametrize("signed", [False, True])
def test_random_trees_round_trip(signed):
    rng = np.random.default_rng(20240607 + signed)
    for _ in range(300):
        dim = int(rng.integers(1, 4))
        tree = random_tree(rng, 8, dim, signed)
        expr = Expression(tree, dim)
        assert parse_expression(to_source(expr), dim) == expr


def test_random_trees_match_python_evaluation():
    rng = np.random.default_rng(11)
    pairs = 0
    for _ in range(250):
        dim = int(rng.integers(1, 4))
        expr = parse_expression(to_source(Expression(bounded_tree(rng, 8, dim), dim)), dim)
        for point in rng.random((4, dim)):
            expected = python_value(expr.root, point)
            assert abs(evaluate(expr, point) - expected) <= 1e-14 * max(1.0, abs(expected))
            pairs += 1
    assert pairs >= 1000


def test_negative_literals_are_negations():
    with pytest.raises(ValueError):
        Const(-1.5)
    assert constant(-1.5) == Neg(Const(1.5))
    assert constant(-0.0) == Neg(Const(0.0))
    assert to_source(constant(-1.5)) == "(-1.5)"
    with pytest.raises(ExpressionSyntaxError):
        parse_expression("1e999", 1)


def test_evaluate_array_over_grid():
    grid = TorusGrid([16, 8])
    field = sample_scalar(parse_expression("cos(2*pi*y1) + y2", 2), grid)
    y1, y2 = grid.coordinates
    np.testing.assert_allclose(field.values, np.cos(2 * np.pi * y1) + y2, atol=1e-15)


def test_constant_broadcasts():
    grid = TorusGrid([8])
    values = evaluate_array(parse_expression("1", 1), y=grid.coordinates)
    assert values.shape == (8,)
    assert np.all(values == 1.0)


def test_domain_variables_need_permission():
    with pytest.raises(UnknownIdentifierError):
        parse_expression("x1 + 1", 1)
    expr = parse_expression("x1^2", 1, allow_x=True)
    assert evaluate_array(expr, x=np.array([[0.5, 2.0]])).tolist() == [0.25, 4.0]


def test_unknown_identifier_offset():
    with pytest.raises(UnknownIdentifierError) as info:
        parse_expression("1 + foo", 1)
    assert info.value.offset == 4
    assert info.value.name == "foo"


def test_unknown_function():
    with pytest.raises(UnknownIdentifierError):
        parse_expression("cosh(y1)", 1)


def test_variable_out_of_range():
    with pytest.raises(VariableIndexError) as info:
        parse_expression("y1 + y3", 2)
    assert info.value.offset == 5


@pytest.mark.parametrize("source", ["", "   ", "1 +", "(y1", "2 ** 3", "sin y1"])
def test_syntax_errors(source):
    with pytest.raises(ExpressionSyntaxError):
        parse_expression(source, 1)


def test_expression_errors_are_config_errors():
    with pytest.raises(ConfigError):
        parse_expression("z", 1)


@pytest.mark.parametrize("source, point", [
    ("log(y1)", [0.0]),
    ("sqrt(y1 - 1)", [0.5]),
    ("1/y1", [0.0]),
    ("exp(1000*y1)", [1.0]),
])
def test_domain_errors(source, point):
    with pytest.raises(EvaluationDomainError):
        evaluate(parse_expression(source, 1), point)


def test_radians_and_pi():
    assert evaluate(parse_expression("sin(pi/2)", 1), [0.0]) == pytest.approx(1.0)
    assert evaluate(parse_expression("pi", 1), [0.0]) == math.pi
