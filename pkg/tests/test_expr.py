import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sgspde.expr import ExpressionError, parse_expression


def test_bracket_and_powers():
    ex = parse_expression("br(x)^2 * br(xi)^2", 1)
    x = np.array([[0.0], [1.0], [2.0]])
    xi = np.array([[3.0]])
    assert np.allclose(ex(x=x, xi=xi), (1 + x[:, 0] ** 2) * 10)


def test_components_in_two_dimensions():
    ex = parse_expression("x1 * xi2 + br(x)", 2)
    x = np.array([[1.0, 2.0]])
    xi = np.array([[0.5, 3.0]])
    assert np.allclose(ex(x=x, xi=xi), 1.0 * 3.0 + np.sqrt(6.0))


def test_state_variable_and_time():
    ex = parse_expression("-u^3 + t * exp(-x^2)", 1, ("t", "x", "u"))
    x = np.array([[0.0], [1.0]])
    u = np.array([2.0, -1.0])
    assert np.allclose(ex(t=0.5, x=x, u=u), -(u**3) + 0.5 * np.exp(-x[:, 0] ** 2))
    assert ex.depends_on("u") and ex.depends_on("t") and not ex.depends_on("xi")


def test_imaginary_unit():
    ex = parse_expression("br(xi)^2 + I * x * xi", 1)
    val = ex(x=np.array([[2.0]]), xi=np.array([[3.0]]))
    assert np.allclose(val, 10 + 6j)


@pytest.mark.parametrize(
    "source,column",
    [("x +* 2", 4), ("foo(x)", 1), ("__import__('os')", 1), ("x.real", 1), ("y + 1", 1)],
)
def test_rejects_with_column(source, column):
    with pytest.raises(ExpressionError) as err:
        parse_expression(source, 1)
    assert err.value.column is not None
    assert err.value.column >= 1


def test_disallowed_variable():
    with pytest.raises(ExpressionError, match="u"):
        parse_expression("u * xi", 1, ("t", "x", "xi"))


def test_vector_name_needs_component_in_two_dimensions():
    with pytest.raises(ExpressionError):
        parse_expression("x * xi", 2)


def test_separable_terms():
    ex = parse_expression("br(x)^2 * br(xi)^2 + 3 * x * xi", 1)
    assert ex.terms is not None and len(ex.terms) == 2
    assert parse_expression("exp(x * xi)", 1).terms is None


@given(st.floats(-20, 20), st.floats(-20, 20))
def test_matches_numpy(x, xi):
    ex = parse_expression("sqrt(1 + x^2) * cos(xi) - tanh(x) / br(xi)", 1)
    want = np.sqrt(1 + x**2) * np.cos(xi) - np.tanh(x) / np.sqrt(1 + xi**2)
    got = ex(x=np.array([[x]]), xi=np.array([[xi]]))
    assert np.allclose(got, want, rtol=1e-14, atol=1e-14)
