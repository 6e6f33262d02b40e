import numpy as np
import pytest
from hypothesis import given, strategies as st

from brlab.errors import ParameterError
from brlab.links import (
    LinkFunction, LinkLossFunction, is_monotone_decreasing, link_eval, link_loss_registry,
)

finite = st.floats(-30, 30, allow_nan=False)


def test_sigmoid_values():
    f = LinkFunction()
    assert f(0.0) == 0.5
    assert f(np.log(3.0)) == pytest.approx(0.75)
    assert f.inverse(0.95) == pytest.approx(2.944439, abs=1e-6)


def test_linear_link_clamps_and_flags():
    f = LinkFunction("linear", slope=0.25, offset=0.5)
    assert link_eval(f, 1.0) == (0.75, False)
    assert link_eval(f, 4.0) == (1.0, True)
    assert link_eval(f, -4.0) == (0.0, True)
    with pytest.raises(ParameterError):
        LinkFunction("linear", slope=0.0)
    with pytest.raises(ParameterError):
        LinkFunction("probit")


@given(finite)
def test_inverse_round_trip(x):
    for f in (LinkFunction(), LinkFunction("linear", 1 / 80, 0.5)):
        if f.kind == "sigmoid" and abs(x) > 15:
            continue
        assert f.inverse(f(x)) == pytest.approx(x, abs=1e-6)


@given(finite)
def test_bradley_terry_symmetry(x):
    f = LinkFunction()
    assert f(x) + f(-x) == pytest.approx(1.0)


@pytest.mark.parametrize("name", sorted(link_loss_registry()))
def test_registered_losses_decrease(name):
    F = link_loss_registry()[name]
    assert F.is_decreasing and is_monotone_decreasing(F)
    assert not is_monotone_decreasing(F.negated()) and not F.negated().is_decreasing


@pytest.mark.parametrize("name", sorted(link_loss_registry()))
def test_derivative_matches_finite_difference(name):
    F = link_loss_registry()[name]
    xs = np.linspace(-6, 6, 25)
    h = 1e-6
    fd = (F(xs + h) - F(xs - h)) / (2 * h)
    assert np.allclose(F.derivative(xs), fd, atol=1e-7)


def test_nll_is_stable_for_large_gaps():
    F = LinkLossFunction()
    assert F(0.0) == pytest.approx(np.log(2.0))
    assert np.isfinite(F(-800.0)) and F(-800.0) == pytest.approx(800.0)
    assert F(800.0) == pytest.approx(0.0)


def test_link_json_round_trip():
    for f in (LinkFunction(), LinkFunction("linear", 0.1, 0.4)):
        assert LinkFunction.from_json(f.to_json()) == f
