import numpy as np
import pytest

from spem.autograd import Function, Tensor
from spem.gradcheck import (SELECTORS, TOLERANCE, check_gradients, extreme_margin, numerical_grad,
                            relative_error, run_selector)


class WrongSquare(Function):
    """x^2 with a backward that is off by a factor of 1.01."""

    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, g):
        return (g * 2.02 * self.a,)


def test_numerical_grad_of_cube():
    x = Tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True)
    num = numerical_grad(lambda: (x * x * x).sum(), x)
    np.testing.assert_allclose(num, 3 * x.data ** 2, rtol=1e-7)
    np.testing.assert_array_equal(x.data, [0.5, -1.5, 2.0])  # perturbations are undone


def test_relative_error_floor():
    assert relative_error(np.array([1e-9]), np.array([0.0])) == pytest.approx(1e-6)
    assert relative_error(np.array([2.0]), np.array([1.0])) == 0.5
    assert relative_error(np.zeros(0), np.zeros(0)) == 0.0


def test_detects_a_wrong_backward():
    x = Tensor(np.array([1.0, -2.0, 0.7]), requires_grad=True)
    errs = check_gradients(lambda: WrongSquare.apply(x).sum(), {"x": x})
    assert errs["x"] == pytest.approx(0.01 / 1.01, rel=1e-4)
    assert errs["x"] > TOLERANCE


def test_requires_float64():
    x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        check_gradients(lambda: x.sum(), {"x": x})


def test_extreme_margin():
    planes = np.array([[[3.0, 3.0], [1.0, 0.0]], [[5.0, 4.5], [-1.0, -0.25]]])
    # exact ties (3, 3) are ignored; the gap to the next distinct value counts
    assert extreme_margin(planes) == 0.5
    assert extreme_margin(np.full((2, 3, 3), 7.0)) == float("inf")


@pytest.mark.parametrize("selector", SELECTORS)
def test_every_selector_passes(selector):
    report = run_selector(selector, seed=11, trials=2)
    assert report and max(report.values()) < TOLERANCE, report


def test_unknown_selector():
    with pytest.raises(KeyError):
        run_selector("conv")
