import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from staclab import _pykernels, kernels

compiled = pytest.mark.skipif("cython" not in kernels.backends(), reason="compiled extension not built")
finite = st.floats(-5, 5, allow_nan=False)


def _loop_recurrence(x, k, reverse):
    y, acc = np.zeros_like(x), np.zeros(x.shape[1:])
    order = range(len(x) - 1, -1, -1) if reverse else range(len(x))
    for t in order:
        acc = x[t] + k[t] * acc
        y[t] = acc
    return y


@pytest.mark.parametrize("reverse", [True, False])
def test_python_recurrence_matches_loop(reverse):
    rng = np.random.default_rng(0)
    x, k = rng.standard_normal((7, 3, 2)), rng.uniform(-1, 1, (7, 3, 2))
    np.testing.assert_array_equal(_pykernels.linear_recurrence(x, k, reverse), _loop_recurrence(x, k, reverse))


def test_recurrence_empty_and_shape_errors():
    assert _pykernels.linear_recurrence(np.zeros((0, 2)), np.zeros((0, 2))).shape == (0, 2)
    with pytest.raises(ValueError):
        _pykernels.linear_recurrence(np.zeros((3, 2)), np.zeros((3, 1)))


def test_sampling_inverts_the_cdf():
    probs = np.array([[0.2, 0.3, 0.5]] * 5)
    u = np.array([0.0, 0.19, 0.21, 0.5, 0.999])
    np.testing.assert_array_equal(_pykernels.categorical_sample(probs, u), [0, 0, 1, 1, 2])


def test_sampling_frequencies():
    rng = np.random.default_rng(1)
    p = np.array([0.1, 0.6, 0.3])
    draws = kernels.categorical_sample(np.tile(p, (200_000, 1)), rng.random(200_000))
    np.testing.assert_allclose(np.bincount(draws, minlength=3) / 200_000, p, atol=5e-3)


@compiled
@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 12), st.integers(1, 5)), elements=finite),
       st.data(), st.booleans())
def test_backends_agree_on_recurrence(x, data, reverse):
    k = data.draw(arrays(np.float64, x.shape, elements=st.floats(-1, 1)))
    c = kernels.backends()["cython"]
    np.testing.assert_array_equal(c.linear_recurrence(x, k, reverse), _pykernels.linear_recurrence(x, k, reverse))


@compiled
@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(0, 40), elements=st.floats(0, 10)), st.floats(0, 1), st.floats(0.1, 2))
def test_backends_agree_on_leaky_weights(r, alpha, clip):
    c = kernels.backends()["cython"]
    np.testing.assert_array_equal(c.leaky_weights(r, alpha, clip), _pykernels.leaky_weights(r, alpha, clip))


@compiled
def test_backends_agree_on_sampling():
    rng = np.random.default_rng(2)
    p = rng.dirichlet(np.ones(6), 5000)
    u = rng.random(5000)
    c = kernels.backends()["cython"]
    np.testing.assert_array_equal(c.categorical_sample(p, u), _pykernels.categorical_sample(p, u))


def test_backend_selection_reported():
    assert kernels.BACKEND in kernels.backends()
