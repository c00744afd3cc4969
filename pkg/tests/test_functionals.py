import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pathvar.core import DiscretePath, TimeGrid
from pathvar.functionals import REGISTRY, make_functional

paths = arrays(np.float64, (3, 9, 1), elements=st.floats(-10, 10))


def test_registry_names():
    for name in ("linear-endpoint", "quadratic-endpoint", "clamped-midpoint", "running-max-clamp"):
        assert name in REGISTRY


def test_unknown():
    with pytest.raises(KeyError):
        make_functional("nope")


def test_values():
    g = TimeGrid(4)
    p = DiscretePath(g, np.array([[0.0], [1.0], [3.0], [-1.0], [2.0]]))
    assert make_functional("linear-endpoint", c=2.0)(p) == 4.0
    assert make_functional("quadratic-endpoint", lam=0.5)(p) == 2.0
    assert make_functional("clamped-midpoint", bound=2.0)(p) == 2.0
    assert make_functional("running-max-clamp", bound=10.0)(p) == 3.0
    assert make_functional("constant", value=1.5)(p) == 1.5


@given(paths)
def test_bounded_statistics(v):
    for name in ("clamped-midpoint", "running-max-clamp", "endpoint-clamp"):
        out = make_functional(name, bound=2.0)(v)
        assert np.all(out <= 2.0)
    assert np.all(np.abs(make_functional("clamped-midpoint", bound=2.0)(v)) <= 2.0)


@given(paths)
def test_path_gradient_matches_finite_difference(v):
    f = make_functional("quadratic-endpoint", lam=0.7)
    grad = f.path_gradient(v)
    bumped = v.copy()
    bumped[..., -1, 0] += 1e-6
    fd = (f(bumped) - f(v)) / 1e-6
    assert np.allclose(grad[..., -1, 0], fd, atol=1e-4 * (1 + np.abs(v[..., -1, 0])))
