import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pathvar.core import RandomSource
from pathvar.montecarlo import EstimateWithError, EstimationError, chunk_sizes, estimate, run_chunked, z_score


def draw(r, m):
    return r.generator().standard_normal(m)


def test_estimate_basic():
    est = estimate([1.0, 2.0, 3.0])
    assert est.mean == 2.0
    assert est.std_error == pytest.approx(1 / np.sqrt(3))


def test_estimate_reports_bad_indices():
    with pytest.raises(EstimationError) as err:
        estimate([1.0, np.nan, 2.0, np.inf])
    assert err.value.indices == [1, 3]


def test_estimate_invariants():
    with pytest.raises(ValueError):
        EstimateWithError(0.0, -1.0, 10)
    with pytest.raises(ValueError):
        EstimateWithError(0.0, 1.0, 1)


@given(st.integers(1, 50_000), st.integers(1, 20_000))
def test_chunk_sizes_cover(samples, chunk):
    sizes = chunk_sizes(samples, chunk)
    assert sum(sizes) == samples
    assert all(0 < s <= chunk for s in sizes)


def test_threads_do_not_change_result():
    a = run_chunked(draw, 25_000, RandomSource(3), chunk=4000, threads=1)
    b = run_chunked(draw, 25_000, RandomSource(3), chunk=4000, threads=4)
    assert np.array_equal(a, b)


def test_env_threads(monkeypatch):
    monkeypatch.setenv("PATHVAR_THREADS", "3")
    a = run_chunked(draw, 9000, RandomSource(3), chunk=2000)
    assert np.array_equal(a, run_chunked(draw, 9000, RandomSource(3), chunk=2000, threads=1))


def test_z_score_zero_difference():
    e = EstimateWithError(1.0, 0.0, 5)
    assert z_score(e, e) == 0.0
