import numpy as np
import pytest

from pathvar.core import RandomSource, TimeGrid, brownian_increments
from pathvar.drifts import constant_drift
from pathvar.measures import Particles, sample_base
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pathvar.particles import (
    CellIntegrator,
    ParticleIntegrationError,
    _pair,
    implicit_repulsion,
    integrate_particles,
    interaction_rate,
    repulsion,
)


def test_interaction_rate_two_particles():
    z = np.array([[0.0, 2.0]])
    rate = interaction_rate(z, b=0.5, c=1.0, gamma=2.0)
    assert np.allclose(rate, [[1.0 - 1.0, 1.0 + 1.0 + 1.0]])


def test_single_particle_moments():
    # one particle: Euler for dZ = sigma dB + (b Z + c) dt, whose moments follow a linear recursion
    g = TimeGrid(64)
    spec = Particles(sigma=0.8, b=-1.0, c=0.5, gamma=1.0, z0=(0.3,))
    z = sample_base(spec, g, RandomSource(2), 40_000).W.values[:, -1, 0]
    m, v = 0.3, 0.0
    for _ in range(g.steps):
        m = (1 + spec.b * g.dt) * m + spec.c * g.dt
        v = (1 + spec.b * g.dt) ** 2 * v + spec.sigma**2 * g.dt
    se_m = np.sqrt(v / z.size)
    assert abs(z.mean() - m) < 3 * se_m
    se_v = v * np.sqrt(2 / (z.size - 1))
    assert abs(z.var(ddof=1) - v) < 3 * se_v


def test_ordering_three_particles():
    g = TimeGrid(128)
    spec = Particles(sigma=1.0, gamma=0.5, z0=(-0.1, 0.0, 0.1))
    z = sample_base(spec, g, RandomSource(3), 3000).W.values
    assert np.all(np.diff(z, axis=-1) > 0)


def test_gap_second_moment():
    g = TimeGrid(128)
    spec = Particles(sigma=1.0, gamma=1.0, z0=(0.0, 1.0))
    z = sample_base(spec, g, RandomSource(4), 5000).W.values
    d2 = (z[:, -1, 1] - z[:, -1, 0]) ** 2
    assert abs(d2.mean() - 7.0) < 0.05 * 7.0


configs = arrays(np.float64, (5, 3), elements=st.floats(-3, 3))


@given(configs, st.floats(1e-4, 0.1))
def test_implicit_step_solves_and_orders(y, k):
    start = np.tile([-1.0, 0.0, 1.0], (5, 1))
    x, ok = implicit_repulsion(y, k, start)
    assert ok.all()
    assert np.all(np.diff(x, axis=-1) > 0)
    assert np.allclose(x - k * repulsion(x), y, atol=1e-9)


@given(arrays(np.float64, (7, 2), elements=st.floats(-50, 50)), st.floats(1e-6, 1.0))
def test_pair_closed_form(y, k):
    x = _pair(y, k)
    gap, dy = x[:, 1] - x[:, 0], y[:, 1] - y[:, 0]
    assert np.all(gap > 0)
    # gap equation, with the tolerance scaled by the conditioning 1 + 2k / gap^2
    scale = (1 + np.abs(y).max()) * (1 + 2 * k / gap**2)
    assert np.all(np.abs(gap - 2 * k / gap - dy) <= 1e-12 * scale)
    assert np.allclose(x.sum(axis=1), y.sum(axis=1), atol=1e-12 * (1 + np.abs(y).max()))


def test_no_overshoot_near_collision():
    # an explicit step from a gap of 1e-4 would jump by 2 h / gap ~ 80
    g = TimeGrid(256)
    cell = CellIntegrator(1.0, 0.0, 0.0, 1.0, g, RandomSource(1))
    out = cell.step(0, np.array([[0.0, 1e-4]]), np.zeros((1, 2)))
    assert 0 < out[0, 1] - out[0, 0] < 2 * np.sqrt(4 * g.dt)


def test_driver_inverts_step():
    g = TimeGrid(64)
    cell = CellIntegrator(0.7, -0.3, 0.2, 1.0, g, RandomSource(1))
    z = np.array([[-1.0, 0.0, 0.5]])
    incr = np.array([[0.1, -0.2, 0.05]])
    assert np.allclose(cell.driver(z, cell.step(0, z, incr), g.dt), incr, atol=1e-10)


def test_substep_budget_exhausted():
    # without repulsion the crossing proposal can never be made ordered
    g = TimeGrid(4)
    cell = CellIntegrator(1.0, 0.0, 0.0, 0.0, g, RandomSource(1), max_halvings=0)
    with pytest.raises(ParticleIntegrationError) as err:
        cell.step(2, np.array([[0.0, 0.001]]), np.array([[1.0, -1.0]]))
    assert err.value.cell == 2


def test_substepping_needs_key():
    g = TimeGrid(4)
    cell = CellIntegrator(1.0, 0.0, 0.0, 0.0, g, None)
    with pytest.raises(ValueError):
        cell.step(0, np.array([[0.0, 0.001]]), np.array([[1.0, -1.0]]))


def test_refinement_reuses_draws():
    # a vanishing drift must give a path that is continuous in the drift, sub-steps included
    g = TimeGrid(32)
    spec = Particles(sigma=1.0, gamma=0.5, z0=(0.0, 0.05))
    base = sample_base(spec, g, RandomSource(7), 500)
    ctrl = spec.perturb(base, constant_drift(g, [1e-12, -1e-12]))
    assert np.max(np.abs(ctrl.path.values - base.W.values)) < 1e-6


def test_integrate_accepts_single_path():
    g = TimeGrid(8)
    spec = Particles(z0=(0.0, 1.0))
    incr = brownian_increments(g, 2, RandomSource(1))
    out = integrate_particles(spec, g, incr, RandomSource(2))
    assert out.shape == (9, 2)
