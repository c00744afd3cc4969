import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from pathvar.core import DiscretePath, RandomSource, TimeGrid
from pathvar.drifts import Clipped, OpenLoop, affine_feedback, constant_drift, zero_drift
from pathvar.measures import (
    BasePair,
    Bridge,
    Diffusion,
    LoopKernelUnderflow,
    Loop,
    MeasureSpecError,
    Particles,
    Wiener,
    beta_functional,
    compose_check,
    condition_iv_residual,
    identifiable_nodes,
    loop_kernel,
    loop_log_kernel,
    perturb,
    sample_base,
)

FAMILIES = [
    Wiener(1),
    Wiener(2),
    Bridge((0.0,)),
    Bridge((0.5, -1.0)),
    Loop(),
    Particles(sigma=1.0, gamma=1.0, z0=(0.0, 1.0)),
    Diffusion(sigma=1.0, b=lambda x: -x, c=0.2),
]


def ids(spec):
    return type(spec).__name__


class TestValidation:
    def test_loop_weights(self):
        with pytest.raises(MeasureSpecError):
            Loop(((1.0,), (-1.0,)), (0.5, 0.4))

    def test_loop_weights_tolerance(self):
        Loop(((1.0,), (-1.0,)), (0.5, 0.5 + 1e-13))

    def test_particles_constraint_message(self):
        with pytest.raises(MeasureSpecError, match="sigma\\^2 <= 2 gamma"):
            Particles(sigma=2.0, gamma=1.0)

    def test_particles_ordering(self):
        with pytest.raises(MeasureSpecError):
            Particles(z0=(1.0, 0.0))

    def test_base_pair_beta_starts_at_zero(self):
        g = TimeGrid(4)
        with pytest.raises(ValueError):
            BasePair(DiscretePath(g, np.zeros((5, 1))), DiscretePath(g, np.ones((5, 1))))


@pytest.mark.parametrize("spec", FAMILIES, ids=ids)
def test_zero_drift_is_identity(spec):
    g = TimeGrid(32)
    base = sample_base(spec, g, RandomSource(1), 20)
    ctrl = perturb(spec, base, zero_drift(g, spec.noise_dim))
    assert np.array_equal(ctrl.path.values, base.W.values)


@pytest.mark.parametrize("spec", FAMILIES, ids=ids)
def test_sampling_reproducible(spec):
    g = TimeGrid(16)
    a = sample_base(spec, g, RandomSource(5), 10)
    b = sample_base(spec, g, RandomSource(5), 10)
    assert np.array_equal(a.W.values, b.W.values)
    assert np.array_equal(a.beta.values, b.beta.values)


@pytest.mark.parametrize("spec", FAMILIES, ids=ids)
def test_beta_recovery(spec):
    g = TimeGrid(64)
    base = sample_base(spec, g, RandomSource(2), 200)
    nodes = identifiable_nodes(spec, g)
    err = np.abs(beta_functional(spec, base.W).values - base.beta.values)[:, nodes]
    # particle steps solve the repulsion by Newton, so recovery is exact up to its tolerance
    assert np.max(err) <= (1e-9 if isinstance(spec, Particles) else 1e-12)


def test_wiener_shift():
    g = TimeGrid(16)
    spec = Wiener(1)
    base = sample_base(spec, g, RandomSource(1), 3)
    ctrl = perturb(spec, base, constant_drift(g, 1.0))
    assert np.allclose(ctrl.path.values - base.W.values, g.nodes[:, None], atol=1e-15)
    assert np.allclose(ctrl.shift.density, 1.0)


@pytest.mark.parametrize("u", ["constant", "feedback"])
def test_bridge_endpoint_pinned(u):
    g = TimeGrid(50)
    spec = Bridge((0.3, -0.7))
    base = sample_base(spec, g, RandomSource(4), 100)
    drift = constant_drift(g, [1.0, -2.0]) if u == "constant" else Clipped(affine_feedback(-3.0, 1.0), 5.0)
    assert np.all(base.W.values[:, -1] == spec.a)
    assert np.all(perturb(spec, base, drift).path.values[:, -1] == spec.a)


def test_bridge_moments():
    g = TimeGrid(20)
    a = 0.5
    spec = Bridge((a,))
    w = sample_base(spec, g, RandomSource(9), 100_000).W.values[:, :, 0]
    t = g.nodes
    for s_idx, t_idx in [(5, 5), (5, 10), (10, 15), (2, 18), (18, 18)]:
        x = (w[:, s_idx] - a * t[s_idx]) * (w[:, t_idx] - a * t[t_idx])
        target = min(t[s_idx], t[t_idx]) - t[s_idx] * t[t_idx]
        assert abs(x.mean() - target) < 3 * x.std(ddof=1) / np.sqrt(x.size)
    mean = w[:, 10]
    assert abs(mean.mean() - a * 0.5) < 3 * mean.std(ddof=1) / np.sqrt(mean.size)


def test_bridge_shift_formula():
    # the shift of a constant drift solves w' = u' - int_0^t u'/(1-r) dr in continuous time
    g = TimeGrid(4000)
    spec = Bridge((0.0,))
    base = sample_base(spec, g, RandomSource(1), 1)
    ctrl = perturb(spec, base, constant_drift(g, 1.0))
    shift_path = ctrl.path.values[0, :, 0] - base.W.values[0, :, 0]
    t = g.nodes
    exact = -(1 - t) * np.log(np.where(t < 1, 1 - t, 1.0))
    assert np.max(np.abs(shift_path - exact)) < 5e-3


@pytest.mark.parametrize("spec", [Wiener(1), Bridge((0.4,)), Loop(), Diffusion(sigma=1.0, b=0.3)], ids=ids)
@pytest.mark.parametrize("kind", ["constant", "feedback"])
def test_condition_iv(spec, kind):
    g = TimeGrid(64)
    base = sample_base(spec, g, RandomSource(8), 100)
    u = constant_drift(g, 0.5) if kind == "constant" else Clipped(affine_feedback(-1.0, 0.5), 2.0)
    assert np.max(condition_iv_residual(spec, base, u)) <= 1e-12


class TestLoopKernel:
    def test_single_atom_drift(self):
        a = np.array([0.7])
        for t in np.linspace(0, 0.95, 7):
            for x in np.linspace(-2, 2, 9):
                h, hg = loop_kernel(t, np.array([x]), [a], [1.0])
                assert hg[0] / h == pytest.approx((a[0] - x) / (1 - t), rel=1e-12, abs=1e-12)

    def test_symmetric_point(self):
        _, grad = loop_log_kernel(0.3, np.array([1.5]), [[1.5]], [1.0])
        assert np.all(grad == 0.0)

    def test_martingale_normalisation(self):
        log_h, _ = loop_log_kernel(0.0, np.zeros(1), [[1.0], [-1.0]], [0.5, 0.5])
        assert log_h == pytest.approx(0.0, abs=1e-14)

    @given(st.floats(0.0, 0.9), st.floats(-2.0, 2.0))
    def test_two_atoms_against_finite_difference(self, t, x):
        atoms, weights = [[1.0], [-1.0]], [0.5, 0.5]
        eps = 1e-6
        up, _ = loop_log_kernel(t, np.array([x + eps]), atoms, weights)
        down, _ = loop_log_kernel(t, np.array([x - eps]), atoms, weights)
        _, grad = loop_log_kernel(t, np.array([x]), atoms, weights)
        assert grad[0] == pytest.approx((up - down) / (2 * eps), abs=1e-6)
        # closed form: (tanh(x / s) - x) / s
        s = 1 - t
        assert grad[0] == pytest.approx((np.tanh(x / s) - x) / s, rel=1e-10, abs=1e-12)

    def test_far_point_uses_log_sum_exp(self):
        log_h, grad = loop_log_kernel(0.999, np.array([0.0]), [[40.0], [-40.0]], [0.5, 0.5])
        assert np.isfinite(log_h) and np.isfinite(grad).all()
        with pytest.raises(LoopKernelUnderflow):
            loop_kernel(0.999, np.array([0.0]), [[40.0], [-40.0]], [0.5, 0.5])

    def test_rejects_t_one(self):
        with pytest.raises(ValueError):
            loop_log_kernel(1.0, np.zeros(1), [[1.0]], [1.0])


def test_loop_atom_frequencies():
    g = TimeGrid(16)
    spec = Loop(((1.0,), (-1.0,)), (0.3, 0.7))
    w = sample_base(spec, g, RandomSource(3), 20_000).W.values
    freq = np.mean(w[:, -1, 0] == 1.0)
    assert abs(freq - 0.3) < 3 * np.sqrt(0.21 / 20_000)


def test_single_atom_loop_matches_bridge():
    g = TimeGrid(64)
    bridge, loop = Bridge((0.8,)), Loop(((0.8,),), (1.0,))
    wb = sample_base(bridge, g, RandomSource(1), 5000).W.values
    wl = sample_base(loop, g, RandomSource(2), 5000).W.values
    for k in (16, 32, 48):
        assert ks_2samp(wb[:, k, 0], wl[:, k, 0]).pvalue > 0.01


class TestCompose:
    def test_wiener_exact(self):
        g = TimeGrid(32)
        spec = Wiener(1)
        base = sample_base(spec, g, RandomSource(1), 10)
        assert compose_check(spec, constant_drift(g, 0.3), OpenLoop(np.sin(np.arange(32.0))[:, None]), base) <= 1e-14

    def test_bridge(self):
        g = TimeGrid(64)
        spec = Bridge((0.2,))
        base = sample_base(spec, g, RandomSource(1), 50)
        assert compose_check(spec, constant_drift(g, 0.3), constant_drift(g, -1.1), base) <= 1e-10

    @pytest.mark.parametrize("spec", [Wiener(1), Bridge((0.0,)), Loop()], ids=ids)
    def test_closed_loop_pair(self, spec):
        g = TimeGrid(64)
        base = sample_base(spec, g, RandomSource(3), 50)
        u = Clipped(affine_feedback(-1.0, 0.2), 3.0)
        v = constant_drift(g, 0.4)
        assert compose_check(spec, u, v, base) <= 1e-10


def test_diffusion_shift_only_for_constant_sigma():
    g = TimeGrid(16)
    const = Diffusion(sigma=0.5, b=0.0)
    varying = Diffusion(sigma=lambda x: 1 + 0.1 * np.tanh(x), b=0.0)
    u = constant_drift(g, 1.0)
    for spec, has in ((const, True), (varying, False)):
        base = sample_base(spec, g, RandomSource(1), 5)
        assert (perturb(spec, base, u).shift is not None) == has


def test_diffusion_constant_sigma_shift_value():
    g = TimeGrid(16)
    spec = Diffusion(sigma=0.5, b=0.0)
    base = sample_base(spec, g, RandomSource(1), 5)
    ctrl = perturb(spec, base, constant_drift(g, 1.0))
    assert np.allclose(ctrl.shift.density[..., 0], 0.5)
    assert np.allclose(ctrl.shift.density[..., 1], 1.0)
