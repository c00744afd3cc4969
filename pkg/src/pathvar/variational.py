"""Variational formula ``-log E[e^{-f}] = inf_u E[f(W^u) + |u|_H^2 / 2]``.

Provides the two sides of the identity, parametric drift families with a
stochastic optimizer, the Föllmer drift for endpoint functionals, duality
diagnostics and the density transforms used to build bounded drifts.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .core import RandomSource, TimeGrid, cm_norm_sq
from .drifts import (  # noqa: F401  re-exported drift policies
    Adapted,
    Clipped,
    ClosedLoop,
    DriftSpec,
    OpenLoop,
    Retarded,
    affine_feedback,
    clip_drift,
    constant_drift,
    one,
    retard_drift,
    state,
    zero_drift,
)
from .functionals import Functional
from .measures import BasePair, MeasureSpec, Wiener
from .montecarlo import CHUNK, EstimateWithError, EstimationError, estimate, run_chunked


class OptimizerDiverged(RuntimeError):
    pass


class QuadratureUnderflow(FloatingPointError):
    pass


# -- the two sides -------------------------------------------------------------------


def log_laplace_from_values(values: np.ndarray) -> EstimateWithError:
    """Jackknife-corrected ``-log mean(e^{-f})`` with a delta-method standard error."""
    values = np.asarray(values, dtype=float).ravel()
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise EstimationError(bad)
    m = values.size
    if m < 2:
        raise ValueError("need at least 2 samples")
    shift = float(np.min(values))
    e = np.exp(-(values - shift))
    total = float(np.sum(e))
    if total == 0.0:
        raise FloatingPointError("e^{-f} underflows on every sample")
    full = shift - np.log(total / m)
    leave_one = shift - np.log((total - e) / (m - 1))
    corrected = m * full - (m - 1) * float(np.mean(leave_one))
    se = float(np.std(e, ddof=1) / (np.sqrt(m) * (total / m)))
    return EstimateWithError(float(corrected), se, m)


def direct_log_laplace(f: Functional, spec: MeasureSpec, grid: TimeGrid, samples: int, rng: RandomSource,
                       chunk: int = CHUNK, threads: int | None = None) -> EstimateWithError:
    """Left side of the variational formula from plain samples of the base law."""
    if samples < 100:
        raise ValueError("direct_log_laplace needs at least 100 samples")
    values = run_chunked(lambda r, m: f(spec.sample_base(grid, r, m).W), samples, rng, chunk, threads)
    return log_laplace_from_values(values)


def objective_values(f: Functional, spec: MeasureSpec, u: DriftSpec, base: BasePair) -> np.ndarray:
    """Per-sample ``f(W^u) + |u|_H^2 / 2`` on given base samples."""
    ctrl = spec.perturb(base, u)
    return f(ctrl.path) + 0.5 * np.asarray(cm_norm_sq(ctrl.drift))


def evaluate_J(f: Functional, spec: MeasureSpec, u: DriftSpec, grid: TimeGrid, samples: int, rng: RandomSource,
               chunk: int = CHUNK, threads: int | None = None) -> EstimateWithError:
    values = run_chunked(lambda r, m: objective_values(f, spec, u, spec.sample_base(grid, r, m)),
                         samples, rng, chunk, threads)
    return estimate(values)


@dataclass(frozen=True)
class DualityReport:
    lhs: EstimateWithError
    rhs: EstimateWithError
    gap: float
    optimizer_trace: tuple = ()
    theta: tuple | None = None

    @property
    def pooled_se(self) -> float:
        return float(np.hypot(self.lhs.std_error, self.rhs.std_error))

    def as_dict(self) -> dict:
        return {
            "lhs": self.lhs.as_dict(),
            "rhs": self.rhs.as_dict(),
            "gap": self.gap,
            "pooled_se": self.pooled_se,
            "theta": None if self.theta is None else list(self.theta),
        }


def duality_gap(f: Functional, spec: MeasureSpec, u: DriftSpec, grid: TimeGrid, samples: int,
                rng: RandomSource, **kw) -> DualityReport:
    """``J(u) - (-log E[e^{-f}])`` with both sides on independent streams."""
    lhs = direct_log_laplace(f, spec, grid, samples, rng.child(0), **kw)
    rhs = evaluate_J(f, spec, u, grid, samples, rng.child(1), **kw)
    return DualityReport(lhs, rhs, rhs.mean - lhs.mean)


# -- Föllmer drift ----------------------------------------------------------------


@dataclass(frozen=True)
class FoellmerDrift(DriftSpec):
    """Feedback ``u'(t, x) = d/dx log E[exp(-g(x + sqrt(1 - t) Z))]`` for an endpoint cost ``g``.

    The Gaussian expectation uses Gauss-Hermite quadrature and Gaussian
    integration by parts, so only ``g`` itself is needed.  Acts on the first
    coordinate of a scalar path.
    """

    g: Callable[[np.ndarray], np.ndarray]
    nodes: int = 64
    _rule: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        y, w = np.polynomial.hermite.hermgauss(self.nodes)
        object.__setattr__(self, "_rule", (y, np.log(w)))

    def rate(self, t, x) -> np.ndarray:
        y, logw = self._rule
        x = np.asarray(x, dtype=float)
        s = 1.0 - float(t)
        if s <= 0.0:
            raise ValueError("Föllmer drift is evaluated at left endpoints t < 1")
        pts = x[..., None] + np.sqrt(2.0 * s) * y
        expo = logw - np.asarray(self.g(pts), dtype=float)
        top = np.max(expo, axis=-1, keepdims=True)
        if not np.all(np.isfinite(top)):
            raise QuadratureUnderflow(f"heat-semigroup quadrature underflows at t={t}")
        rel = np.exp(expo - top)
        return np.sum(rel * y, axis=-1) * np.sqrt(2.0) / (np.sqrt(s) * np.sum(rel, axis=-1))

    def stepper(self, grid, batch_shape, dim):
        if dim != 1:
            raise ValueError("Föllmer drift is implemented for scalar paths")
        times = grid.left_nodes

        def step(k, x, w):
            return np.broadcast_to(self.rate(times[k], x[..., 0])[..., None], batch_shape + (1,))

        return step


def foellmer_drift(g, spec: MeasureSpec | None = None, nodes: int = 64) -> FoellmerDrift:
    """Föllmer drift for the endpoint cost ``g`` (a callable or a Functional with ``endpoint``)."""
    if spec is not None and not (isinstance(spec, Wiener) and spec.dim == 1):
        raise ValueError("Föllmer drift is defined here for scalar Wiener space")
    if isinstance(g, Functional):
        if g.endpoint is None:
            raise ValueError(f"functional {g.name!r} is not an endpoint functional")
        g = g.endpoint
    return FoellmerDrift(g, nodes)


# -- density transforms -------------------------------------------------------------


def truncate_density(values, n: float) -> np.ndarray:
    """``min(L, n)`` renormalised to unit empirical mean."""
    values = np.asarray(values, dtype=float)
    if np.any(values <= 0):
        raise ValueError("density values must be positive")
    capped = np.minimum(values, n)
    return capped / np.mean(capped)


def blend_density(values, a: float) -> np.ndarray:
    """``(L + a) / (1 + a)``, bounded below by ``a / (1 + a)``."""
    if not 0.0 <= a <= 1.0:
        raise ValueError("blend weight must lie in [0, 1]")
    return (np.asarray(values, dtype=float) + a) / (1.0 + a)


# -- drift families and optimizer --------------------------------------------------


@dataclass(frozen=True)
class DriftFamily:
    """Parametric drifts ``theta -> u_theta``, clipped at ``bound``.

    ``open_loop_basis(grid)`` returns densities ``(P, N, n)`` when the family is
    open-loop and linear in ``theta``; this enables exact pathwise gradients.
    """

    name: str
    build_fn: Callable[[np.ndarray], DriftSpec]
    initial: tuple
    bound: float = 10.0
    open_loop_basis: Callable[[TimeGrid], np.ndarray] | None = None

    def build(self, theta) -> DriftSpec:
        return Clipped(self.build_fn(np.asarray(theta, dtype=float)), self.bound)


def constant_family(dim: int = 1, bound: float = 10.0) -> DriftFamily:
    """Open-loop constant drifts ``u' = theta``."""

    def basis(grid):
        return np.stack([np.broadcast_to(np.eye(dim)[i], (grid.steps, dim)) for i in range(dim)])

    def build(theta):
        return _ConstantDensity(tuple(theta))

    return DriftFamily("constant", build, (0.0,) * dim, bound, basis)


@dataclass(frozen=True)
class _ConstantDensity(DriftSpec):
    value: tuple

    def deterministic_density(self, grid, dim):
        return np.broadcast_to(np.asarray(self.value, dtype=float), (grid.steps, dim)).copy()

    def stepper(self, grid, batch_shape, dim):
        value = np.asarray(self.value, dtype=float)
        return lambda k, x, w: np.broadcast_to(value, batch_shape + (dim,))


def affine_family(bound: float = 10.0) -> DriftFamily:
    """Closed-loop ``u'(t, x) = theta_1 x + theta_0``; parameters ordered ``(theta_0, theta_1)``."""
    return DriftFamily("affine", lambda th: ClosedLoop((one, state), (th[0], th[1])), (0.0, 0.0), bound)


FAMILIES = {"constant": constant_family, "affine": affine_family}


@dataclass(frozen=True)
class OptimizerConfig:
    epochs: int = 50
    pool: int = 10_000
    batch: int = 1_000
    step: float = 0.1
    fd_step: float = 1e-3
    eval_samples: int = 100_000
    divergence_factor: float = 10.0

    @classmethod
    def from_dict(cls, data: dict | None) -> "OptimizerConfig":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown optimizer fields: {sorted(unknown)}")
        return cls(**data)


def _gradient(f, spec, family, theta, base, grid, fd_step):
    det_ok = family.open_loop_basis is not None and isinstance(spec, Wiener) and f.path_gradient is not None
    if det_ok and np.all(np.abs(theta) < family.bound):
        basis = family.open_loop_basis(grid)                        # (P, N, n)
        density = np.tensordot(theta, basis, axes=1)
        ctrl = spec.perturb(base, OpenLoop(density))
        df = f.path_gradient(ctrl.path.values)                      # (B, N+1, n)
        # d W^u(t_j) / d theta_i = sum_{k<j} basis_i[k] dt
        basis_paths = np.concatenate([np.zeros((basis.shape[0], 1, basis.shape[2])),
                                      np.cumsum(basis * grid.dt, axis=1)], axis=1)
        pathwise = np.einsum("bjn,pjn->p", df, basis_paths) / df.shape[0]
        kinetic = np.einsum("kn,pkn->p", density, basis) * grid.dt
        return pathwise + kinetic
    grad = np.empty_like(theta)
    for i in range(theta.size):
        h = fd_step * max(abs(theta[i]), 1.0)
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        j_up = np.mean(objective_values(f, spec, family.build(up), base))
        j_down = np.mean(objective_values(f, spec, family.build(down), base))
        grad[i] = (j_up - j_down) / (2.0 * h)
    return grad


def optimize_drift(f: Functional, spec: MeasureSpec, family: DriftFamily, grid: TimeGrid,
                   config: OptimizerConfig | None, rng: RandomSource, theta0: Sequence[float] | None = None):
    """Minibatch SGD over ``theta`` on a fixed pool of base samples (common random numbers).

    The pool is reshuffled every epoch; the step size is ``step / sqrt(epoch)``.
    Returns ``(theta*, DualityReport)`` where the report evaluates ``J(theta*)``
    and ``-log E[e^{-f}]`` on fresh independent streams.
    """
    cfg = config or OptimizerConfig()
    theta = np.asarray(family.initial if theta0 is None else theta0, dtype=float).copy()
    pool = spec.sample_base(grid, rng.child(0), cfg.pool)
    shuffle = rng.child(1).generator()
    j0 = float(np.mean(objective_values(f, spec, family.build(theta), pool)))
    limit = j0 + cfg.divergence_factor * max(abs(j0), 1.0)
    trace = [(0, j0)]
    best = (j0, theta.copy())
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(cfg.pool)
        lr = cfg.step / np.sqrt(epoch)
        for start in range(0, cfg.pool, cfg.batch):
            batch = pool.select(order[start:start + cfg.batch])
            theta = theta - lr * _gradient(f, spec, family, theta, batch, grid, cfg.fd_step)
        j = float(np.mean(objective_values(f, spec, family.build(theta), pool)))
        if not np.isfinite(j) or j > limit:
            raise OptimizerDiverged(f"objective {j} exceeded the divergence limit {limit} at epoch {epoch}")
        trace.append((epoch, j))
        if j < best[0]:
            best = (j, theta.copy())
    theta_star = best[1]
    lhs = direct_log_laplace(f, spec, grid, cfg.eval_samples, rng.child(2))
    rhs = evaluate_J(f, spec, family.build(theta_star), grid, cfg.eval_samples, rng.child(3))
    report = DualityReport(lhs, rhs, rhs.mean - lhs.mean, tuple(trace), tuple(theta_star.tolist()))
    return theta_star, report
