"""Measure families on discretised path space.

Every family exposes the same contract:

* ``sample_base`` draws coupled pairs ``(W, beta)``, ``beta`` being the
  driving Brownian motion of the family;
* ``perturb`` builds ``W^u`` for a drift policy ``u``;
* ``beta_functional`` recovers ``beta`` from a path.

Families: ``Wiener``, ``Bridge`` (pinned at ``endpoint``), ``Loop`` (finite
mixture of bridges), ``Particles`` (repelling diffusions without collision)
and ``Diffusion`` (scalar SDE, the path carrying ``(X, beta)``).
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .core import CameronMartinDrift, DiscretePath, RandomSource, TimeGrid, brownian_increments
from .drifts import DriftSpec, OpenLoop
from .particles import CellIntegrator, integrate_particles


class MeasureSpecError(ValueError):
    """A measure descriptor violates one of its invariants."""


class LoopKernelUnderflow(FloatingPointError):
    """Every mixture component of the loop kernel underflowed."""


@dataclass(frozen=True)
class BasePair:
    """Coupled sample ``(W, beta)`` under the base measure.

    ``refine`` keys the extra randomness some schemes draw inside a cell; it
    must be kept when the pair is re-used so that perturbations see the same
    draws.
    """

    W: DiscretePath
    beta: DiscretePath
    refine: RandomSource | None = None

    def __post_init__(self):
        if self.W.grid != self.beta.grid:
            raise ValueError("W and beta live on different grids")
        if not np.all(self.beta.values[..., 0, :] == 0.0):
            raise ValueError("beta must start at 0")

    @property
    def grid(self) -> TimeGrid:
        return self.W.grid

    @property
    def samples(self) -> int:
        shape = self.W.batch_shape
        return int(np.prod(shape)) if shape else 1

    def select(self, idx) -> "BasePair":
        return BasePair(DiscretePath(self.grid, self.W.values[idx]),
                        DiscretePath(self.grid, self.beta.values[idx]), self.refine)


@dataclass(frozen=True)
class ControlledPath:
    """Realised ``W^u`` with the realised drift density and, when available, the shift ``w^u``."""

    path: DiscretePath
    drift: CameronMartinDrift
    shift: CameronMartinDrift | None = None

    def as_base(self, base: BasePair) -> BasePair:
        """The pair ``(W^u, beta + u)`` seen as a new base, which is what ``beta o W^u`` equals."""
        beta = base.beta.values + self.drift.path().values
        return BasePair(self.path, DiscretePath(base.grid, beta), base.refine)


def _shift_density(grid: TimeGrid, path: np.ndarray, base: np.ndarray) -> CameronMartinDrift:
    return CameronMartinDrift(grid, np.diff(path - base, axis=-2) / grid.dt)


class MeasureSpec:
    """Common driver for the families; subclasses fill in the scheme."""

    path_dim: int
    noise_dim: int

    def validate(self) -> None:
        pass

    def sample_base(self, grid: TimeGrid, rng: RandomSource, samples: int) -> BasePair:
        raise NotImplementedError

    def perturb(self, base: BasePair, u: DriftSpec) -> ControlledPath:
        raise NotImplementedError

    def beta_functional(self, path: DiscretePath) -> DiscretePath:
        raise NotImplementedError

    def has_shift(self) -> bool:
        return True

    def _unperturbed(self, base: BasePair, u: DriftSpec) -> ControlledPath | None:
        """``W^0 = W`` bit-for-bit for schemes that re-integrate from recovered increments."""
        det = u.deterministic_density(base.grid, self.noise_dim)
        if det is None or np.any(det != 0.0):
            return None
        density = np.zeros(base.W.batch_shape + det.shape)
        return self._controlled(base.grid, base.W.values, density, base)

    def _controlled(self, grid, values, density, base) -> ControlledPath:
        path = DiscretePath(grid, values)
        shift = _shift_density(grid, values, base.W.values) if self.has_shift() else None
        return ControlledPath(path, CameronMartinDrift(grid, density), shift)


# -- Wiener -----------------------------------------------------------------


@dataclass(frozen=True)
class Wiener(MeasureSpec):
    dim: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dim < 1:
            raise MeasureSpecError("wiener: dim must be positive")

    @property
    def path_dim(self):
        return self.dim

    @property
    def noise_dim(self):
        return self.dim

    def sample_base(self, grid, rng, samples):
        beta = DiscretePath.from_increments(grid, brownian_increments(grid, self.dim, rng, samples))
        return BasePair(beta, beta)

    def perturb(self, base, u):
        grid = base.grid
        w = base.W.values
        det = u.deterministic_density(grid, self.dim)
        if det is not None:
            density = np.broadcast_to(det, w.shape[:-2] + det.shape)
            values = w + CameronMartinDrift(grid, det).path().values
            return self._controlled(grid, values, density, base)
        step = u.stepper(grid, w.shape[:-2], self.dim)
        values = np.empty_like(w)
        density = np.empty(w.shape[:-2] + (grid.steps, self.dim))
        shift = np.zeros(w.shape[:-2] + (self.dim,))
        values[..., 0, :] = w[..., 0, :]
        for k in range(grid.steps):
            d = step(k, values[..., k, :], w[..., k, :])
            density[..., k, :] = d
            shift = shift + d * grid.dt
            values[..., k + 1, :] = w[..., k + 1, :] + shift
        return self._controlled(grid, values, density, base)

    def beta_functional(self, path):
        return path


# -- pinned families: bridge and loop ----------------------------------------


def _bridge_ratios(grid: TimeGrid) -> np.ndarray:
    """``r_k = (1 - t_{k+1}) / (1 - t_k)`` for the cells, ``r_{N-1} = 0``."""
    t = grid.nodes
    return (1.0 - t[1:]) / (1.0 - t[:-1])


def _bridge_noise_path(grid: TimeGrid, driver: np.ndarray) -> np.ndarray:
    """``Y`` with ``Y_{k+1} = r_k Y_k + sqrt(r_k) xi_k``, ``Y_0 = 0``, in closed form.

    The weights ``1/sqrt((1-t_j)(1-t_{j+1}))`` make ``Y`` an exact bridge at the
    nodes when ``xi`` are Brownian increments; ``Y_N = 0``.
    """
    t = grid.nodes
    n = grid.steps
    weights = 1.0 / np.sqrt((1.0 - t[:-2]) * (1.0 - t[1:-1]))
    lead = driver.shape[:-2]
    y = np.zeros(lead + (n + 1, driver.shape[-1]))
    if n > 1:
        partial = np.cumsum(driver[..., : n - 1, :] * weights[:, None], axis=-2)
        y[..., 1:n, :] = (1.0 - t[1:n])[:, None] * partial
    return y


class _Pinned(MeasureSpec):
    """Families whose paths are pinned at t = 1 through a singular drift ``g(t, x)``."""

    def log_drift(self, t, x: np.ndarray) -> np.ndarray:
        """``g(t, x)``; ``t`` is a scalar or broadcasts against ``x.shape[:-1]``."""
        raise NotImplementedError

    def _beta_increments(self, grid: TimeGrid, w: np.ndarray) -> np.ndarray:
        """Left-endpoint quadrature of ``dW - g dt``, normalised by ``sqrt(r_k)`` where ``r_k > 0``.

        The normalisation makes this the exact inverse of the sampler on the
        nodes ``0..N-1``.  The last increment is not identifiable from a pinned
        path and uses the plain quadrature.
        """
        r = _bridge_ratios(grid)
        g = self.log_drift(grid.left_nodes, w[..., :-1, :])
        out = np.diff(w, axis=-2) - g * grid.dt
        norm = np.where(r > 0, np.sqrt(np.where(r > 0, r, 1.0)), 1.0)
        return out / norm[:, None]

    def beta_functional(self, path):
        incr = self._beta_increments(path.grid, path.values)
        return DiscretePath.from_increments(path.grid, incr)

    def perturb(self, base, u):
        # W^u = W + D, D_{k+1} = D_k + (g(W + D) - g(W)) dt + sqrt(r_k) u'_k dt
        grid = base.grid
        w = base.W.values
        dt = grid.dt
        sr = np.sqrt(_bridge_ratios(grid))
        lead = w.shape[:-2]
        step = u.stepper(grid, lead, self.noise_dim)
        values = np.empty_like(w)
        density = np.empty(lead + (grid.steps, self.noise_dim))
        shift = np.zeros(lead + (self.path_dim,))
        values[..., 0, :] = w[..., 0, :]
        g_base = self.log_drift(grid.left_nodes, w[..., :-1, :])
        for k, t in enumerate(grid.left_nodes):
            d = step(k, values[..., k, :], w[..., k, :])
            density[..., k, :] = d
            if np.any(shift != 0.0):
                shift = shift + (self.log_drift(t, values[..., k, :]) - g_base[..., k, :]) * dt
            shift = shift + sr[k] * d * dt
            values[..., k + 1, :] = w[..., k + 1, :] + shift
        return self._controlled(grid, values, density, base)


@dataclass(frozen=True)
class Bridge(_Pinned):
    """Brownian bridge from 0 to ``endpoint``."""

    endpoint: tuple = (0.0,)

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.endpoint, dtype=float))
        if a.ndim != 1 or not np.all(np.isfinite(a)):
            raise MeasureSpecError("bridge: endpoint must be a finite vector")
        object.__setattr__(self, "endpoint", tuple(a.tolist()))

    @property
    def a(self) -> np.ndarray:
        return np.asarray(self.endpoint)

    @property
    def path_dim(self):
        return self.a.size

    @property
    def noise_dim(self):
        return self.a.size

    def log_drift(self, t, x):
        return (self.a - x) / (1.0 - np.asarray(t, dtype=float))[..., None]

    def sample_base(self, grid, rng, samples):
        incr = brownian_increments(grid, self.path_dim, rng, samples)
        w = grid.nodes[:, None] * self.a + _bridge_noise_path(grid, incr)
        w[..., -1, :] = self.a
        return BasePair(DiscretePath(grid, w), DiscretePath.from_increments(grid, incr))

    def perturb(self, base, u):
        grid = base.grid
        det = u.deterministic_density(grid, self.noise_dim)
        if det is None:
            ctrl = super().perturb(base, u)
            values = ctrl.path.values.copy()
            values[..., -1, :] = self.a
            return self._controlled(grid, values, ctrl.drift.density, base)
        # the bridge map is affine in the driver, so the shift has a closed form
        w = base.W.values
        shift = _bridge_noise_path(grid, det * grid.dt)
        density = np.broadcast_to(det, w.shape[:-2] + det.shape)
        return self._controlled(grid, w + shift, density, base)


@dataclass(frozen=True)
class Loop(_Pinned):
    """Finite mixture of bridges with endpoints ``atoms[i]`` and weights ``weights[i]``."""

    atoms: tuple = ((1.0,), (-1.0,))
    weights: tuple = (0.5, 0.5)

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        weights = np.asarray(self.weights, dtype=float)
        if atoms.ndim != 2 or atoms.shape[0] != weights.size or weights.size == 0:
            raise MeasureSpecError("loop: need one weight per atom")
        if np.any(weights <= 0):
            raise MeasureSpecError("loop: weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise MeasureSpecError(f"loop: weights must sum to 1 (got {weights.sum()!r})")
        object.__setattr__(self, "atoms", tuple(map(tuple, atoms.tolist())))
        object.__setattr__(self, "weights", tuple(weights.tolist()))

    @property
    def atom_array(self) -> np.ndarray:
        return np.asarray(self.atoms)

    @property
    def path_dim(self):
        return self.atom_array.shape[1]

    @property
    def noise_dim(self):
        return self.path_dim

    def log_drift(self, t, x):
        return loop_log_kernel(t, x, self.atom_array, np.asarray(self.weights))[1]

    def sample_base(self, grid, rng, samples):
        gen = rng.child(0).generator()
        choice = gen.choice(len(self.weights), size=samples, p=np.asarray(self.weights))
        ends = self.atom_array[choice]
        incr = brownian_increments(grid, self.path_dim, rng.child(1), samples)
        w = grid.nodes[None, :, None] * ends[:, None, :] + _bridge_noise_path(grid, incr)
        w[:, -1, :] = ends
        beta_incr = self._beta_increments(grid, w)
        # the last increment cannot be read off a pinned path; keep the driver's
        beta_incr[:, -1, :] = incr[:, -1, :]
        return BasePair(DiscretePath(grid, w), DiscretePath.from_increments(grid, beta_incr))


def loop_log_kernel(t, x, atoms, weights):
    """``log h(t, x)`` and ``grad_x log h(t, x)`` for the atomic loop kernel.

    ``h(t, x) = sum_i alpha_i h_{a_i}(t, x)`` with ``h_a`` the density of
    ``N(a; x, 1 - t)`` relative to ``N(a; 0, 1)``, so ``h(0, 0) = 1`` and
    ``h(t, B_t)`` is a Wiener martingale.  Evaluated with log-sum-exp; ``t``
    may be an array broadcasting against ``x.shape[:-1]``.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t >= 1.0):
        raise ValueError("loop kernel needs t in [0, 1)")
    x = np.asarray(x, dtype=float)
    atoms = np.asarray(atoms, dtype=float)
    weights = np.asarray(weights, dtype=float)
    s = (1.0 - t)[..., None]                              # broadcasts over atoms
    n = atoms.shape[-1]
    diff = atoms - x[..., None, :]                       # (..., K, n)
    expo = (
        np.log(weights)
        - 0.5 * n * np.log(s)
        - np.sum(diff * diff, axis=-1) / (2.0 * s)
        + 0.5 * np.sum(atoms * atoms, axis=-1)
    )
    top = np.max(expo, axis=-1, keepdims=True)
    rel = np.exp(expo - top)
    total = np.sum(rel, axis=-1, keepdims=True)
    log_h = (top + np.log(total))[..., 0]
    post = rel / total
    grad = np.sum(post[..., None] * diff, axis=-2) / s
    return log_h, grad


def loop_kernel(t: float, x, atoms, weights):
    """Mixture kernel value ``h`` and its gradient ``hgrad`` (so ``hgrad / h`` is the loop drift)."""
    log_h, grad = loop_log_kernel(t, x, atoms, weights)
    if np.any(log_h < -700.0):
        raise LoopKernelUnderflow(f"loop kernel underflows at t={t}")
    h = np.exp(log_h)
    return h, h[..., None] * grad


# -- particles ----------------------------------------------------------------


@dataclass(frozen=True)
class Particles(MeasureSpec):
    """Repelling particles started at the strictly increasing ``z0``; needs ``sigma^2 <= 2 gamma``."""

    sigma: float = 1.0
    b: float = 0.0
    c: float = 0.0
    gamma: float = 1.0
    z0: tuple = (0.0, 1.0)
    gap_floor: float = 1e-6
    max_halvings: int = 40
    drift_cap: float = 1e6

    def __post_init__(self):
        object.__setattr__(self, "z0", tuple(np.atleast_1d(np.asarray(self.z0, dtype=float)).tolist()))
        self.validate()

    def validate(self):
        if not self.sigma > 0:
            raise MeasureSpecError("particles: sigma must be positive")
        if self.sigma**2 > 2.0 * self.gamma:
            raise MeasureSpecError(
                f"particles: need sigma^2 <= 2 gamma, got sigma^2 = {self.sigma**2} > 2 gamma = {2 * self.gamma}"
            )
        z0 = np.asarray(self.z0)
        if z0.size > 1 and not np.all(np.diff(z0) > 0):
            raise MeasureSpecError("particles: z0 must be strictly increasing")

    @property
    def path_dim(self):
        return len(self.z0)

    @property
    def noise_dim(self):
        return len(self.z0)

    def integrator(self, grid, refine) -> CellIntegrator:
        return CellIntegrator(self.sigma, self.b, self.c, self.gamma, grid, refine,
                              self.gap_floor, self.max_halvings, self.drift_cap)

    def sample_base(self, grid, rng, samples):
        incr = brownian_increments(grid, self.noise_dim, rng.child(0), samples)
        refine = rng.child(1)
        w = integrate_particles(self, grid, incr, refine)
        return BasePair(DiscretePath(grid, w), DiscretePath.from_increments(grid, incr), refine)

    def perturb(self, base, u):
        same = self._unperturbed(base, u)
        if same is not None:
            return same
        grid = base.grid
        lead = base.W.batch_shape
        beta_incr = base.beta.increments()
        cell = self.integrator(grid, base.refine)
        step = u.stepper(grid, lead, self.noise_dim)
        values = np.empty(base.W.values.shape)
        density = np.empty(lead + (grid.steps, self.noise_dim))
        values[..., 0, :] = self.z0
        flat = values.reshape((-1,) + values.shape[-2:])
        for k in range(grid.steps):
            d = step(k, values[..., k, :], base.W.values[..., k, :])
            density[..., k, :] = d
            incr = (beta_incr[..., k, :] + d * grid.dt).reshape(-1, self.noise_dim)
            flat[:, k + 1] = cell.step(k, flat[:, k], incr)
        return self._controlled(grid, values, density, base)

    def beta_functional(self, path):
        grid = path.grid
        w = path.values
        mart = self.integrator(grid, None).driver(w[..., :-1, :], w[..., 1:, :], grid.dt)
        return DiscretePath.from_increments(grid, mart)


# -- scalar diffusion ------------------------------------------------------------


def _as_coefficient(value) -> Callable:
    if callable(value):
        return value
    const = float(value)
    return lambda x: np.full(np.shape(x), const)


@dataclass(frozen=True)
class Diffusion(MeasureSpec):
    """Scalar SDE ``dX = sigma(X) dbeta + b(X) dt``, ``X(0) = c``; paths are ``(X, beta)``.

    ``sigma`` and ``b`` are numbers or callables (bounded and Lipschitz by the
    caller's assertion).  A numeric ``sigma`` marks the constant-volatility
    case, where ``W^u - W`` is a Cameron-Martin shift.
    """

    sigma: float | Callable = 1.0
    b: float | Callable = 0.0
    c: float = 0.0
    names: tuple = field(default=(), compare=False)

    path_dim = 2
    noise_dim = 1

    def has_shift(self):
        return not callable(self.sigma)

    def _euler(self, grid, driver: np.ndarray, lead) -> np.ndarray:
        sig, drift = _as_coefficient(self.sigma), _as_coefficient(self.b)
        x = np.empty(lead + (grid.steps + 1,))
        x[..., 0] = self.c
        for k in range(grid.steps):
            xk = x[..., k]
            x[..., k + 1] = xk + sig(xk) * driver[..., k] + drift(xk) * grid.dt
        return x

    def sample_base(self, grid, rng, samples):
        incr = brownian_increments(grid, 1, rng, samples)
        beta = DiscretePath.from_increments(grid, incr)
        x = self._euler(grid, incr[..., 0], (samples,))
        w = np.stack([x, beta.values[..., 0]], axis=-1)
        return BasePair(DiscretePath(grid, w), beta)

    def perturb(self, base, u):
        same = self._unperturbed(base, u)
        if same is not None:
            return same
        grid = base.grid
        lead = base.W.batch_shape
        beta_incr = base.beta.increments()[..., 0]
        det = u.deterministic_density(grid, 1)
        if det is not None:
            density = np.broadcast_to(det, lead + det.shape)
            x = self._euler(grid, beta_incr + density[..., 0] * grid.dt, lead)
        else:
            sig, drift = _as_coefficient(self.sigma), _as_coefficient(self.b)
            step = u.stepper(grid, lead, 1)
            density = np.empty(lead + (grid.steps, 1))
            x = np.empty(lead + (grid.steps + 1,))
            x[..., 0] = self.c
            u_path = np.zeros(lead)
            for k in range(grid.steps):
                node = np.stack([x[..., k], base.beta.values[..., k, 0] + u_path], axis=-1)
                d = step(k, node, base.W.values[..., k, :])[..., 0]
                density[..., k, 0] = d
                u_path = u_path + d * grid.dt
                xk = x[..., k]
                x[..., k + 1] = xk + sig(xk) * (beta_incr[..., k] + d * grid.dt) + drift(xk) * grid.dt
        beta_u = base.beta.values[..., 0] + CameronMartinDrift(grid, density).path().values[..., 0]
        values = np.stack([x, beta_u], axis=-1)
        return self._controlled(grid, values, density, base)

    def beta_functional(self, path):
        return DiscretePath(path.grid, path.values[..., 1:2])


# -- module-level contract ------------------------------------------------------


def sample_base(spec: MeasureSpec, grid: TimeGrid, rng: RandomSource, samples: int = 1) -> BasePair:
    return spec.sample_base(grid, rng, samples)


def perturb(spec: MeasureSpec, base: BasePair, u: DriftSpec, rng: RandomSource | None = None) -> ControlledPath:
    return spec.perturb(base, u)


def beta_functional(spec: MeasureSpec, path: DiscretePath) -> DiscretePath:
    return spec.beta_functional(path)


def identifiable_nodes(spec: MeasureSpec, grid: TimeGrid) -> slice:
    """Nodes on which ``beta`` is a function of the path (all but t = 1 for pinned families)."""
    return slice(0, grid.steps) if isinstance(spec, _Pinned) else slice(0, grid.steps + 1)


def condition_iv_residual(spec: MeasureSpec, base: BasePair, u: DriftSpec) -> np.ndarray:
    """Per-sample ``sup_k |beta(W^u) - (beta + u)|`` over the identifiable nodes."""
    ctrl = spec.perturb(base, u)
    lhs = spec.beta_functional(ctrl.path).values
    rhs = base.beta.values + ctrl.drift.path().values
    nodes = identifiable_nodes(spec, base.grid)
    return np.max(np.abs(lhs - rhs)[..., nodes, :], axis=(-2, -1))


def compose_check(spec: MeasureSpec, u: DriftSpec, v: DriftSpec, base: BasePair) -> float:
    """Sup-norm gap between ``W^u o W^v`` and ``W^{v + u o W^v}`` on the given base samples."""
    outer = spec.perturb(base, v)
    lhs = spec.perturb(outer.as_base(base), u)
    combined = OpenLoop(outer.drift.density + lhs.drift.density)
    rhs = spec.perturb(base, combined)
    return float(np.max(np.abs(lhs.path.values - rhs.path.values)))
