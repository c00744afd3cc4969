"""Drift policies ``u`` and their step-by-step realisation along a path.

A drift is realised cell by cell while a perturbed path is being built.  At
cell ``k`` the stepper sees the controlled node ``W^u(t_k)`` and the base node
``W(t_k)`` and returns the density ``u'_k``.  Closed-loop drifts therefore act
on the controlled state, which keeps them adapted.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .core import CameronMartinDrift, TimeGrid

Stepper = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


def _fit(value: np.ndarray, batch_shape: tuple[int, ...], dim: int) -> np.ndarray:
    value = np.asarray(value, dtype=float)
    if value.ndim and value.shape[-1] > dim:
        # diffusion paths carry (X, beta); feedback acts on the leading coordinates
        value = value[..., :dim]
    return np.broadcast_to(value, batch_shape + (dim,))


class DriftSpec:
    """Base class of drift policies."""

    def stepper(self, grid: TimeGrid, batch_shape: tuple[int, ...], dim: int) -> Stepper:
        raise NotImplementedError

    def deterministic_density(self, grid: TimeGrid, dim: int) -> np.ndarray | None:
        """Density ``(N, dim)`` when the drift does not depend on the path, else None."""
        return None

    def realize(self, grid: TimeGrid, controlled: np.ndarray, base: np.ndarray, dim: int) -> np.ndarray:
        """Densities along an already known controlled path (shape ``(..., N+1, p)``)."""
        batch_shape = controlled.shape[:-2]
        step = self.stepper(grid, batch_shape, dim)
        out = np.empty(batch_shape + (grid.steps, dim))
        for k in range(grid.steps):
            out[..., k, :] = step(k, controlled[..., k, :], base[..., k, :])
        return out


@dataclass(frozen=True)
class OpenLoop(DriftSpec):
    """Drift given by a fixed density; a leading batch axis is allowed."""

    density: np.ndarray

    def __post_init__(self):
        density = self.density
        if isinstance(density, CameronMartinDrift):
            density = density.density
        object.__setattr__(self, "density", np.asarray(density, dtype=float))

    def _check(self, grid: TimeGrid, dim: int) -> None:
        if self.density.shape[-2:] != (grid.steps, dim):
            raise ValueError(
                f"open-loop density of shape {self.density.shape} does not fit "
                f"{grid.steps} cells in dimension {dim}"
            )

    def stepper(self, grid, batch_shape, dim):
        self._check(grid, dim)
        density = self.density

        def step(k, x, w):
            return _fit(density[..., k, :], batch_shape, dim)

        return step

    def deterministic_density(self, grid, dim):
        if self.density.ndim != 2:
            return None
        self._check(grid, dim)
        return self.density


def zero_drift(grid: TimeGrid, dim: int = 1) -> OpenLoop:
    return OpenLoop(np.zeros((grid.steps, dim)))


def constant_drift(grid: TimeGrid, value) -> OpenLoop:
    return OpenLoop(CameronMartinDrift.constant(grid, value).density)


def state(t, x):
    """Basis function returning the controlled state itself."""
    return x


def one(t, x):
    """Constant basis function."""
    return np.ones(np.shape(x))


@dataclass(frozen=True)
class ClosedLoop(DriftSpec):
    """Feedback ``u'(t, x) = sum_i theta_i phi_i(t, x)`` on the controlled state."""

    basis: Sequence[Callable]
    weights: Sequence[float]

    def __post_init__(self):
        object.__setattr__(self, "basis", tuple(self.basis))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.basis) != len(self.weights):
            raise ValueError("basis and weights must have the same length")

    def stepper(self, grid, batch_shape, dim):
        times = grid.left_nodes

        def step(k, x, w):
            total = np.zeros(batch_shape + (dim,))
            for phi, theta in zip(self.basis, self.weights):
                if theta != 0.0:
                    total = total + theta * _fit(phi(times[k], x), batch_shape, dim)
            return total

        return step

    def deterministic_density(self, grid, dim):
        if all(theta == 0.0 for theta in self.weights):
            return np.zeros((grid.steps, dim))
        return None


def affine_feedback(slope: float, intercept: float = 0.0) -> ClosedLoop:
    """``u'(t, x) = slope * x + intercept``."""
    return ClosedLoop((state, one), (slope, intercept))


@dataclass(frozen=True)
class Clipped(DriftSpec):
    """Component-wise clipping of an inner drift to ``[-bound, bound]``."""

    inner: DriftSpec
    bound: float

    def __post_init__(self):
        if not self.bound > 0:
            raise ValueError("clipping bound must be positive")

    def stepper(self, grid, batch_shape, dim):
        inner = self.inner.stepper(grid, batch_shape, dim)
        m = self.bound

        def step(k, x, w):
            return np.clip(inner(k, x, w), -m, m)

        return step

    def deterministic_density(self, grid, dim):
        d = self.inner.deterministic_density(grid, dim)
        return None if d is None else np.clip(d, -self.bound, self.bound)


@dataclass(frozen=True)
class Retarded(DriftSpec):
    """Inner drift delayed by ``lag``: density at ``t`` is the inner one at ``t - lag``, zero before."""

    inner: DriftSpec
    lag: float

    def __post_init__(self):
        if not 0.0 < self.lag <= 1.0:
            raise ValueError("lag must lie in (0, 1]")

    def stepper(self, grid, batch_shape, dim):
        shift = grid.lag_steps(self.lag)
        inner = self.inner.stepper(grid, batch_shape, dim)
        history: list[np.ndarray] = []

        def step(k, x, w):
            # the inner density for cell k is fixed by the state at t_k but only used at t_{k+shift}
            if k + shift < grid.steps:
                history.append(inner(k, x, w))
            if k < shift:
                return np.zeros(batch_shape + (dim,))
            return history[k - shift]

        return step

    def deterministic_density(self, grid, dim):
        d = self.inner.deterministic_density(grid, dim)
        if d is None:
            return None
        shift = grid.lag_steps(self.lag)
        out = np.zeros_like(d)
        out[shift:] = d[: grid.steps - shift]
        return out


@dataclass(frozen=True)
class Adapted(DriftSpec):
    """Path-dependent drift built from a stepper factory.

    ``factory(grid, batch_shape, dim)`` must return a stepper; it may keep
    state between calls, which are made for ``k = 0, 1, ..., N-1`` in order.
    """

    factory: Callable[[TimeGrid, tuple[int, ...], int], Stepper]
    name: str = field(default="adapted")

    def stepper(self, grid, batch_shape, dim):
        return self.factory(grid, batch_shape, dim)


def clip_drift(u: DriftSpec, bound: float) -> Clipped:
    return Clipped(u, bound)


def retard_drift(u: DriftSpec, lag: float) -> Retarded:
    return Retarded(u, lag)
