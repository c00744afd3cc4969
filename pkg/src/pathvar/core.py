"""Time grids, path containers, Cameron-Martin arithmetic and stochastic integrals.

Paths and drift densities are stored as numpy arrays whose last two axes are
``(time, dim)``.  Any leading axes are sample (batch) axes, so a single
``DiscretePath`` can hold one path or a whole Monte Carlo batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GridMismatchError(ValueError):
    """Raised when two objects defined on different grids are combined."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition ``t_k = k / N`` of ``[0, 1]``."""

    steps: int

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"grid needs a positive integer number of steps, got {self.steps!r}")
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.steps + 1) / self.steps

    @property
    def left_nodes(self) -> np.ndarray:
        """Left endpoints ``t_0 .. t_{N-1}`` of the cells."""
        return np.arange(self.steps) / self.steps

    def index_of(self, t: float) -> int:
        """Nearest node index to time ``t``."""
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"time {t} outside [0, 1]")
        return int(round(t * self.steps))

    def lag_steps(self, eta: float, tol: float = 1e-9) -> int:
        """Number of cells spanned by ``eta``; ``eta`` must sit on the grid."""
        k = eta * self.steps
        if abs(k - round(k)) > tol * max(1.0, abs(k)):
            raise ValueError(f"lag {eta} is not a multiple of dt = 1/{self.steps}")
        return int(round(k))

    def refine(self) -> "TimeGrid":
        return TimeGrid(2 * self.steps)


@dataclass(frozen=True)
class DiscretePath:
    """Node samples of one path or a batch of paths, shape ``(..., N+1, n)``."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim < 2 or values.shape[-2] != self.grid.steps + 1:
            raise GridMismatchError(
                f"path values of shape {values.shape} do not fit a grid with {self.grid.steps} steps"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("path contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.values.shape[:-2]

    def at(self, t: float) -> np.ndarray:
        return self.values[..., self.grid.index_of(t), :]

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=-2)

    @classmethod
    def from_increments(cls, grid: TimeGrid, increments: np.ndarray, start=0.0) -> "DiscretePath":
        increments = np.asarray(increments, dtype=float)
        lead = increments.shape[:-2] + (1, increments.shape[-1])
        values = np.concatenate([np.zeros(lead), np.cumsum(increments, axis=-2)], axis=-2)
        return cls(grid, values + np.asarray(start, dtype=float))


@dataclass(frozen=True)
class CameronMartinDrift:
    """Piecewise-constant density ``u'`` on the cells, shape ``(..., N, n)``.

    The induced path is ``u(t_k) = sum_{j<k} u'_j dt``.
    """

    grid: TimeGrid
    density: np.ndarray

    def __post_init__(self):
        density = np.asarray(self.density, dtype=float)
        if density.ndim < 2 or density.shape[-2] != self.grid.steps:
            raise GridMismatchError(
                f"density of shape {density.shape} does not fit a grid with {self.grid.steps} cells"
            )
        if not np.all(np.isfinite(density)):
            raise ValueError("drift density contains non-finite values")
        object.__setattr__(self, "density", density)

    @property
    def dim(self) -> int:
        return self.density.shape[-1]

    @classmethod
    def zero(cls, grid: TimeGrid, dim: int = 1) -> "CameronMartinDrift":
        return cls(grid, np.zeros((grid.steps, dim)))

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "CameronMartinDrift":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.broadcast_to(value, (grid.steps, value.size)).copy())

    @classmethod
    def from_function(cls, grid: TimeGrid, fn, dim: int = 1) -> "CameronMartinDrift":
        """Density ``fn(t_k)`` sampled at left endpoints."""
        vals = np.array([np.broadcast_to(fn(t), (dim,)) for t in grid.left_nodes], dtype=float)
        return cls(grid, vals)

    def path(self) -> DiscretePath:
        return DiscretePath.from_increments(self.grid, self.density * self.grid.dt)

    def __neg__(self) -> "CameronMartinDrift":
        return CameronMartinDrift(self.grid, -self.density)

    def __add__(self, other: "CameronMartinDrift") -> "CameronMartinDrift":
        _check_grid(self.grid, other.grid)
        return CameronMartinDrift(self.grid, self.density + other.density)

    def __sub__(self, other: "CameronMartinDrift") -> "CameronMartinDrift":
        return self + (-other)

    def scale(self, c: float) -> "CameronMartinDrift":
        return CameronMartinDrift(self.grid, c * self.density)


@dataclass(frozen=True)
class RandomSource:
    """Seeded, splittable source of randomness.

    ``(seed, stream)`` fully determines the draws.  ``child(i)`` derives an
    independent stream, which is how per-chunk and per-sample randomness is
    handed out.
    """

    seed: int
    stream: tuple[int, ...] = field(default=())

    def __post_init__(self):
        stream = self.stream
        if isinstance(stream, (int, np.integer)):
            stream = (int(stream),)
        stream = tuple(int(s) for s in stream)
        if any(s < 0 for s in stream):
            raise ValueError("stream indices must be non-negative")
        object.__setattr__(self, "stream", stream)
        object.__setattr__(self, "seed", int(self.seed) % 2**64)

    def child(self, index: int) -> "RandomSource":
        return RandomSource(self.seed, self.stream + (int(index),))

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=self.stream)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed_sequence()))


def _check_grid(a: TimeGrid, b: TimeGrid) -> None:
    if a != b:
        raise GridMismatchError(f"grid mismatch: {a.steps} vs {b.steps} steps")


def brownian_increments(grid: TimeGrid, dim: int, rng: RandomSource, samples: int | None = None) -> np.ndarray:
    """I.i.d. ``N(0, dt I_n)`` increments, shape ``(N, n)`` or ``(samples, N, n)``."""
    if dim < 1:
        raise ValueError("dimension must be positive")
    shape = (grid.steps, dim) if samples is None else (samples, grid.steps, dim)
    return np.sqrt(grid.dt) * rng.generator().standard_normal(shape)


def _as_density(v) -> tuple[TimeGrid | None, np.ndarray]:
    if isinstance(v, CameronMartinDrift):
        return v.grid, v.density
    return None, np.asarray(v, dtype=float)


def cm_norm_sq(u: CameronMartinDrift | np.ndarray, dt: float | None = None) -> np.ndarray | float:
    """Squared Cameron-Martin norm ``sum_k |u'_k|^2 dt`` (one value per sample)."""
    grid, density = _as_density(u)
    if grid is not None:
        dt = grid.dt
    elif dt is None:
        dt = 1.0 / density.shape[-2]
    out = np.sum(density * density, axis=(-2, -1)) * dt
    return float(out) if np.ndim(out) == 0 else out


def ito_integral(v: CameronMartinDrift | np.ndarray, increments) -> np.ndarray | float:
    """Left-endpoint sum ``sum_k v'_k . dm_k``."""
    grid, density = _as_density(v)
    if isinstance(increments, DiscretePath):
        if grid is not None:
            _check_grid(grid, increments.grid)
        increments = increments.increments()
    increments = np.asarray(increments, dtype=float)
    if density.shape[-2:] != increments.shape[-2:]:
        raise GridMismatchError(
            f"drift cells/dim {density.shape[-2:]} do not match increments {increments.shape[-2:]}"
        )
    out = np.sum(density * increments, axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out


def log_wick(v: CameronMartinDrift | np.ndarray, increments) -> np.ndarray | float:
    """Log of the Wick exponential: ``ito_integral(v, dm) - |v|_H^2 / 2``."""
    grid, density = _as_density(v)
    dt = grid.dt if grid is not None else 1.0 / density.shape[-2]
    return ito_integral(v, increments) - 0.5 * cm_norm_sq(density, dt)
