"""Collision-free scheme for repelling diffusing particles.

Each particle follows

    dZ_i = sigma dB_i + (b Z_i + c) dt + gamma sum_{j != i} dt / (Z_i - Z_j)

The linear drift is explicit and the repulsion implicit: a step solves

    x - h gamma R(x) = z + sigma dB + (b z + c) h,   R_i(x) = sum_{j != i} 1 / (x_i - x_j)

which is the minimiser of a strictly convex function on the ordered cone, so
it exists, is unique and keeps ``Z_1 < ... < Z_n``.  An explicit repulsion
step overshoots badly near collisions.  The driving increment of a cell is
recovered exactly from consecutive nodes.

When the solve fails to converge or leaves a gap below ``gap_floor`` the cell
is split in halves, the driving increment being refined by a Brownian bridge.
Refinement noise is keyed on ``(sample, cell, level, position)`` so that
re-integrating with a shifted driver reuses the same bridge draws.
"""

from __future__ import annotations

import numpy as np

from .core import RandomSource, TimeGrid

_REFINE_TAG = 7_000_003


class ParticleIntegrationError(RuntimeError):
    """Sub-step budget exhausted without restoring the particle ordering."""

    def __init__(self, cell: int, sample: int):
        super().__init__(f"particle ordering could not be kept in cell {cell} (sample {sample})")
        self.cell = cell
        self.sample = sample


def _inverse_gaps(z: np.ndarray) -> np.ndarray:
    diff = z[..., :, None] - z[..., None, :]
    idx = np.arange(z.shape[-1])
    diff[..., idx, idx] = np.inf
    return 1.0 / diff


def repulsion(z: np.ndarray) -> np.ndarray:
    """``R_i(z) = sum_{j != i} 1/(z_i - z_j)`` for arrays ``(..., n)``."""
    if z.shape[-1] < 2:
        return np.zeros_like(z)
    return np.sum(_inverse_gaps(z), axis=-1)


def interaction_rate(z: np.ndarray, b: float, c: float, gamma: float) -> np.ndarray:
    """Drift ``b z_i + c + gamma sum_{j != i} 1/(z_i - z_j)`` for arrays ``(..., n)``."""
    rate = b * z + c
    if z.shape[-1] > 1 and gamma != 0.0:
        rate = rate + gamma * repulsion(z)
    return rate


def _ordered(z: np.ndarray, gap_floor: float) -> np.ndarray:
    if z.shape[-1] < 2:
        return np.ones(z.shape[:-1], dtype=bool)
    return np.all(np.diff(z, axis=-1) >= gap_floor, axis=-1)


def _residual(x, y, k):
    grad = x - y - k * repulsion(x)
    return grad, np.max(np.abs(grad), axis=-1)


def _pair(y, k):
    """Closed form for two particles: the gap solves ``D^2 - D_y D - 2k = 0`` and the centre is kept."""
    dy = y[..., 1] - y[..., 0]
    root = np.sqrt(dy * dy + 8.0 * k)
    # both branches are the positive root, written without cancellation
    gap = np.where(dy >= 0, 0.5 * (dy + root), 4.0 * k / np.maximum(root - dy, np.finfo(float).tiny))
    centre = 0.5 * (y[..., 0] + y[..., 1])
    return np.stack([centre - 0.5 * gap, centre + 0.5 * gap], axis=-1)


def implicit_repulsion(y: np.ndarray, k: float, start: np.ndarray, tol: float = 1e-12,
                       max_iter: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``x - k R(x) = y`` on the ordered cone, starting from the ordered ``start``.

    Two particles use the closed form; more use damped Newton with a line
    search on the residual that never leaves the cone.  Returns
    ``(x, converged)``; rows that did not converge keep their last iterate.
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[-1]
    if n < 2 or k == 0.0:
        return y.copy(), np.ones(y.shape[:-1], dtype=bool)
    if n == 2:
        x = _pair(y, k)
        return x, np.all(np.isfinite(x), axis=-1) & (x[..., 1] > x[..., 0])
    x = np.array(start, dtype=float, copy=True)
    eye = np.eye(n)
    done = np.zeros(y.shape[0], dtype=bool)
    active = np.arange(y.shape[0])
    for _ in range(max_iter):
        xa, ya = x[active], y[active]
        grad, size = _residual(xa, ya, k)
        conv = size <= tol * (1.0 + np.max(np.abs(xa), axis=-1))
        done[active[conv]] = True
        keep = ~conv
        active, xa, ya, grad, size = active[keep], xa[keep], ya[keep], grad[keep], size[keep]
        if active.size == 0:
            break
        inv = _inverse_gaps(xa)
        w = inv * inv
        hess = eye + k * (eye * np.sum(w, axis=-1)[..., None] - w)
        delta = -np.linalg.solve(hess, grad[..., None])[..., 0]
        alpha = np.ones(active.size)
        pending = np.ones(active.size, dtype=bool)
        for _ in range(50):
            rows = np.flatnonzero(pending)
            trial = xa[rows] + alpha[rows, None] * delta[rows]
            ok = np.all(np.diff(trial, axis=-1) > 0, axis=-1)
            _, tsize = _residual(np.where(ok[:, None], trial, xa[rows]), ya[rows], k)
            ok &= tsize <= (1.0 - 1e-4 * alpha[rows]) * size[rows]
            x[active[rows[ok]]] = trial[ok]
            pending[rows[ok]] = False
            if not np.any(pending):
                break
            alpha[pending] *= 0.5
        # rows without any descent are stuck at rounding level; the final check decides
        active = active[~pending]
    rest = np.flatnonzero(~done)
    if rest.size:
        _, size = _residual(x[rest], y[rest], k)
        done[rest] = size <= 1e3 * tol * (1.0 + np.max(np.abs(x[rest]), axis=-1))
    return x, done


class CellIntegrator:
    """Advances a batch of particle configurations across one grid cell."""

    def __init__(self, sigma, b, c, gamma, grid: TimeGrid, refine: RandomSource | None,
                 gap_floor=1e-6, max_halvings=40, drift_cap=1e6):
        self.sigma, self.b, self.c, self.gamma = float(sigma), float(b), float(c), float(gamma)
        self.grid = grid
        self.refine = refine
        self.gap_floor = gap_floor
        self.max_halvings = max_halvings
        self.drift_cap = drift_cap
        self.substeps = 0

    def _linear(self, z):
        return np.clip(self.b * z + self.c, -self.drift_cap, self.drift_cap)

    def _solve(self, z, incr, h):
        y = z + self.sigma * incr + self._linear(z) * h
        start = np.where(_ordered(y, self.gap_floor)[..., None], y, z)
        x, conv = implicit_repulsion(y, h * self.gamma, start)
        return x, conv & _ordered(x, self.gap_floor)

    def driver(self, z0: np.ndarray, z1: np.ndarray, h: float) -> np.ndarray:
        """Driving increment of one un-refined step from ``z0`` to ``z1``."""
        return (z1 - z0 - self._linear(z0) * h - self.gamma * h * repulsion(z1)) / self.sigma

    def _bridge_noise(self, sample, cell, level, position, n):
        if self.refine is None:
            raise ValueError("sub-stepping needs a refinement key on the base pair")
        key = self.refine.child(_REFINE_TAG).child(sample).child(cell).child(level).child(position)
        return key.generator().standard_normal(n)

    def step(self, k: int, z: np.ndarray, incr: np.ndarray) -> np.ndarray:
        """``z`` has shape ``(M, n)``; ``incr`` is the driver increment (before ``sigma``)."""
        h = self.grid.dt
        proposal, ok = self._solve(z, incr, h)
        if not np.all(ok):
            for j in np.flatnonzero(~ok):
                proposal[j] = self._refined(k, j, z[j], incr[j], h, 1, 0)
        return proposal

    def _refined(self, k, j, z, incr, h, level, position):
        if level > self.max_halvings:
            raise ParticleIntegrationError(k, int(j))
        self.substeps += 1
        half = 0.5 * h
        xi = self._bridge_noise(int(j), k, level, position, z.shape[-1])
        first = 0.5 * incr + 0.5 * np.sqrt(h) * xi
        second = incr - first
        z = self._sub(k, j, z, first, half, level, 2 * position)
        return self._sub(k, j, z, second, half, level, 2 * position + 1)

    def _sub(self, k, j, z, incr, h, level, position):
        proposal, ok = self._solve(z[None], incr[None], h)
        if ok[0]:
            return proposal[0]
        return self._refined(k, j, z, incr, h, level + 1, position)


def integrate_particles(spec, grid: TimeGrid, increments: np.ndarray, refine: RandomSource | None = None,
                        z0=None) -> np.ndarray:
    """Node values ``(M, N+1, n)`` of the particle system driven by ``increments`` ``(M, N, n)``."""
    z0 = np.asarray(spec.z0 if z0 is None else z0, dtype=float)
    increments = np.asarray(increments, dtype=float)
    if increments.ndim == 2:
        return integrate_particles(spec, grid, increments[None], refine, z0)[0]
    cell = spec.integrator(grid, refine)
    m = increments.shape[0]
    out = np.empty((m, grid.steps + 1, z0.size))
    out[:, 0] = z0
    for k in range(grid.steps):
        out[:, k + 1] = cell.step(k, out[:, k], increments[:, k])
    return out
