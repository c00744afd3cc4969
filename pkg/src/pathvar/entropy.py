"""Kinetic energy, exact relative-entropy oracles and the invertibility report.

A drift ``u`` is invertible exactly when the relative entropy of the law of
``W^u`` with respect to the base law equals the kinetic energy
``E[|u|_H^2] / 2``; otherwise the entropy is strictly smaller.  Entropy is only
reported where an exact oracle exists: deterministic shifts and affine
feedback on Wiener space.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import solve_triangular

from .core import CameronMartinDrift, RandomSource, TimeGrid, cm_norm_sq
from .drifts import Adapted, ClosedLoop, DriftSpec, one, state
from .measures import BasePair, MeasureSpec, Wiener
from .montecarlo import CHUNK, EstimateWithError, estimate, run_chunked


class CovarianceError(np.linalg.LinAlgError):
    """Covariance of the controlled increments is not positive definite."""

    def __init__(self, cell: int):
        super().__init__(f"covariance is not positive definite at cell {cell}")
        self.cell = cell


class Criterion(str, Enum):
    YES = "yes"
    NO = "no"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class EntropyReport:
    kinetic: EstimateWithError
    entropy: float | None
    defect: float | None
    criterion_met: Criterion
    inverse_residual: float | None = None

    def as_dict(self) -> dict:
        return {
            "kinetic": self.kinetic.as_dict(),
            "entropy": self.entropy,
            "defect": self.defect,
            "criterion_met": self.criterion_met.value,
            "inverse_residual": self.inverse_residual,
        }


def kinetic_energy(u: DriftSpec, spec: MeasureSpec, grid: TimeGrid, samples: int, rng: RandomSource,
                   chunk: int = CHUNK, threads: int | None = None) -> EstimateWithError:
    """``E[|u|_H^2] / 2`` with its standard error; exact for path-independent drifts."""
    det = u.deterministic_density(grid, spec.noise_dim)
    if det is not None:
        return EstimateWithError(0.5 * cm_norm_sq(det, grid.dt), 0.0, max(samples, 2))

    def one_chunk(r, m):
        base = spec.sample_base(grid, r, m)
        return 0.5 * np.atleast_1d(cm_norm_sq(spec.perturb(base, u).drift))

    return estimate(run_chunked(one_chunk, samples, rng, chunk, threads))


def entropy_deterministic_shift(h) -> float:
    """Relative entropy of an H-shift of the base law, ``|h|_H^2 / 2``."""
    if isinstance(h, CameronMartinDrift):
        return 0.5 * float(cm_norm_sq(h))
    density = np.asarray(h, dtype=float)
    return 0.5 * float(cm_norm_sq(density, 1.0 / density.shape[-2]))


def _per_cell(value, grid: TimeGrid) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), (grid.steps,)).copy()


def gaussian_linear_moments(a, b, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the increments of ``dX = dW + (a X + b) dt`` on the grid.

    With ``T`` the strictly lower triangular matrix of ones, the increments
    solve ``(I - diag(a dt) T) dX = dW + b dt``.
    """
    a, b = _per_cell(a, grid), _per_cell(b, grid)
    n, dt = grid.steps, grid.dt
    lower = np.tril(np.ones((n, n)), -1)
    system = np.eye(n) - (a * dt)[:, None] * lower
    k = solve_triangular(system, np.eye(n), lower=True)
    return k @ (b * dt), dt * (k @ k.T)


def entropy_gaussian_linear(a, b, grid: TimeGrid) -> float:
    """Exact relative entropy of the Euler path of ``dX = dW + (a X + b) dt`` against Wiener measure.

    ``a`` and ``b`` are scalars or per-cell arrays.  Both laws are Gaussian on
    the ``N`` increments, the reference one being ``N(0, dt I)``.
    """
    mean, cov = gaussian_linear_moments(a, b, grid)
    n, dt = grid.steps, grid.dt
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        diag = np.diag(cov)
        cell = int(np.argmin(diag)) if np.any(diag <= 0) else _first_bad_minor(cov)
        raise CovarianceError(cell) from None
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return 0.5 * (np.trace(cov) / dt - n + mean @ mean / dt + n * np.log(dt) - logdet)


def _first_bad_minor(cov: np.ndarray) -> int:
    for k in range(1, cov.shape[0] + 1):
        try:
            np.linalg.cholesky(cov[:k, :k])
        except np.linalg.LinAlgError:
            return k - 1
    return cov.shape[0] - 1


def affine_inverse(slope, intercept, grid: TimeGrid) -> Adapted:
    """Drift ``v`` with ``u + v o W^u = 0`` for ``u'(t, x) = a x + b`` on Wiener space.

    Along the path ``x`` that ``v`` controls, ``Y`` solves ``dY = dx + (a Y + b) dt``
    (integrated exactly over each cell) and ``v' = -(a Y + b)``.  Then ``W^v o W^u``
    returns the base path up to ``O(dt)``.
    """
    a, b = _per_cell(slope, grid), _per_cell(intercept, grid)
    growth = np.exp(a * grid.dt)

    def factory(g, batch_shape, dim):
        if g != grid:
            raise ValueError("affine inverse built for a different grid")
        y = np.zeros(batch_shape + (dim,))
        prev = [None]

        def step(k, x, w):
            nonlocal y
            x = x[..., :dim]
            if k > 0:
                y = growth[k - 1] * (y + (x - prev[0]) + b[k - 1] * g.dt)
            prev[0] = np.array(x, copy=True)
            return -(a[k] * y + b[k])

        return step

    return Adapted(factory, "affine-inverse")


def invert_check(spec: MeasureSpec, u: DriftSpec, v: DriftSpec, base: BasePair, reduce: str = "max") -> float:
    """Sup-norm distance between ``W^v o W^u`` and ``W`` over the base samples.

    ``reduce="max"`` takes the worst sample; ``"mean"`` averages the per-sample sup.
    """
    outer = spec.perturb(base, u)
    back = spec.perturb(outer.as_base(base), v)
    per_sample = np.max(np.abs(back.path.values - base.W.values), axis=(-2, -1))
    if reduce == "max":
        return float(np.max(per_sample))
    if reduce == "mean":
        return float(np.mean(per_sample))
    raise ValueError(f"unknown reduction {reduce!r}")


def affine_parameters(u: DriftSpec) -> tuple[float, float] | None:
    """``(a, b)`` when ``u`` is affine feedback on the state, else None."""
    if isinstance(u, ClosedLoop) and set(u.basis) <= {state, one}:
        a = sum(w for phi, w in zip(u.basis, u.weights) if phi is state)
        b = sum(w for phi, w in zip(u.basis, u.weights) if phi is one)
        return a, b
    return None


def criterion_report(spec: MeasureSpec, u: DriftSpec, grid: TimeGrid, samples: int, rng: RandomSource,
                     oracle: str = "auto", tolerance: float = 0.01, inverse: DriftSpec | None = None,
                     inverse_samples: int = 200, inverse_tolerance: float | None = None) -> EntropyReport:
    """Compare kinetic energy and relative entropy where an exact oracle applies.

    ``oracle`` is ``"shift"``, ``"gaussian-linear"``, ``"none"`` or ``"auto"``.
    ``criterion_met`` is yes when the relative defect is within ``tolerance``
    (in standard errors when larger) and the inverse residual, if computed, is
    below ``inverse_tolerance`` (default ``10 dt``).
    """
    kinetic = kinetic_energy(u, spec, grid, samples, rng.child(0))
    det = u.deterministic_density(grid, spec.noise_dim)
    affine = affine_parameters(u) if isinstance(spec, Wiener) and spec.dim == 1 else None
    if oracle == "auto":
        oracle = "shift" if det is not None else ("gaussian-linear" if affine else "none")
    if oracle == "shift":
        if det is None:
            raise ValueError("shift oracle needs a path-independent drift")
        entropy = entropy_deterministic_shift(CameronMartinDrift(grid, det))
    elif oracle == "gaussian-linear":
        if affine is None:
            raise ValueError("gaussian-linear oracle needs affine feedback on scalar Wiener space")
        entropy = entropy_gaussian_linear(affine[0], affine[1], grid)
    elif oracle == "none":
        return EntropyReport(kinetic, None, None, Criterion.UNKNOWN)
    else:
        raise ValueError(f"unknown oracle {oracle!r}")
    if inverse is None and affine is not None and oracle == "gaussian-linear":
        inverse = affine_inverse(affine[0], affine[1], grid)
    if inverse is None and det is not None:
        from .drifts import OpenLoop

        inverse = OpenLoop(-det)
    residual = None
    if inverse is not None:
        base = spec.sample_base(grid, rng.child(1), inverse_samples)
        residual = invert_check(spec, u, inverse, base, reduce="mean")
    defect = kinetic.mean - entropy
    allowed = max(tolerance * max(abs(entropy), abs(kinetic.mean)), 3.0 * kinetic.std_error)
    limit = 10.0 * grid.dt if inverse_tolerance is None else inverse_tolerance
    ok = abs(defect) <= allowed and (residual is None or residual <= limit)
    return EntropyReport(kinetic, float(entropy), float(defect), Criterion.YES if ok else Criterion.NO, residual)
