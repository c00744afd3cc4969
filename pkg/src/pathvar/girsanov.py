"""Change-of-measure weights and checks of the reweighting identity.

For a drift ``u`` realised along the base sample, the weight is
``exp(-sum_k u'_k . dbeta_k - |u|_H^2 / 2)`` and

    E[f(W)] = E[f(W^u) exp(log_weight)].

Weights stay in log space until the final reduction, which factors out the
largest log weight.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .core import CameronMartinDrift, RandomSource, TimeGrid, cm_norm_sq, ito_integral
from .drifts import DriftSpec
from .functionals import Functional
from .measures import MeasureSpec
from .montecarlo import CHUNK, EstimateWithError, EstimationError, run_chunked, z_score

CORRUPTIONS = (None, "drop-quadratic", "flip-sign")


@dataclass(frozen=True)
class WeightedSample:
    value: float
    log_weight: float

    def __post_init__(self):
        if not (np.isfinite(self.value) and np.isfinite(self.log_weight)):
            raise ValueError("weighted sample must be finite")

    @property
    def weight(self) -> float:
        return float(np.exp(self.log_weight))


def log_weight(u, beta, corrupt: str | None = None):
    """``-ito_integral(u, dbeta) - cm_norm_sq(u) / 2``, per sample.

    ``corrupt`` builds deliberately wrong weights for negative controls:
    ``"drop-quadratic"`` omits the ``|u|^2`` term and ``"flip-sign"`` flips the
    sign of the stochastic integral.
    """
    if corrupt not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {corrupt!r}")
    if isinstance(u, CameronMartinDrift):
        density, dt = u.density, u.grid.dt
    else:
        density = np.asarray(u, dtype=float)
        dt = 1.0 / density.shape[-2]
    stoch = ito_integral(density, beta)
    quad = 0.5 * cm_norm_sq(density, dt)
    if corrupt == "drop-quadratic":
        return -stoch
    if corrupt == "flip-sign":
        return stoch - quad
    return -stoch - quad


def _as_list(statistics) -> list[Functional]:
    return list(statistics) if isinstance(statistics, Sequence) else [statistics]


def weighted_values(statistics, spec: MeasureSpec, u: DriftSpec, grid: TimeGrid, samples: int,
                    rng: RandomSource, corrupt: str | None = None, chunk: int = CHUNK,
                    threads: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample statistic values on ``W^u`` (shape ``(M, S)``) and log weights (shape ``(M,)``)."""
    stats = _as_list(statistics)

    def one(r, m):
        base = spec.sample_base(grid, r, m)
        ctrl = spec.perturb(base, u)
        lw = log_weight(ctrl.drift, base.beta, corrupt)
        vals = np.stack([f(ctrl.path) for f in stats], axis=-1)
        return np.concatenate([vals, np.reshape(lw, (-1, 1))], axis=-1)

    out = run_chunked(one, samples, rng, chunk, threads)
    return out[:, :-1], out[:, -1]


def plain_values(statistics, spec: MeasureSpec, grid: TimeGrid, samples: int, rng: RandomSource,
                 chunk: int = CHUNK, threads: int | None = None) -> np.ndarray:
    stats = _as_list(statistics)

    def one(r, m):
        base = spec.sample_base(grid, r, m)
        return np.stack([f(base.W) for f in stats], axis=-1)

    return run_chunked(one, samples, rng, chunk, threads)


def _check_finite(values: np.ndarray) -> None:
    bad = np.flatnonzero(~np.all(np.isfinite(np.reshape(values, (values.shape[0], -1))), axis=-1))
    if bad.size:
        raise EstimationError(bad)


def weighted_estimate(values: np.ndarray, log_weights: np.ndarray) -> EstimateWithError:
    """Mean and SE of ``value * exp(log_weight)`` with the largest log weight factored out."""
    values = np.asarray(values, dtype=float)
    log_weights = np.asarray(log_weights, dtype=float)
    _check_finite(np.stack([values, log_weights], axis=-1))
    shift = float(np.max(log_weights))
    scaled = values * np.exp(log_weights - shift)
    m = scaled.size
    scale = np.exp(shift)
    mean = float(np.mean(scaled) * scale)
    se = float(np.std(scaled, ddof=1) / np.sqrt(m) * scale)
    return EstimateWithError(mean, se, m)


def _plain_estimate(values: np.ndarray) -> EstimateWithError:
    _check_finite(values[:, None])
    m = values.size
    return EstimateWithError(float(np.mean(values)), float(np.std(values, ddof=1) / np.sqrt(m)), m)


def reweighted_expectation(f: Functional, spec: MeasureSpec, u: DriftSpec, grid: TimeGrid, samples: int,
                           rng: RandomSource, corrupt: str | None = None, **kw) -> EstimateWithError:
    """Estimate ``E[f(W^u) exp(log_weight)]`` from ``samples`` base draws."""
    vals, lw = weighted_values([f], spec, u, grid, samples, rng, corrupt, **kw)
    return weighted_estimate(vals[:, 0], lw)


def plain_expectation(f: Functional, spec: MeasureSpec, grid: TimeGrid, samples: int, rng: RandomSource,
                      **kw) -> EstimateWithError:
    return _plain_estimate(plain_values([f], spec, grid, samples, rng, **kw)[:, 0])


@dataclass(frozen=True)
class TransportCheck:
    """Plain and reweighted estimates of one statistic together with their z-score."""

    name: str
    plain: EstimateWithError
    reweighted: EstimateWithError
    z: float


def law_transport_checks(statistics, spec: MeasureSpec, u: DriftSpec, grid: TimeGrid, samples: int,
                         rng: RandomSource, corrupt: str | None = None, **kw) -> list[TransportCheck]:
    """Compare ``E[phi(W)]`` with ``E[phi(W^u) exp(log_weight)]`` for every statistic.

    The plain and reweighted estimates use independent streams so that the
    pooled standard error is honest.
    """
    stats = _as_list(statistics)
    plain = plain_values(stats, spec, grid, samples, rng.child(0), **kw)
    vals, lw = weighted_values(stats, spec, u, grid, samples, rng.child(1), corrupt, **kw)
    out = []
    for i, f in enumerate(stats):
        p = _plain_estimate(plain[:, i])
        r = weighted_estimate(vals[:, i], lw)
        out.append(TransportCheck(f.name, p, r, z_score(p, r)))
    return out


def validate_law_transport(statistics, spec, u, grid, samples, rng, corrupt=None, **kw) -> list[float]:
    return [c.z for c in law_transport_checks(statistics, spec, u, grid, samples, rng, corrupt, **kw)]


def validate_change_of_variable(f, spec, u, grid, samples, rng, corrupt=None, **kw) -> float:
    return validate_law_transport([f], spec, u, grid, samples, rng, corrupt, **kw)[0]


def weight_normalization(spec: MeasureSpec, u: DriftSpec, grid: TimeGrid, samples: int,
                         rng: RandomSource, **kw) -> EstimateWithError:
    """Estimate of ``E[exp(log_weight)]``, which must be 1."""
    from .functionals import constant

    return reweighted_expectation(constant(1.0), spec, u, grid, samples, rng, **kw)
