"""Numerical checks of the Prékopa-Leindler inequality on path space.

Hypothesis, for deterministic shifts ``h, k`` and ``t`` in ``[0, 1]``:

    a(W^{th+(1-t)k}) e^{-|th+(1-t)k|^2/2} >= (b(W^h) e^{-|h|^2/2})^t (c(W^k) e^{-|k|^2/2})^{1-t}

Conclusion: ``E[a] >= E[b]^t E[c]^{1-t}``.  Everything is compared in log form.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .core import CameronMartinDrift, RandomSource, TimeGrid, cm_norm_sq
from .drifts import OpenLoop
from .measures import MeasureSpec
from .montecarlo import CHUNK, run_chunked

REL_TOL = 1e-9


@dataclass(frozen=True)
class PLInstance:
    """Positive functionals ``a, b, c`` (path batch -> values), weight ``t`` and optional density ``d``."""

    a: Callable
    b: Callable
    c: Callable
    t: float
    theta_density: Callable | None = None

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError("t must lie in [0, 1]")


@dataclass(frozen=True)
class PLCheck:
    margin: float
    std_error: float
    z: float
    certifying: bool

    def as_dict(self) -> dict:
        return {"margin": self.margin, "std_error": self.std_error, "z": self.z, "certifying": self.certifying}


def _log_positive(fn, path, label) -> np.ndarray:
    values = np.asarray(fn(path), dtype=float)
    if np.any(~(values > 0)):
        raise ValueError(f"functional {label} must be positive on sampled paths")
    return np.log(values)


def _density(h, grid: TimeGrid, dim: int) -> np.ndarray:
    if isinstance(h, CameronMartinDrift):
        return h.density
    return np.broadcast_to(np.asarray(h, dtype=float), (grid.steps, dim)).copy()


def pl_hypothesis_probe(inst: PLInstance, spec: MeasureSpec, h, k, grid: TimeGrid, samples: int,
                        rng: RandomSource, chunk: int = CHUNK) -> float:
    """Fraction of base samples where the pointwise hypothesis fails by more than ``1e-9`` relative."""
    dim = spec.noise_dim
    hd, kd = _density(h, grid, dim), _density(k, grid, dim)
    md = inst.t * hd + (1.0 - inst.t) * kd
    norms = [0.5 * cm_norm_sq(x, grid.dt) for x in (md, hd, kd)]

    def one(r, m):
        base = spec.sample_base(grid, r, m)
        lhs = _log_positive(inst.a, spec.perturb(base, OpenLoop(md)).path, "a") - norms[0]
        rb = _log_positive(inst.b, spec.perturb(base, OpenLoop(hd)).path, "b") - norms[1]
        rc = _log_positive(inst.c, spec.perturb(base, OpenLoop(kd)).path, "c") - norms[2]
        rhs = inst.t * rb + (1.0 - inst.t) * rc
        return (lhs < rhs - REL_TOL * np.maximum(1.0, np.abs(rhs))).astype(float)

    return float(np.mean(run_chunked(one, samples, rng, chunk)))


def probe_grid(inst: PLInstance, spec: MeasureSpec, shifts: Sequence, grid: TimeGrid, samples: int,
               rng: RandomSource) -> np.ndarray:
    """Violation rates over all pairs ``(h, k)`` drawn from ``shifts``."""
    rates = np.empty((len(shifts), len(shifts)))
    for i, h in enumerate(shifts):
        for j, k in enumerate(shifts):
            rates[i, j] = pl_hypothesis_probe(inst, spec, h, k, grid, samples, rng.child(i * len(shifts) + j))
    return rates


def pl_check(inst: PLInstance, spec: MeasureSpec, grid: TimeGrid, samples: int, rng: RandomSource,
             hypothesis_rate: float | None = None, chunk: int = CHUNK) -> PLCheck:
    """``log E[a] - t log E[b] - (1-t) log E[c]`` with a delta-method standard error.

    With ``theta_density`` the expectations are weighted by ``d``; its
    normalisation cancels because the exponents sum to one.  The result
    certifies the inequality only when ``hypothesis_rate`` is 0.
    """

    def one(r, m):
        path = spec.sample_base(grid, r, m).W
        vals = [np.exp(_log_positive(fn, path, name)) for fn, name in ((inst.a, "a"), (inst.b, "b"), (inst.c, "c"))]
        if inst.theta_density is not None:
            d = np.asarray(inst.theta_density(path), dtype=float)
            vals = [v * d for v in vals]
        return np.stack(vals, axis=-1)

    abc = run_chunked(one, samples, rng, chunk)
    means = abc.mean(axis=0)
    if np.any(means <= 0) or not np.all(np.isfinite(means)):
        raise FloatingPointError("an expectation underflowed or overflowed")
    logs = np.log(means)
    # written relative to log E[c] so that equal means cancel exactly
    margin = float((logs[0] - logs[2]) - inst.t * (logs[1] - logs[2]))
    grad = np.array([1.0, -inst.t, -(1.0 - inst.t)]) / means
    cov = np.atleast_2d(np.cov(abc, rowvar=False))
    var = float(grad @ cov @ grad) / abc.shape[0]
    se = float(np.sqrt(max(var, 0.0)))
    if margin == 0.0:
        z = 0.0
    else:
        z = margin / se if se > 0 else float(np.copysign(np.inf, margin))
    return PLCheck(margin, se, float(z), bool(hypothesis_rate is not None and hypothesis_rate == 0.0))


def concavity_probe(d: Callable, spec: MeasureSpec, h, k, grid: TimeGrid, samples: int, rng: RandomSource,
                    chunk: int = CHUNK) -> float:
    """Fraction of samples where ``-log d(W^{(h+k)/2})`` falls below the average at ``h`` and ``k``."""
    dim = spec.noise_dim
    hd, kd = _density(h, grid, dim), _density(k, grid, dim)

    def one(r, m):
        base = spec.sample_base(grid, r, m)
        mid = -_log_positive(d, spec.perturb(base, OpenLoop(0.5 * (hd + kd))).path, "d")
        ends = -0.5 * (_log_positive(d, spec.perturb(base, OpenLoop(hd)).path, "d")
                       + _log_positive(d, spec.perturb(base, OpenLoop(kd)).path, "d"))
        return (mid < ends - REL_TOL * np.maximum(1.0, np.abs(ends))).astype(float)

    return float(np.mean(run_chunked(one, samples, rng, chunk)))
