"""Chunked Monte Carlo with seed-stable reductions."""

from __future__ import annotations

import os
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import RandomSource

CHUNK = 10_000


class EstimationError(FloatingPointError):
    """Non-finite per-sample values; ``indices`` lists the offending samples."""

    def __init__(self, indices):
        self.indices = [int(i) for i in indices]
        shown = ", ".join(map(str, self.indices[:10]))
        more = "" if len(self.indices) <= 10 else f" (+{len(self.indices) - 10} more)"
        super().__init__(f"non-finite values at samples {shown}{more}")


@dataclass(frozen=True)
class EstimateWithError:
    mean: float
    std_error: float
    samples: int

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("an estimate needs at least 2 samples")
        if not self.std_error >= 0:
            raise ValueError("standard error must be non-negative")

    def z_against(self, value: float) -> float:
        diff = abs(self.mean - value)
        if diff == 0.0:
            return 0.0
        return diff / self.std_error if self.std_error > 0 else float("inf")

    def as_dict(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error, "samples": self.samples}


def estimate(values) -> EstimateWithError:
    """Sample mean with its standard error; fails on non-finite entries."""
    values = np.asarray(values, dtype=float).ravel()
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise EstimationError(bad)
    m = values.size
    if m < 2:
        raise ValueError("need at least 2 samples")
    return EstimateWithError(float(np.mean(values)), float(np.std(values, ddof=1) / np.sqrt(m)), m)


def z_score(a: EstimateWithError, b: EstimateWithError) -> float:
    """``|a - b|`` over the pooled standard error of two independent estimates."""
    diff = abs(a.mean - b.mean)
    if diff == 0.0:
        return 0.0
    se = float(np.hypot(a.std_error, b.std_error))
    return diff / se if se > 0 else float("inf")


_THREADS: int | None = None


def set_default_threads(threads: int | None) -> None:
    """Process-wide worker count; ``None`` falls back to ``PATHVAR_THREADS``."""
    global _THREADS
    _THREADS = None if threads is None else max(1, int(threads))


def default_threads() -> int:
    if _THREADS is not None:
        return _THREADS
    try:
        return max(1, int(os.environ.get("PATHVAR_THREADS", "1")))
    except ValueError:
        return 1


def chunk_sizes(samples: int, chunk: int = CHUNK) -> list[int]:
    full, rest = divmod(samples, chunk)
    return [chunk] * full + ([rest] if rest else [])


def run_chunked(fn: Callable[[RandomSource, int], np.ndarray], samples: int, rng: RandomSource,
                chunk: int = CHUNK, threads: int | None = None) -> np.ndarray:
    """Call ``fn(rng.child(i), m_i)`` per chunk and concatenate the results in chunk order.

    ``fn`` returns an array whose leading axis is the sample axis.  Chunk ``i``
    always gets stream ``i``, so the result does not depend on ``threads``.
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    sizes = chunk_sizes(samples, chunk)
    jobs = [(rng.child(i), m) for i, m in enumerate(sizes)]
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(jobs) == 1:
        parts = [fn(r, m) for r, m in jobs]
    else:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda job: fn(*job), jobs))
    return np.concatenate([np.asarray(p) for p in parts], axis=0)
