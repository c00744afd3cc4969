"""Named path functionals ``f: path -> R`` evaluated on sample batches."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .core import DiscretePath


@dataclass(frozen=True)
class Functional:
    """Pure map from a batch of paths to one value per sample.

    ``endpoint`` is set for functionals of the form ``g(W(1)[component])``;
    ``path_gradient`` maps a batch to ``df/dW(t_k)`` of shape ``(..., N+1, n)``
    when the functional is smooth.
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    name: str
    integrability_note: str = "caller asserts f in L^p with E[(|f|+1) e^{-f}] finite"
    endpoint: Callable[[np.ndarray], np.ndarray] | None = None
    path_gradient: Callable[[np.ndarray], np.ndarray] | None = None
    params: dict = field(default_factory=dict)

    def __call__(self, path) -> np.ndarray:
        values = path.values if isinstance(path, DiscretePath) else np.asarray(path, dtype=float)
        return np.asarray(self.evaluator(values), dtype=float)


def _endpoint_gradient(dg, component):
    def grad(values):
        out = np.zeros_like(values)
        out[..., -1, component] = dg(values[..., -1, component])
        return out

    return grad


def linear_endpoint(c: float = 1.0, component: int = 0) -> Functional:
    """``f = c W(1)``."""
    c = float(c)
    return Functional(
        lambda v: c * v[..., -1, component],
        "linear-endpoint",
        endpoint=lambda x: c * np.asarray(x, dtype=float),
        path_gradient=_endpoint_gradient(lambda x: np.full(np.shape(x), c), component),
        params={"c": c, "component": component},
    )


def quadratic_endpoint(lam: float = 0.5, component: int = 0) -> Functional:
    """``f = lam W(1)^2``."""
    lam = float(lam)
    return Functional(
        lambda v: lam * v[..., -1, component] ** 2,
        "quadratic-endpoint",
        endpoint=lambda x: lam * np.asarray(x, dtype=float) ** 2,
        path_gradient=_endpoint_gradient(lambda x: 2.0 * lam * x, component),
        params={"lam": lam, "component": component},
    )


def clamped_midpoint(bound: float = 2.0, component: int = 0) -> Functional:
    """``f = clamp(W(1/2), -bound, bound)``, bounded."""
    bound = float(bound)

    def f(v):
        mid = (v.shape[-2] - 1) // 2
        return np.clip(v[..., mid, component], -bound, bound)

    return Functional(f, "clamped-midpoint", params={"bound": bound, "component": component})


def running_max_clamp(bound: float = 2.0, component: int = 0) -> Functional:
    """``f = min(max_t W(t), bound)``, bounded above and below on paths started at 0."""
    bound = float(bound)
    return Functional(
        lambda v: np.minimum(np.max(v[..., component], axis=-1), bound),
        "running-max-clamp",
        params={"bound": bound, "component": component},
    )


def midpoint_square_clamp(bound: float = 4.0, component: int = 0) -> Functional:
    """``f = min(W(1/2)^2, bound)``, a bounded second-moment statistic."""
    bound = float(bound)

    def f(v):
        mid = (v.shape[-2] - 1) // 2
        return np.minimum(v[..., mid, component] ** 2, bound)

    return Functional(f, "midpoint-square-clamp", params={"bound": bound, "component": component})


def endpoint_clamp(bound: float = 2.0, component: int = 0) -> Functional:
    """``f = clamp(W(1), -bound, bound)``."""
    bound = float(bound)
    return Functional(
        lambda v: np.clip(v[..., -1, component], -bound, bound),
        "endpoint-clamp",
        params={"bound": bound, "component": component},
    )


def constant(value: float = 0.0) -> Functional:
    value = float(value)
    return Functional(
        lambda v: np.full(v.shape[:-2], value),
        "constant",
        endpoint=lambda x: np.full(np.shape(x), value),
        path_gradient=lambda v: np.zeros_like(v),
        params={"value": value},
    )


REGISTRY: dict[str, Callable[..., Functional]] = {
    "linear-endpoint": linear_endpoint,
    "quadratic-endpoint": quadratic_endpoint,
    "clamped-midpoint": clamped_midpoint,
    "running-max-clamp": running_max_clamp,
    "midpoint-square-clamp": midpoint_square_clamp,
    "endpoint-clamp": endpoint_clamp,
    "constant": constant,
}


def make_functional(name: str, **params) -> Functional:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown functional {name!r}; known: {', '.join(sorted(REGISTRY))}") from None
    return factory(**params)
