"""Property functions f(x1) used for labels, likelihoods and metrics.

Each property is written once against the tape ops, so the same definition
evaluates on plain arrays and differentiates under a :class:`~cvfm.autodiff.Tape`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import Tensor, ops
from .errors import ConfigError
from .path import SpaceSpec


@dataclass
class Property:
    name: str
    fn: Callable[[Tensor], Tensor]
    differentiable: bool = True
    params: Optional[dict] = None

    def tensor(self, x) -> Tensor:
        return self.fn(ops.as_tensor(x))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        out = self.fn(Tensor(np.atleast_2d(x))).value
        return out[0] if single else out


def _points(x: Tensor, space: SpaceSpec) -> Tensor:
    n, d = space.point_shape
    return ops.reshape(ops.getitem(x, (slice(None), slice(0, space.n_continuous))), (x.shape[0], n, d))


def circumradius(space: SpaceSpec) -> Property:
    """Root-mean-square distance of the points from their centroid."""
    if space.point_shape is None:
        raise ConfigError("circumradius needs a point-cloud space")
    n = space.n_points

    def fn(x):
        c = ops.mean_center(_points(x, space), axis=-2)
        return ops.sqrt(ops.sum_(ops.square(c), axis=(-1, -2)) * (1.0 / n))

    return Property("circumradius", fn)


def mean_pairwise_distance(space: SpaceSpec) -> Property:
    if space.point_shape is None:
        raise ConfigError("mean_pairwise_distance needs a point-cloud space")
    n = space.n_points
    mask = 1.0 - np.eye(n)

    def fn(x):
        dist = ops.pairwise_distance(_points(x, space))
        return ops.sum_(dist * mask, axis=(-1, -2)) * (1.0 / (n * (n - 1)))

    return Property("mean_pairwise_distance", fn)


def linear(weights) -> Property:
    w = np.asarray(weights, dtype=np.float64)

    def fn(x):
        return ops.sum_(x * w, axis=-1)

    return Property("linear", fn, params={"weights": w.tolist()})


def coordinate_sum(space: SpaceSpec) -> Property:
    w = np.zeros(space.dim)
    w[: space.n_continuous] = 1.0
    prop = linear(w)
    prop.name = "coordinate_sum"
    return prop


def component_index(centers) -> Property:
    """Index of the nearest mixture centre (piecewise constant, labels only)."""
    centers = np.asarray(centers, dtype=np.float64)

    def fn(x):
        pts = x.value[:, : centers.shape[1]]
        d2 = ((pts[:, None, :] - centers[None]) ** 2).sum(-1)
        return Tensor(d2.argmin(axis=1).astype(np.float64))

    return Property("component_index", fn, differentiable=False, params={"centers": centers.tolist()})


def constant(value: float = 0.0) -> Property:
    def fn(x):
        return Tensor(np.full(x.shape[0], float(value)))

    return Property("constant", fn, differentiable=False, params={"value": value})


def make_property(name: str, space: SpaceSpec, **kw) -> Property:
    if name == "circumradius":
        return circumradius(space)
    if name == "mean_pairwise_distance":
        return mean_pairwise_distance(space)
    if name == "coordinate_sum":
        return coordinate_sum(space)
    if name == "linear":
        return linear(kw["weights"])
    if name == "component_index":
        return component_index(kw["centers"])
    if name == "constant":
        return constant(kw.get("value", 0.0))
    raise ConfigError(f"unknown property {name!r}")
