"""Task likelihoods p(y | x1) with reverse-mode gradients for post-hoc control."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tape, Tensor, ops
from .errors import ConfigError, NumericError
from .path import SpaceSpec
from .properties import Property, make_property

LOG_2PI = float(np.log(2.0 * np.pi))


class Likelihood:
    """Interface: ``log_tensor`` gives per-row log-likelihoods for a ``(B, D)`` Tensor."""

    def log_tensor(self, x1: Tensor) -> Tensor:
        raise NotImplementedError

    def log_likelihood(self, x1) -> np.ndarray:
        x1 = np.asarray(x1, dtype=np.float64)
        single = x1.ndim == 1
        out = self.log_tensor(Tensor(np.atleast_2d(x1))).value
        return out[0] if single else out

    def grad_log_likelihood(self, x1) -> np.ndarray:
        x1 = np.asarray(x1, dtype=np.float64)
        single = x1.ndim == 1
        with Tape(check_finite=False) as tape:
            leaf = Tensor(np.atleast_2d(x1).copy(), requires_grad=True)
            tape.backward(ops.sum_(self.log_tensor(leaf)))
        g = np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad
        bad = ~np.isfinite(g)
        if np.any(bad):
            rows = np.unique(np.nonzero(bad)[0])
            raise NumericError(f"non-finite likelihood gradient in rows {rows.tolist()[:10]}", index=int(rows[0]))
        return g[0] if single else g


@dataclass
class PropertyLikelihood(Likelihood):
    """Gaussian residual model ``y ~ N(f(x1), sigma_y^2)``."""

    prop: Property
    sigma_y: float
    target: float

    def __post_init__(self):
        if self.sigma_y <= 0:
            raise ConfigError("sigma_y must be positive")
        if not self.prop.differentiable:
            raise ConfigError(f"property {self.prop.name!r} is not differentiable")

    def log_tensor(self, x1):
        r = ops.sub(self.target, self.prop.tensor(x1))
        s2 = self.sigma_y ** 2
        return ops.square(r) * (-0.5 / s2) - 0.5 * (np.log(s2) + LOG_2PI)


@dataclass
class ComponentLikelihood(Likelihood):
    """Smooth surrogate for a discrete mixture label: softmax over ``-||x - c_k||^2 / temperature``."""

    centers: np.ndarray
    target: int
    temperature: float = 1.0

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if not 0 <= self.target < len(self.centers):
            raise ConfigError("target component out of range")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    def log_tensor(self, x1):
        k, d = self.centers.shape
        pts = ops.reshape(ops.getitem(x1, (slice(None), slice(0, d))), (x1.shape[0], 1, d))
        d2 = ops.sum_(ops.square(ops.sub(pts, self.centers[None])), axis=-1)
        return ops.getitem(ops.log_softmax(d2 * (-1.0 / self.temperature), axis=-1), (slice(None), self.target))


def log_likelihood(lik: Likelihood, x1) -> np.ndarray:
    return lik.log_likelihood(x1)


def grad_log_likelihood(lik: Likelihood, x1) -> np.ndarray:
    return lik.grad_log_likelihood(x1)


def make_likelihood(spec: dict, space: SpaceSpec) -> Likelihood:
    """Build from a config mapping ``{"name", "target", "sigma_y" | "temperature", ...}``."""
    spec = dict(spec)
    name = spec.pop("name")
    if name == "component":
        return ComponentLikelihood(np.asarray(spec["centers"]), int(spec["target"]), float(spec.get("temperature", 1.0)))
    target = float(spec.pop("target"))
    sigma_y = float(spec.pop("sigma_y", 1.0))
    return PropertyLikelihood(make_property(name, space, **spec), sigma_y, target)
