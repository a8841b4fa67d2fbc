"""Straight-line probability paths and their conditional velocities.

All array-valued functions work on batches of flat states of shape ``(B, D)``
(a single state ``(D,)`` is also accepted where noted). The flat layout is
the continuous block first, followed by one simplex block per categorical
factor; see :class:`SpaceSpec`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, StructuralError

DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class SpaceSpec:
    """Product space of continuous coordinates and categorical simplex blocks.

    ``point_shape=(N, d)`` marks the continuous block as a point cloud stored
    point-major. When present with categorical blocks, the layout expects one
    categorical block per point (types travel with their point under
    permutations).
    """

    n_continuous: int
    categorical: tuple[int, ...] = ()
    point_shape: Optional[tuple[int, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "categorical", tuple(int(k) for k in self.categorical))
        if self.point_shape is not None:
            object.__setattr__(self, "point_shape", tuple(int(v) for v in self.point_shape))
        if self.n_continuous < 0:
            raise ConfigError("n_continuous must be >= 0")
        if any(k < 2 for k in self.categorical):
            raise ConfigError("every categorical cardinality must be >= 2")
        if self.point_shape is not None:
            n, d = self.point_shape
            if n * d != self.n_continuous:
                raise ConfigError(f"point_shape {self.point_shape} does not cover {self.n_continuous} coords")
            if self.categorical and len(self.categorical) != n:
                raise ConfigError("point clouds need exactly one categorical block per point")

    @property
    def dim(self) -> int:
        return self.n_continuous + sum(self.categorical)

    @property
    def n_points(self) -> Optional[int]:
        return None if self.point_shape is None else self.point_shape[0]

    def block_slices(self) -> list[slice]:
        out, start = [], self.n_continuous
        for k in self.categorical:
            out.append(slice(start, start + k))
            start += k
        return out

    def split(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        x = np.asarray(x)
        self.check(x)
        return x[..., : self.n_continuous], [x[..., s] for s in self.block_slices()]

    def join(self, cont: np.ndarray, blocks: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(cont)] + [np.asarray(b) for b in blocks], axis=-1)

    def check(self, x: np.ndarray) -> None:
        if np.shape(x)[-1] != self.dim:
            raise StructuralError(f"expected trailing dimension {self.dim}, got {np.shape(x)}")

    def points(self, x: np.ndarray) -> np.ndarray:
        """View the continuous block as ``(..., N, d)``."""
        if self.point_shape is None:
            raise StructuralError("space has no point-cloud shape")
        x = np.asarray(x)
        return x[..., : self.n_continuous].reshape(x.shape[:-1] + self.point_shape)

    def types(self, x: np.ndarray) -> np.ndarray:
        """Categorical blocks stacked as ``(..., n_blocks, K)`` (requires equal cardinalities)."""
        if len(set(self.categorical)) != 1:
            raise StructuralError("types() needs equal cardinalities")
        return np.stack(self.split(x)[1], axis=-2)

    def decode(self, x: np.ndarray) -> np.ndarray:
        """Argmax category per block, shape ``(..., n_blocks)``."""
        blocks = self.split(x)[1]
        if not blocks:
            return np.zeros(np.shape(x)[:-1] + (0,), dtype=np.int64)
        return np.stack([b.argmax(axis=-1) for b in blocks], axis=-1)

    def one_hot(self, categories: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`decode`: categories ``(..., n_blocks)`` to concatenated one-hots."""
        categories = np.asarray(categories, dtype=np.int64)
        parts = [np.eye(k)[categories[..., i]] for i, k in enumerate(self.categorical)]
        if not parts:
            return np.zeros(categories.shape[:-1] + (0,))
        return np.concatenate(parts, axis=-1)

    def project_simplex(self, x: np.ndarray) -> np.ndarray:
        """Clip categorical blocks to the simplex (non-negative, renormalised)."""
        x = np.array(x, dtype=np.float64, copy=True)
        for s in self.block_slices():
            b = np.clip(x[..., s], 0.0, None)
            x[..., s] = b / np.maximum(b.sum(axis=-1, keepdims=True), 1e-300)
        return x

    def to_dict(self) -> dict:
        return {
            "n_continuous": self.n_continuous,
            "categorical": list(self.categorical),
            "point_shape": None if self.point_shape is None else list(self.point_shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpaceSpec":
        ps = d.get("point_shape")
        return cls(int(d["n_continuous"]), tuple(d.get("categorical", ())), None if ps is None else tuple(ps))


@dataclass
class State:
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not 0.0 <= self.time <= 1.0:
            raise StructuralError(f"time {self.time} outside [0, 1]")


@dataclass
class Coupling:
    x0: State
    x1: State
    label: Optional[float] = None

    def __post_init__(self):
        if self.x0.time != 0.0 or self.x1.time != 1.0:
            raise StructuralError("coupling endpoints must sit at t=0 and t=1")
        if np.shape(self.x0.values) != np.shape(self.x1.values):
            raise StructuralError("coupling endpoints have different shapes")


@dataclass
class ConditionalVelocitySpec:
    kind: str = "optimal_transport"
    t_clamp: float = DEFAULT_EPS
    # clamped evaluations so far; diagnostic only
    n_clamped: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.kind != "optimal_transport":
            raise ConfigError(f"unsupported velocity kind {self.kind!r}")
        if not 0.0 < self.t_clamp < 0.5:
            raise ConfigError("t_clamp must lie in (0, 0.5)")

    @property
    def linear_in_x1(self) -> bool:
        return self.kind == "optimal_transport"


OT = ConditionalVelocitySpec()


def _t_like(t, x: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim))


def interpolate(x0, x1, t):
    """Point at time ``t`` on the straight line from ``x0`` to ``x1``.

    Accepts :class:`State` pairs (returns a State) or arrays with ``t`` a scalar
    or a per-row vector. Labels never enter this function.
    """
    if isinstance(x0, State) or isinstance(x1, State):
        values = interpolate(x0.values, x1.values, t)
        return State(values, float(t))
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise StructuralError(f"shape mismatch {x0.shape} vs {x1.shape}")
    tt = _t_like(t, x0)
    if np.any(tt < 0) or np.any(tt > 1):
        raise StructuralError("t outside [0, 1]")
    out = (1.0 - tt) * x0 + tt * x1
    # keep endpoints exact under rounding
    if tt.ndim == 0:
        if tt == 0:
            return x0.copy()
        if tt == 1:
            return x1.copy()
        return out
    out = np.where(tt == 0, x0, out)
    return np.where(tt == 1, x1, out)


def clamp_time(t, spec: ConditionalVelocitySpec = OT):
    t = np.asarray(t, dtype=np.float64)
    hi = 1.0 - spec.t_clamp
    over = t > hi
    if np.any(over):
        spec.n_clamped += int(np.count_nonzero(over))
        t = np.minimum(t, hi)
    return t


def conditional_velocity(x, x1, t, spec: ConditionalVelocitySpec = OT) -> np.ndarray:
    """``(x1 - x) / (1 - t)`` with ``t`` clamped to ``1 - eps``."""
    if isinstance(x, State):
        x = x.values
    if isinstance(x1, State):
        x1 = x1.values
    x = np.asarray(x, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x.shape != x1.shape:
        raise StructuralError(f"shape mismatch {x.shape} vs {x1.shape}")
    tt = _t_like(clamp_time(t, spec), x)
    return (x1 - x) / (1.0 - tt)


def endpoint_to_velocity(x, t, x1_hat, spec: ConditionalVelocitySpec = OT) -> np.ndarray:
    """Marginal velocity from an expected endpoint; valid only for x1-linear paths."""
    if not spec.linear_in_x1:
        raise ConfigError("expected-endpoint velocity requires a path linear in x1")
    return conditional_velocity(x, x1_hat, t, spec)


def sample_time(rng: np.random.Generator, n: Optional[int] = None, spec: ConditionalVelocitySpec = OT):
    """Training times drawn from Uniform(0, 1 - eps)."""
    return rng.uniform(0.0, 1.0 - spec.t_clamp, size=n)
