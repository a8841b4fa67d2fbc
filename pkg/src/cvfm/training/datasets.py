"""Toy targets: Gaussian mixtures, factorised categoricals and typed polygon clouds."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..errors import ConfigError, FormatError
from ..io import read_blob, write_blob
from ..path import SpaceSpec
from ..properties import Property, make_property
from ..symmetry import InvariantPrior, prior_sample

DATASET_FILE_VERSION = 1


@dataclass
class Batch:
    x0: np.ndarray
    x1: np.ndarray
    y: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.x1)


class ToyDataset:
    kind = "base"
    space: SpaceSpec
    prior: InvariantPrior
    prop: Optional[Property]

    def sample_x1(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def labels(self, x1: np.ndarray) -> Optional[np.ndarray]:
        return None if self.prop is None else self.prop(x1)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        x1 = self.sample_x1(n, rng)
        x0 = prior_sample(self.prior, self.space, rng, n)
        return Batch(x0, x1, self.labels(x1))

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass
class GaussMixture(ToyDataset):
    """Isotropic Gaussian mixture; ``ring(8)`` gives the classic 8-Gaussian benchmark."""

    centers: np.ndarray
    std: float = 0.2
    weights: Optional[np.ndarray] = None
    property: str = "component_index"
    property_value: float = 0.0
    kind = "gauss_mixture"

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        k = len(self.centers)
        self.weights = np.full(k, 1.0 / k) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if len(self.weights) != k or np.any(self.weights < 0) or abs(self.weights.sum() - 1) > 1e-9:
            raise ConfigError("mixture weights must be a distribution over the centres")
        if self.std <= 0:
            raise ConfigError("std must be positive")
        self.space = SpaceSpec(self.centers.shape[1])
        self.prior = InvariantPrior("standard_gaussian")
        self.prop = make_property(self.property, self.space, centers=self.centers, value=self.property_value)

    @classmethod
    def ring(cls, n_components: int = 8, radius: float = 2.0, std: float = 0.2, **kw) -> "GaussMixture":
        ang = 2 * np.pi * np.arange(n_components) / n_components
        return cls(radius * np.stack([np.cos(ang), np.sin(ang)], axis=1), std, **kw)

    def sample_x1(self, n, rng):
        comp = rng.choice(len(self.centers), size=n, p=self.weights)
        return self.centers[comp] + self.std * rng.normal(size=(n, self.space.dim))

    def nearest_center(self, x: np.ndarray) -> np.ndarray:
        d2 = ((np.asarray(x)[:, None, :] - self.centers[None]) ** 2).sum(-1)
        return d2.argmin(axis=1)

    def to_dict(self):
        return {"kind": "gauss_mixture", "centers": self.centers.tolist(), "std": self.std,
                "weights": self.weights.tolist(), "property": self.property, "property_value": self.property_value}


@dataclass
class CategoricalFactorized(ToyDataset):
    """``n_dims`` independent categoricals with per-dimension probability tables."""

    n_dims: int = 8
    n_classes: int = 4
    probs: Optional[np.ndarray] = None
    table_seed: int = 0
    kind = "categorical_factorized"

    def __post_init__(self):
        if self.n_dims < 1 or self.n_classes < 2:
            raise ConfigError("need n_dims >= 1 and n_classes >= 2")
        if self.probs is None:
            self.probs = np.random.default_rng(self.table_seed).dirichlet(np.full(self.n_classes, 2.0), size=self.n_dims)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (self.n_dims, self.n_classes) or np.any(np.abs(self.probs.sum(1) - 1) > 1e-9):
            raise ConfigError("probs must be an (n_dims, n_classes) row-stochastic table")
        self.space = SpaceSpec(0, (self.n_classes,) * self.n_dims)
        self.prior = InvariantPrior("standard_gaussian")
        self.prop = None

    def sample_x1(self, n, rng):
        u = rng.uniform(size=(n, self.n_dims, 1))
        cats = (u > np.cumsum(self.probs, axis=1)[None]).sum(-1)
        return self.space.one_hot(np.minimum(cats, self.n_classes - 1))

    def to_dict(self):
        return {"kind": "categorical_factorized", "n_dims": self.n_dims, "n_classes": self.n_classes,
                "probs": self.probs.tolist(), "table_seed": self.table_seed}


@dataclass
class TypedPolygonCloud(ToyDataset):
    """Noisy regular N-gon in 2-d with alternating point types, randomly rotated and shuffled.

    Coordinates are stored zero-centred. Validity is rule-based: the cyclic
    type sequence alternates and every pairwise distance sits within
    ``band * R`` of the regular polygon with the sample's own RMS radius ``R``.
    """

    n_points: int = 6
    radius_range: tuple = (0.8, 1.6)
    noise: float = 0.01
    n_types: int = 2
    band: float = 0.15
    property: str = "circumradius"
    property_value: float = 0.0
    kind = "typed_polygon_cloud"

    def __post_init__(self):
        self.radius_range = tuple(float(r) for r in self.radius_range)
        if self.n_points < 3 or self.n_points % self.n_types:
            raise ConfigError("n_points must be >= 3 and a multiple of n_types")
        if not 0 < self.radius_range[0] <= self.radius_range[1]:
            raise ConfigError("invalid radius_range")
        self.space = SpaceSpec(2 * self.n_points, (self.n_types,) * self.n_points, (self.n_points, 2))
        self.prior = InvariantPrior("zero_com_gaussian")
        self.prop = make_property(self.property, self.space, value=self.property_value)
        self.pattern = np.arange(self.n_points) % self.n_types

    def sample_x1(self, n, rng):
        N = self.n_points
        r = rng.uniform(*self.radius_range, size=(n, 1, 1))
        # a uniform phase is a Haar-random planar rotation
        ang = 2 * np.pi * np.arange(N) / N + rng.uniform(0.0, 2 * np.pi, size=(n, 1))
        pts = np.stack([np.cos(ang), np.sin(ang)], axis=-1) * r + rng.uniform(-self.noise, self.noise, size=(n, N, 2))
        pts -= pts.mean(axis=1, keepdims=True)
        shift = rng.integers(0, self.n_types, size=(n, 1))
        types = (self.pattern[None] + shift) % self.n_types
        order = np.argsort(rng.uniform(size=(n, N)), axis=1)
        pts = np.take_along_axis(pts, order[..., None], axis=1)
        types = np.take_along_axis(types, order, axis=1)
        return self.space.join(pts.reshape(n, -1), [np.eye(self.n_types)[types[:, i]] for i in range(N)])

    def is_valid(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        N = self.n_points
        pts = self.space.points(x)
        pts = pts - pts.mean(axis=1, keepdims=True)
        types = self.space.decode(x)
        R = np.sqrt((pts ** 2).sum(-1).mean(-1))
        order = np.argsort(np.arctan2(pts[..., 1], pts[..., 0]), axis=1)
        ring = np.take_along_axis(pts, order[..., None], axis=1)
        seq = np.take_along_axis(types, order, axis=1)
        ok_types = np.zeros(len(x), dtype=bool)
        for s in range(self.n_types):
            ok_types |= np.all(seq == (self.pattern[None] + s) % self.n_types, axis=1)
        tol = self.band * R
        ok_radius = (R >= self.radius_range[0] * (1 - self.band)) & (R <= self.radius_range[1] * (1 + self.band))
        ok_geom = np.all(np.abs(np.linalg.norm(ring, axis=-1) - R[:, None]) <= tol[:, None], axis=1)
        for s in range(1, N // 2 + 1):
            d = np.linalg.norm(ring - np.roll(ring, -s, axis=1), axis=-1)
            ideal = 2 * R * np.sin(np.pi * s / N)
            ok_geom &= np.all(np.abs(d - ideal[:, None]) <= tol[:, None], axis=1)
        return ok_types & ok_radius & ok_geom

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("n_points", "noise", "n_types", "band", "property", "property_value")}
        d.update(kind="typed_polygon_cloud", radius_range=list(self.radius_range))
        return d


def make_dataset(spec: dict) -> ToyDataset:
    """Build from a config mapping; ``kind`` selects the family."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    try:
        if kind == "gauss_mixture_2d":
            return GaussMixture.ring(**spec)
        if kind == "gauss_mixture":
            return GaussMixture(**spec)
        if kind == "categorical_factorized":
            return CategoricalFactorized(**spec)
        if kind == "typed_polygon_cloud":
            return TypedPolygonCloud(**spec)
    except TypeError as exc:
        raise ConfigError(f"bad dataset parameters for {kind!r}: {exc}") from exc
    raise ConfigError(f"unknown dataset kind {kind!r}")


# ---------------------------------------------------------------- dataset files

def save_dataset(path, dataset: ToyDataset, batch: Batch, seed: int) -> None:
    arrays = {"x0": batch.x0, "x1": batch.x1}
    if batch.y is not None:
        arrays["y"] = batch.y
    header = {"kind": "dataset", "dataset_version": DATASET_FILE_VERSION, "spec": dataset.to_dict(),
              "space": dataset.space.to_dict(), "n": len(batch), "seed": seed}
    write_blob(path, header, arrays)


def load_dataset(path) -> tuple[ToyDataset, Batch, dict]:
    header, arrays = read_blob(path)
    if header.get("kind") != "dataset":
        raise FormatError(f"{path} is not a dataset file")
    if header.get("dataset_version") != DATASET_FILE_VERSION:
        raise FormatError(f"unsupported dataset file version {header.get('dataset_version')}")
    ds = make_dataset(header["spec"])
    return ds, Batch(arrays["x0"], arrays["x1"], arrays.get("y")), header
