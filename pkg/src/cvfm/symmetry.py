"""Group actions on typed point clouds, invariant priors, and equivariance audits.

A :class:`GroupElement` is the affine map ``x -> R x[perm] + c`` applied to
every point of a cloud, with categorical type blocks carried along by the
permutation. Permutations, rotations, translations and their composites are
all special cases, which gives composition and inversion closed forms.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, StructuralError
from .heads import VariationalHead, expected_endpoint
from .path import OT, ConditionalVelocitySpec, SpaceSpec, conditional_velocity, endpoint_to_velocity

EXACT_TOL = 1e-12
HEAD_TOL = 1e-9
TRAJ_TOL = 1e-8


@dataclass(frozen=True)
class GroupElement:
    perm: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    kind: str = "composite"

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64)
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64)
        if sorted(perm.tolist()) != list(range(len(perm))):
            raise StructuralError("perm is not a bijection")
        d = rot.shape[0]
        if rot.shape != (d, d) or trans.shape != (d,):
            raise StructuralError("rotation/translation shapes disagree")
        if not np.allclose(rot.T @ rot, np.eye(d), atol=EXACT_TOL) or abs(np.linalg.det(rot) - 1) > EXACT_TOL:
            raise StructuralError("rotation must be special orthogonal")
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @property
    def n(self) -> int:
        return len(self.perm)

    @property
    def d(self) -> int:
        return self.rotation.shape[0]

    def compose(self, other: "GroupElement") -> "GroupElement":
        """``self * other``: apply ``other`` first."""
        if (self.n, self.d) != (other.n, other.d):
            raise StructuralError("cannot compose elements of different groups")
        return GroupElement(other.perm[self.perm], self.rotation @ other.rotation,
                            self.rotation @ other.translation + self.translation)

    def inverse(self) -> "GroupElement":
        rt = self.rotation.T
        return GroupElement(np.argsort(self.perm), rt, -rt @ self.translation, self.kind)

    @property
    def is_linear(self) -> bool:
        return not np.any(self.translation)


def identity(n: int, d: int) -> GroupElement:
    return GroupElement(np.arange(n), np.eye(d), np.zeros(d), "identity")


def permutation(perm) -> GroupElement:
    perm = np.asarray(perm)
    return GroupElement(perm, np.eye(1), np.zeros(1), "permutation")


def rotation(matrix) -> GroupElement:
    matrix = np.asarray(matrix, dtype=np.float64)
    return GroupElement(np.arange(1), matrix, np.zeros(matrix.shape[0]), "rotation")


def translation(vector) -> GroupElement:
    vector = np.asarray(vector, dtype=np.float64)
    return GroupElement(np.arange(1), np.eye(len(vector)), vector, "translation")


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform SO(d) via QR of a Gaussian matrix with sign and determinant fixes."""
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_element(n: int, d: int, rng: np.random.Generator, kinds=("permutation", "rotation"),
                   translation_scale: float = 1.0) -> GroupElement:
    perm = rng.permutation(n) if "permutation" in kinds else np.arange(n)
    rot = random_rotation(d, rng) if "rotation" in kinds else np.eye(d)
    trans = translation_scale * rng.normal(size=d) if "translation" in kinds else np.zeros(d)
    return GroupElement(perm, rot, trans, "+".join(kinds) if kinds else "identity")


def lift(g: GroupElement, space: SpaceSpec) -> GroupElement:
    """Lift single-point/identity-shaped factors to the cloud's ``(N, d)``."""
    n, d = space.point_shape
    perm = g.perm if g.n == n else (np.arange(n) if g.n == 1 else None)
    rot = g.rotation if g.d == d else (np.eye(d) if g.d == 1 and g.kind == "permutation" else None)
    trans = g.translation if g.d == d else (np.zeros(d) if g.kind == "permutation" else None)
    if perm is None or rot is None or trans is None:
        raise StructuralError(f"group element ({g.n} points, {g.d}-dim) incompatible with cloud {(n, d)}")
    return GroupElement(perm, rot, trans, g.kind)


def act(g: GroupElement, x, space: SpaceSpec, linear: bool = False) -> np.ndarray:
    """Apply ``g`` to flat states ``(..., D)``.

    ``linear=True`` drops the translation, which is the correct action on
    tangent vectors such as velocities.
    """
    if space.point_shape is None:
        raise StructuralError("group actions need a point-cloud space")
    x = np.asarray(x, dtype=np.float64)
    space.check(x)
    g = lift(g, space)
    if g.kind == "identity" or (np.array_equal(g.perm, np.arange(g.n)) and np.array_equal(g.rotation, np.eye(g.d))
                                and (linear or not np.any(g.translation))):
        return x.copy()
    pts = space.points(x)[..., g.perm, :] @ g.rotation.T
    if not linear:
        pts = pts + g.translation
    out = [pts.reshape(x.shape[:-1] + (space.n_continuous,))]
    if space.categorical:
        k = space.categorical[0]
        types = x[..., space.n_continuous:].reshape(x.shape[:-1] + (space.n_points, k))
        out.append(types[..., g.perm, :].reshape(x.shape[:-1] + (space.n_points * k,)))
    return np.concatenate(out, axis=-1)


# ---------------------------------------------------------------- priors

@dataclass
class InvariantPrior:
    kind: str = "standard_gaussian"
    categorical: str = "gaussian"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("standard_gaussian", "zero_com_gaussian"):
            raise ConfigError(f"unknown prior kind {self.kind!r}")
        if self.categorical not in ("dirichlet", "gaussian", "center", "vertex"):
            raise ConfigError(f"unknown categorical prior {self.categorical!r}")


def project_zero_com(x: np.ndarray, space: SpaceSpec) -> np.ndarray:
    x = np.array(x, dtype=np.float64, copy=True)
    pts = space.points(x)
    pts = pts - pts.mean(axis=-2, keepdims=True)
    x[..., : space.n_continuous] = pts.reshape(x.shape[:-1] + (space.n_continuous,))
    return x


def prior_sample(prior: InvariantPrior, space: SpaceSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` i.i.d. draws at t=0 (continuous Gaussian block, simplex blocks per ``prior.categorical``).

    Categorical blocks default to a standard Gaussian on R^K: the endpoint
    posterior is then a smooth softmax in ``x_t`` and deterministic flows can
    split the prior mass across categories. ``dirichlet`` keeps the start on
    the simplex; ``center`` and ``vertex`` are degenerate and kept for tests.
    """
    cont = prior.scale * rng.normal(size=(n, space.n_continuous))
    if prior.kind == "zero_com_gaussian":
        if space.point_shape is None:
            raise ConfigError("zero_com prior needs a point-cloud space")
        pts = cont.reshape(n, *space.point_shape)
        cont = (pts - pts.mean(axis=1, keepdims=True)).reshape(n, -1)
    blocks = []
    for k in space.categorical:
        if prior.categorical == "dirichlet":
            blocks.append(rng.dirichlet(np.ones(k), size=n))
        elif prior.categorical == "gaussian":
            blocks.append(prior.scale * rng.normal(size=(n, k)))
        elif prior.categorical == "center":
            blocks.append(np.full((n, k), 1.0 / k))
        else:
            blocks.append(np.eye(k)[rng.integers(0, k, size=n)])
    return space.join(cont, blocks)


# ---------------------------------------------------------------- audits

GroupSampler = Callable[[np.random.Generator], GroupElement]


def group_sampler(space: SpaceSpec, kinds=("permutation", "rotation")) -> GroupSampler:
    n, d = space.point_shape
    if not kinds:
        return lambda rng: identity(n, d)
    return lambda rng: random_element(n, d, rng, kinds)


def _random_states(space: SpaceSpec, rng: np.random.Generator, n: int, prior: Optional[InvariantPrior] = None):
    return prior_sample(prior or InvariantPrior(), space, rng, n)


def audit_bi_equivariance(space: SpaceSpec, trials: int, rng: np.random.Generator,
                          kinds=("permutation", "rotation"), spec: ConditionalVelocitySpec = OT,
                          velocity: Optional[Callable] = None) -> float:
    """Max ``||u(g x | g x1) - g u(x | x1)||`` over random draws.

    With a translation in ``kinds`` the group acts on states affinely and on
    velocities linearly, so the check reads ``u(x + c | x1 + c) = u(x | x1)``.
    """
    velocity = velocity or (lambda x, x1, t: conditional_velocity(x, x1, t, spec))
    n, d = space.point_shape
    worst = 0.0
    for _ in range(trials):
        g = random_element(n, d, rng, kinds)
        x, x1 = _random_states(space, rng, 2)
        t = rng.uniform(0.0, 0.99)
        lhs = velocity(act(g, x, space), act(g, x1, space), t)
        rhs = act(g, velocity(x, x1, t), space, linear=True)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


@dataclass
class ModelAuditReport:
    expectation_residual: float
    velocity_residual: float
    trials: int

    def passed(self, tol: float = HEAD_TOL) -> bool:
        return self.expectation_residual <= tol and self.velocity_residual <= tol


def audit_model_equivariance(head: VariationalHead, sampler: GroupSampler, trials: int,
                             rng: np.random.Generator, batch: int = 16,
                             prior: Optional[InvariantPrior] = None) -> ModelAuditReport:
    sp = head.space
    exp_res = vel_res = 0.0
    for _ in range(trials):
        g = sampler(rng)
        x = _random_states(sp, rng, batch, prior)
        t = rng.uniform(0.0, 0.99, size=batch)
        gx = act(g, x, sp)
        m = expected_endpoint(head.posterior_params(x, t))
        gm = expected_endpoint(head.posterior_params(gx, t))
        exp_res = max(exp_res, float(np.max(np.abs(gm - act(g, m, sp)))))
        v = endpoint_to_velocity(x, t, m)
        gv = endpoint_to_velocity(gx, t, gm)
        vel_res = max(vel_res, float(np.max(np.abs(gv - act(g, v, sp, linear=True)))))
    return ModelAuditReport(exp_res, vel_res, trials)


def audit_prior_invariance(prior: InvariantPrior, space: SpaceSpec, sampler: GroupSampler, rng: np.random.Generator,
                           n: int = 10_000) -> dict:
    """Pointwise and Monte Carlo checks that the prior law is unchanged by ``g``.

    Pointwise: the Gaussian log-density depends on ``||x||`` only and the
    zero-CoM constraint is preserved. Monte Carlo: second-moment matrices of
    ``x`` and ``g x`` agree (Frobenius, per coordinate).
    """
    x = prior_sample(prior, space, rng, n)
    g = sampler(rng)
    gx = act(g, x, space)
    cont, gcont = x[:, : space.n_continuous], gx[:, : space.n_continuous]
    norm_res = float(np.max(np.abs(np.linalg.norm(cont, axis=1) - np.linalg.norm(gcont, axis=1))))
    com_res = 0.0
    if prior.kind == "zero_com_gaussian":
        com_res = float(np.max(np.abs(space.points(gx).mean(axis=1))))
    fresh = prior_sample(prior, space, rng, n)[:, : space.n_continuous]
    mom = np.linalg.norm(gcont.T @ gcont / n - fresh.T @ fresh / n)
    return {"norm_residual": norm_res, "com_residual": com_res, "moment_deviation": float(mom), "n": n}


@dataclass
class MarginalAuditReport:
    trajectory_residual: float
    histogram_deviation: float
    histogram_tolerance: float
    trials: int
    steps: int

    def passed(self, tol: float = TRAJ_TOL) -> bool:
        return self.trajectory_residual <= tol and self.histogram_deviation <= self.histogram_tolerance


def pairwise_distance_histogram(x: np.ndarray, space: SpaceSpec, bins: np.ndarray) -> np.ndarray:
    pts = space.points(x)
    d = np.linalg.norm(pts[:, :, None, :] - pts[:, None, :, :], axis=-1)
    iu = np.triu_indices(space.n_points, 1)
    hist, _ = np.histogram(d[:, iu[0], iu[1]].ravel(), bins=bins)
    return hist / max(hist.sum(), 1)


def audit_marginal_invariance(head: VariationalHead, prior: InvariantPrior, cfg, trials: int,
                              rng: np.random.Generator, sampler: Optional[GroupSampler] = None,
                              batch: int = 64) -> MarginalAuditReport:
    """Check ``xi(g x0) = g xi(x0)`` along whole trajectories, plus sample-set statistics."""
    from .sampling import integrate, velocity_field

    sp = head.space
    sampler = sampler or group_sampler(sp)
    field_ = lambda x, t: velocity_field(head, x, t)
    worst, hist_dev = 0.0, 0.0
    bins = np.linspace(0.0, 8.0, 33)
    for _ in range(trials):
        g = sampler(rng)
        x0 = prior_sample(prior, sp, rng, batch)
        traj = integrate(field_, x0, cfg).states
        gtraj = integrate(field_, act(g, x0, sp), cfg).states
        moved = act(g, traj, sp)
        # relative to the state scale (floored at 1): an expanding flow leaves only roundoff at its own size
        scale = max(1.0, float(np.max(np.abs(moved))))
        worst = max(worst, float(np.max(np.abs(gtraj - moved))) / scale)
        h1 = pairwise_distance_histogram(traj[-1], sp, bins)
        h2 = pairwise_distance_histogram(gtraj[-1], sp, bins)
        hist_dev = max(hist_dev, float(np.max(np.abs(h1 - h2))))
    n_pairs = batch * sp.n_points * (sp.n_points - 1) // 2
    return MarginalAuditReport(worst, hist_dev, 3.0 / np.sqrt(n_pairs), trials, cfg.steps)
