"""ODE sampling with expected-endpoint velocities, plus fixed-point guidance."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import ConfigError, NumericError, UsageError
from .guidance import Likelihood
from .heads import VariationalHead, expected_endpoint
from .path import DEFAULT_EPS, ConditionalVelocitySpec, endpoint_to_velocity
from .symmetry import InvariantPrior, prior_sample


@dataclass
class IntegratorConfig:
    scheme: str = "euler"
    steps: int = 100
    t_clamp: float = DEFAULT_EPS

    def __post_init__(self):
        if self.scheme not in ("euler", "rk4"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")

    @property
    def evals_per_step(self) -> int:
        return 1 if self.scheme == "euler" else 4


@dataclass
class GuidanceConfig:
    inner_steps: int = 5
    damping: float = 0.5
    divergence_cap: float = 10.0
    tol: float = 1e-6

    def __post_init__(self):
        if self.inner_steps < 0:
            raise ConfigError("inner_steps must be >= 0")
        if not 0.0 < self.damping <= 1.0:
            raise ConfigError("damping must lie in (0, 1]")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    nfe: int

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def velocity_field(head: VariationalHead, x, t, y=None, spec: Optional[ConditionalVelocitySpec] = None) -> np.ndarray:
    spec = spec or ConditionalVelocitySpec(t_clamp=head.config.t_clamp)
    post = head.posterior_params(x, t, y)
    return endpoint_to_velocity(x, t, expected_endpoint(post), spec)


def integrate(field_: Callable, x0, cfg: IntegratorConfig, space=None) -> Trajectory:
    """Fixed-grid integration on ``t_k = k / K``.

    Euler: ``x_{k+1} = x_k + field(x_k, t_k) / K``. The final state is reported
    at ``1 - eps``; with ``space`` given, categorical blocks are projected back
    onto the simplex there.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    k_steps = cfg.steps
    h = 1.0 / k_steps
    states = np.empty((k_steps + 1,) + x.shape)
    states[0] = x
    nfe = 0
    for k in range(k_steps):
        t = k / k_steps
        if cfg.scheme == "euler":
            x = x + h * field_(x, t)
            nfe += 1
        else:
            k1 = field_(x, t)
            k2 = field_(x + 0.5 * h * k1, t + 0.5 * h)
            k3 = field_(x + 0.5 * h * k2, t + 0.5 * h)
            k4 = field_(x + h * k3, min(t + h, 1.0 - cfg.t_clamp))
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            nfe += 4
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite state after step {k}", index=k)
        states[k + 1] = x
    if space is not None and space.categorical:
        states[-1] = space.project_simplex(states[-1])
    times = np.arange(k_steps + 1) / k_steps
    times[-1] = 1.0 - cfg.t_clamp
    return Trajectory(times, states, nfe)


@dataclass
class FixedPointResult:
    x1: np.ndarray
    residuals: np.ndarray
    diverged: np.ndarray
    converged: np.ndarray


def fixed_point_refine(mu, sigma2, lik: Likelihood, cfg: GuidanceConfig) -> FixedPointResult:
    """Damped iteration ``x <- (1 - lam) x + lam (mu + Sigma grad log p(y | x))`` from ``x = mu``.

    Rows whose step size exceeds ``cfg.divergence_cap`` (or turns non-finite)
    are frozen at ``mu`` and flagged. ``residuals[s]`` is the step norm of
    iteration ``s``. Iteration stops early once every live row moved by at
    most ``cfg.tol``; the unused entries of ``residuals`` are NaN.
    """
    mu = np.asarray(mu, dtype=np.float64)
    single = mu.ndim == 1
    mu2 = np.atleast_2d(mu)
    b = mu2.shape[0]
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), (b,)).reshape(-1, 1)
    if np.any(s2 <= 0):
        raise ConfigError("Sigma_t must be positive")
    x = mu2.copy()
    lam = cfg.damping
    residuals = np.full((cfg.inner_steps, b), np.nan)
    diverged = np.zeros(b, dtype=bool)
    last = np.zeros(b)
    for s in range(cfg.inner_steps):
        live = ~diverged
        if not np.any(live):
            break
        xl = x[live]
        with np.errstate(over="ignore", invalid="ignore"):
            prop = mu2[live] + s2[live] * lik.grad_log_likelihood(xl)
            new = (1.0 - lam) * xl + lam * prop
            res = np.linalg.norm(new - xl, axis=1)
        bad = ~np.isfinite(res) | (res > cfg.divergence_cap)
        residuals[s, live] = res
        idx = np.flatnonzero(live)
        x[idx[~bad]] = new[~bad]
        x[idx[bad]] = mu2[idx[bad]]
        diverged[idx[bad]] = True
        last[live] = res
        if np.all(res[~bad] <= cfg.tol):
            break
    converged = ~diverged & (last <= cfg.tol)
    if single:
        return FixedPointResult(x[0], residuals[:, 0], diverged[0], converged[0])
    return FixedPointResult(x, residuals, diverged, converged)


def stationarity_residual(x, mu, sigma2, lik: Likelihood) -> np.ndarray:
    """``||x - mu - Sigma grad log p(y | x)||`` per row."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), (x.shape[0],)).reshape(-1, 1)
    return np.linalg.norm(x - mu - s2 * lik.grad_log_likelihood(x), axis=1)


# ---------------------------------------------------------------- sampling modes

@dataclass
class Unconditional:
    name: str = field(default="unconditional", init=False)


@dataclass
class Conditioned:
    y: float
    name: str = field(default="conditioned", init=False)


@dataclass
class Guided:
    likelihood: Likelihood
    config: GuidanceConfig = field(default_factory=GuidanceConfig)
    name: str = field(default="guided", init=False)


Mode = Union[Unconditional, Conditioned, Guided]


@dataclass
class SampleResult:
    states: np.ndarray
    categories: np.ndarray
    nfe: int
    mode: str
    trajectory: Optional[Trajectory] = None
    diverged_refinements: int = 0


def default_prior(space) -> InvariantPrior:
    return InvariantPrior("zero_com_gaussian" if space.point_shape is not None else "standard_gaussian")


def sample(head: VariationalHead, n: int, cfg: IntegratorConfig, mode: Mode, rng: np.random.Generator,
           prior: Optional[InvariantPrior] = None, x0: Optional[np.ndarray] = None,
           keep_trajectory: bool = False) -> SampleResult:
    """Draw ``n`` chains from the prior and integrate the chosen velocity field."""
    space = head.space
    conditioned = head.config.conditioned
    if isinstance(mode, Conditioned) and not conditioned:
        raise UsageError("conditioned sampling needs a label-conditioned head")
    if isinstance(mode, (Unconditional, Guided)) and conditioned:
        raise UsageError(f"{mode.name} sampling needs an unconditioned head")
    if x0 is None:
        x0 = prior_sample(prior or default_prior(space), space, rng, n)
    spec = ConditionalVelocitySpec(t_clamp=cfg.t_clamp)
    stats = {"diverged": 0}

    if isinstance(mode, Guided):
        def field_(x, t):
            post = head.posterior_params(x, t)
            mu = expected_endpoint(post)
            if mode.config.inner_steps == 0:
                return endpoint_to_velocity(x, t, mu, spec)
            ref = fixed_point_refine(mu, post.sigma2, mode.likelihood, mode.config)
            stats["diverged"] += int(np.count_nonzero(ref.diverged))
            return endpoint_to_velocity(x, t, ref.x1, spec)
    else:
        y = mode.y if isinstance(mode, Conditioned) else None

        def field_(x, t):
            return velocity_field(head, x, t, y, spec)

    traj = integrate(field_, x0, cfg, space)
    final = traj.final
    return SampleResult(final, space.decode(final), traj.nfe, mode.name,
                        traj if keep_trajectory else None, stats["diverged"])


# ---------------------------------------------------------------- continuity-equation check

def _normal_pdf(x, mean, std):
    return np.exp(-0.5 * ((x - mean) / std) ** 2) / (std * np.sqrt(2.0 * np.pi))


def controlled_density(x, t, endpoints, weights) -> np.ndarray:
    """``p_t(x | y) = sum_j w_j N(x; t a_j, (1 - t)^2)`` for a standard-normal prior in 1-d."""
    x = np.asarray(x, dtype=np.float64)[..., None]
    return np.sum(np.asarray(weights) * _normal_pdf(x, t * np.asarray(endpoints), 1.0 - t), axis=-1)


def controlled_velocity(x, t, endpoints, weights) -> np.ndarray:
    """``E_{p_t(x1 | x, y)}[(x1 - x) / (1 - t)]`` by exact enumeration over the endpoints."""
    x = np.asarray(x, dtype=np.float64)[..., None]
    a = np.asarray(endpoints, dtype=np.float64)
    logj = np.log(np.asarray(weights, dtype=np.float64)) - 0.5 * ((x - t * a) / (1.0 - t)) ** 2
    logj -= logj.max(axis=-1, keepdims=True)
    post = np.exp(logj)
    post /= post.sum(axis=-1, keepdims=True)
    return np.sum(post * (a - x) / (1.0 - t), axis=-1)


def continuity_residual(endpoints, weights, ts, xs, h: float = 1e-5) -> float:
    """Max over the grid of ``|d/dt p + d/dx (p u)|`` using central differences."""
    worst = 0.0
    xs = np.asarray(xs, dtype=np.float64)
    for t in ts:
        dpdt = (controlled_density(xs, t + h, endpoints, weights) - controlled_density(xs, t - h, endpoints, weights)) / (2 * h)
        flux = lambda z: controlled_density(z, t, endpoints, weights) * controlled_velocity(z, t, endpoints, weights)
        div = (flux(xs + h) - flux(xs - h)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(dpdt + div))))
    return worst
