"""Mean-field variational posteriors over endpoints.

A head maps ``(x_t, t[, y])`` to a factorised posterior over ``x1``: one
Gaussian per continuous coordinate and one categorical per simplex block.
Continuous means are parameterised as ``x + (1 - t) * out`` so that a
zero-initialised output layer predicts ``x1_hat = x`` and the Gaussian
negative log-likelihood under the ``sigma_base * (1 - t)`` schedule reduces
to a constant-weight regression on ``out``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import ParamStore, Tensor, ops
from .errors import ConfigError, DataError, StructuralError, UsageError
from .path import DEFAULT_EPS, SpaceSpec

LOG_2PI = float(np.log(2.0 * np.pi))
COORD_GAIN = 2.0


@dataclass
class HeadConfig:
    architecture: str = "mlp"
    hidden: tuple = (128, 128, 128)
    n_rounds: int = 3
    time_embed: int = 16
    conditioned: bool = False
    label_kind: str = "continuous"
    n_label_classes: int = 0
    sigma_base: float = 1.0
    zero_init: bool = True
    t_clamp: float = DEFAULT_EPS

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.architecture not in ("mlp", "equivariant"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hidden widths must be positive")
        if self.time_embed < 2 or self.time_embed % 2:
            raise ConfigError("time_embed must be a positive even number")
        if self.label_kind not in ("continuous", "categorical"):
            raise ConfigError(f"unknown label_kind {self.label_kind!r}")
        if self.conditioned and self.label_kind == "categorical" and self.n_label_classes < 2:
            raise ConfigError("categorical labels need n_label_classes >= 2")
        if self.sigma_base <= 0:
            raise ConfigError("sigma_base must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        return cls(**d)


@dataclass
class MeanFieldPosterior:
    """Batched factorised posterior: ``means (B, Dc)``, ``sigma2 (B,)``, logits per block."""

    means: np.ndarray
    sigma2: np.ndarray
    logits: list = field(default_factory=list)

    def __post_init__(self):
        self.sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        if np.any(self.sigma2 <= 0):
            raise DataError("posterior variance must be positive")

    @property
    def probs(self) -> list[np.ndarray]:
        return [_softmax(l) for l in self.logits]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sigma2_schedule(t, sigma_base: float = 1.0, t_clamp: float = DEFAULT_EPS) -> np.ndarray:
    """Isotropic endpoint variance ``sigma_base^2 (1 - t)^2``, positive via the time clamp."""
    t = np.minimum(np.asarray(t, dtype=np.float64), 1.0 - t_clamp)
    return sigma_base ** 2 * (1.0 - t) ** 2


def expected_endpoint(post: MeanFieldPosterior) -> np.ndarray:
    """Continuous means followed by softmax probabilities per categorical block."""
    return np.concatenate([np.asarray(post.means)] + post.probs, axis=-1)


def _check_one_hot(block: np.ndarray) -> None:
    ok = np.all((block == 0) | (block == 1)) and np.all(block.sum(axis=-1) == 1)
    if not ok:
        raise DataError("categorical targets must be one-hot")


def log_prob(post: MeanFieldPosterior, x1: np.ndarray, space: SpaceSpec) -> np.ndarray:
    """Per-row ``sum_d log q(x1^d)`` for a batch of endpoints ``(B, D)``."""
    cont, blocks = space.split(np.atleast_2d(x1))
    s2 = post.sigma2.reshape(-1, 1)
    lp = np.sum(-0.5 * (cont - post.means) ** 2 / s2 - 0.5 * np.log(s2) - 0.5 * LOG_2PI, axis=-1)
    for logits, b in zip(post.logits, blocks):
        _check_one_hot(b)
        lp = lp + np.sum(b * _log_softmax(logits), axis=-1)
    return lp


def neg_log_prob_tensor(means: Tensor, logits: Sequence[Tensor], sigma2: np.ndarray, x1: np.ndarray,
                        space: SpaceSpec, categorical_weight: float = 1.0) -> Tensor:
    """Differentiable per-row ``-log q(x1)`` (shape ``(B,)``)."""
    cont, blocks = space.split(x1)
    s2 = sigma2.reshape(-1, 1)
    terms = []
    if space.n_continuous:
        resid = ops.sub(means, cont)
        quad = ops.sum_(ops.square(resid) * (0.5 / s2), axis=-1)
        const = space.n_continuous * 0.5 * (np.log(sigma2) + LOG_2PI)
        terms.append(quad + const)
    for lg, b in zip(logits, blocks):
        _check_one_hot(b)
        ce = -ops.sum_(ops.log_softmax(lg) * b, axis=-1)
        terms.append(ce * categorical_weight if categorical_weight != 1.0 else ce)
    out = terms[0]
    for term in terms[1:]:
        out = out + term
    return out


def time_features(t: np.ndarray, size: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    freqs = np.exp(np.linspace(0.0, np.log(50.0), size // 2))
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=-1)


class VariationalHead:
    """Shared plumbing; subclasses implement :meth:`forward`."""

    def __init__(self, space: SpaceSpec, config: HeadConfig, seed: int = 0):
        self.space = space
        self.config = config
        self.seed = int(seed)
        self.params = ParamStore()
        self._build(np.random.default_rng([self.seed, 7]))

    # -- parameter helpers
    def _dense(self, rng, name, n_in, n_out, zero=False, bias=True):
        w = np.zeros((n_in, n_out)) if zero else rng.normal(size=(n_in, n_out)) / np.sqrt(n_in)
        self.params.add(name + ".w", w)
        if bias:
            self.params.add(name + ".b", np.zeros(n_out))

    @staticmethod
    def _apply(p, name, x, bias=True):
        return ops.dense(x, p[name + ".w"], p[name + ".b"] if bias else None)

    @property
    def label_width(self) -> int:
        if not self.config.conditioned:
            return 0
        return self.config.n_label_classes if self.config.label_kind == "categorical" else 1

    def label_features(self, y, batch: int) -> Optional[np.ndarray]:
        if not self.config.conditioned:
            if y is not None:
                raise UsageError("label passed to an unconditioned head")
            return None
        if y is None:
            raise UsageError("conditioned head needs a label y")
        y = np.broadcast_to(np.asarray(y, dtype=np.float64), (batch,))
        if self.config.label_kind == "categorical":
            idx = y.astype(np.int64)
            if np.any(idx != y) or np.any(idx < 0) or np.any(idx >= self.config.n_label_classes):
                raise DataError("categorical labels must be integers in [0, n_label_classes)")
            return np.eye(self.config.n_label_classes)[idx]
        return y.reshape(-1, 1).copy()

    def sigma2(self, t) -> np.ndarray:
        return sigma2_schedule(t, self.config.sigma_base, self.config.t_clamp)

    def _prep(self, x, t):
        xv = x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if xv.ndim != 2:
            raise StructuralError("heads expect batched states of shape (B, D)")
        self.space.check(xv)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (xv.shape[0],)).copy()
        return ops.as_tensor(x), t

    def forward(self, params: dict, x, t, y=None):
        raise NotImplementedError

    def posterior_params(self, x, t, y=None) -> MeanFieldPosterior:
        xv = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (xv.shape[0],))
        means, logits = self.forward(self.params.constants(), xv, t, y)
        return MeanFieldPosterior(means.value, self.sigma2(t), [l.value for l in logits])

    def meta(self) -> dict:
        return {"space": self.space.to_dict(), "head": self.config.to_dict(), "seed": self.seed}

    def randomize_outputs(self, rng: np.random.Generator, scale: float = 1.0) -> None:
        """Give zero-initialised output layers random weights (used by audits)."""
        for k, v in self.params.values.items():
            if k.endswith(".w") and not np.any(v):
                v[...] = scale * rng.normal(size=v.shape) / np.sqrt(v.shape[0])


class MLPHead(VariationalHead):
    """Unconstrained multilayer perceptron on the flat state."""

    def _build(self, rng):
        cfg, sp = self.config, self.space
        n_in = sp.dim + cfg.time_embed
        widths = cfg.hidden
        self._dense(rng, "in", n_in, widths[0])
        for i in range(1, len(widths)):
            self._dense(rng, f"h{i}", widths[i - 1], widths[i])
        self._dense(rng, "out", widths[-1], sp.dim, zero=cfg.zero_init)
        if cfg.conditioned:
            self._dense(rng, "label", self.label_width, widths[0], zero=True, bias=False)

    def forward(self, params, x, t, y=None):
        x, t = self._prep(x, t)
        sp, cfg = self.space, self.config
        yf = self.label_features(y, x.shape[0])
        inp = ops.concat([x, time_features(t, cfg.time_embed)], axis=-1)
        h = self._apply(params, "in", inp)
        if yf is not None:
            h = h + self._apply(params, "label", yf, bias=False)
        h = ops.silu(h)
        for i in range(1, len(cfg.hidden)):
            h = ops.silu(self._apply(params, f"h{i}", h))
        out = self._apply(params, "out", h)
        dc = sp.n_continuous
        means = ops.getitem(x, (slice(None), slice(0, dc))) + ops.getitem(out, (slice(None), slice(0, dc))) * (1.0 - t).reshape(-1, 1)
        logits = [ops.getitem(out, (slice(None), s)) for s in sp.block_slices()]
        return means, logits


class EquivariantHead(VariationalHead):
    """EGNN-style head for typed point clouds.

    Messages depend on node features and squared distances only; coordinate
    updates are weighted sums of relative vectors of the centred cloud, so
    means are E(d)-equivariant (translations via the centre of mass) and
    type logits are invariant to rotations and equivariant to permutations.
    """

    def _build(self, rng):
        cfg, sp = self.config, self.space
        if sp.point_shape is None:
            raise ConfigError("the equivariant head needs a point-cloud space")
        n, d = sp.point_shape
        if n < 2:
            raise ConfigError("equivariant head needs at least two points")
        k = sp.categorical[0] if sp.categorical else 0
        if len(set(sp.categorical)) > 1:
            raise ConfigError("all point types must share one cardinality")
        self.n_types = k
        hdim = cfg.hidden[0]
        self._dense(rng, "embed", k + cfg.time_embed + 1, hdim)
        if cfg.conditioned:
            self._dense(rng, "label", self.label_width, hdim, zero=True, bias=False)
        for r in range(cfg.n_rounds):
            self._dense(rng, f"r{r}.msg_i", hdim, hdim)
            self._dense(rng, f"r{r}.msg_j", hdim, hdim, bias=False)
            self.params.add(f"r{r}.msg_d", rng.normal(size=(hdim,)))
            self._dense(rng, f"r{r}.msg2", hdim, hdim)
            self._dense(rng, f"r{r}.coord", hdim, 1, zero=cfg.zero_init)
            self._dense(rng, f"r{r}.node1", 2 * hdim, hdim)
            self._dense(rng, f"r{r}.node2", hdim, hdim)
        if k:
            self._dense(rng, "type1", hdim, hdim)
            self._dense(rng, "type2", hdim, k, zero=cfg.zero_init)

    def forward(self, params, x, t, y=None):
        x, t = self._prep(x, t)
        sp, cfg = self.space, self.config
        n, d = sp.point_shape
        b = x.shape[0]
        hdim = cfg.hidden[0]
        pts = ops.reshape(ops.getitem(x, (slice(None), slice(0, sp.n_continuous))), (b, n, d))
        centred = ops.mean_center(pts, axis=-2)
        temb = np.broadcast_to(time_features(t, cfg.time_embed)[:, None, :], (b, n, cfg.time_embed))
        # squashed squared radius, so a runaway cloud cannot feed back into the messages
        radial = ops.tanh(ops.sum_(ops.square(centred), axis=-1, keepdims=True) * 0.25)
        if self.n_types:
            types = ops.reshape(ops.getitem(x, (slice(None), slice(sp.n_continuous, sp.dim))), (b, n, self.n_types))
            node_in = ops.concat([types, temb, radial], axis=-1)
        else:
            node_in = ops.concat([temb, radial], axis=-1)
        h = self._apply(params, "embed", node_in)
        yf = self.label_features(y, b)
        if yf is not None:
            h = h + ops.reshape(self._apply(params, "label", yf, bias=False), (b, 1, hdim))
        h = ops.silu(h)
        mask = (1.0 - np.eye(n)).reshape(1, n, n, 1)
        coords = centred
        for r in range(cfg.n_rounds):
            diff = ops.pairwise_diff(coords)
            d2 = ops.sum_(ops.square(diff), axis=-1, keepdims=True)
            hi = ops.reshape(self._apply(params, f"r{r}.msg_i", h), (b, n, 1, hdim))
            hj = ops.reshape(self._apply(params, f"r{r}.msg_j", h, bias=False), (b, 1, n, hdim))
            m = ops.silu(hi + hj + d2 * params[f"r{r}.msg_d"])
            m = ops.silu(self._apply(params, f"r{r}.msg2", m)) * mask
            # bounded weights keep each round's displacement within a few inter-point spacings
            w = ops.tanh(self._apply(params, f"r{r}.coord", m)) * COORD_GAIN
            coords = coords + ops.sum_(diff * w * mask, axis=-2) * (1.0 / (n - 1))
            agg = ops.sum_(m, axis=-2) * (1.0 / (n - 1))
            upd = self._apply(params, f"r{r}.node2", ops.silu(self._apply(params, f"r{r}.node1", ops.concat([h, agg], axis=-1))))
            h = h + upd
        delta = ops.reshape(coords - centred, (b, n * d))
        means = ops.reshape(pts, (b, n * d)) + delta * (1.0 - t).reshape(-1, 1)
        logits = []
        if self.n_types:
            lg = self._apply(params, "type2", ops.silu(self._apply(params, "type1", h)))
            logits = [ops.getitem(lg, (slice(None), i, slice(None))) for i in range(n)]
        return means, logits

    def equivariant_forward(self, points, types, t, y=None) -> MeanFieldPosterior:
        """Convenience entry point taking ``points (B, N, d)`` and integer ``types (B, N)``."""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 2:
            points = points[None]
        b, n, d = points.shape
        if n < 2:
            raise DataError("need at least two points")
        if (n, d) != self.space.point_shape:
            raise StructuralError(f"cloud shape {(n, d)} != {self.space.point_shape}")
        flat = [points.reshape(b, n * d)]
        if self.n_types:
            flat.append(np.eye(self.n_types)[np.asarray(types, dtype=np.int64).reshape(b, n)].reshape(b, -1))
        return self.posterior_params(np.concatenate(flat, axis=-1), t, y)


def make_head(space: SpaceSpec, config: HeadConfig, seed: int = 0) -> VariationalHead:
    cls = EquivariantHead if config.architecture == "equivariant" else MLPHead
    return cls(space, config, seed)


def posterior_params(head: VariationalHead, x, t, y=None) -> MeanFieldPosterior:
    return head.posterior_params(x, t, y)


def save_head(head: VariationalHead, path, extra: Optional[dict] = None) -> None:
    meta = head.meta()
    meta.update(extra or {})
    head.params.save(path, meta)


def load_head(path) -> tuple[VariationalHead, dict]:
    store, meta = ParamStore.load(path)
    head = make_head(SpaceSpec.from_dict(meta["space"]), HeadConfig.from_dict(meta["head"]), meta.get("seed", 0))
    if list(store.values) != list(head.params.values):
        raise StructuralError("checkpoint parameters do not match the recorded architecture")
    head.params = store
    return head, meta
