"""Variational flow-matching objectives."""
from __future__ import annotations

from typing import Optional

import numpy as np

from ..autodiff import Tensor, ops
from ..errors import DataError, UsageError
from ..heads import VariationalHead, neg_log_prob_tensor
from ..path import ConditionalVelocitySpec, interpolate, sample_time
from .datasets import Batch


def _nll(head: VariationalHead, batch: Batch, rng: np.random.Generator, y, params, categorical_weight: float) -> Tensor:
    n = len(batch)
    if n == 0:
        raise DataError("empty batch")
    t = sample_time(rng, n, ConditionalVelocitySpec(t_clamp=head.config.t_clamp))
    # x_t never sees y: the label enters only through the posterior
    xt = interpolate(batch.x0, batch.x1, t)
    params = head.params.constants() if params is None else params
    means, logits = head.forward(params, xt, t, y)
    nll = neg_log_prob_tensor(means, logits, head.sigma2(t), batch.x1, head.space, categorical_weight)
    return ops.mean(nll)


def vfm_loss(head: VariationalHead, batch: Batch, rng: np.random.Generator, params: Optional[dict] = None,
             categorical_weight: float = 1.0) -> Tensor:
    """Batch mean of ``-log q(x1 | x_t, t)`` with ``t ~ U[0, 1 - eps)``."""
    if head.config.conditioned:
        raise UsageError("vfm_loss needs an unconditioned head; use controlled_vfm_loss")
    return _nll(head, batch, rng, None, params, categorical_weight)


def controlled_vfm_loss(head: VariationalHead, batch: Batch, rng: np.random.Generator, params: Optional[dict] = None,
                        categorical_weight: float = 1.0) -> Tensor:
    """Batch mean of ``-log q(x1 | x_t, t, y)``; same draws as :func:`vfm_loss` for equal rng state."""
    if not head.config.conditioned:
        raise UsageError("controlled_vfm_loss needs a label-conditioned head")
    if batch.y is None:
        raise DataError("controlled_vfm_loss needs a labelled batch")
    return _nll(head, batch, rng, batch.y, params, categorical_weight)
