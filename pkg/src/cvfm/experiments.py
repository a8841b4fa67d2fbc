"""Desk-scale experiment pipelines shared by ``scripts/`` and the acceptance tests.

Each function trains (or takes) a head, samples from it and returns a plain
dict of numbers so callers can print, log or assert on them.
"""
from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .guidance import make_likelihood
from .heads import VariationalHead
from .metrics import marginal_tv, property_mae, sliced_w2, validity_rate
from .sampling import Conditioned, GuidanceConfig, Guided, IntegratorConfig, Unconditional, sample
from .symmetry import prior_sample
from .training import GaussMixture, TrainConfig, eval_loss, make_dataset, train

CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"


def load_train_config(name_or_path, **overrides) -> TrainConfig:
    """``TrainConfig`` from a shipped config name (``"ring"``) or a JSON path, with field overrides."""
    p = Path(name_or_path)
    if not p.suffix:
        p = CONFIG_DIR / f"{name_or_path}.json"
    data = json.loads(p.read_text())
    tc = dict(data.get("train", data))
    if data.get("loss") == "controlled-vfm":
        tc["conditioned"] = True
    tc.update(overrides)
    return TrainConfig.from_dict(tc)


def _timed_train(cfg: TrainConfig, out_dir=None):
    t0 = time.perf_counter()
    res = train(cfg, out_dir)
    return res, time.perf_counter() - t0


def ring_experiment(cfg: Optional[TrainConfig] = None, n: int = 4000, seed: int = 0) -> dict:
    """Unconditional 8-Gaussian ring: sliced-W2 of model samples against fresh data, plus the data floor."""
    cfg = cfg or load_train_config("ring")
    res, secs = _timed_train(cfg)
    ds = make_dataset(cfg.dataset)
    rng = np.random.default_rng([seed, 7])
    ref = ds.sample_x1(n, rng)
    other = ds.sample_x1(n, rng)
    out = sample(res.head, n, IntegratorConfig("euler", 100), Unconditional(), rng)
    return {"sliced_w2": sliced_w2(out.states, ref, 64, np.random.default_rng(seed)),
            "floor": sliced_w2(other, ref, 64, np.random.default_rng(seed)),
            "final_loss": res.rows[-1]["loss"], "train_seconds": secs, "head": res.head}


def categorical_experiment(cfg: Optional[TrainConfig] = None, n: int = 4000, seed: int = 0) -> dict:
    cfg = cfg or load_train_config("categorical")
    res, secs = _timed_train(cfg)
    ds = make_dataset(cfg.dataset)
    out = sample(res.head, n, IntegratorConfig("euler", 100), Unconditional(), np.random.default_rng([seed, 7]),
                 prior=ds.prior)
    tv, worst = marginal_tv(out.categories, ds.probs)
    return {"max_tv": worst, "tv": tv, "train_seconds": secs, "head": res.head}


def conditioned_ring_experiment(cfg: Optional[TrainConfig] = None, n_per_class: int = 500, seed: int = 0,
                                control_value: float = 1.0) -> dict:
    """Label-conditioned ring: per-target hit rate by nearest centre, and the constant-label control.

    The control trains a conditioned head on a dataset whose label is always
    ``control_value`` and an unconditioned head on the same data, then compares
    their losses on one fixed evaluation batch.
    """
    cfg = cfg or load_train_config("ring_conditioned")
    res, secs = _timed_train(cfg)
    ds = make_dataset(cfg.dataset)
    assert isinstance(ds, GaussMixture)
    hits = []
    for k in range(len(ds.centers)):
        out = sample(res.head, n_per_class, IntegratorConfig("euler", 100), Conditioned(float(k)),
                     np.random.default_rng([seed, 11, k]), prior=ds.prior)
        hits.append(np.mean(ds.nearest_center(out.states) == k))
    const_ds = {**cfg.dataset, "property": "constant", "property_value": control_value}
    cond = train(TrainConfig.from_dict({**cfg.to_dict(), "dataset": const_ds, "conditioned": True})).head
    unc = train(TrainConfig.from_dict({**cfg.to_dict(), "dataset": const_ds, "conditioned": False})).head
    cds = make_dataset(const_ds)
    lc, lu = eval_loss(cond, cds), eval_loss(unc, cds)
    return {"hit_rate": float(np.mean(hits)), "min_hit_rate": float(np.min(hits)), "per_class": hits,
            "control_loss": lc, "unconditioned_loss": lu, "control_rel_gap": abs(lc - lu) / abs(lu),
            "train_seconds": secs, "head": res.head}


def polygon_experiment(cfg: Optional[TrainConfig] = None, n: int = 2000, seed: int = 0, out_dir=None) -> dict:
    """Train on typed polygon clouds and report the rule-based validity of generated clouds."""
    cfg = cfg or load_train_config("polygon_equivariant")
    res, secs = _timed_train(cfg, out_dir)
    ds = make_dataset(cfg.dataset)
    out = sample(res.head, n, IntegratorConfig("euler", 100), Unconditional(), np.random.default_rng([seed, 13]),
                 prior=ds.prior)
    return {"validity": validity_rate(out.states, ds), "train_seconds": secs, "head": res.head,
            "final_loss": res.rows[-1]["loss"], "architecture": cfg.head.architecture}


def guided_experiment(head: VariationalHead, dataset: dict, target: float = 1.2, n: int = 500, nfe: int = 100,
                      inner_steps: int = 5, sigma_y: float = 0.1, damping: float = 0.35, seed: int = 0) -> dict:
    """Post-hoc circumradius guidance on an unconditioned head against unguided sampling from the same noise."""
    ds = make_dataset(dataset)
    x0_rng = np.random.default_rng([seed, 17])
    x0 = prior_sample(ds.prior, ds.space, x0_rng, n)
    icfg = IntegratorConfig("euler", nfe, head.config.t_clamp)
    lik = make_likelihood({"name": "circumradius", "target": target, "sigma_y": sigma_y}, ds.space)
    rng = np.random.default_rng(seed)
    plain = sample(head, n, icfg, Unconditional(), rng, x0=x0)
    guided = sample(head, n, icfg, Guided(lik, GuidanceConfig(inner_steps, damping)), rng, x0=x0)
    zero = sample(head, n, icfg, Guided(lik, GuidanceConfig(0, damping)), rng, x0=x0)
    f = ds.prop if ds.prop is not None and ds.prop.name == "circumradius" else lik.prop
    mae_u = property_mae(plain.states, f, target)
    mae_g = property_mae(guided.states, f, target)
    return {"mae_unguided": mae_u, "mae_guided": mae_g, "ratio": mae_g / mae_u,
            "s0_identical": bool(np.array_equal(zero.states, plain.states)),
            "guided_validity": validity_rate(guided.states, ds) if hasattr(ds, "is_valid") else float("nan"),
            "diverged_refinements": guided.diverged_refinements, "nfe": guided.nfe}
