import numpy as np
import pytest
from hypothesis import given, strategies as st

from cvfm.errors import ConfigError, StructuralError
from cvfm.heads import HeadConfig, make_head
from cvfm.path import SpaceSpec, conditional_velocity
from cvfm.sampling import IntegratorConfig
from cvfm.symmetry import (EXACT_TOL, HEAD_TOL, TRAJ_TOL, GroupElement, InvariantPrior, act, audit_bi_equivariance,
                           audit_marginal_invariance, audit_model_equivariance, audit_prior_invariance,
                           group_sampler, identity, permutation, prior_sample, random_element, random_rotation,
                           rotation, translation)

CLOUD = SpaceSpec(12, (2,) * 4, (4, 3))
PLANE = SpaceSpec(10, (3,) * 5, (5, 2))
seeds = st.integers(0, 2 ** 31)


@given(seeds)
def test_random_rotation_is_special_orthogonal(seed):
    q = random_rotation(3, np.random.default_rng(seed))
    assert np.allclose(q.T @ q, np.eye(3), atol=1e-12) and abs(np.linalg.det(q) - 1) < 1e-12


def test_rotation_validation():
    with pytest.raises(StructuralError):
        rotation(np.diag([1.0, -1.0]))
    with pytest.raises(StructuralError):
        GroupElement([0, 0], np.eye(2), np.zeros(2))


@given(seeds)
def test_group_axioms(seed):
    rng = np.random.default_rng(seed)
    kinds = ("permutation", "rotation", "translation")
    g, h = random_element(4, 3, rng, kinds), random_element(4, 3, rng, kinds)
    x = rng.normal(size=(3, CLOUD.dim))
    assert np.max(np.abs(act(g.compose(h), x, CLOUD) - act(g, act(h, x, CLOUD), CLOUD))) <= 1e-12
    assert np.max(np.abs(act(g.inverse(), act(g, x, CLOUD), CLOUD) - x)) <= 1e-12
    assert np.array_equal(act(identity(4, 3), x, CLOUD), x)


def test_types_follow_points(rng):
    x = np.concatenate([np.arange(12.0), np.eye(2)[[0, 1, 1, 0]].ravel()])
    gx = act(permutation([2, 0, 3, 1]), x, CLOUD)
    assert np.array_equal(CLOUD.points(gx)[0], [6.0, 7.0, 8.0])
    assert list(CLOUD.decode(gx)) == [1, 0, 0, 1]


def test_translation_and_linear_action(rng):
    x = rng.normal(size=CLOUD.dim)
    g = translation([1.0, 2.0, 3.0])
    assert np.allclose(CLOUD.points(act(g, x, CLOUD)) - CLOUD.points(x), [1.0, 2.0, 3.0])
    assert np.array_equal(act(g, x, CLOUD, linear=True), x)


def test_bi_equivariance_exact(rng):
    assert audit_bi_equivariance(CLOUD, 50, rng) <= EXACT_TOL
    assert audit_bi_equivariance(CLOUD, 50, rng, kinds=("translation",)) <= EXACT_TOL


def test_bi_equivariance_negative_control(rng):
    bias = np.zeros(CLOUD.dim)
    bias[0] = 1.0
    broken = lambda x, x1, t: conditional_velocity(x, x1 + bias, t)
    assert audit_bi_equivariance(CLOUD, 20, rng, velocity=broken) > 0.1


@pytest.mark.parametrize("space", [CLOUD, PLANE])
def test_equivariant_head_audit(space, rng):
    head = make_head(space, HeadConfig(architecture="equivariant", hidden=(16,), n_rounds=2, time_embed=4))
    head.randomize_outputs(rng)
    rep = audit_model_equivariance(head, group_sampler(space), 10, rng, prior=InvariantPrior("zero_com_gaussian"))
    assert rep.passed(HEAD_TOL)
    rep_t = audit_model_equivariance(head, group_sampler(space, ("translation",)), 5, rng)
    assert rep_t.passed(HEAD_TOL)


def test_mlp_head_fails_audit(rng):
    head = make_head(PLANE, HeadConfig(architecture="mlp", hidden=(32, 32), time_embed=4))
    head.randomize_outputs(rng)
    rep = audit_model_equivariance(head, group_sampler(PLANE), 10, rng)
    assert rep.expectation_residual > 0.1


def test_identity_sampler_is_trivial(rng):
    head = make_head(PLANE, HeadConfig(architecture="mlp", hidden=(8,), time_embed=4))
    head.randomize_outputs(rng)
    rep = audit_model_equivariance(head, group_sampler(PLANE, ()), 3, rng)
    assert rep.expectation_residual <= 1e-15


def test_zero_com_prior(rng):
    x = prior_sample(InvariantPrior("zero_com_gaussian"), PLANE, rng, 1000)
    assert np.max(np.abs(PLANE.points(x).mean(axis=1))) <= 1e-12
    with pytest.raises(ConfigError):
        prior_sample(InvariantPrior("zero_com_gaussian"), SpaceSpec(2), rng, 1)
    with pytest.raises(ConfigError):
        InvariantPrior(categorical="uniform")


def test_prior_invariance(rng):
    rep = audit_prior_invariance(InvariantPrior("zero_com_gaussian"), PLANE, group_sampler(PLANE), rng, n=20_000)
    assert rep["norm_residual"] <= 1e-12 and rep["com_residual"] <= 1e-12
    assert rep["moment_deviation"] < 3 * np.sqrt(2 * 2 * 10 * 10 / 20_000)


def test_marginal_audit(rng):
    prior = InvariantPrior("zero_com_gaussian")
    eq = make_head(PLANE, HeadConfig(architecture="equivariant", hidden=(16,), n_rounds=2, time_embed=4))
    eq.randomize_outputs(rng)
    rep = audit_marginal_invariance(eq, prior, IntegratorConfig("euler", 100), 2, rng, batch=16)
    assert rep.trajectory_residual <= TRAJ_TOL
    one = audit_marginal_invariance(eq, prior, IntegratorConfig("euler", 1), 2, rng, batch=16)
    assert one.trajectory_residual <= HEAD_TOL
    mlp = make_head(PLANE, HeadConfig(architecture="mlp", hidden=(32, 32), time_embed=4))
    mlp.randomize_outputs(rng)
    bad = audit_marginal_invariance(mlp, prior, IntegratorConfig("euler", 20), 1, rng, batch=16)
    assert bad.trajectory_residual > 0.1
