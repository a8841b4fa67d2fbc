import numpy as np
import pytest

from cvfm.errors import ConfigError, NumericError, UsageError
from cvfm.guidance import make_likelihood
from cvfm.heads import HeadConfig, make_head
from cvfm.path import SpaceSpec
from cvfm.sampling import (Conditioned, GuidanceConfig, Guided, IntegratorConfig, Unconditional, continuity_residual,
                           controlled_density, controlled_velocity, integrate, sample, velocity_field)

CLOUD = SpaceSpec(8, (2,) * 4, (4, 2))


def tiny(space=CLOUD, **kw):
    head = make_head(space, HeadConfig(architecture="mlp", hidden=(16, 16), time_embed=4, **kw), seed=1)
    head.randomize_outputs(np.random.default_rng(5), 0.3)
    return head


def test_euler_on_linear_field_matches_product_formula():
    cfg = IntegratorConfig("euler", 50)
    traj = integrate(lambda x, t: -x, np.ones((1, 1)), cfg)
    assert np.isclose(traj.final[0, 0], (1 - 1 / 50) ** 50)
    assert traj.nfe == 50 and traj.states.shape == (51, 1, 1)
    assert traj.times[0] == 0.0 and traj.times[-1] == 1 - 1e-5


def test_rk4_order():
    errs = []
    for k in (5, 10):
        cfg = IntegratorConfig("rk4", k, t_clamp=1e-14)
        x = integrate(lambda x, t: np.cos(t) * np.ones_like(x), np.zeros((1, 1)), cfg).final
        errs.append(abs(x[0, 0] - np.sin(1.0)))
    assert errs[1] < errs[0] / 10
    assert integrate(lambda x, t: x, np.zeros((1, 1)), IntegratorConfig("rk4", 25)).nfe == 100


def test_straight_line_velocity_is_exact():
    # the optimal-transport velocity toward a fixed endpoint lands on it in one Euler step per unit
    x1 = np.array([[2.0, -1.0]])
    field_ = lambda x, t: (x1 - x) / (1 - t)
    out = integrate(field_, np.zeros((1, 2)), IntegratorConfig("euler", 10)).final
    assert np.allclose(out, x1, atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_reports_step():
    with pytest.raises(NumericError) as err:
        integrate(lambda x, t: x * 1e200, np.ones((1, 1)), IntegratorConfig("euler", 10))
    assert err.value.index == 1


def test_integrator_validation():
    with pytest.raises(ConfigError):
        IntegratorConfig("heun")
    with pytest.raises(ConfigError):
        IntegratorConfig(steps=0)


def test_final_categorical_blocks_on_simplex(rng):
    res = sample(tiny(), 8, IntegratorConfig("euler", 20), Unconditional(), rng)
    blocks = res.states[:, 8:].reshape(8, 4, 2)
    assert np.all(blocks >= 0) and np.allclose(blocks.sum(-1), 1.0)
    assert res.categories.shape == (8, 4) and res.nfe == 20


def test_guided_zero_inner_steps_is_bit_identical():
    head = tiny()
    lik = make_likelihood({"name": "circumradius", "target": 1.0, "sigma_y": 0.1}, CLOUD)
    cfg = IntegratorConfig("euler", 30)
    a = sample(head, 16, cfg, Unconditional(), np.random.default_rng(7))
    b = sample(head, 16, cfg, Guided(lik, GuidanceConfig(inner_steps=0)), np.random.default_rng(7))
    assert np.array_equal(a.states, b.states) and a.nfe == b.nfe


def test_guidance_moves_property_toward_target():
    head = tiny()
    lik = make_likelihood({"name": "circumradius", "target": 2.0, "sigma_y": 0.2}, CLOUD)
    cfg = IntegratorConfig("euler", 40)
    a = sample(head, 64, cfg, Unconditional(), np.random.default_rng(7))
    b = sample(head, 64, cfg, Guided(lik, GuidanceConfig(inner_steps=5, damping=0.5)), np.random.default_rng(7))
    f = make_likelihood({"name": "circumradius", "target": 2.0}, CLOUD).prop
    assert np.mean(np.abs(f(b.states) - 2.0)) < np.mean(np.abs(f(a.states) - 2.0))


def test_mode_head_mismatch(rng):
    head = tiny()
    with pytest.raises(UsageError):
        sample(head, 2, IntegratorConfig(steps=2), Conditioned(1.0), rng)
    cond = tiny(conditioned=True)
    with pytest.raises(UsageError):
        sample(cond, 2, IntegratorConfig(steps=2), Unconditional(), rng)
    out = sample(cond, 2, IntegratorConfig(steps=2), Conditioned(1.0), rng)
    assert out.mode == "conditioned"


def test_velocity_field_of_untrained_head_points_nowhere(rng):
    head = make_head(CLOUD, HeadConfig(hidden=(8,), time_embed=4))
    x = rng.normal(size=(3, CLOUD.dim))
    v = velocity_field(head, x, 0.4)
    assert np.allclose(v[:, :8], 0.0)


def test_controlled_velocity_single_endpoint():
    xs = np.linspace(-2, 2, 5)
    assert np.allclose(controlled_velocity(xs, 0.3, [1.5], [1.0]), (1.5 - xs) / 0.7)


def test_controlled_density_normalised():
    xs = np.linspace(-12, 12, 4001)
    p = controlled_density(xs, 0.6, [-1.0, 2.0], [0.3, 0.7])
    assert abs(np.trapezoid(p, xs) - 1.0) < 1e-9


def test_continuity_equation_holds():
    res = continuity_residual([-1.0, 2.0], [0.3, 0.7], [0.1, 0.3, 0.5, 0.7, 0.9], np.linspace(-4, 4, 161))
    assert res <= 1e-3


def test_continuity_equation_detects_wrong_velocity():
    # dropping the posterior reweighting breaks the identity
    import cvfm.sampling as S
    xs = np.linspace(-4, 4, 161)
    t, h = 0.5, 1e-5
    ends, w = [-1.0, 2.0], [0.3, 0.7]
    wrong = lambda z: S.controlled_density(z, t, ends, w) * np.dot(w, (np.array(ends) - z[:, None]).T) / (1 - t)
    dpdt = (S.controlled_density(xs, t + h, ends, w) - S.controlled_density(xs, t - h, ends, w)) / (2 * h)
    assert np.max(np.abs(dpdt + (wrong(xs + h) - wrong(xs - h)) / (2 * h))) > 1e-2
