import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cvfm.autodiff import ParamStore, Tape, Tensor, adam_step, grad, grad_check, ops
from cvfm.errors import FormatError, NumericError, UsageError

small = arrays(np.float64, (3, 4), elements=st.floats(-2, 2))


def test_grad_examples():
    # d/dx of x*x + sin-free composite at a known point
    v, g = grad(lambda x: ops.sum_(x * x * 3.0), np.array([1.0, -2.0]))
    assert v == 15.0 and np.array_equal(g, [6.0, -12.0])
    _, g = grad(lambda x: ops.sum_(ops.exp(x)), np.zeros(3))
    assert np.array_equal(g, np.ones(3))


UNARY = {
    "tanh": ops.tanh, "sigmoid": ops.sigmoid, "silu": ops.silu, "square": ops.square, "neg": ops.neg,
    "softmax": lambda x: ops.softmax(x) * np.arange(4.0), "log_softmax": lambda x: ops.log_softmax(x) * np.arange(4.0),
    "exp": lambda x: ops.exp(x * 0.5), "mean_center": lambda x: ops.square(ops.mean_center(x, axis=0)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(x=small)
def test_unary_grad_check(name, x):
    assert grad_check(lambda t: ops.sum_(UNARY[name](t)), x) <= 1e-4


@given(x=small)
def test_positive_domain_ops(x):
    y = np.abs(x) + 0.5
    assert grad_check(lambda t: ops.sum_(ops.sqrt(t) + ops.log(t) + 1.0 / t), y) <= 1e-4


@given(x=small)
def test_broadcast_and_reductions(x):
    w = np.linspace(-1, 1, 4)

    def f(t):
        return ops.mean(ops.sum_(t * w, axis=0) + ops.sum_(t, axis=1, keepdims=True)) + ops.sum_(t[1:, ::2])

    assert grad_check(f, x) <= 1e-4


def test_linear_algebra_ops(rng):
    w = rng.normal(size=(4, 5))
    b = rng.normal(size=5)
    x = rng.normal(size=(2, 3, 4))
    assert grad_check(lambda t: ops.sum_(ops.tanh(ops.dense(t, w, b))), x) <= 1e-4
    assert grad_check(lambda t: ops.sum_(ops.square(ops.dense(x, t, b))), w) <= 1e-4
    assert grad_check(lambda t: ops.sum_(ops.square(ops.matmul(t, w))), x[0]) <= 1e-4
    cat = lambda t: ops.sum_(ops.square(ops.concat([t, t * 2.0], axis=-1)))
    assert grad_check(cat, x) <= 1e-4


def test_pairwise_ops(rng):
    pts = rng.normal(size=(2, 5, 3))
    assert grad_check(lambda t: ops.sum_(ops.pairwise_sqdist(t)), pts) <= 1e-4
    mask = 1.0 - np.eye(5)
    assert grad_check(lambda t: ops.sum_(ops.pairwise_distance(t) * mask), pts) <= 1e-4
    assert grad_check(lambda t: ops.sum_(ops.square(ops.pairwise_diff(t)) * np.arange(3.0)), pts) <= 1e-4


def test_shared_subexpression_accumulates():
    _, g = grad(lambda x: ops.sum_(x * x + x), np.array([2.0]))
    assert g[0] == 5.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_node_is_reported():
    with pytest.raises(NumericError) as err:
        with Tape() as tape:
            x = Tensor(np.array([0.0]), requires_grad=True)
            tape.backward(ops.sum_(ops.log(x)))
    assert err.value.index is not None


def test_backward_foreign_output():
    with Tape() as t1:
        x = Tensor(np.ones(2), requires_grad=True)
        y = ops.sum_(x * 2.0)
    with Tape() as t2:
        with pytest.raises(UsageError):
            t2.backward(y)


def test_constants_are_not_recorded():
    with Tape() as tape:
        out = ops.sum_(Tensor(np.ones(3)) * 2.0)
    assert len(tape.nodes) == 0 and out.value == 6.0


class TestParams:
    def test_adam_first_step_is_lr_sign(self):
        p = ParamStore()
        p.add("w", [1.0, -1.0, 0.0])
        adam_step(p, {"w": np.array([0.5, -2.0, 0.0])}, lr=0.1)
        assert np.allclose(p["w"], [0.9, -0.9, 0.0])

    def test_adam_minimises_quadratic(self):
        p = ParamStore()
        p.add("w", [3.0, -4.0])
        for _ in range(2000):
            leaves = p.leaves()
            with Tape() as tape:
                tape.backward(ops.sum_(ops.square(leaves["w"] - 1.0)))
            p.collect(leaves)
            p.adam_step(0.05)
        assert np.allclose(p["w"], 1.0, atol=1e-3)

    def test_non_finite_gradient_skips(self):
        p = ParamStore()
        p.add("w", [1.0])
        p.grads["w"] = np.array([np.nan])
        assert p.adam_step(0.1) is False and p["w"][0] == 1.0 and p.step == 0

    def test_checkpoint_roundtrip(self, tmp_path, rng):
        p = ParamStore()
        p.add("a", rng.normal(size=(2, 3)))
        p.add("b", rng.normal(size=4))
        p.grads["a"] = rng.normal(size=(2, 3))
        p.grads["b"] = rng.normal(size=4)
        p.adam_step(0.01)
        p.save(tmp_path / "c.bin", {"note": "x"})
        q, meta = ParamStore.load(tmp_path / "c.bin")
        assert meta == {"note": "x"} and q.step == 1
        for k in p:
            assert np.array_equal(p[k], q[k]) and np.array_equal(p.m[k], q.m[k]) and np.array_equal(p.v[k], q.v[k])

    def test_corrupted_checkpoint(self, tmp_path):
        p = ParamStore()
        p.add("a", [1.0])
        p.save(tmp_path / "c.bin")
        raw = bytearray((tmp_path / "c.bin").read_bytes())
        raw[15] ^= 0xFF
        (tmp_path / "c.bin").write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            ParamStore.load(tmp_path / "c.bin")
