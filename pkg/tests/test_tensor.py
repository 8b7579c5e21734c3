import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate

from drm import tensor as tg
from drm.tensor import Node


def leaf(x):
    return Node(np.asarray(x, dtype=float), requires_grad=True)


def test_relu_values():
    assert np.array_equal(tg.relu(Node([-1.0, 0.0, 2.0])).value, [0, 0, 2])


def test_l2_normalize_three_four_five():
    np.testing.assert_allclose(tg.l2_normalize(Node([3.0, 4.0])).value, [0.6, 0.8])


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal((Node(np.eye(3)) @ Node(a)).value, a)


def test_grad_of_sum_of_squares():
    w = leaf([1.0, 2.0])
    tg.sum_(w * w).backward()
    np.testing.assert_allclose(w.grad, [2.0, 4.0])


def test_sigmoid_grad_at_zero():
    x = leaf(0.0)
    tg.sigmoid(x).backward()
    assert x.grad == pytest.approx(0.25)


def test_shared_subgraph_sums_paths():
    x = leaf(1.5)
    (x + x).backward()
    assert x.grad == 2.0


def test_backward_accumulates_until_reset():
    x = leaf(3.0)
    y = x * x
    y.backward()
    y.backward()
    assert x.grad == pytest.approx(12.0)
    x.zero_grad()
    y.backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_needs_scalar_root():
    with pytest.raises(tg.ShapeError, match=r"\(2,\)"):
        leaf([1.0, 2.0]).backward()


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(tg.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        tg.matmul(Node(np.ones((2, 3))), Node(np.ones((4, 5))))
    with pytest.raises(tg.ShapeError, match=r"\(3,\).*\(4,\)"):
        Node(np.ones(3)) + Node(np.ones(4))


def test_non_finite_values_are_errors():
    with pytest.raises(FloatingPointError):
        tg.log(Node([0.0]))
    with pytest.raises(FloatingPointError):
        Node([np.nan])


def test_grad_check_square():
    x = leaf(3.0)
    assert tg.grad_check(lambda: x * x, [x]) < 1e-6


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(1)
    w1, b1 = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=5))
    w2 = leaf(rng.normal(size=(5, 3)))
    x = rng.normal(size=(6, 4))
    y = rng.integers(0, 3, 6)

    def loss():
        return tg.softmax_cross_entropy(tg.tanh(x @ w1 + b1) @ w2, y)

    assert tg.grad_check(loss, [w1, b1, w2]) < 1e-4


def test_cross_entropy_stable_for_huge_logits():
    logits = Node(np.array([[1e4, -1e4], [-1e4, 1e4], [5e3, 5e3]]), requires_grad=True)
    loss = tg.softmax_cross_entropy(logits, np.array([0, 0, 1]))
    # second row is confidently wrong: loss 2e4; third row ties: log 2
    assert loss.item() == pytest.approx((2e4 + np.log(2)) / 3)
    loss.backward()
    assert np.all(np.isfinite(logits.grad))


def test_sign_has_zero_gradient():
    x = leaf([-2.0, 0.5])
    tg.sum_(tg.sign(x) * 3.0).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_conv2d_matches_scipy_correlate():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = tg.conv2d(Node(x), Node(w), Node(b), stride=1, padding=1).value
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for n in range(2):
        for o in range(4):
            ref = correlate(xp[n], w[o], mode="valid")[0] + b[o]
            np.testing.assert_allclose(out[n, o], ref, atol=1e-12)


def test_conv2d_stride_shape_and_values():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(1, 2, 9, 9)), rng.normal(size=(3, 2, 3, 3))
    out = tg.conv2d(Node(x), Node(w), stride=2).value
    assert out.shape == (1, 3, 4, 4)
    full = np.stack([correlate(x[0], w[o], mode="valid")[0] for o in range(3)])
    np.testing.assert_allclose(out[0], full[:, ::2, ::2], atol=1e-12)


def test_maxpool_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(tg.maxpool2d(Node(x), 2).value[0, 0], [[5, 7], [13, 15]])


def test_conv_and_pool_gradients():
    rng = np.random.default_rng(4)
    x = leaf(rng.normal(size=(2, 2, 6, 6)))
    w = leaf(rng.normal(size=(3, 2, 3, 3)))
    b = leaf(rng.normal(size=3))
    r = rng.normal(size=(2, 3, 3, 3))

    def f():
        h = tg.conv2d(x, w, b, stride=1, padding=1)
        return tg.sum_(tg.maxpool2d(h, 2) * r)

    assert tg.grad_check(f, [x, w, b]) < 1e-4


# one builder per registered op; inputs kept away from kinks (relu, abs at 0)
UNARY = {
    "tanh": tg.tanh, "sigmoid": tg.sigmoid, "exp": tg.exp, "relu": tg.relu, "neg": tg.neg,
    "abs": tg.abs_, "log": lambda a: tg.log(tg.abs_(a) + 0.5),
    "power": lambda a: tg.power(tg.abs_(a) + 0.5, 2.5),
    "abs_power": lambda a: tg.abs_power(a, 2.0),
    "sum": lambda a: tg.sum_(a, axis=1), "mean": lambda a: tg.mean(a, axis=0),
    "reshape": lambda a: tg.reshape(a, (-1,)), "transpose": lambda a: a.T,
    "l2_normalize": tg.l2_normalize, "getitem": lambda a: a[1:, ::2],
    "concat": lambda a: tg.concat([a, a * 2.0], axis=1), "stack": lambda a: tg.stack([a, a], 0),
}
BINARY = {
    "add": tg.add, "sub": tg.sub, "mul": tg.mul,
    "div": lambda a, b: tg.div(a, tg.abs_(b) + 0.5),
    "matmul": lambda a, b: a @ b.T, "dot": lambda a, b: tg.dot(a[0], b[0]),
}


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), name=st.sampled_from(sorted(UNARY)))
def test_unary_ops_match_finite_differences(seed, name):
    rng = np.random.default_rng(seed)
    v = rng.uniform(0.2, 1.5, (3, 4)) * rng.choice([-1, 1], (3, 4))
    a = leaf(v)
    r = rng.normal(size=UNARY[name](Node(v)).shape)
    assert tg.grad_check(lambda: tg.sum_(UNARY[name](a) * r), [a]) < 1e-4


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), name=st.sampled_from(sorted(BINARY)))
def test_binary_ops_match_finite_differences(seed, name):
    rng = np.random.default_rng(seed)
    a = leaf(rng.uniform(0.2, 1.5, (3, 4)) * rng.choice([-1, 1], (3, 4)))
    b = leaf(rng.uniform(0.2, 1.5, (3, 4)) * rng.choice([-1, 1], (3, 4)))
    r = rng.normal(size=BINARY[name](a, b).shape)
    assert tg.grad_check(lambda: tg.sum_(BINARY[name](a, b) * r), [a, b]) < 1e-4


def test_broadcast_gradients_reduce_to_operand_shape():
    a, b = leaf(np.ones((3, 4))), leaf(np.arange(4.0))
    tg.sum_(a * b).backward()
    np.testing.assert_allclose(b.grad, [3.0] * 4)
    np.testing.assert_allclose(a.grad, np.tile(np.arange(4.0), (3, 1)))
