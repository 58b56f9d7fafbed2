import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relightlab.autograd import (Parameter, Tape, Tensor, add, concat_channels,
                                 div, elementwise, linear, log, mul,
                                 reduce_mean, reduce_sum, relu, reshape,
                                 sigmoid, softmax_logits, sqrt, sub)
from relightlab.gradcheck import grad_check


def test_tensor_invariants():
    t = Tensor(np.zeros((2, 3, 4)))
    assert t.shape == (2, 3, 4)
    assert t.size == 24
    assert t.grad is None
    t.accumulate_grad(np.ones((2, 3, 4), dtype=np.float32))
    assert t.grad.shape == (2, 3, 4)


def test_backward_product_rule():
    x = Tensor([2.0, 5.0], requires_grad=True)
    y = Tensor([3.0, 7.0], requires_grad=True)
    with Tape() as tape:
        s = reduce_sum(mul(x, y))
        tape.backward(s)
    np.testing.assert_array_equal(x.grad, y.data)
    np.testing.assert_array_equal(y.grad, x.data)


def test_backward_relu_blocks_gradient():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        s = reduce_sum(relu(x))
        tape.backward(s)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_backward_fanout_accumulates():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        s = reduce_sum(add(mul(x, x), x))  # x^2 + x -> 2x + 1 = 7
        tape.backward(s)
    np.testing.assert_allclose(x.grad, [7.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(y)


def test_backward_rejects_foreign_loss():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as t1:
        y = reduce_sum(mul(x, x))
    with Tape() as t2:
        with pytest.raises(ValueError, match="tape"):
            t2.backward(y)


def test_tape_visits_each_node_once():
    x = Tensor(np.random.default_rng(0).random((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = relu(mul(x, x))
        s = reduce_sum(y)
        tape.backward(s)
    assert tape.visits == len(tape.nodes)


def test_tape_parents_precede_children():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        reduce_sum(add(mul(x, x), x))
    for i, node in enumerate(tape.nodes):
        assert all(p < i for p in node.parents)


def test_elementwise_identity_and_rejection():
    a = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    ones = Tensor(np.ones((2, 3), dtype=np.float32))
    np.testing.assert_array_equal(mul(a, ones).data, a.data)
    with pytest.raises(ValueError, match="broadcast"):
        add(a, Tensor(np.ones((4, 5), dtype=np.float32)))


def test_broadcast_add_matches_scalar_loop():
    rng = np.random.default_rng(3)
    a = rng.random((2, 3, 4, 4)).astype(np.float32)
    bias = rng.random((1, 3, 1, 1)).astype(np.float32)
    out = add(Tensor(a), Tensor(bias)).data
    expect = np.empty_like(a)
    for b in range(2):
        for c in range(3):
            for i in range(4):
                for j in range(4):
                    expect[b, c, i, j] = a[b, c, i, j] + bias[0, c, 0, 0]
    np.testing.assert_array_equal(out, expect)


def test_activation_examples():
    assert relu(Tensor([-1.0])).data[0] == 0.0
    assert relu(Tensor([2.0])).data[0] == 2.0
    assert sigmoid(Tensor([0.0])).data[0] == 0.5
    probs = softmax_logits(Tensor(np.zeros((1, 8)))).data
    np.testing.assert_allclose(probs, np.full((1, 8), 0.125), atol=1e-7)


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError, match="positive"):
        log(Tensor([0.0, 1.0]))


def test_linear_identity_and_mismatch():
    x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    eye = Tensor(np.eye(3, dtype=np.float32))
    zero = Tensor(np.zeros(3, dtype=np.float32))
    np.testing.assert_array_equal(linear(x, eye, zero).data, x.data)
    # 1x1 case is a scalar multiply-add
    y = linear(Tensor([[2.0]]), Tensor([[3.0]]), Tensor([4.0]))
    assert y.data[0, 0] == pytest.approx(10.0)
    with pytest.raises(ValueError, match="mismatch"):
        linear(x, Tensor(np.eye(4, dtype=np.float32)))


def test_concat_shapes_and_recovery():
    a = Tensor(np.random.default_rng(0).random((1, 3, 4, 4)).astype(np.float32))
    b = Tensor(np.random.default_rng(1).random((1, 1, 4, 4)).astype(np.float32))
    out = concat_channels([a, b])
    assert out.shape == (1, 4, 4, 4)
    np.testing.assert_array_equal(out.data[:, :3], a.data)
    np.testing.assert_array_equal(out.data[:, 3:], b.data)
    with pytest.raises(ValueError, match="mismatch"):
        concat_channels([a, Tensor(np.zeros((1, 1, 5, 5), dtype=np.float32))])


def test_concat_gradient_routes_to_sources():
    rng = np.random.default_rng(5)
    xs = [Tensor(rng.random((1, c, 3, 3)), requires_grad=True, dtype=np.float64)
          for c in (2, 1, 3)]
    err = grad_check(lambda *ts: concat_channels(ts), xs)
    assert err < 1e-6


def test_linear_gradient_fd():
    rng = np.random.default_rng(7)
    x = Tensor(rng.random((3, 4)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.random((2, 4)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.random(2), requires_grad=True, dtype=np.float64)
    assert grad_check(lambda x, w, b: linear(x, w, b), [x, w, b]) < 1e-6


def test_div_and_sqrt_gradients():
    rng = np.random.default_rng(11)
    a = Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True, dtype=np.float64)
    assert grad_check(lambda a, b: div(a, b), [a, b]) < 1e-6
    assert grad_check(sqrt, [a]) < 1e-6


def test_parameter_trainable_flag():
    p = Parameter("w", np.ones(3), trainable=False)
    assert not p.trainable
    assert p.tensor.requires_grad


@settings(max_examples=60, deadline=None)
@given(
    b=st.integers(1, 3), cin=st.integers(1, 4), cout=st.integers(1, 4),
    h=st.integers(1, 9), w=st.integers(1, 9),
    k=st.sampled_from([1, 3, 7]), stride=st.integers(1, 3),
    pad=st.integers(0, 3),
)
def test_conv_shape_formula_property(b, cin, cout, h, w, k, stride, pad):
    from relightlab.nnops import conv2d
    rng = np.random.default_rng(0)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    x = Tensor(rng.random((b, cin, h, w)).astype(np.float32))
    wt = Tensor(rng.random((cout, cin, k, k)).astype(np.float32))
    if ho < 1 or wo < 1:
        with pytest.raises(ValueError):
            conv2d(x, wt, stride=stride, zero_pad=pad)
    else:
        out = conv2d(x, wt, stride=stride, zero_pad=pad)
        assert out.shape == (b, cout, ho, wo)


def test_shape_formulas_randomized_bulk():
    """1000 randomized shape cases across conv/pool/reshuffle/linear."""
    from relightlab.nnops import conv2d, pixel_reshuffle, pool
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < 1000:
        kind = rng.integers(0, 4)
        if kind == 0:
            b, cin, cout = rng.integers(1, 4, 3)
            k = [1, 3, 7][rng.integers(0, 3)]
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 4))
            h, w = rng.integers(k, 12, 2)
            ho = (h + 2 * pad - k) // stride + 1
            wo = (w + 2 * pad - k) // stride + 1
            out = conv2d(Tensor(np.zeros((b, cin, h, w), np.float32)),
                         Tensor(np.zeros((cout, cin, k, k), np.float32)),
                         stride=stride, zero_pad=pad)
            assert out.shape == (b, cout, ho, wo)
        elif kind == 1:
            b, c = rng.integers(1, 4, 2)
            k = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 4))
            h, w = rng.integers(k, 12, 2)
            out = pool("avg", Tensor(np.zeros((b, c, h, w), np.float32)), k, stride)
            assert out.shape == (b, c, (h - k) // stride + 1, (w - k) // stride + 1)
        elif kind == 2:
            b, c = rng.integers(1, 4, 2)
            r = int(rng.integers(1, 4))
            hh, ww = rng.integers(1, 6, 2)
            x = Tensor(np.zeros((b, c, hh * r, ww * r), np.float32))
            out = pixel_reshuffle("unshuffle", x, r)
            assert out.shape == (b, c * r * r, hh, ww)
        else:
            bsz, n, m = rng.integers(1, 6, 3)
            out = linear(Tensor(np.zeros((bsz, n), np.float32)),
                         Tensor(np.zeros((m, n), np.float32)),
                         Tensor(np.zeros(m, np.float32)))
            assert out.shape == (bsz, m)
        checked += 1


def test_reduce_and_reshape():
    x = Tensor(np.arange(6, dtype=np.float32))
    assert reduce_mean(x).item() == pytest.approx(2.5)
    assert reduce_sum(x).item() == pytest.approx(15.0)
    assert reshape(x, (2, 3)).shape == (2, 3)
