import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evsev import nncore as nn
from evsev.nncore import GradTape, ShapeError, Tensor


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def naive_conv(x, w, b, padding, stride):
    c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[o, i, j] = (patch * w[o]).sum() + (b[o] if b is not None else 0.0)
    return out


# ------------------------------------------------------------------ examples

def test_conv_zero_input():
    out = nn.conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(np.ones((2, 1, 3, 3))), Tensor(np.zeros(2)), padding=1)
    assert out.shape == (2, 3, 3)
    assert np.all(out.data == 0)


def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 3, 3)
    out = nn.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_sum():
    out = nn.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 9.0


def test_conv_is_cross_correlation():
    x = np.zeros((1, 3, 3))
    x[0, 0, 0] = 1.0
    w = np.arange(9.0).reshape(1, 1, 3, 3)
    out = nn.conv2d(Tensor(x), Tensor(w), padding=1)
    # the kernel is not flipped: the single impulse at (0,0) picks w[1+di, 1+dj]
    assert out.data[0, 0, 0] == w[0, 0, 1, 1]
    assert out.data[0, 1, 1] == w[0, 0, 0, 0]


@pytest.mark.parametrize("padding,stride", [(0, 1), (1, 1), (1, 2), (3, 1), (0, 2)])
def test_conv_matches_naive_loops(padding, stride):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 7, 7))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = nn.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=padding, stride=stride)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, padding, stride), atol=1e-12)


def test_conv_batched_equals_per_item():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 2, 6, 6))
    w = Tensor(rng.normal(size=(4, 2, 3, 3)))
    batched = nn.conv2d(Tensor(x), w, padding=1).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], nn.conv2d(Tensor(x[i]), w, padding=1).data, atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        nn.conv2d(Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ShapeError):
        nn.conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros((1, 1, 2, 2))))
    with pytest.raises(ShapeError):
        nn.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_linear_examples():
    x = Tensor(np.array([1.0, 1.0]))
    np.testing.assert_array_equal(nn.linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2))).data, [1, 1])
    np.testing.assert_array_equal(nn.linear(x, Tensor(np.zeros((2, 2))), Tensor(np.array([4.0, -1.0]))).data, [4, -1])
    out = nn.linear(x, Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, [3, 7])


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError):
        nn.linear(Tensor(np.zeros(3)), Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))


def test_activations():
    v = nn.relu(Tensor(np.array([-1.0, 2.0]))).data
    np.testing.assert_array_equal(v, [0.0, 2.0])
    assert nn.sigmoid(Tensor(np.array(0.0))).item() == 0.5
    assert nn.softplus(Tensor(np.array(0.0))).item() == pytest.approx(math.log(2), abs=1e-12)
    assert nn.softplus(Tensor(np.array(800.0))).item() == 800.0
    assert nn.sigmoid(Tensor(np.array(-800.0))).item() == 0.0
    with pytest.raises(ValueError):
        nn.activation(Tensor(np.zeros(2)), "tanh")


def test_pool_examples():
    x = Tensor(np.array([[[1.0, 3.0]]]))
    assert nn.pool(x, "global_avg").data[0] == 2.0
    assert nn.pool(x, "global_max").data[0] == 3.0
    y = Tensor(np.array([[[1.0]], [[5.0]]]))
    assert nn.pool(y, "channelwise_avg").data[0, 0, 0] == 3.0
    assert nn.pool(y, "channelwise_max").data[0, 0, 0] == 5.0


@given(st.floats(-5, 5), st.sampled_from(["global_avg", "global_max", "channelwise_avg", "channelwise_max"]))
def test_pool_constant_field(v, mode):
    out = nn.pool(Tensor(np.full((3, 4, 5), v)), mode)
    np.testing.assert_allclose(out.data, v, rtol=0, atol=1e-12)


def test_backward_check_quadratic():
    w = Tensor(np.array(3.0), requires_grad=True)
    err = nn.backward_and_check(lambda: nn.mul(w, w), [w])
    assert w.grad == pytest.approx(6.0)
    assert err < 1e-6


def test_backward_check_softplus():
    w = Tensor(np.array(0.0), requires_grad=True)
    nn.backward_and_check(lambda: nn.softplus(w), [w])
    assert w.grad == pytest.approx(0.5, abs=1e-12)


def test_backward_check_rejects_bad_epsilon_and_nan():
    w = Tensor(np.array(1.0), requires_grad=True)
    with pytest.raises(ValueError):
        nn.backward_and_check(lambda: nn.mul(w, w), [w], epsilon=1.0)
    with pytest.raises(nn.DegenerateLossError):
        nn.backward_and_check(lambda: nn.scale(w, float("nan")), [w])


# ---------------------------------------------------------- gradient checks

def _ops(rng):
    x4 = rand(rng, 2, 6, 6)
    x7 = rand(rng, 2, 7, 7)
    k = rand(rng, 3, 2, 3, 3)
    b = rand(rng, 3)
    v = rand(rng, 5)
    w = rand(rng, 4, 5)
    wb = rand(rng, 4)
    xb = rand(rng, 3, 5)
    c = rand(rng, 3, 4, 4)
    g = rand(rng, 3, 1, 1)
    s = rand(rng, 1, 4, 4)
    # weights keep the scalar loss sensitive to every output entry
    def weigh(t):
        r = Tensor(np.random.default_rng(99).normal(size=t.shape))
        return nn.sum_all(nn.mul(t, r))
    return {
        "conv": ([x4, k, b], lambda: weigh(nn.conv2d(x4, k, b, padding=1))),
        "conv_stride": ([x7, k], lambda: weigh(nn.conv2d(x7, k, None, padding=1, stride=2))),
        "linear": ([v, w, wb], lambda: weigh(nn.linear(v, w, wb))),
        "linear_batch": ([xb, w, wb], lambda: weigh(nn.linear(xb, w, wb))),
        "relu": ([v], lambda: weigh(nn.relu(v))),
        "sigmoid": ([v], lambda: weigh(nn.sigmoid(v))),
        "softplus": ([v], lambda: weigh(nn.softplus(v))),
        "global_avg": ([c], lambda: weigh(nn.pool(c, "global_avg"))),
        "global_max": ([c], lambda: weigh(nn.pool(c, "global_max"))),
        "channel_avg": ([c], lambda: weigh(nn.pool(c, "channelwise_avg"))),
        "channel_max": ([c], lambda: weigh(nn.pool(c, "channelwise_max"))),
        "max_pool2d": ([c], lambda: weigh(nn.max_pool2d(c, 2))),
        "gate_channel": ([c, g], lambda: weigh(nn.gate(c, g))),
        "gate_spatial": ([c, s], lambda: weigh(nn.gate(c, s))),
        "concat": ([c, s], lambda: weigh(nn.concat([c, s], 0))),
        "reshape": ([c], lambda: weigh(nn.reshape(c, (3, 16)))),
        "mean": ([c], lambda: nn.mean_all(nn.mul(c, c))),
        "add_scale": ([v], lambda: weigh(nn.scale(nn.add(v, v), 0.7))),
    }


@pytest.mark.parametrize("name", sorted(_ops(np.random.default_rng(0))))
@pytest.mark.parametrize("seed", [0, 1])
def test_op_gradients_match_finite_differences(name, seed):
    params, fn = _ops(np.random.default_rng(seed))[name]
    assert nn.backward_and_check(fn, params, seed=seed) < 1e-4


def test_dropout_gradient_with_fixed_mask():
    v = Tensor(np.random.default_rng(0).normal(size=20), requires_grad=True)

    def loss():
        return nn.sum_all(nn.mul(nn.dropout(v, 0.3, np.random.default_rng(5), True), v))
    assert nn.backward_and_check(loss, [v]) < 1e-6


def test_dropout_eval_identity_and_train_rate():
    x = Tensor(np.ones(100_000))
    assert nn.dropout(x, 0.4, None, training=False) is x
    out = nn.dropout(x, 0.4, np.random.default_rng(0), training=True).data
    dropped = int((out == 0).sum())
    sigma = math.sqrt(1e5 * 0.4 * 0.6)
    assert abs(dropped - 40_000) < 3 * sigma
    np.testing.assert_allclose(out[out > 0], 1 / 0.6)


# ------------------------------------------------------------------- tape

def test_tape_replays_in_reverse_and_ids_increase():
    rng = np.random.default_rng(0)
    a = rand(rng, 4)
    with GradTape() as tape:
        h = nn.relu(nn.scale(a, 2.0))
        loss = nn.sum_all(nn.mul(h, h))
    ids = [r.output_id for r in tape.records]
    assert ids == sorted(ids)
    for r in tape.records:
        assert all(i < r.output_id for i in r.input_ids)
    seen = []
    orig = [r.backward for r in tape.records]
    for r, f in zip(tape.records, orig):
        r.backward = (lambda f, k: lambda g: (seen.append(k), f(g))[1])(f, r.kind)
    tape.backward(loss)
    assert seen == [r.kind for r in reversed(tape.records)]


def test_no_recording_outside_tape():
    a = Tensor(np.ones(3), requires_grad=True)
    nn.relu(a)
    with GradTape() as tape:
        nn.relu(Tensor(np.ones(3)))
    assert tape.records == []


def test_backward_rejects_nonscalar_and_nan():
    a = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        out = nn.scale(a, 1.0)
    with pytest.raises(ShapeError):
        tape.backward(out)
    with GradTape() as tape:
        bad = nn.sum_all(nn.scale(a, float("inf")))
    with pytest.raises(nn.DegenerateLossError):
        tape.backward(bad)


def test_item_requires_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.ones(2)).item()


def test_shape_mismatch_is_loud():
    with pytest.raises(ShapeError):
        nn.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        nn.gate(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((3, 1, 1))))


# -------------------------------------------------------------- properties

@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_conv_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(2, 5, 5)), rng.normal(size=(2, 5, 5))
    k = Tensor(rng.normal(size=(3, 2, 3, 3)))
    lhs = nn.conv2d(Tensor(a * X + b * Y), k, padding=1).data
    rhs = a * nn.conv2d(Tensor(X), k, padding=1).data + b * nn.conv2d(Tensor(Y), k, padding=1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forward_backward_deterministic(seed):
    def run():
        rng = np.random.default_rng(seed)
        x, k = rand(rng, 2, 5, 5), rand(rng, 2, 2, 3, 3)
        with GradTape() as tape:
            loss = nn.sum_all(nn.sigmoid(nn.conv2d(x, k, padding=1)))
        tape.backward(loss)
        return loss.data.copy(), x.grad.copy(), k.grad.copy()
    for u, v in zip(run(), run()):
        assert np.array_equal(u, v)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_outputs_finite_on_finite_inputs(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(scale=50, size=(2, 4, 4)), requires_grad=True)
    with GradTape() as tape:
        h = nn.softplus(x)
        h = nn.sigmoid(nn.scale(h, -1.0))
        loss = nn.sum_all(nn.pool(h, "global_max"))
    tape.backward(loss)
    assert np.isfinite(h.data).all() and np.isfinite(x.grad).all()
