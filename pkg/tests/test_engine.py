import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mvecho.engine import (
    Adam,
    AdamState,
    Tensor,
    adam_step,
    backend,
    bilstm_forward,
    binary_cross_entropy,
    check_gradients,
    conv2d_forward,
    depthwise_conv_forward,
    flatten,
    fully_connected_forward,
    global_average_pool,
    l2_loss,
    multiclass_cross_entropy,
    pointwise_conv_forward,
    relu,
    sigmoid,
    softmax,
    tanh,
)
from mvecho.engine.functional import batch_norm
from mvecho.errors import ContractError, DimensionError

BACKENDS = backend.available()


@pytest.fixture(params=BACKENDS)
def kernels(request):
    prev = backend.use(request.param)
    yield request.param
    backend.use(prev)


def reference_conv(x, w, stride):
    """Direct nested-loop same-padded convolution (the oracle)."""
    h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho, wo = math.ceil(h / stride), math.ceil(wd / stride)
    pad_h = max((ho - 1) * stride + kh - h, 0)
    pad_w = max((wo - 1) * stride + kw - wd, 0)
    top, left = pad_h // 2, pad_w // 2
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = 0.0
                for a in range(kh):
                    for b in range(kw):
                        y, xx = i * stride + a - top, j * stride + b - left
                        if 0 <= y < h and 0 <= xx < wd:
                            for c in range(cin):
                                acc += x[y, xx, c] * w[a, b, c, o]
                out[i, j, o] = acc
    return out


# -- convolution forward -------------------------------------------------


def test_conv_table_first_layer_shape(kernels):
    x = np.zeros((128, 128, 5), dtype=np.float32)
    w = np.zeros((3, 3, 5, 32), dtype=np.float32)
    assert conv2d_forward(x, w, stride=2).shape == (64, 64, 32)


def test_conv_identity_1x1(kernels):
    x = np.array([[[0.37]]])
    out = conv2d_forward(x, np.ones((1, 1, 1, 1)), stride=1)
    assert out.data[0, 0, 0] == 0.37


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_bruteforce(kernels, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 4, 1))
    w = rng.standard_normal((3, 3, 1, 1))
    got = conv2d_forward(x, w, stride=stride).data
    np.testing.assert_allclose(got, reference_conv(x, w, stride), atol=1e-12, rtol=0)


def test_conv_matches_bruteforce_multichannel(kernels):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((7, 6, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    for stride in (1, 2):
        np.testing.assert_allclose(
            conv2d_forward(x, w, stride).data, reference_conv(x, w, stride), atol=1e-12
        )


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d_forward(np.zeros((4, 4, 3)), np.zeros((3, 3, 2, 1)))


def test_conv_delta_kernel_is_identity(kernels):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 6, 2))
    w = np.zeros((3, 3, 2, 2))
    w[1, 1] = np.eye(2)
    np.testing.assert_array_equal(conv2d_forward(x, w).data[1:-1, 1:-1], x[1:-1, 1:-1])


# -- depthwise / pointwise -------------------------------------------------


def test_depthwise_table_shape(kernels):
    x = np.zeros((64, 64, 32), dtype=np.float32)
    assert depthwise_conv_forward(x, np.zeros((3, 3, 32), np.float32)).shape == (64, 64, 32)


def test_depthwise_zero_channel(kernels):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((8, 8, 3))
    x[..., 0] = 0.0
    out = depthwise_conv_forward(x, rng.standard_normal((3, 3, 3))).data
    assert np.all(out[..., 0] == 0.0)


@pytest.mark.parametrize("stride", [1, 2])
def test_depthwise_equals_block_diagonal_conv(kernels, stride):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((8, 8, 3))
    wd = rng.standard_normal((3, 3, 3))
    full = np.zeros((3, 3, 3, 3))
    for c in range(3):
        full[:, :, c, c] = wd[:, :, c]
    np.testing.assert_allclose(
        depthwise_conv_forward(x, wd, stride).data, conv2d_forward(x, full, stride).data, atol=1e-12
    )


def test_depthwise_perturbation_stays_in_channel(kernels):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((8, 8, 4))
    w = rng.standard_normal((3, 3, 4))
    base = depthwise_conv_forward(x, w).data
    x2 = x.copy()
    x2[..., 2] += rng.standard_normal((8, 8))
    diff = np.abs(depthwise_conv_forward(x2, w).data - base).max(axis=(0, 1))
    assert diff[2] > 0 and np.all(diff[[0, 1, 3]] == 0)


def test_depthwise_channel_mismatch():
    with pytest.raises(DimensionError):
        depthwise_conv_forward(np.zeros((4, 4, 3)), np.zeros((3, 3, 2)))


def test_pointwise_table_shape():
    x = np.zeros((64, 64, 32), np.float32)
    assert pointwise_conv_forward(x, np.zeros((1, 1, 32, 64), np.float32)).shape == (64, 64, 64)


def test_pointwise_identity():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 3, 4))
    np.testing.assert_array_equal(pointwise_conv_forward(x, np.eye(4)[None, None]).data, x)


def test_pointwise_matches_per_pixel_matmul():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 2, 3))
    w = rng.standard_normal((3, 5))
    expected = np.empty((2, 2, 5))
    for i in range(2):
        for j in range(2):
            expected[i, j] = x[i, j] @ w
    np.testing.assert_allclose(pointwise_conv_forward(x, w[None, None]).data, expected, atol=1e-14)


def test_pointwise_rejects_spatial_kernel():
    with pytest.raises(DimensionError):
        pointwise_conv_forward(np.zeros((2, 2, 3)), np.zeros((3, 3, 3, 2)))


def test_backends_agree_bitwise():
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 9, 9, 4))
    w = rng.standard_normal((3, 3, 4))
    outs = []
    for name in BACKENDS:
        prev = backend.use(name)
        xt = Tensor(x, requires_grad=True)
        wt = Tensor(w, requires_grad=True)
        y = depthwise_conv_forward(xt, wt, 2)
        (y * y).sum().backward()
        outs.append((y.data, xt.grad, wt.grad))
        backend.use(prev)
    for a, b in zip(*outs):
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)


# -- backward --------------------------------------------------------------


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_accumulates():
    x = Tensor(np.arange(3.0), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(x.grad, 4 * np.arange(3.0))


def test_backward_non_scalar_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_sigmoid_ce_saturated_gradient_zero():
    for z, y in ((60.0, 1.0), (-60.0, 0.0)):
        logit = Tensor(np.array([z]), requires_grad=True)
        binary_cross_entropy(logit, [y]).backward()
        assert abs(logit.grad[0]) < 1e-25


def test_sigmoid_ce_gradient_closed_form():
    rng = np.random.default_rng(0)
    z = rng.standard_normal(6)
    y = rng.integers(0, 2, 6).astype(float)
    logit = Tensor(z, requires_grad=True)
    binary_cross_entropy(logit, y).backward()
    np.testing.assert_allclose(logit.grad, (1 / (1 + np.exp(-z)) - y) / 6, atol=1e-15)


def _gradcheck_cases():
    """Each case builds (loss_fn, leaves) from an rng; inputs are 1e-1 scale."""

    def p(rng, *shape):
        return Tensor(0.1 * rng.standard_normal(shape), requires_grad=True)

    def conv(rng, stride):
        x, w = p(rng, 2, 5, 5, 2), p(rng, 3, 3, 2, 3)
        return (lambda: (conv2d_forward(x, w, stride) ** 2).sum()), {"x": x, "w": w}

    def dw(rng, stride):
        x, w = p(rng, 2, 5, 5, 3), p(rng, 3, 3, 3)
        return (lambda: (depthwise_conv_forward(x, w, stride) ** 2).sum()), {"x": x, "w": w}

    def pw(rng):
        x, w = p(rng, 2, 3, 3, 3), p(rng, 1, 1, 3, 4)
        return (lambda: (pointwise_conv_forward(x, w) ** 2).sum()), {"x": x, "w": w}

    def temporal(rng):
        x, w = p(rng, 1, 5, 1, 3), p(rng, 3, 1, 3, 2)
        return (lambda: (conv2d_forward(x, w) ** 2).sum()), {"x": x, "w": w}

    def fc(rng):
        x, w, b = p(rng, 3, 4), p(rng, 4, 2), p(rng, 2)
        return (lambda: (fully_connected_forward(x, w, b) ** 2).sum()), {"x": x, "w": w, "b": b}

    def act(fn):
        def build(rng):
            x, c = p(rng, 4, 3), Tensor(rng.standard_normal((4, 3)))
            return (lambda: (fn(x) * c).sum()), {"x": x}

        return build

    def soft(rng):
        x, c = p(rng, 3, 5), Tensor(rng.standard_normal((3, 5)))
        return (lambda: (softmax(x, axis=1) * c).sum()), {"x": x}

    def flat_gap(rng):
        x, c1, c2 = p(rng, 2, 3, 3, 4), Tensor(rng.standard_normal((2, 36))), Tensor(rng.standard_normal((2, 4)))
        return (lambda: (flatten(x) * c1).sum() + (global_average_pool(x) * c2).sum()), {"x": x}

    def bce(rng):
        z, y = p(rng, 5), rng.integers(0, 2, 5)
        return (lambda: binary_cross_entropy(z, y)), {"z": z}

    def mce(rng):
        z, y = p(rng, 4, 3), rng.integers(0, 3, 4)
        return (lambda: multiclass_cross_entropy(z, y)), {"z": z}

    def l2(rng):
        a, b = p(rng, 6), Tensor(rng.standard_normal(6))
        return (lambda: l2_loss(a, b)), {"a": a}

    def lstm(rng):
        x = p(rng, 3, 3)
        params = {
            "fwd.wx": p(rng, 3, 8), "fwd.wh": p(rng, 2, 8), "fwd.b": p(rng, 8),
            "bwd.wx": p(rng, 3, 8), "bwd.wh": p(rng, 2, 8), "bwd.b": p(rng, 8),
        }
        c = Tensor(rng.standard_normal((3, 4)))
        return (lambda: (bilstm_forward(x, params) * c).sum()), {"x": x, **params}

    def bn(rng):
        x, gamma, beta = p(rng, 6, 3), p(rng, 3), p(rng, 3)
        rm, rv = Tensor(np.zeros(3)), Tensor(np.ones(3))
        c = Tensor(rng.standard_normal((6, 3)))
        return (lambda: (batch_norm(x, gamma, beta, rm, rv) * c).sum()), {"x": x, "gamma": gamma, "beta": beta}

    return {
        "conv_s1": lambda r: conv(r, 1),
        "conv_s2": lambda r: conv(r, 2),
        "depthwise_s1": lambda r: dw(r, 1),
        "depthwise_s2": lambda r: dw(r, 2),
        "pointwise": pw,
        "temporal_conv": temporal,
        "fully_connected": fc,
        "relu": act(relu),
        "tanh": act(tanh),
        "sigmoid": act(sigmoid),
        "softmax": soft,
        "flatten_gap": flat_gap,
        "bce": bce,
        "multiclass_ce": mce,
        "l2": l2,
        "bilstm": lstm,
        "batch_norm": bn,
    }


GRAD_CASES = _gradcheck_cases()


@pytest.mark.parametrize("case", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(kernels, case):
    worst = 0.0
    for seed in range(20):
        fn, leaves = GRAD_CASES[case](np.random.default_rng(seed))
        worst = max(worst, check_gradients(fn, leaves, step=1e-5))
    assert worst < 1e-5, f"{case}: {worst:.2e}"


# -- softmax ---------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-700, 700)))
def test_softmax_on_simplex(x):
    y = softmax(Tensor(x)).data
    assert np.all(y >= 0)
    assert abs(y.sum() - 1.0) <= 1e-9


# -- Adam ------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    w = Tensor(np.array([1.5, -2.0]))
    state = AdamState()
    for _ in range(3):
        adam_step({"w": w}, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(w.data, [1.5, -2.0])


def test_adam_first_step_is_learning_rate():
    w = Tensor(np.array([0.0]))
    adam_step({"w": w}, {"w": np.array([1.0])}, AdamState(learning_rate=0.001))
    # hand computation: m_hat = 1, v_hat = 1, step = 0.001 / (1 + 1e-8)
    assert w.data[0] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-15)


def test_adam_quadratic_bowl():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.01)
    for _ in range(500):
        opt.zero_grad()
        (w * w).sum().backward()
        opt.step()
    assert abs(w.data[0]) < 0.05


def test_adam_gradient_scale_invariance():
    traj = []
    for scale in (1.0, 1000.0):
        w = Tensor(np.array([0.3, -0.7]))
        state = AdamState()
        g = scale * np.array([0.2, -0.05])
        path = []
        for _ in range(50):
            adam_step({"w": w}, {"w": g}, state)
            path.append(w.data.copy())
        traj.append(np.array(path))
    assert np.max(np.abs(traj[0] - traj[1])) < 1e-6


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step({"w": Tensor(np.zeros(2))}, {"w": np.zeros(3)}, AdamState())
