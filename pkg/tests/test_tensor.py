"""Tensor engine: forward semantics, gradient suite, optimizer and checkpoint format."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgddpm.denoiser import Denoiser
from cgddpm.diffusion import kl_normal, make_schedule, model_mean, model_variance, posterior_moments, q_sample
from cgddpm.tensor import (
    AdamW,
    NonFiniteError,
    OptimizerState,
    ShapeError,
    Tensor,
    adamw_step,
    backward,
    checkpoint,
    grad_check,
    no_grad,
    ops,
)

from oracles import correlate_brute

SEEDS = range(10)
TOL32 = 1e-3


def _as(arr, like: Tensor):
    return Tensor(np.asarray(arr).astype(like.dtype))


def check32(fn, point, coords=None, step=1e-6):
    """32-bit analytic gradient against float64 central differences."""
    return grad_check(fn, np.asarray(point, dtype=np.float32), step=step, reference_dtype=np.float64, coords=coords)


# ---------------------------------------------------------------- forward semantics


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 4, 5, 3)).astype(np.float32)
    k = np.zeros((3, 3, 1, 1, 1), np.float32)
    for c in range(3):
        k[c, c] = 1.0
    np.testing.assert_array_equal(ops.conv3d(x, k).data, x)


def test_conv_ones_counts_support():
    out = ops.conv3d(np.ones((1, 1, 5, 5, 5), np.float32), np.ones((1, 1, 3, 3, 3), np.float32))
    assert out.shape == (1, 1, 3, 3, 3)
    assert np.all(out.data == 27.0)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_direct_summation(rng, stride, pad):
    x = rng.standard_normal((2, 3, 6, 5, 4))
    k = rng.standard_normal((4, 3, 3, 3, 3))
    got = ops.conv3d(x, k, stride=stride, padding=pad).data
    np.testing.assert_allclose(got, correlate_brute(x, k, stride, pad), atol=1e-10)


def test_conv_channel_mismatch_reports_dimensions():
    with pytest.raises(ShapeError, match="channel"):
        ops.conv3d(np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)))


def test_group_norm_cases(rng):
    x = np.full((2, 4, 3, 3, 3), 5.0, np.float32)
    np.testing.assert_allclose(ops.group_norm(x, 2, np.ones(4), np.zeros(4)).data, 0.0, atol=1e-6)
    beta = np.arange(4.0)
    y = ops.group_norm(rng.standard_normal((2, 4, 3, 3, 3)), 2, np.zeros(4), beta).data
    np.testing.assert_allclose(y, np.broadcast_to(beta.reshape(1, 4, 1, 1, 1), y.shape))
    y = ops.group_norm(rng.standard_normal((2, 4, 3, 3, 3)) * 3 + 1, 2, np.ones(4), np.zeros(4)).data
    assert np.abs(y.reshape(2, 2, -1).mean(-1)).max() < 1e-5
    with pytest.raises(ShapeError):
        ops.group_norm(np.zeros((1, 3, 2, 2, 2)), 2, np.ones(3), np.zeros(3))


def test_backward_basic_rules():
    x = Tensor(np.array(3.0), requires_grad=True)
    (g,) = backward(x * x, [x])
    assert g == pytest.approx(6.0)
    y = np.array([1.0, -2.0, 0.5])
    x = Tensor(np.array([0.3, 0.1, 2.0]), requires_grad=True)
    (g,) = backward(ops.sum(x * Tensor(y)), [x])
    np.testing.assert_array_equal(g, y)


def test_backward_rejects_non_scalar_and_zero_fills_unreached():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)
    other = Tensor(np.ones(2), requires_grad=True)
    g_x, g_other = backward(ops.sum(x), [x, other])
    np.testing.assert_array_equal(g_other, 0.0)
    det = ops.detach(x)
    (g,) = backward(ops.sum(x) + ops.sum(det), [x])
    np.testing.assert_array_equal(g, 1.0)


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        ops.log(Tensor(np.array([0.0, 1.0])))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.parents == ()


def test_forward_deterministic(rng):
    x = rng.standard_normal((2, 6, 6, 4, 3)).astype(np.float32)
    k = rng.standard_normal((5, 3, 3, 3, 3)).astype(np.float32)
    a = ops.conv3d_cl(x, k, padding=1).data
    b = ops.conv3d_cl(x, k, padding=1).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- grad_check itself


def test_grad_check_linear_is_exact(rng):
    w = rng.standard_normal(7)
    assert grad_check(lambda t: ops.sum(t * _as(w, t)), rng.standard_normal(7), step=1e-4) < 1e-10


def test_grad_check_cubic_taylor():
    from cgddpm.tensor.gradcheck import numerical_gradient

    num = numerical_gradient(lambda t: ops.sum(t * t * t), np.array([1.0]), 1e-4)
    # central difference of x^3 is 3x^2 + step^2
    assert num[0] == pytest.approx(3.0 + 1e-8, abs=1e-9)


def test_grad_check_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        grad_check(lambda t: ops.sum(ops.log(t)), np.array([1e-3, 2.0]), step=1e-2)


# ---------------------------------------------------------------- gradient suite


def _positive(r, shape):
    return r.uniform(0.5, 2.0, size=shape)


def _unary(f, make_point=lambda r: r.standard_normal((3, 4))):
    def case(r):
        x = make_point(r)
        w = r.standard_normal(np.shape(f(Tensor(x)).data))
        return (lambda t: ops.sum(f(t) * _as(w, t))), x

    return case


def _binary(f, shape_a, shape_b, wrt, positive_b=False):
    def case(r):
        a = r.standard_normal(shape_a)
        b = _positive(r, shape_b) if positive_b else r.standard_normal(shape_b)
        out = f(Tensor(a), Tensor(b)).data
        w = r.standard_normal(np.shape(out))
        if wrt == 0:
            return (lambda t: ops.sum(f(t, _as(b, t)) * _as(w, t))), a
        return (lambda t: ops.sum(f(_as(a, t), t) * _as(w, t))), b

    return case


def _conv_case(stride, pad, channels_last):
    def case(r):
        x = r.standard_normal((1, 5, 3, 4, 2) if channels_last else (1, 2, 5, 3, 4))
        k = r.standard_normal((3, 2, 3, 3, 3))
        b = r.standard_normal(3)
        f = ops.conv3d_cl if channels_last else ops.conv3d
        out = f(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=pad).data
        w = r.standard_normal(out.shape)
        return (lambda t: ops.sum(f(t, _as(k, t), _as(b, t), stride=stride, padding=pad) * _as(w, t))), x

    return case


def _conv_kernel_case(r):
    x = r.standard_normal((2, 4, 3, 4, 2))
    k = r.standard_normal((2, 2, 3, 3, 3))
    out = ops.conv3d_cl(Tensor(x), Tensor(k), padding=1).data
    w = r.standard_normal(out.shape)
    return (lambda t: ops.sum(ops.conv3d_cl(_as(x, t), t, padding=1) * _as(w, t))), k


def _group_norm_case(r):
    x = r.standard_normal((2, 4, 3, 2, 2))
    g, b = r.standard_normal(4), r.standard_normal(4)
    w = r.standard_normal(x.shape)
    return (lambda t: ops.sum(ops.group_norm(t, 2, _as(g, t), _as(b, t)) * _as(w, t))), x


def _layer_norm_case(r):
    x = r.standard_normal((3, 5, 6))
    g, b = r.standard_normal(6), r.standard_normal(6)
    w = r.standard_normal(x.shape)
    return (lambda t: ops.sum(ops.layer_norm(t, _as(g, t), _as(b, t)) * _as(w, t))), x


def _linear_case(r):
    x = r.standard_normal((4, 5))
    wt, b = r.standard_normal((5, 3)), r.standard_normal(3)
    w = r.standard_normal((4, 3))
    return (lambda t: ops.sum(ops.linear(t, _as(wt, t), _as(b, t)) * _as(w, t))), x


def _concat_case(r):
    a, b = r.standard_normal((2, 3)), r.standard_normal((2, 4))
    w = r.standard_normal((2, 7))
    return (lambda t: ops.sum(ops.concat([t, _as(b, t)], axis=1) * _as(w, t))), a


def _mae_case(r):
    a, b = r.standard_normal((3, 4)), r.standard_normal((3, 4))
    return (lambda t: ops.mae(t, _as(b, t))), a


def _composite_case(r):
    """conv -> group norm -> silu -> sum, the chain named in the backward contract."""
    x = r.standard_normal((1, 2, 4, 3, 4))
    k = r.standard_normal((4, 2, 3, 3, 3))
    w = r.standard_normal((1, 4, 4, 3, 4))
    return (lambda t: ops.sum(ops.silu(ops.group_norm(ops.conv3d(t, _as(k, t), padding=1), 2,
                                                     _as(np.ones(4), t), _as(np.zeros(4), t))) * _as(w, t))), x


GRAD_CASES = {
    "add": _binary(ops.add, (3, 4), (4,), 0),
    "add_broadcast_rhs": _binary(ops.add, (3, 4), (3, 1), 1),
    "sub": _binary(ops.sub, (3, 4), (3, 4), 1),
    "mul": _binary(ops.mul, (3, 4), (1, 4), 0),
    "mul_broadcast_rhs": _binary(ops.mul, (3, 4), (3, 1), 1),
    "div_numerator": _binary(ops.div, (3, 4), (3, 4), 0, positive_b=True),
    "div_denominator": _binary(ops.div, (3, 4), (3, 4), 1, positive_b=True),
    "neg": _unary(ops.neg),
    "power": _unary(lambda t: ops.power(t, 3.0)),
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, lambda r: _positive(r, (3, 4))),
    "sqrt": _unary(ops.sqrt, lambda r: _positive(r, (3, 4))),
    "abs": _unary(ops.abs, lambda r: r.uniform(0.2, 1.0, (3, 4)) * r.choice([-1, 1], (3, 4))),
    "maximum": _unary(lambda t: ops.maximum(t, 0.1),
                      lambda r: np.where(r.random((3, 4)) < 0.5, -1, 1) * r.uniform(0.3, 1.0, (3, 4))),
    "sigmoid": _unary(ops.sigmoid),
    "silu": _unary(ops.silu),
    "tanh": _unary(ops.tanh),
    "normal_cdf": _unary(ops.normal_cdf),
    "sum_axis": _unary(lambda t: ops.sum(t, axis=1, keepdims=True)),
    "mean_axes": _unary(lambda t: ops.mean(t, axis=(0, 2)), lambda r: r.standard_normal((2, 3, 4))),
    "reshape": _unary(lambda t: ops.reshape(t, (4, 3))),
    "transpose": _unary(lambda t: ops.transpose(t, (2, 0, 1)), lambda r: r.standard_normal((2, 3, 4))),
    "getitem_slice": _unary(lambda t: t[1:, ::2]),
    "getitem_fancy": _unary(lambda t: t[np.array([0, 2, 0]), 1]),
    "concat": _concat_case,
    "roll": _unary(lambda t: ops.roll(t, [1, -2], (0, 1))),
    "upsample_nearest": _unary(lambda t: ops.upsample_nearest(t, (2, 3), axes=(1, 2)),
                               lambda r: r.standard_normal((2, 2, 3))),
    "downsample_nearest": _unary(lambda t: ops.downsample_nearest(t, (2, 2), axes=(0, 1)),
                                 lambda r: r.standard_normal((4, 6))),
    "matmul_lhs": _binary(ops.matmul, (2, 3, 4), (2, 4, 5), 0),
    "matmul_rhs_broadcast": _binary(ops.matmul, (2, 3, 4), (4, 5), 1),
    "softmax": _unary(lambda t: ops.softmax(t, axis=-1)),
    "standardize": _unary(lambda t: ops.standardize(t, axis=-1), lambda r: r.standard_normal((3, 6))),
    "group_norm": _group_norm_case,
    "layer_norm": _layer_norm_case,
    "linear": _linear_case,
    "mae": _mae_case,
    "conv3d_stride1_pad1": _conv_case(1, 1, False),
    "conv3d_stride2": _conv_case(2, 1, False),
    "conv3d_cl_stride1": _conv_case(1, 1, True),
    "conv3d_cl_stride2_nopad": _conv_case(2, 0, True),
    "conv3d_cl_kernel": _conv_kernel_case,
    "conv_norm_silu_chain": _composite_case,
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_primitive_gradients_32bit(name):
    worst = 0.0
    for seed in SEEDS:
        fn, point = GRAD_CASES[name](np.random.default_rng(seed))
        worst = max(worst, check32(fn, point))
    assert worst < TOL32, f"{name}: worst relative error {worst:.2e}"


def test_composite_chain_64bit():
    for seed in SEEDS:
        fn, point = _composite_case(np.random.default_rng(seed))
        assert grad_check(fn, point, step=1e-4) < 1e-5


def _hybrid_loss(x0, cond, n, eps, net, s, gamma=0.05):
    """Noise MAE plus gamma * KL with the mean left differentiable.

    The training VLB stops the gradient of the mean on purpose, which makes
    its analytic gradient differ from finite differences by design.
    """
    xn = q_sample(x0, n, eps, s)
    out = net(xn, cond, n)
    post = posterior_moments(x0, xn, n, s)
    kl = kl_normal(post.mu, post.var, model_mean(xn, out.eps, n, s), model_variance(out.v, n, s))
    return ops.mae(out.eps, eps) + gamma * kl


def _tiny_loss_fns(config, seed):
    r = np.random.default_rng(seed)
    net = Denoiser(config, seed=seed)
    # the zero-initialized output layer would hide every upstream gradient
    for key in ("out.conv.w", "out.conv.b"):
        p = net.params[key]
        p.data = (0.3 * r.standard_normal(p.shape)).astype(np.float32)
    s = make_schedule("cosine", 16)
    x0 = r.uniform(-1, 1, (1, 8, 8, 4)).astype(np.float32)
    cond = r.uniform(-1, 1, (1, 8, 8, 4)).astype(np.float32)
    eps = r.standard_normal((1, 8, 8, 4)).astype(np.float32)
    n = np.array([int(r.integers(2, 17))])

    def with_param(name):
        def fn(t):
            params = {k: (t if k == name else Tensor(v.data.astype(t.dtype))) for k, v in net.params.items()}
            local = Denoiser(config, params=params)
            return _hybrid_loss(_as(x0, t), _as(cond, t), n, _as(eps, t), local, s)

        return fn

    def wrt_input(t):
        params = {k: Tensor(v.data.astype(t.dtype)) for k, v in net.params.items()}
        return _hybrid_loss(t, _as(cond, t), n, _as(eps, t), Denoiser(config, params=params), s)

    return net, r, with_param, wrt_input, x0


def test_tiny_denoiser_loss_gradient(tiny_config):
    """Full loss through the 8x8x4 denoiser: inputs and a sample of every parameter group."""
    worst = 0.0
    groups = ["conv_in.w", "enc0.conv1.w", "down0.w", "mid.attn1.qkv.w", "mid.attn2.proj.w", "mid.attn1.norm1.g",
              "enc0.norm1.g", "time.lin1.w", "dec0.skip.w", "out.conv.w"]
    for seed in SEEDS:
        net, r, with_param, wrt_input, x0 = _tiny_loss_fns(tiny_config, seed)
        coords = r.choice(x0.size, 6, replace=False)
        worst = max(worst, check32(wrt_input, x0, coords=coords))
        name = groups[seed % len(groups)]
        p = net.params[name].data
        coords = r.choice(p.size, min(6, p.size), replace=False)
        worst = max(worst, check32(with_param(name), p, coords=coords))
    assert worst < TOL32, f"worst relative error {worst:.2e}"


# ---------------------------------------------------------------- AdamW


def test_adamw_zero_gradient_only_decays():
    p = {"w": Tensor(np.array([1.0]))}
    adamw_step(p, {"w": np.array([0.0])}, OptimizerState())
    assert p["w"].data[0] == pytest.approx(1 - 4e-8, abs=1e-15)


def test_adamw_constant_gradient_step_tends_to_lr():
    p = {"w": Tensor(np.array([0.0, 0.0]))}
    state = OptimizerState(lr=1e-2, weight_decay=0.0)
    prev = p["w"].data.copy()
    for _ in range(200):
        adamw_step(p, {"w": np.array([0.7, -3.0])}, state)
        step = p["w"].data - prev
        prev = p["w"].data.copy()
    np.testing.assert_allclose(step, [-1e-2, 1e-2], rtol=1e-5)


def test_adamw_two_steps_by_hand():
    lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.999, 1e-8
    theta = 0.5
    m = v = 0.0
    for t, g in enumerate([0.2, -0.4], start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * ((m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps) + wd * theta)
    p = {"w": Tensor(np.array([0.5]))}
    state = OptimizerState(lr=lr, weight_decay=wd)
    adamw_step(p, {"w": np.array([0.2])}, state)
    adamw_step(p, {"w": np.array([-0.4])}, state)
    assert p["w"].data[0] == pytest.approx(theta, rel=1e-12)
    assert state.step == 2


def test_adamw_shape_mismatch():
    with pytest.raises(ShapeError):
        adamw_step({"w": Tensor(np.zeros(3))}, {"w": np.zeros(2)}, OptimizerState())


def test_adamw_wrapper_uses_accumulated_grads():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = AdamW({"w": w}, lr=0.1, weight_decay=0.0)
    backward(ops.sum(w * w))
    opt.step()
    np.testing.assert_allclose(w.data, [0.9, 1.9])
    opt.zero_grad()
    assert w.grad is None


# ---------------------------------------------------------------- checkpoint format


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.text(min_size=1, max_size=8), st.lists(st.integers(1, 3), max_size=3)),
                min_size=0, max_size=4, unique_by=lambda t: t[0]))
def test_checkpoint_round_trip(entries):
    r = np.random.default_rng(0)
    tensors = {name: r.standard_normal(shape).astype(np.float32) for name, shape in entries}
    back, header = checkpoint.loads(checkpoint.dumps(tensors, {"k": 1}))
    assert header == {"k": 1}
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()


def test_checkpoint_layout_and_errors():
    data = checkpoint.dumps({"ab": np.array([[1.0, 2.0]], np.float32)})
    assert data[:5] == b"CKPT1"
    hlen = struct.unpack_from("<I", data, 5)[0]
    pos = 9 + hlen
    assert struct.unpack_from("<I", data, pos)[0] == 1
    assert struct.unpack_from("<I2sI2I", data, pos + 4) == (2, b"ab", 2, 1, 2)
    assert np.frombuffer(data[-8:], "<f4").tolist() == [1.0, 2.0]
    with pytest.raises(checkpoint.CheckpointError, match="bad magic"):
        checkpoint.loads(b"XXXXX" + data[5:])
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.loads(data[:-3])
