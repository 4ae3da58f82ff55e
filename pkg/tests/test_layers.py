import numpy as np
import pytest

from polygan import autodiff as ad
from polygan import layers as L
from polygan.errors import NumericError, ShapeError
from polygan.rng import RngState
from polygan.tensor import VERIFY_DTYPE


def conv2d_reference(x, w, b, stride, pad):
    """Direct six-nested-loop cross-correlation; the oracle conv2d is tested
    against."""
    bs, ci, h, wid = x.shape
    co, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wid + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((bs, co, ho, wo), dtype=np.float64)
    for n in range(bs):
        for o in range(co):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for dy in range(k):
                            for dx in range(k):
                                acc += xp[n, c, y * stride + dy, xx * stride + dx] * w[o, c, dy, dx]
                    out[n, o, y, xx] = acc + b[o]
    return out


def _node(arr):
    return ad.leaf(np.asarray(arr, dtype=VERIFY_DTYPE))


def test_conv2d_shape():
    rng = RngState(0)
    x = _node(rng.normal(1 * 3 * 8 * 8).reshape(1, 3, 8, 8))
    w = _node(rng.normal(4 * 3 * 3 * 3).reshape(4, 3, 3, 3))
    out = L.conv2d(x, w, _node(np.zeros(4)), 1, 1)
    assert out.value.shape == (1, 4, 8, 8)


def test_conv2d_identity_kernel():
    x = RngState(1).normal(1 * 3 * 5 * 5).reshape(1, 3, 5, 5)
    w = np.eye(3)[:, :, None, None]  # 1x1 kernel, identity across channels
    out = L.conv2d(_node(x), _node(w), _node(np.zeros(3)), 1, 0)
    assert np.allclose(out.value, x)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 4), (1, 0, 2)])
def test_conv2d_matches_loop_reference(stride, pad, k):
    rng = RngState(5)
    x = rng.normal(2 * 3 * 7 * 7).reshape(2, 3, 7, 7)
    w = rng.normal(4 * 3 * k * k).reshape(4, 3, k, k)
    b = rng.normal(4)
    got = L.conv2d(_node(x), _node(w), _node(b), stride, pad).value
    want = conv2d_reference(x, w, b, stride, pad)
    assert np.max(np.abs(got - want)) / np.max(np.abs(want)) < 1e-5


def test_conv2d_channel_mismatch():
    x = _node(np.zeros((1, 3, 8, 8)))
    w = _node(np.zeros((4, 2, 3, 3)))
    with pytest.raises(ShapeError, match="channels"):
        L.conv2d(x, w, None, 1, 1)


def test_conv_transpose_shape_doubles():
    rng = RngState(2)
    x = _node(rng.normal(1 * 8 * 4 * 4).reshape(1, 8, 4, 4))
    w = _node(rng.normal(8 * 4 * 4 * 4).reshape(8, 4, 4, 4))
    out = L.conv_transpose2d(x, w, _node(np.zeros(4)), 2, 1)
    assert out.value.shape == (1, 4, 8, 8)


def test_conv_transpose_zero_weights_gives_bias():
    x = _node(RngState(3).normal(1 * 2 * 4 * 4).reshape(1, 2, 4, 4))
    b = np.array([0.3, -0.7, 1.1])
    out = L.conv_transpose2d(x, _node(np.zeros((2, 3, 4, 4))), _node(b), 2, 1)
    assert np.allclose(out.value, b[None, :, None, None])


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 4), (2, 0, 2)])
def test_conv_adjointness(stride, pad, k):
    rng = RngState(7)
    ci, co, h = 3, 5, 8
    x = rng.normal(1 * ci * h * h).reshape(1, ci, h, h)
    w = rng.normal(co * ci * k * k).reshape(co, ci, k, k)
    y = L.conv2d(_node(x), _node(w), None, stride, pad).value
    y2 = rng.normal(y.size).reshape(y.shape)
    lhs = float((y * y2).sum())
    xt = L.conv_transpose2d(_node(y2), _node(w), None, stride, pad).value
    assert xt.shape == x.shape
    rhs = float((x * xt).sum())
    assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))


def test_instance_norm_constant_plane_is_zero():
    x = _node(np.full((1, 2, 4, 4), 3.7))
    out = L.instance_norm(x, _node(np.ones(2)), _node(np.zeros(2)))
    assert np.allclose(out.value, 0.0, atol=1e-3)


def test_instance_norm_standardizes():
    plane = np.array([[-1.0, 1.0], [1.0, -1.0]])[None, None]
    out = L.instance_norm(_node(plane), _node(np.ones(1)), _node(np.zeros(1))).value
    assert abs(out.mean()) < 1e-9
    assert abs(out.std() - 1.0) < 1e-4  # epsilon shrinks std slightly


def test_instance_norm_matches_direct_formula():
    rng = RngState(8)
    x = rng.normal(2 * 3 * 5 * 5).reshape(2, 3, 5, 5)
    gamma = 1.0 + 0.1 * rng.normal(3)
    beta = 0.1 * rng.normal(3)
    eps = 1e-5
    got = L.instance_norm(_node(x), _node(gamma), _node(beta), eps).value
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    want = gamma[None, :, None, None] * (x - mu) / np.sqrt(var + eps) + beta[None, :, None, None]
    assert np.max(np.abs(got - want)) < 1e-6


def test_instance_norm_rejects_single_pixel_plane():
    with pytest.raises(ShapeError):
        L.instance_norm(_node(np.zeros((1, 2, 1, 1))), _node(np.ones(2)), _node(np.zeros(2)))


def test_instance_norm_statistics_invariant():
    rng = RngState(12)
    x = rng.normal(1 * 4 * 12 * 12).reshape(1, 4, 12, 12)
    out = L.instance_norm(_node(x), _node(np.ones(4)), _node(np.zeros(4))).value
    means = out.mean(axis=(2, 3))
    stds = out.std(axis=(2, 3))
    assert np.all(np.abs(means) < 1e-5)
    assert np.all(np.abs(stds - 1.0) < 1e-2)


def test_avg_pool_constant_and_errors():
    x = _node(np.full((1, 2, 8, 8), 0.4))
    assert np.allclose(L.avg_pool2d(x, 4).value, 0.4)
    with pytest.raises(ShapeError):
        L.avg_pool2d(x, 3)


def test_layer_gradients_pass_finite_difference():
    rng = RngState(21)

    checks = []
    x4 = rng.normal(1 * 2 * 6 * 6).reshape(1, 2, 6, 6)
    w = rng.normal(3 * 2 * 3 * 3).reshape(3, 2, 3, 3) * 0.5
    b = rng.normal(3) * 0.1
    checks.append((x4, lambda n: ad.mean(ad.tanh(L.conv2d(n, _node(w), _node(b), 1, 1)))))
    checks.append((w, lambda n: ad.mean(ad.tanh(L.conv2d(_node(x4), n, _node(b), 1, 1)))))
    wt = rng.normal(2 * 3 * 4 * 4).reshape(2, 3, 4, 4) * 0.5
    checks.append((x4, lambda n: ad.mean(ad.tanh(L.conv_transpose2d(n, _node(wt), _node(np.zeros(3)), 2, 1)))))
    checks.append((wt, lambda n: ad.mean(ad.tanh(L.conv_transpose2d(_node(x4), n, _node(np.zeros(3)), 2, 1)))))
    gm = np.ones(2)
    bt = np.zeros(2)
    checks.append((x4, lambda n: ad.mean(ad.tanh(L.instance_norm(n, _node(gm), _node(bt))))))
    xk = x4 + np.sign(x4) * 0.05  # keep activations away from their kinks
    checks.append((xk, lambda n: ad.mean(ad.leaky_relu(n, 0.2))))
    checks.append((xk, lambda n: ad.mean(ad.relu(n))))
    checks.append((x4, lambda n: ad.mean(L.avg_pool2d(n, 2))))

    for x, f in checks:
        assert ad.finite_diff_check(f, x, eps=1e-4) < 1e-5


def test_training_precision_gradients_track_verification_precision():
    # float32 graph gradients agree with the float64 oracle graph to 1e-3
    rng = RngState(30)
    x64 = rng.normal(1 * 2 * 6 * 6).reshape(1, 2, 6, 6)
    w64 = rng.normal(3 * 2 * 3 * 3).reshape(3, 2, 3, 3) * 0.5
    g64 = np.ones(3)
    b64 = np.zeros(3)

    def run(dtype):
        xn = ad.leaf(x64.astype(dtype), requires_grad=True)
        out = L.conv2d(xn, ad.leaf(w64.astype(dtype)), None, 1, 1)
        out = L.instance_norm(out, ad.leaf(g64.astype(dtype)), ad.leaf(b64.astype(dtype)))
        ad.backward(ad.mean(ad.tanh(out)))
        return xn.grad.astype(np.float64)

    ga, gb = run(np.float32), run(np.float64)
    denom = np.maximum(np.abs(gb), 1e-8)
    assert np.max(np.abs(ga - gb) / denom) < 1e-3


def test_adam_zero_gradient_keeps_params():
    p = L.Parameter(np.array([1.0, -2.0], dtype=np.float32))
    opt = L.Adam([("p", p)])
    before = p.value.copy()
    opt.step({"p": np.zeros(2, dtype=np.float32)})
    assert np.array_equal(p.value, before)
    assert opt.t == 1


def test_adam_constant_gradient_approaches_lr_steps():
    p = L.Parameter(np.array([0.0], dtype=np.float64))
    opt = L.Adam([("p", p)], lr=1e-3)
    g = np.array([0.37])
    prev = p.value.copy()
    for _ in range(300):
        prev = p.value.copy()
        opt.step({"p": g})
    delta = abs(float(p.value[0] - prev[0]))
    assert abs(delta - 1e-3) < 1e-4  # |update| -> lr * sign(g)


def test_adam_single_step_closed_form():
    p0 = np.array([0.5, -1.5])
    g = np.array([0.2, -0.8])
    p1, m1, v1 = L.adam_step(p0, g, np.zeros(2), np.zeros(2), 1, 2e-4, 0.5, 0.999, 1e-8)
    want = p0 - 2e-4 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p1, want, atol=1e-12)
    assert np.allclose(m1, 0.5 * g)
    assert np.allclose(v1, 0.001 * g * g)


def test_adam_order_independent():
    rng = RngState(4)
    params1 = [(f"p{i}", L.Parameter(rng.normal(3).astype(np.float32))) for i in range(5)]
    params2 = [(n, L.Parameter(p.value.copy())) for n, p in params1]
    grads = {f"p{i}": rng.normal(3).astype(np.float32) for i in range(5)}
    opt1 = L.Adam(params1)
    opt2 = L.Adam(list(reversed(params2)))
    opt1.step(grads)
    opt2.step(dict(reversed(list(grads.items()))))
    for (n1, p1), (_, p2) in zip(params1, {n: p for n, p in params2}.items()):
        assert np.array_equal(p1.value, p2.value)


def test_adam_rejects_non_finite_gradient():
    p = L.Parameter(np.zeros(2, dtype=np.float32))
    opt = L.Adam([("conv.weight", p)])
    with pytest.raises(NumericError, match="conv.weight"):
        opt.step({"conv.weight": np.array([1.0, np.nan], dtype=np.float32)})


def test_tape_freezes_untracked_params():
    p_train = L.Parameter(np.ones(2, dtype=np.float32))
    p_frozen = L.Parameter(np.ones(2, dtype=np.float32))
    tape = L.Tape(trainable=[p_train])
    n1, n2 = tape.node(p_train), tape.node(p_frozen)
    assert n1.requires_grad and not n2.requires_grad
    assert tape.node(p_train) is n1  # memoized per tape
