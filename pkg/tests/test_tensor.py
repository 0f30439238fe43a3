import math

import numpy as np
import pytest

from warpseg import tensor as T
from warpseg.tensor import AdamState, ShapeError, Tensor, adam_step, gradcheck


def test_conv2d_identity_scale():
    x = Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv2d_sum_of_entries():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = T.conv2d(x, Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 10.0


def _naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w) + b
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)])
def test_conv2d_matches_naive_loop(stride, pad, k):
    rng = np.random.default_rng(k + 10 * stride + pad)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, _naive_conv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv2d_output_shape_formula():
    out = T.conv2d(Tensor(np.zeros((1, 2, 9, 7))), Tensor(np.zeros((5, 2, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 5, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_gradient_finite_difference():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    err = gradcheck(lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1), [x, w, b])
    assert err < 1e-6


def test_bilinear_resize_identity():
    x = np.random.default_rng(1).standard_normal((1, 2, 5, 6))
    np.testing.assert_array_equal(T.bilinear_resize(Tensor(x), 5, 6).data, x)


def test_bilinear_resize_half_pixel_example():
    x = Tensor(np.array([0.0, 2.0]).reshape(1, 1, 1, 2))
    np.testing.assert_allclose(T.bilinear_resize(x, 1, 4).data.ravel(), [0.0, 0.5, 1.5, 2.0])


@pytest.mark.parametrize("size", [(1, 1), (3, 7), (10, 4)])
def test_bilinear_resize_constant(size):
    x = Tensor(np.full((1, 2, 4, 5), 3.25))
    np.testing.assert_allclose(T.bilinear_resize(x, *size).data, 3.25, rtol=0, atol=1e-15)


def test_bilinear_resize_rejects_zero_size():
    with pytest.raises(ShapeError):
        T.bilinear_resize(Tensor(np.zeros((1, 1, 2, 2))), 0, 3)


def test_cross_entropy_saturated():
    logits = np.zeros((1, 3, 2, 2))
    labels = np.array([[[0, 1], [2, 1]]])
    for i in range(2):
        for j in range(2):
            logits[0, labels[0, i, j], i, j] = 100.0
    assert T.softmax_cross_entropy(Tensor(logits), labels).item() < 1e-6


def test_cross_entropy_uniform():
    loss = T.softmax_cross_entropy(Tensor(np.zeros((1, 4, 3, 3))), np.zeros((1, 3, 3), int))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_gradient_and_ignore():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((1, 3, 2, 2))
    labels = np.array([[[0, 2], [255, 1]]])
    err = gradcheck(lambda z: T.softmax_cross_entropy(z, labels), [logits])
    assert err < 1e-6


def test_cross_entropy_all_ignored_is_zero():
    z = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    loss = T.softmax_cross_entropy(z, np.full((1, 2, 2), 255))
    loss.backward()
    assert loss.item() == 0.0
    assert not z.grad.any()


def test_l2_consistency_values_and_gradient():
    rng = np.random.default_rng(4)
    b = rng.standard_normal((1, 2, 3, 3))
    assert T.l2_consistency(Tensor(b), Tensor(b)).item() == 0.0
    assert T.l2_consistency(Tensor(b + 2.0), Tensor(b)).item() == pytest.approx(4.0, abs=1e-12)
    a = Tensor(rng.standard_normal(b.shape), requires_grad=True)
    bt = Tensor(b, requires_grad=True)
    T.l2_consistency(a, bt).backward()
    np.testing.assert_allclose(a.grad, 2 * (a.data - b) / b.size, rtol=1e-13)
    assert bt.grad is None


def test_l2_consistency_shape_mismatch():
    with pytest.raises(ShapeError):
        T.l2_consistency(Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 1))))


def test_add_and_concat_backward_split_exactly():
    rng = np.random.default_rng(5)
    a = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True)
    g = rng.standard_normal((1, 5, 3, 3))
    T.concat([a, b]).backward(g)
    np.testing.assert_array_equal(a.grad, g[:, :2])
    np.testing.assert_array_equal(b.grad, g[:, 2:])
    c = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    d = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    g2 = rng.standard_normal((2, 2))
    T.add(c, d).backward(g2)
    np.testing.assert_array_equal(c.grad, g2)
    np.testing.assert_array_equal(d.grad, g2)


def test_backward_of_scalar_seeds_one():
    x = Tensor(np.array(3.0), requires_grad=True)
    x.backward()
    assert x.grad == 1.0


def test_forward_determinism():
    rng = np.random.default_rng(6)
    x, w = rng.standard_normal((1, 3, 8, 8)), rng.standard_normal((2, 3, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


OPS = {
    "conv_s1": (lambda x, w, b: T.conv2d(x, w, b, 1, 1), [(2, 3, 6, 6), (4, 3, 3, 3), (4,)]),
    "conv_s2": (lambda x, w, b: T.conv2d(x, w, b, 2, 1), [(1, 2, 8, 8), (3, 2, 3, 3), (3,)]),
    "conv_1x1": (lambda x, w, b: T.conv2d(x, w, b), [(1, 3, 5, 4), (2, 3, 1, 1), (2,)]),
    "resize_up": (lambda x: T.bilinear_resize(x, 7, 9), [(1, 2, 3, 4)]),
    "resize_down": (lambda x: T.bilinear_resize(x, 2, 3), [(1, 2, 8, 8)]),
    "upsample2x": (T.upsample2x, [(1, 2, 3, 3)]),
    "upsample_nearest": (T.upsample_nearest2x, [(1, 2, 3, 3)]),
    "relu": (T.relu, [(2, 3, 4)]),
    "sigmoid": (T.sigmoid, [(2, 3, 4)]),
    "mul_broadcast": (T.mul, [(1, 3, 4, 4), (1, 1, 4, 4)]),
    "add": (T.add, [(1, 3, 4, 4), (1, 3, 4, 4)]),
    "concat": (lambda a, b: T.concat([a, b]), [(1, 2, 3, 3), (1, 1, 3, 3)]),
    "mean": (T.mean_all, [(3, 4)]),
    "weight_decay": (lambda a, b: T.weight_decay([a, b]), [(2, 3), (4,)]),
    "cross_entropy": (lambda z: T.softmax_cross_entropy(z, np.array([[[0, 1, 2], [2, 255, 0]]])),
                      [(1, 3, 2, 3)]),
    "l2": (lambda a: T.l2_consistency(a, Tensor(np.linspace(-1, 1, 12).reshape(1, 3, 2, 2))),
           [(1, 3, 2, 2)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(20))
def test_op_gradients(name, seed):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    if name == "relu":
        # keep away from the kink so central differences stay valid
        arrays[0] = np.where(np.abs(arrays[0]) < 1e-3, 0.5, arrays[0])
    assert gradcheck(fn, arrays, seed=seed) < 1e-6


def test_adam_zero_gradient_is_null_update():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    state = AdamState.for_params(p, lr=0.01)
    p["w"].grad = np.zeros(2)
    adam_step(p, state)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert state.step_count == 1
    assert not state.first_moment["w"].any() and not state.second_moment["w"].any()


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.array(0.5), requires_grad=True)}
    state = AdamState.for_params(p, lr=0.01)
    p["w"].grad = np.array(1.0)
    adam_step(p, state)
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert p["w"].data == pytest.approx(0.5 - 0.01 / (1 + 1e-8), abs=1e-15)


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(7)
    w0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(4)]
    p = {"w": Tensor(w0.copy(), requires_grad=True)}
    state = AdamState.for_params(p, lr=0.05)
    for g in grads:
        p["w"].grad = g
        adam_step(p, state)
    w, m, v = w0.copy(), np.zeros(5), np.zeros(5)
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, w, rtol=1e-14)
    assert state.step_count == 4


def test_adam_rejects_missing_gradient():
    p = {"a": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(ValueError, match="no gradient"):
        adam_step(p, AdamState.for_params(p))


def test_mac_counter():
    with T.count_macs() as macs:
        T.conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((4, 3, 3, 3))), stride=2, padding=1)
    assert macs[0] == 4 * 3 * 9 * 4 * 4
