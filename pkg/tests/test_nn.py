import math

import numpy as np
import pytest

from oracles import numeric_grad, rel_error
from volmap import nn
from volmap.labeler import ClassStats

EPS = 1e-5
TOL = 1e-4


def rng():
    return np.random.default_rng(1234)


def test_delta_kernel_is_identity():
    x = rng().standard_normal((1, 5, 7))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    assert np.array_equal(nn.conv2d(x, w, np.zeros(1)), x)


def test_ones_kernel_border_sums():
    out = nn.conv2d(np.ones((1, 5, 5)), np.ones((1, 1, 3, 3)), np.zeros(1))[0]
    assert (out[1:-1, 1:-1] == 9).all()
    assert out[0, 0] == out[0, -1] == out[-1, 0] == out[-1, -1] == 4
    assert out[0, 2] == 6


def test_conv_matches_direct_loop():
    r = rng()
    x, w, b = r.standard_normal((3, 6, 5)), r.standard_normal((4, 3, 3, 3)), r.standard_normal(4)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((4, 6, 5))
    for o in range(4):
        for i in range(6):
            for j in range(5):
                ref[o, i, j] = (xp[:, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(nn.conv2d(x, w, b), ref, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        nn.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


@pytest.mark.parametrize("k", [3, 1])
def test_conv_gradients(k):
    r = rng()
    x, w, b = r.standard_normal((2, 6, 6)), r.standard_normal((3, 2, k, k)), r.standard_normal(3)
    g = r.standard_normal((3, 6, 6))
    f = lambda: float((nn.conv2d(x, w, b) * g).sum())
    _, cache = nn.conv2d_forward(x, w, b)
    dx, dw, db = nn.conv2d_backward(g, cache)
    assert rel_error(dx, numeric_grad(f, x, EPS)) < TOL
    assert rel_error(dw, numeric_grad(f, w, EPS)) < TOL
    assert rel_error(db, numeric_grad(f, b, EPS)) < TOL


def test_relu():
    assert not nn.relu(-np.ones((2, 3, 3))).any()
    x = np.abs(rng().standard_normal((2, 3, 3))) + 0.1
    assert np.array_equal(nn.relu(x), x)
    x = rng().standard_normal((2, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep finite differences away from the kink
    g = rng().standard_normal(x.shape)
    _, mask = nn.relu_forward(x)
    assert rel_error(nn.relu_backward(g, mask), numeric_grad(lambda: float((nn.relu(x) * g).sum()), x)) < TOL


def test_maxpool():
    assert np.array_equal(nn.maxpool2(np.full((2, 4, 6), 3.0)), np.full((2, 2, 3), 3.0))
    assert nn.maxpool2(np.array([[[1.0, 2.0], [3.0, 4.0]]])).tolist() == [[[4.0]]]
    with pytest.raises(ValueError):
        nn.maxpool2(np.zeros((1, 3, 4)))
    x = rng().standard_normal((2, 6, 4))
    g = rng().standard_normal((2, 3, 2))
    _, cache = nn.maxpool2_forward(x)
    num = numeric_grad(lambda: float((nn.maxpool2(x) * g).sum()), x)
    assert rel_error(nn.maxpool2_backward(g, cache), num) < TOL


def test_upsample():
    assert nn.upsample2_nearest(np.array([[[7.0]]])).tolist() == [[[7.0, 7.0], [7.0, 7.0]]]
    c = np.full((3, 4, 4), 2.5)
    assert np.array_equal(nn.upsample2_nearest(nn.maxpool2(c)), c)
    x = rng().standard_normal((2, 3, 2))
    g = rng().standard_normal((2, 6, 4))
    num = numeric_grad(lambda: float((nn.upsample2_nearest(x) * g).sum()), x)
    assert rel_error(nn.upsample2_backward(g, x.shape), num) < TOL


def test_concat():
    a = rng().standard_normal((2, 3, 3))
    assert np.array_equal(nn.concat_channels(a, np.zeros((0, 3, 3))), a)
    b = rng().standard_normal((4, 3, 3))
    out, split = nn.concat_forward(a, b)
    assert out.shape == (6, 3, 3)
    da, db = nn.concat_backward(out, split)
    assert np.array_equal(da, a) and np.array_equal(db, b)
    with pytest.raises(ValueError):
        nn.concat_channels(a, np.zeros((1, 2, 3)))


def test_class_weights_examples():
    w = nn.class_weights([0.0, 0.98, math.e - 1.02])
    assert w[0] == pytest.approx(50.4983, abs=1e-4)
    assert w[1] == pytest.approx(1 / math.log(2.0), rel=1e-12)
    assert abs(w[2] - 1.0) < 1e-12
    assert np.array_equal(nn.class_weights(ClassStats.from_counts([98, 2])), nn.class_weights([0.98, 0.02]))


def test_class_weights_other_base():
    assert nn.class_weights([0.98], log_base=2.0)[0] == pytest.approx(1.0, rel=1e-12)


def test_ce_two_class_uniform():
    loss, _ = nn.weighted_softmax_ce(np.zeros((2, 1, 1)), np.zeros((1, 1), int), [1.0, 1.0])
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_ce_confident_limit():
    losses = [nn.weighted_softmax_ce(np.array([[[s]], [[0.0]]]), np.zeros((1, 1), int), [1, 1])[0]
              for s in (1, 10, 100, 1000)]
    assert losses == sorted(losses, reverse=True)
    assert losses[-1] == 0.0  # also checks the max-subtraction keeps it finite


def test_ce_gradient_and_ignore():
    r = rng()
    logits = r.standard_normal((4, 5, 6))
    t = r.integers(0, 4, (5, 6))
    t[0, :3] = 255
    w = np.array([0.5, 2.0, 1.0, 3.0])
    loss, grad = nn.weighted_softmax_ce(logits, t, w)
    num = numeric_grad(lambda: nn.weighted_softmax_ce(logits, t, w)[0], logits)
    assert rel_error(grad, num) < TOL
    assert not grad[:, 0, :3].any()
    valid = t != 255
    p = nn.softmax(logits)
    ref = -np.mean([w[t[i, j]] * math.log(p[t[i, j], i, j]) for i, j in zip(*np.nonzero(valid))])
    assert loss == pytest.approx(ref, rel=1e-12)


def test_ce_all_ignored():
    with pytest.raises(ValueError):
        nn.weighted_softmax_ce(np.zeros((2, 2, 2)), np.full((2, 2), 255), [1, 1])


def test_softmax_sums_to_one():
    p = nn.softmax(rng().standard_normal((5, 7, 3)) * 30)
    assert np.abs(p.sum(axis=0) - 1).max() < 1e-9


def scalar_layer(p, g):
    return nn.LayerParams("s", np.array([p]), np.array([0.0]), np.array([g]), np.array([0.0]))


def test_sgd_examples():
    layer = scalar_layer(1.0, 2.0)
    nn.sgd_step([layer], 0.5)
    assert layer.weight[0] == 0.0 and layer.weight_grad[0] == 0.0
    still = scalar_layer(3.0, 0.0)
    nn.sgd_step([still], 0.5)
    assert still.weight[0] == 3.0


def test_sgd_linearity():
    a, b = scalar_layer(1.0, 0.3), scalar_layer(1.0, 0.6)
    nn.sgd_step([a], 0.1)
    a.weight_grad[:] = 0.3
    nn.sgd_step([a], 0.1)
    nn.sgd_step([b], 0.1)
    assert a.weight[0] == pytest.approx(b.weight[0], abs=1e-15)


def test_gradient_shape_mismatch():
    with pytest.raises(ValueError):
        nn.LayerParams("x", np.zeros(3), np.zeros(1), np.zeros(2))
