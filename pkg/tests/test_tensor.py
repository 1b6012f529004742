import numpy as np
import pytest

import oracles
from ddtb.errors import GradientError, ShapeError
from ddtb.tensor import (Tensor, abs_, add, backward, concat, conv2d, div, expand, getitem, l2_norm, mean, mul,
                         mul_scalar, no_grad, parameter, pixel_shuffle, pixel_unshuffle, relu, reshape, sigmoid, sqrt,
                         square, ste_round, ste_surrogate, sub, sum_)


def numeric_grad(f, x: np.ndarray, h=1e-5):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        v = flat[i]
        flat[i] = v + h
        up = f()
        flat[i] = v - h
        down = f()
        flat[i] = v
        gf[i] = (up - down) / (2 * h)
    return g


def assert_grad(build, *shapes, rng, low=-2, high=2, tol=1e-4, away_from=None):
    leaves = []
    for s in shapes:
        data = rng.uniform(low, high, size=s)
        if away_from is not None:
            data = np.where(np.abs(data - away_from) < 1e-3, data + 0.01, data)
        leaves.append(parameter(data))
    out = build(*leaves)
    backward(out)
    for p in leaves:
        num = numeric_grad(lambda: build(*[Tensor(q.data) for q in leaves]).item(), p.data)
        np.testing.assert_allclose(p.grad, num, rtol=tol, atol=1e-8)


class TestConv2d:
    def test_dot_product_example(self):
        x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        w = Tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
        assert conv2d(x, w).data.reshape(-1).tolist() == [5.0]

    def test_identity_1x1(self, rng):
        x = rng.normal(size=(2, 5, 4, 3))
        w = np.eye(5).reshape(5, 5, 1, 1)
        np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(5))).data, x)

    def test_same_padding_shape(self, rng):
        out = conv2d(Tensor(rng.normal(size=(2, 3, 8, 8))), Tensor(rng.normal(size=(4, 3, 3, 3))), padding=1)
        assert out.shape == (2, 4, 8, 8)

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 3), (1, 1, 1), (2, 0, 2), (3, 2, 3)])
    def test_matches_loop_oracle(self, rng, stride, pad, k):
        x, w, b = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, k, k)), rng.normal(size=4)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        np.testing.assert_allclose(got, oracles.conv2d(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    def test_channel_mismatch_names_axes(self, rng):
        with pytest.raises(ShapeError) as err:
            conv2d(Tensor(rng.normal(size=(1, 3, 5, 5))), Tensor(rng.normal(size=(2, 4, 3, 3))))
        assert err.value.axes

    def test_kernel_larger_than_input(self, rng):
        with pytest.raises(ShapeError):
            conv2d(Tensor(rng.normal(size=(1, 1, 2, 2))), Tensor(rng.normal(size=(1, 1, 3, 3))))

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
    def test_gradients(self, rng, stride, pad):
        assert_grad(lambda x, w, b: sum_(square(conv2d(x, w, b, stride, pad))),
                    (2, 2, 5, 5), (3, 2, 3, 3), (3,), rng=rng)


class TestBackward:
    def test_linear(self):
        x = parameter(np.ones(4))
        backward(sum_(mul_scalar(x, 3.0)))
        assert x.grad.tolist() == [3.0] * 4

    def test_accumulates_over_uses(self):
        x = parameter(np.ones(3))
        backward(add(sum_(x), sum_(x)))
        assert x.grad.tolist() == [2.0] * 3

    def test_non_scalar_root(self):
        with pytest.raises(GradientError):
            backward(mul_scalar(parameter(np.ones(3)), 2.0))

    def test_deterministic(self, rng):
        w0 = rng.normal(size=(3, 2, 3, 3))
        x = rng.normal(size=(1, 2, 6, 6))
        grads = []
        for _ in range(2):
            w = parameter(w0.copy())
            backward(sum_(square(relu(conv2d(Tensor(x), w, padding=1)))))
            grads.append(w.grad)
        assert np.array_equal(grads[0], grads[1])

    def test_no_grad_builds_no_graph(self):
        x = parameter(np.ones(2))
        with no_grad():
            y = mul_scalar(x, 2.0)
        assert not y.requires_grad


class TestSteRound:
    def test_forward_half_away(self):
        assert ste_round(Tensor([0.5, -0.5, 1.4, 3.0, -2.5])).data.tolist() == [1, -1, 1, 3, -3]

    def test_matches_oracle(self, rng):
        v = rng.uniform(-10, 10, size=200).round(1)
        assert ste_round(Tensor(v)).data.tolist() == [oracles.round_half_away(a) for a in v]

    def test_backward_is_identity(self):
        x = parameter([0.2, 1.7, -3.5])
        backward(sum_(ste_round(x)))
        assert x.grad.tolist() == [1.0, 1.0, 1.0]

    def test_surrogate_disables_rounding(self):
        with ste_surrogate():
            assert ste_round(Tensor([0.3])).item() == pytest.approx(0.3)
        assert ste_round(Tensor([0.3])).item() == 0.0


class TestPixelShuffle:
    def test_index_example(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
        assert pixel_shuffle(x, 2).data.reshape(2, 2).tolist() == [[1, 2], [3, 4]]

    def test_shape(self, rng):
        assert pixel_shuffle(Tensor(rng.normal(size=(2, 64, 5, 5))), 4).shape == (2, 4, 20, 20)

    def test_r1_identity(self, rng):
        x = rng.normal(size=(1, 3, 2, 2))
        np.testing.assert_array_equal(pixel_shuffle(Tensor(x), 1).data, x)

    @pytest.mark.parametrize("r", [2, 3])
    def test_matches_oracle_and_inverts(self, rng, r):
        x = rng.normal(size=(2, 2 * r * r, 3, 4))
        y = pixel_shuffle(Tensor(x), r)
        np.testing.assert_array_equal(y.data, oracles.pixel_shuffle(x, r))
        np.testing.assert_array_equal(pixel_unshuffle(y, r).data, x)

    def test_indivisible(self, rng):
        with pytest.raises(ShapeError):
            pixel_shuffle(Tensor(rng.normal(size=(1, 3, 2, 2))), 2)

    def test_gradient(self, rng):
        assert_grad(lambda x: sum_(mul(pixel_shuffle(x, 2), Tensor(np.arange(32.0).reshape(1, 2, 4, 4)))),
                    (1, 8, 2, 2), rng=rng)


class TestElementwise:
    def test_values(self):
        assert relu(Tensor([-2.0, 3.0])).data.tolist() == [0.0, 3.0]
        assert sigmoid(Tensor(0.0)).item() == 0.5

    def test_relu_subgradient_at_zero(self):
        x = parameter([0.0, 1.0])
        backward(sum_(relu(x)))
        assert x.grad.tolist() == [0.0, 1.0]

    def test_mean_gradient(self):
        x = parameter(np.zeros(8))
        backward(mean(x))
        assert np.allclose(x.grad, 1 / 8)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_l2_norm_zero_has_zero_grad(self):
        x = parameter(np.zeros((2, 3)))
        backward(sum_(l2_norm(x)))
        assert np.all(x.grad == 0)

    @pytest.mark.parametrize("fn", [
        lambda x, y: sum_(mul(sigmoid(x), y)),
        lambda x, y: sum_(sub(square(x), y)),
        lambda x, y: sum_(div(x, add(square(y), Tensor(1.0)))),
        lambda x, y: mean(mul(sqrt(add(square(x), Tensor(1.0))), y)),
        lambda x, y: sum_(l2_norm(mul(x, y), axis=1)),
        lambda x, y: sum_(mul(concat([x, y], axis=1), concat([y, x], axis=1))),
        lambda x, y: sum_(mul(reshape(x, (6, 2)), reshape(y, (6, 2)))),
        lambda x, y: sum_(mul(getitem(x, (slice(None), 1)), getitem(y, (slice(None), 0)))),
        lambda x, y: sum_(mul(expand(sum_(x, axis=1, keepdims=True), (4, 3)), y)),
    ])
    def test_gradients_match_fd(self, rng, fn):
        assert_grad(fn, (4, 3), (4, 3), rng=rng)

    def test_abs_and_relu_away_from_kink(self, rng):
        assert_grad(lambda x: sum_(mul(abs_(x), relu(x))), (5, 4), rng=rng, away_from=0.0)
