import math

import mpmath
import numpy as np
import pytest

from hfvit import autodiff as ad
from hfvit import nn
from hfvit.autodiff import Tensor, grad_check
from hfvit.errors import ContractError, DimensionError


def naive_depthwise(x, w, stride):
    """Five nested loops: output row, output column, channel, kernel row, kernel column."""
    h, wd, c = x.shape
    k = w.shape[-1]
    pad = (k - 1) // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((ho, wo, c))
    for i in range(ho):
        for j in range(wo):
            for ch in range(c):
                for u in range(k):
                    for v in range(k):
                        out[i, j, ch] += xp[i * stride + u, j * stride + v, ch] * w[ch, u, v]
    return out


def phi(x):
    return float(mpmath.ncdf(mpmath.mpf(x)))


class TestDepthwiseConv:
    def test_identity_kernel(self):
        w = np.zeros((1, 3, 3))
        w[0, 1, 1] = 1.0
        layer = nn.Conv2dLayer("depthwise", w)
        out = nn.depthwise_conv(Tensor(np.ones((4, 4, 1))), layer)
        assert np.array_equal(out.data, np.ones((4, 4, 1)))

    def test_stride_two_halves(self):
        layer = nn.Conv2dLayer("depthwise", np.ones((1, 3, 3)), stride=2)
        assert nn.depthwise_conv(Tensor(np.zeros((64, 64, 1))), layer).shape == (32, 32, 1)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_naive_loops(self, f64, rng, stride):
        x, w = rng.normal(size=(6, 6, 3)), rng.normal(size=(3, 3, 3))
        out = nn.depthwise_conv(Tensor(x), nn.Conv2dLayer("depthwise", w, stride=stride))
        np.testing.assert_allclose(out.data, naive_depthwise(x, w, stride), rtol=1e-12, atol=1e-14)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            nn.depthwise_conv(Tensor(np.zeros((4, 4, 2))), nn.Conv2dLayer("depthwise", np.ones((3, 3, 3))))


class TestPointwiseConv:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(5, 5, 4)).astype(np.float32)
        layer = nn.Conv2dLayer("pointwise", np.eye(4).reshape(4, 4, 1, 1))
        assert np.array_equal(nn.pointwise_conv(Tensor(x), layer).data, x)

    def test_channel_expansion(self):
        layer = nn.Conv2dLayer("pointwise", np.ones((8, 1, 1, 1)))
        assert nn.pointwise_conv(Tensor(np.zeros((32, 32, 1))), layer).shape == (32, 32, 8)

    def test_matches_per_pixel_matmul(self, f64, rng):
        x, w = rng.normal(size=(4, 5, 3)), rng.normal(size=(6, 3, 1, 1))
        out = nn.pointwise_conv(Tensor(x), nn.Conv2dLayer("pointwise", w)).data
        for i in range(4):
            for j in range(5):
                np.testing.assert_allclose(out[i, j], w[:, :, 0, 0] @ x[i, j], rtol=1e-12)


class TestBatchNorm:
    def test_identity_parameters(self, f64, rng):
        bn = nn.BatchNormLayer(3)
        bn.running_var.data = np.full(3, 1 - bn.eps)
        x = rng.normal(size=(4, 3))
        np.testing.assert_allclose(nn.batch_norm(Tensor(x), bn).data, x, rtol=1e-12)

    def test_forced_arithmetic(self, f64):
        bn = nn.BatchNormLayer(1)
        bn.gamma.data[:] = 2.0
        bn.beta.data[:] = 1.0
        bn.running_mean.data[:] = 3.0
        bn.running_var.data[:] = 4.0 - bn.eps
        assert nn.batch_norm(Tensor(np.array([5.0])), bn).data[0] == pytest.approx(3.0, abs=1e-12)

    def test_train_mode_two_pass_statistics(self, f64, rng):
        bn = nn.BatchNormLayer(4)
        bn.mode = "train"
        x = rng.normal(2.0, 3.0, size=(5, 3, 3, 4))
        out = nn.batch_norm(Tensor(x), bn).data
        flat = x.reshape(-1, 4)
        mean = flat.sum(axis=0) / len(flat)
        var = ((flat - mean) ** 2).sum(axis=0) / len(flat)
        np.testing.assert_allclose(out, (x - mean) / np.sqrt(var + bn.eps), rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(bn.running_mean.data, 0.1 * mean, rtol=1e-12)
        np.testing.assert_allclose(bn.running_var.data, 0.9 + 0.1 * var, rtol=1e-12)

    def test_train_mode_empty_batch(self):
        bn = nn.BatchNormLayer(2)
        bn.mode = "train"
        with pytest.raises(ContractError):
            nn.batch_norm(Tensor(np.zeros((0, 2))), bn)

    def test_train_mode_gradient(self, f64, rng):
        bn = nn.BatchNormLayer(3)
        bn.mode = "train"
        bn.gamma.data = rng.normal(size=3)
        x = Tensor(rng.normal(size=(6, 3)), requires_grad=True, name="x")
        probe = rng.normal(size=(6, 3))
        report = grad_check(lambda: (nn.batch_norm(x, bn) * probe).sum(), {"x": x, "gamma": bn.gamma})
        assert report.passed


class TestGelu:
    def test_zero(self):
        assert nn.gelu(Tensor(0.0)).item() == 0.0

    def test_value_at_three(self):
        assert nn.gelu(Tensor(3.0)).item() == pytest.approx(2.99595, abs=1e-4)

    @pytest.mark.parametrize("x", [-6.0, -2.5, -0.3, 0.0, 0.7, 1.0, 4.2])
    def test_matches_high_precision_phi(self, f64, x):
        # the far negative tail loses relative precision to cancellation in 1 + erf
        assert nn.gelu(Tensor(x)).item() == pytest.approx(x * phi(x), rel=1e-13, abs=1e-16)

    def test_reflection_identity(self, f64, rng):
        # x*Phi(x) - (-x)*Phi(-x) = x*(Phi(x) + Phi(-x)) = x, so the difference (not the sum) is x
        x = rng.normal(scale=3.0, size=50)
        diff = nn.gelu(Tensor(x)).data - nn.gelu(Tensor(-x)).data
        np.testing.assert_allclose(diff, x, rtol=1e-12, atol=1e-15)
        even = nn.gelu(Tensor(x)).data + nn.gelu(Tensor(-x)).data
        np.testing.assert_allclose(even, [x_ * (2 * phi(x_) - 1) for x_ in x], rtol=1e-9, atol=1e-15)


def _attention(rng, width=32, heads=2, tokens=4, bias=True):
    def lin():
        return nn.Linear(rng.normal(scale=0.3, size=(width, width)), rng.normal(scale=0.1, size=width))
    rel = rng.normal(scale=0.5, size=(heads, tokens, tokens)) if bias else None
    return nn.AttentionLayer(lin(), lin(), lin(), lin(), heads, rel)


def loop_attention(tokens, layer, use_bias):
    t, e = tokens.shape
    dh = layer.head_dim
    proj = lambda lin: tokens @ lin.weight.data.T + lin.bias.data  # noqa: E731
    q, k, v = proj(layer.wq), proj(layer.wk), proj(layer.wv)
    ctx = np.zeros((t, e))
    for h in range(layer.heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(t):
            logits = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(t)])
            if use_bias:
                logits = logits + layer.rel_bias.data[h, i]
            w = np.exp(logits - logits.max())
            w /= w.sum()
            ctx[i, sl] = sum(w[j] * v[j, sl] for j in range(t))
    return ctx @ layer.wo.weight.data.T + layer.wo.bias.data


class TestAttention:
    def test_identical_tokens_give_uniform_rows(self, f64, rng):
        layer = _attention(rng, tokens=5, bias=False)
        tokens = np.tile(rng.normal(size=32), (5, 1))
        weights = []
        out = nn.multi_head_attention(Tensor(tokens), layer, use_bias_B=False, weights_out=weights).data
        np.testing.assert_allclose(weights[0], 0.2, rtol=1e-12)
        np.testing.assert_allclose(out, np.tile(out[0], (5, 1)), rtol=1e-12)

    def test_five_token_shape(self, rng):
        layer = _attention(rng, tokens=5)
        assert nn.multi_head_attention(Tensor(rng.normal(size=(5, 32))), layer).shape == (5, 32)

    @pytest.mark.parametrize("use_bias", [True, False])
    def test_matches_loop_oracle(self, f64, rng, use_bias):
        layer = _attention(rng)
        tokens = rng.normal(size=(4, 32))
        out = nn.multi_head_attention(Tensor(tokens), layer, use_bias_B=use_bias).data
        np.testing.assert_allclose(out, loop_attention(tokens, layer, use_bias), atol=1e-6)

    def test_batched_equals_per_sample(self, f64, rng):
        layer = _attention(rng)
        tokens = rng.normal(size=(3, 4, 32))
        batched = nn.multi_head_attention(Tensor(tokens), layer).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], nn.multi_head_attention(Tensor(tokens[i]), layer).data,
                                       rtol=1e-12, atol=1e-14)

    def test_bias_size_mismatch(self, rng):
        layer = _attention(rng, tokens=4)
        with pytest.raises(DimensionError):
            nn.multi_head_attention(Tensor(rng.normal(size=(5, 32))), layer)


class TestPooling:
    def test_constant_window(self):
        out = nn.adaptive_avg_pool(Tensor(np.full((2, 2, 32), 1.75)))
        assert out.shape == (1, 32) and np.all(out.data == 1.75)

    def test_forced_arithmetic(self):
        window = np.array([1.0, 2.0, 3.0, 4.0]).reshape(2, 2, 1)
        assert nn.adaptive_avg_pool(Tensor(window)).item() == 2.5

    def test_random_window_four_term_mean(self, f64, rng):
        w = rng.normal(size=(2, 2, 32))
        expected = (w[0, 0] + w[0, 1] + w[1, 0] + w[1, 1]) / 4
        np.testing.assert_allclose(nn.adaptive_avg_pool(Tensor(w)).data[0], expected, rtol=1e-15)

    def test_wrong_window(self):
        with pytest.raises(DimensionError):
            nn.adaptive_avg_pool(Tensor(np.zeros((3, 2, 4))))


class TestDropoutAndModule:
    def test_inference_is_identity(self, rng):
        x = Tensor(rng.normal(size=(8, 8)))
        assert nn.dropout(x, 0.5, training=False) is x

    def test_training_requires_rng(self):
        with pytest.raises(ContractError):
            nn.dropout(Tensor(np.ones(4)), 0.5, training=True)

    def test_inverted_scaling(self):
        out = nn.dropout(Tensor(np.ones(10000)), 0.25, training=True, rng=nn.philox(0, 1)).data
        kept = out[out != 0]
        np.testing.assert_allclose(kept, 1 / 0.75, rtol=1e-6)
        assert abs(len(kept) / 10000 - 0.75) < 0.02

    def test_philox_is_reproducible(self):
        assert nn.philox(5, 1, 2).random() == nn.philox(5, 1, 2).random()
        assert nn.philox(5, 1, 2).random() != nn.philox(5, 2, 1).random()

    def test_layer_norm_statistics(self, f64, rng):
        out = nn.layer_norm(Tensor(rng.normal(3.0, 2.0, size=(6, 32))), nn.LayerNorm(32)).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, rtol=1e-5)
