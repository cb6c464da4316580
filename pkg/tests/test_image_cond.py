import math

import numpy as np
import pytest
import torch

from smcd.image_cond import ImageAdapter, ImageCondition, ImageIntegration, make_zero_conv

from conftest import softmax_oracle


def conv3x3_oracle(x, weight, bias):
    """Direct padded 3x3 convolution, summation written out."""
    cout, cin, _, _ = weight.shape
    _, h, w = x.shape
    padded = np.zeros((cin, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = x
    out = np.zeros((cout, h, w))
    for co in range(cout):
        for r in range(h):
            for c in range(w):
                acc = bias[co]
                for ci in range(cin):
                    for dr in range(3):
                        for dc in range(3):
                            acc += weight[co, ci, dr, dc] * padded[ci, r + dr, c + dc]
                out[co, r, c] = acc
    return out


class TestZeroConv:
    def test_fresh_conv_is_exact_noop(self):
        conv = make_zero_conv(3)
        z = torch.randn(2, 3, 4, 4)
        x0 = torch.randn(2, 3, 4, 4)
        assert torch.equal(z + conv(x0), z)

    def test_zero_input_with_random_weights_zero_bias(self):
        conv = make_zero_conv(3)
        with torch.no_grad():
            conv.weight.normal_()
            conv.bias.zero_()
        z = torch.randn(1, 3, 4, 4)
        assert torch.equal(z + conv(torch.zeros(1, 3, 4, 4)), z)

    def test_matches_brute_force_convolution(self):
        conv = make_zero_conv(1)
        with torch.no_grad():
            conv.weight.zero_()
            conv.weight[0, 0, 0, 2] = 1.0  # single-one kernel
            conv.bias.fill_(0.25)
        x0 = torch.arange(9.0).reshape(1, 1, 3, 3)
        got = conv(x0)[0].detach().numpy()
        want = conv3x3_oracle(x0[0].numpy(), conv.weight.detach().numpy(),
                              conv.bias.detach().numpy())
        np.testing.assert_allclose(got, want, rtol=1e-6)


class TestImageCondition:
    def test_absent(self):
        c = ImageCondition.absent()
        assert not c.present and c.latent is None


class TestGatedCrossAttention:
    def test_beta_zero_is_exact_identity(self):
        torch.manual_seed(0)
        diim = ImageIntegration(dim=4, latent_channels=3, num_heads=1)
        z = torch.randn(2, 5, 4)
        x0 = torch.randn(1, 3, 4, 4)
        assert torch.equal(diim(z, x0, frames=2), z)

    def test_single_key_broadcasts_value(self):
        torch.manual_seed(1)
        diim = ImageIntegration(dim=4, latent_channels=3, num_heads=1)
        with torch.no_grad():
            diim.beta.fill_(0.9)
        z = torch.randn(1, 5, 4)
        x0 = torch.randn(1, 3, 1, 1)  # one spatial cell -> one kv token
        out = diim(z, x0, frames=1)
        token = diim.adapter(x0).flatten(2).transpose(1, 2)
        ctx = diim.attn.to_out(diim.attn.to_v(token))
        want = z + torch.tanh(diim.beta) * ctx.expand_as(z)
        assert torch.allclose(out, want, atol=1e-6)

    def test_two_token_numeric_case_matches_oracle(self):
        diim = ImageIntegration(dim=1, latent_channels=1, num_heads=1)
        with torch.no_grad():
            for lin in (diim.attn.to_q, diim.attn.to_k, diim.attn.to_v, diim.attn.to_out):
                lin.weight.fill_(1.0)
            # adapter reduced to identity: skip = 1, conv path 0
            diim.adapter.skip.weight.fill_(1.0)
            diim.adapter.skip.bias.zero_()
            diim.adapter.conv1.weight.zero_(); diim.adapter.conv1.bias.zero_()
            diim.adapter.conv2.weight.zero_(); diim.adapter.conv2.bias.zero_()
            diim.beta.fill_(2.0)
        z = torch.tensor([[[1.0]]])
        x0 = torch.tensor([[[[3.0, 5.0]]]])  # 1x2 latent -> kv tokens [3, 5]
        out = diim(z, x0, frames=1)
        w = softmax_oracle([1.0 * 3.0, 1.0 * 5.0])
        want = 1.0 + math.tanh(2.0) * (w[0] * 3.0 + w[1] * 5.0)
        assert out.item() == pytest.approx(want, rel=1e-6)

    def test_presence_gate_masks_exactly(self):
        torch.manual_seed(2)
        diim = ImageIntegration(dim=4, latent_channels=3, num_heads=1)
        with torch.no_grad():
            diim.beta.fill_(1.5)
        z = torch.randn(4, 5, 4)  # B=2, F=2
        x0 = torch.randn(2, 3, 4, 4)
        gate = torch.tensor([1.0, 1.0, 0.0, 0.0])[:, None, None]
        out = diim(z, x0, frames=2, out_mask=gate)
        assert torch.equal(out[2:], z[2:])
        assert not torch.equal(out[:2], z[:2])


class TestAdapter:
    def test_projects_channels(self):
        torch.manual_seed(3)
        ad = ImageAdapter(latent_channels=3, dim=8)
        out = ad(torch.randn(2, 3, 4, 4))
        assert out.shape == (2, 8, 4, 4)
