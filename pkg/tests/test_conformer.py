import numpy as np
import pytest
import torch

from powerskel.conformer import (
    ConformerBackbone,
    ConformerBlock,
    ConformerConfig,
    ConvModule,
    FeedForward,
    SelfAttention,
)

DT = torch.float64


def _gen(seed=0):
    return torch.Generator().manual_seed(seed)


def fd_gradients(module, x, seed=0, step=1e-4):
    """Central finite differences of a fixed scalar projection of the output.

    Returns (analytic, numeric) gradient pairs for every parameter. The
    projection weights are fixed per call so both sides see one function.
    """
    w = torch.randn(module(x).shape, dtype=DT, generator=_gen(seed + 999))

    def scalar():
        return (module(x) * w).sum()

    loss = scalar()
    module.zero_grad()
    loss.backward()
    pairs = []
    for p in module.parameters():
        analytic = p.grad.detach().clone()
        numeric = torch.zeros_like(p)
        flat = p.data.view(-1)
        nflat = numeric.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = scalar().item()
            flat[i] = orig - step
            down = scalar().item()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * step)
        pairs.append((analytic, numeric))
    return pairs


def assert_grads_close(pairs, rel=1e-4):
    for analytic, numeric in pairs:
        scale = torch.maximum(analytic.abs(), numeric.abs())
        tol = rel * torch.clamp(scale, min=1e-6)
        assert bool((analytic - numeric).abs().le(tol).all()), (
            f"max deviation {(analytic - numeric).abs().max():.3g}"
        )


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            ConformerConfig(k=8, n=3)  # 8 % 3 != 0
        with pytest.raises(ValueError):
            ConformerConfig(k=8, n=2, Ke=4)  # even kernel
        with pytest.raises(ValueError):
            ConformerConfig(k=8, n=2, tokens=3)  # 3 does not divide 8
        with pytest.raises(ValueError):
            ConformerConfig(k=12, n=3, tokens=6)  # token width 2 vs 3 heads
        cfg = ConformerConfig(k=612, L=4, n=6, d_ff=128, Ke=15)
        assert cfg.d_token == 612 and cfg.d_head == 102

    def test_token_factorization(self):
        cfg = ConformerConfig(k=192, n=2, tokens=12)
        assert cfg.d_token == 16 and cfg.d_head == 8


class TestFeedForward:
    def test_zero_weights_zero_output(self):
        ff = FeedForward(4, 8, _gen())
        with torch.no_grad():
            for p in ff.parameters():
                p.zero_()
        x = torch.randn(4, dtype=DT, generator=_gen(1))
        assert torch.equal(ff(x), torch.zeros(4, dtype=DT))

    def test_bias_only_path_finite(self):
        ff = FeedForward(4, 8, _gen())
        with torch.no_grad():
            ff.w1.zero_()
            ff.w2.zero_()
        x = torch.randn(4, dtype=DT, generator=_gen(2))
        out = ff(x)
        assert torch.isfinite(out).all()
        assert torch.equal(out, ff.b2)  # only the output bias survives

    def test_gradients(self):
        ff = FeedForward(5, 7, _gen(3))
        x = torch.randn(5, dtype=DT, generator=_gen(4))
        assert_grads_close(fd_gradients(ff, x))


class TestSelfAttention:
    def test_single_token_weights_one(self):
        attn = SelfAttention(6, 2, _gen(5))
        y = torch.randn(1, 6, dtype=DT, generator=_gen(6))
        weights = attn.attention_weights(y)
        assert torch.allclose(weights, torch.ones_like(weights))
        expected = (y @ attn.wv) @ attn.wo
        assert torch.allclose(attn(y), expected)

    def test_rows_sum_to_one(self):
        attn = SelfAttention(8, 4, _gen(7))
        y = torch.randn(5, 8, dtype=DT, generator=_gen(8))
        sums = attn.attention_weights(y).sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_permutation_equivariance(self):
        attn = SelfAttention(8, 2, _gen(9))
        y = torch.randn(7, 8, dtype=DT, generator=_gen(10))
        perm = torch.randperm(7, generator=_gen(11))
        assert torch.allclose(attn(y)[perm], attn(y[perm]), atol=1e-12)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ValueError):
            SelfAttention(7, 2, _gen())

    def test_gradients(self):
        attn = SelfAttention(4, 2, _gen(12))
        y = torch.randn(3, 4, dtype=DT, generator=_gen(13))
        assert_grads_close(fd_gradients(attn, y))


class TestConvModule:
    def test_zero_kernel_zero_output(self):
        conv = ConvModule(3, _gen(14))
        with torch.no_grad():
            conv.kernel.zero_()
            conv.bias.zero_()
        y = torch.randn(2, 6, dtype=DT, generator=_gen(15))
        assert torch.equal(conv(y), torch.zeros_like(y))

    def test_centered_delta_is_relu(self):
        conv = ConvModule(5, _gen(16))
        with torch.no_grad():
            conv.kernel.zero_()
            conv.kernel[2] = 1.0
            conv.bias.zero_()
        y = torch.randn(3, 9, dtype=DT, generator=_gen(17))
        assert torch.allclose(conv(y), torch.relu(y))

    def test_gradients(self):
        conv = ConvModule(3, _gen(18))
        # keep pre-activations away from the ReLU kink for finite differences
        y = torch.randn(2, 6, dtype=DT, generator=_gen(19)) + 3.0
        assert_grads_close(fd_gradients(conv, y))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            ConvModule(4, _gen())


class TestConformerBlock:
    def _block(self, d=6, n=2, d_ff=8, Ke=3, seed=20):
        return ConformerBlock(d, n, d_ff, Ke, _gen(seed))

    def test_zero_weights_is_layernorm(self):
        block = self._block()
        with torch.no_grad():
            for name, p in block.named_parameters():
                if not name.startswith("norm"):
                    p.zero_()
        y = torch.randn(4, 6, dtype=DT, generator=_gen(21))
        expected = torch.nn.functional.layer_norm(y, (6,))
        assert torch.allclose(block(y), expected, atol=1e-12)

    def test_shape_preserved(self):
        block = self._block()
        y = torch.randn(5, 6, dtype=DT, generator=_gen(22))
        assert block(y).shape == y.shape

    def test_gradients(self):
        block = self._block(seed=23)
        y = torch.randn(2, 6, dtype=DT, generator=_gen(24))
        assert_grads_close(fd_gradients(block, y))


class TestBackbone:
    def test_l1_without_projection_is_one_block(self):
        cfg = ConformerConfig(k=8, L=1, n=2, d_ff=8, Ke=3, tokens=1, project_io=False)
        bb = ConformerBackbone(cfg, seed=25)
        x = torch.randn(8, dtype=DT, generator=_gen(26))
        expected = bb.blocks[0](x.view(1, 8)).view(8)
        assert torch.allclose(bb(x), expected, atol=1e-12)

    def test_deterministic_construction_and_forward(self):
        cfg = ConformerConfig(k=16, L=2, n=2, d_ff=8, Ke=3, tokens=4)
        a = ConformerBackbone(cfg, seed=27)
        b = ConformerBackbone(cfg, seed=27)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        x = torch.randn(16, dtype=DT, generator=_gen(28))
        assert torch.equal(a(x), b(x))

    def test_default_config_single_token(self):
        cfg = ConformerConfig(k=612, L=4, n=6, d_ff=128, Ke=15, tokens=1)
        bb = ConformerBackbone(cfg, seed=29)
        x = torch.randn(612, dtype=DT, generator=_gen(30))
        out = bb(x)
        assert out.shape == (612,)
        assert torch.isfinite(out).all()

    def test_default_config_tokenized(self):
        # 12 path-tokens of width 51 cannot split into 6 heads; the nearest
        # valid factorization for the 612-wide frame uses 6 tokens
        cfg = ConformerConfig(k=612, L=1, n=6, d_ff=32, Ke=15, tokens=6)
        bb = ConformerBackbone(cfg, seed=31)
        x = torch.randn(612, dtype=DT, generator=_gen(32))
        out = bb(x)
        assert out.shape == (612,)
        assert torch.isfinite(out).all()

    def test_batched_matches_single(self):
        cfg = ConformerConfig(k=12, L=1, n=2, d_ff=8, Ke=3, tokens=3)
        bb = ConformerBackbone(cfg, seed=33)
        xb = torch.randn(4, 12, dtype=DT, generator=_gen(34))
        batched = bb(xb)
        for i in range(4):
            assert torch.allclose(batched[i], bb(xb[i]), atol=1e-12)

    def test_gradients_acceptance_config(self):
        # k=8, L=1, n=2, Ke=3 at float64: analytic vs central differences
        cfg = ConformerConfig(k=8, L=1, n=2, d_ff=8, Ke=3, tokens=2)
        bb = ConformerBackbone(cfg, seed=35)
        x = torch.randn(8, dtype=DT, generator=_gen(36))
        assert_grads_close(fd_gradients(bb, x))

    def test_input_gradient_matches_fd(self):
        cfg = ConformerConfig(k=8, L=1, n=2, d_ff=8, Ke=3, tokens=1)
        bb = ConformerBackbone(cfg, seed=37)
        x = torch.randn(8, dtype=DT, generator=_gen(38), requires_grad=True)
        w = torch.randn(8, dtype=DT, generator=_gen(39))
        loss = (bb(x) * w).sum()
        loss.backward()
        analytic = x.grad.clone()
        numeric = torch.zeros_like(x)
        step = 1e-4
        with torch.no_grad():
            for i in range(8):
                orig = x[i].item()
                x[i] = orig + step
                up = (bb(x) * w).sum().item()
                x[i] = orig - step
                down = (bb(x) * w).sum().item()
                x[i] = orig
                numeric[i] = (up - down) / (2 * step)
        assert_grads_close([(analytic, numeric)])
