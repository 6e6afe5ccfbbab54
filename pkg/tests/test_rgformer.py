import math

import pytest
import torch
from einops import rearrange

from conftest import central_difference, relative_error, sample_indices
from retidiff.config import ModelConfig, build_config
from retidiff.model import RetiDiff, count_parameters
from retidiff.priors import RetinexPriors
from retidiff.rgformer import DFA, RGMCA, AuxDecoder, RGformer

REDUCED = dict(channels=(8, 16, 32, 64), blocks=(1, 1, 1, 1), heads=(1, 2, 4, 8), prior_channels=4)


def priors(c=64, batch=1, dtype=torch.float32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return RetinexPriors(torch.randn(batch, 3 * c, generator=g, dtype=dtype),
                         torch.randn(batch, c, generator=g, dtype=dtype))


def set_identity_modulation(mod):
    with torch.no_grad():
        mod.scale.weight.zero_()
        mod.scale.bias.fill_(1.0)
        mod.shift.weight.zero_()
        mod.shift.bias.zero_()


class TestRGMCA:
    def test_shape(self):
        blk = RGMCA(64, heads=1, prior_channels=64)
        f = torch.randn(1, 64, 16, 16)
        assert blk(f, priors()).shape == (1, 64, 16, 16)

    @pytest.mark.parametrize("heads", [1, 2, 4])
    def test_rows_are_probability_vectors(self, heads):
        blk = RGMCA(32, heads=heads, prior_channels=8)
        attn = blk.attention_map(torch.randn(2, 32, 8, 8), priors(8, 2))
        assert attn.shape == (2, heads, 64, 64)
        assert torch.all(attn >= 0)
        assert (attn.sum(-1) - 1).abs().max().item() <= 1e-6

    def test_fused_path_matches_explicit_attention(self):
        blk = RGMCA(16, heads=2, prior_channels=4).double()
        f, z = torch.randn(1, 16, 4, 4, dtype=torch.float64), priors(4, dtype=torch.float64)
        _, _, v = blk.qkv(f, z)
        out = blk.attention_map(f, z) @ v
        out = rearrange(out, "b h (x y) c -> b (h c) x y", x=4)
        assert torch.allclose(blk(f, z), f + blk.project_out(out), atol=1e-12)

    def test_zero_value_projection_is_identity(self):
        blk = RGMCA(64, heads=1, prior_channels=64)
        set_identity_modulation(blk.mod_r)
        set_identity_modulation(blk.mod_l)
        with torch.no_grad():
            for p in blk.to_v.parameters():
                p.zero_()
        f = torch.randn(1, 64, 16, 16)
        assert torch.equal(blk(f, priors()), f)

    def test_split_is_three_to_one(self):
        blk = RGMCA(64, heads=2, prior_channels=16)
        assert blk.split == 48
        assert blk.to_q[0].in_channels == 48
        assert blk.to_k[0].in_channels == 16 and blk.to_v[0].in_channels == 16
        assert blk.project_out.out_channels == 64

    def test_errors(self):
        with pytest.raises(ValueError):
            RGMCA(30, heads=1, prior_channels=8)
        blk = RGMCA(32, heads=1, prior_channels=8)
        with pytest.raises(ValueError):
            blk(torch.randn(1, 32, 4, 4), priors(16))
        with pytest.raises(ValueError):
            blk(torch.randn(1, 16, 4, 4), priors(8))

    def test_channel_scale_mode(self):
        assert RGMCA(64, 2, 8, scale_mode="channels").scale == pytest.approx(1 / 8)
        assert RGMCA(64, 2, 8).scale == pytest.approx(1 / math.sqrt(8))


class TestDFA:
    def test_shape(self):
        assert DFA(64, 64)(torch.randn(1, 64, 16, 16), priors()).shape == (1, 64, 16, 16)

    def test_zero_gate_is_identity(self):
        blk = DFA(64, 64)
        with torch.no_grad():
            for p in blk.w2.parameters():
                p.zero_()
        f = torch.randn(1, 64, 16, 16)
        assert torch.equal(blk(f, priors()), f)

    def test_errors(self):
        blk = DFA(16, 4)
        with pytest.raises(ValueError):
            blk(torch.randn(1, 8, 4, 4), priors(4))
        with pytest.raises(ValueError):
            blk(torch.randn(1, 16, 4, 4), priors(8))


def block_gradient_errors(block, f, z, n=12, seed=0):
    """Relative errors between autograd and central differences on random coordinates."""
    g = torch.Generator().manual_seed(seed)
    probe = torch.randn(block(f, z).shape, generator=g, dtype=torch.float64)

    def loss():
        return (block(f, z) * probe).sum()

    errors = []
    targets = [(p, name) for name, p in block.named_parameters()] + [(f, "input")]
    for tensor, _ in targets:
        for idx in sample_indices(tensor, 2, g):
            block.zero_grad()
            f.grad = None
            loss().backward()
            grad = f.grad if tensor is f else tensor.grad
            errors.append(relative_error(grad[idx].item(), central_difference(loss, tensor.data, idx, 1e-5)))
    return errors


def test_gradient_check_rgmca():
    torch.manual_seed(0)
    blk = RGMCA(16, heads=2, prior_channels=4).double()
    f = torch.randn(1, 16, 4, 4, dtype=torch.float64, requires_grad=True)
    assert max(block_gradient_errors(blk, f, priors(4, dtype=torch.float64))) < 1e-4


def test_gradient_check_dfa():
    torch.manual_seed(0)
    blk = DFA(16, 4).double()
    f = torch.randn(1, 16, 4, 4, dtype=torch.float64, requires_grad=True)
    assert max(block_gradient_errors(blk, f, priors(4, dtype=torch.float64))) < 1e-4


def full_model_gradient_errors(n_coords=40, seed=0):
    """Central-difference check of the reduced restorer (8x8 input, float64)."""
    torch.manual_seed(seed)
    net = RGformer(**{k: v for k, v in REDUCED.items() if k != "prior_channels"}, prior_channels=4).double()
    g = torch.Generator().manual_seed(seed)
    lq = 0.25 + 0.5 * torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    z = priors(4, dtype=torch.float64, seed=seed)
    hq, _ = net(lq, z)
    # keep the output clamp inactive so the objective is smooth
    assert 0.0 < hq.min().item() and hq.max().item() < 1.0
    probe = torch.randn(hq.shape, generator=g, dtype=torch.float64)

    def loss():
        return (net(lq, z)[0] * probe).sum()

    params = [p for p in net.parameters()]
    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    picks = torch.multinomial(sizes.sqrt(), n_coords, replacement=True, generator=g)
    net.zero_grad()
    loss().backward()
    errors = []
    for k in picks.tolist():
        p = params[k]
        idx = sample_indices(p, 1, g)[0]
        errors.append(relative_error(p.grad[idx].item(), central_difference(loss, p.data, idx, 1e-5), floor=1e-6))
    return errors


def test_gradient_check_full_reduced_model():
    assert max(full_model_gradient_errors()) < 1e-3


class TestRGformer:
    def test_shapes_and_taps(self):
        net = RGformer(channels=(16, 32, 64, 128), blocks=(1, 1, 1, 1), prior_channels=64)
        lq = torch.rand(1, 3, 64, 64)
        hq, (first, last) = net(lq, priors())
        assert hq.shape == lq.shape
        assert first.shape == (1, 16, 64, 64) and last.shape == (1, 16, 64, 64)
        assert 0.0 <= hq.min().item() and hq.max().item() <= 1.0

    def test_deterministic(self):
        net = RGformer(**REDUCED)
        lq, z = torch.rand(1, 3, 16, 16), priors(4)
        assert torch.equal(net(lq, z)[0], net(lq, z)[0])

    def test_rejects_bad_dims(self):
        net = RGformer(**REDUCED)
        with pytest.raises(ValueError):
            net(torch.rand(1, 3, 12, 16), priors(4))

    def test_zeroed_update_branches(self):
        net = RGformer(**REDUCED)
        with torch.no_grad():
            for m in net.modules():
                if isinstance(m, (RGMCA, DFA)):
                    m.project_out.weight.zero_()
            net.output.weight.zero_()
            net.output.bias.zero_()
        lq, z = torch.rand(2, 3, 16, 16), priors(4, 2)
        f = torch.randn(2, 8, 16, 16)
        blk = net.encoders[0][0]
        out, tap = blk(f, z)
        assert torch.equal(out, f) and torch.equal(tap, f)
        assert torch.equal(net(lq, z)[0], lq)

    def test_split_three_to_one_everywhere(self):
        net = RetiDiff(build_config("desk")[0]).rgformer
        blocks = [m for m in net.modules() if isinstance(m, RGMCA)]
        assert len(blocks) == 7
        for b in blocks:
            assert 4 * b.split == 3 * b.channels


class TestAuxDecoder:
    def test_shapes(self):
        r, l = AuxDecoder(48)(torch.randn(1, 48, 64, 64))
        assert r.shape == (1, 3, 64, 64) and l.shape == (1, 1, 64, 64)

    def test_range(self):
        dec = AuxDecoder(8)
        for scale in (1.0, 1e3, 1e6):
            r, l = dec(scale * torch.randn(2, 8, 8, 8))
            for t in (r, l):
                assert t.min().item() >= 0.0 and t.max().item() <= 1.0

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            AuxDecoder(8)(torch.randn(1, 4, 8, 8))

    def test_gradient_reaches_attention(self):
        net = RGformer(**REDUCED)
        dec = AuxDecoder(8)
        _, taps = net(torch.rand(1, 3, 16, 16), priors(4))
        r, l = dec(taps[0])
        (r.mean() + l.mean()).backward()
        attn = net.encoders[0][0].attn
        grads = [p.grad for p in attn.parameters() if p.grad is not None]
        assert any(g.abs().sum() > 0 for g in grads)


def test_paper_profile_parameter_count():
    model_cfg, _ = build_config("paper")
    n = count_parameters(RetiDiff(model_cfg))
    assert 15e6 <= n <= 40e6


def test_siamese_branches_do_not_share_weights():
    m = RetiDiff(ModelConfig(**REDUCED))
    ptrs_r = {p.data_ptr() for p in m.rldm_r.parameters()}
    ptrs_l = {p.data_ptr() for p in m.rldm_l.parameters()}
    assert not ptrs_r & ptrs_l
    assert {p.data_ptr() for p in m.rpe.parameters()}.isdisjoint(p.data_ptr() for p in m.rpe_cond.parameters())
