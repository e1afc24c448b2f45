"""Tests for temporal summarization, gated cross-attention, and fusion."""

import math

import numpy as np
import pytest
import torch
from scipy.special import erf

from torch_oracles import assert_grads_match, fd_param_gradients, scalar_probe_loss

from d2g.fusion_bottleneck import (
    AttentionConfig,
    ChannelLayerNorm,
    FeedForward,
    FusionTransformer,
    GatedCrossAttention,
    TEAttention,
    TemporalSummarizer,
    normalized_displacements,
)

torch.manual_seed(0)

SMALL = AttentionConfig(heads=2, head_dim=3, depth=1, ff_multiplier=2, dropout=0.0)


def np_gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def np_layernorm(x, weight, bias, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)  # biased, as in the torch layer
    return (x - mean) / np.sqrt(var + eps) * weight + bias


def np_linear(x, weight, bias):
    return x @ weight.T + bias


class TestConfig:
    def test_proj_width(self):
        assert AttentionConfig().proj_width == 64

    @pytest.mark.parametrize("kwargs", [{"heads": 0}, {"dropout": 1.0}])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            AttentionConfig(**kwargs)


class TestDisplacements:
    def test_antisymmetric_without_wrap(self):
        d = normalized_displacements(3, 4)
        assert torch.allclose(d, -d.transpose(0, 1), atol=0)

    def test_scale_invariance_for_corresponding_pairs(self):
        # Cell (i,j) on the small grid corresponds to (2i,2j) on the doubled
        # grid; the normalization makes their pairwise values identical.
        small = normalized_displacements(3, 4)
        big = normalized_displacements(6, 8)
        idx_small = [(r, c) for r in range(3) for c in range(4)]
        for a, (ra, ca) in enumerate(idx_small):
            for b_, (rb, cb) in enumerate(idx_small):
                big_a = (2 * ra) * 8 + (2 * ca)
                big_b = (2 * rb) * 8 + (2 * cb)
                assert torch.equal(small[a, b_], big[big_a, big_b])

    def test_wrap_takes_shorter_way(self):
        d = normalized_displacements(4, 4, wrap=True)
        # cells (0,0) and (0,3): unwrapped dx=-3, wrapped dx=+1
        assert d[0, 3, 0].item() == pytest.approx(1.0 / 4.0)

    def test_wrap_invariant_under_joint_roll(self):
        d = normalized_displacements(4, 4, wrap=True)
        n = 16
        # rolling both indices by one row (4 flat positions) permutes pairs
        perm = [(i + 4) % n for i in range(n)]
        rolled = d[perm][:, perm]
        assert torch.equal(rolled, d)


class TestTemporalSummarizer:
    def test_single_timestep_passes_values_through(self):
        mod = TemporalSummarizer(channels=4, timesteps=1, config=SMALL).double().eval()
        s = torch.rand(2, 1, 4, 3, 3, dtype=torch.float64)
        summary, attn = mod.attend(s)
        assert torch.allclose(attn, torch.ones_like(attn))
        tokens = (s + mod.pos[None, :, :, None, None]).permute(0, 3, 4, 1, 2)
        v = mod.to_v(tokens.reshape(-1, 1, 4)).squeeze(1)
        want = mod.out(v).view(2, 3, 3, 4).permute(0, 3, 1, 2)
        assert torch.allclose(summary, want, atol=1e-12)
        assert torch.allclose(mod(s), mod.ff(summary), atol=1e-12)

    def test_time_constant_features_reduce_to_projection(self):
        # With the timestep embeddings zeroed, every value vector is equal, so
        # any attention weights produce the same convex combination.
        mod = TemporalSummarizer(channels=4, timesteps=3, config=SMALL).double().eval()
        with torch.no_grad():
            mod.pos.zero_()
        frame = torch.rand(1, 1, 4, 2, 2, dtype=torch.float64)
        s = frame.expand(1, 3, 4, 2, 2)
        summary, _ = mod.attend(s)
        single = TemporalSummarizer(channels=4, timesteps=1, config=SMALL).double()
        single.load_state_dict({k: v for k, v in mod.state_dict().items()
                                if not k.startswith("pos")} | {"pos": torch.zeros(1, 4)})
        want, _ = single.attend(frame)
        assert torch.allclose(summary, want, atol=1e-10)

    def test_two_step_single_pixel_matches_bruteforce(self):
        mod = TemporalSummarizer(channels=2, timesteps=2, config=SMALL).double().eval()
        s = torch.tensor([[[[[0.3]], [[-1.2]]], [[[2.0]], [[0.7]]]]],
                         dtype=torch.float64)  # (1, 2, 2, 1, 1)
        got = mod(s)[0, :, 0, 0].detach().numpy()

        p = {k: v.detach().numpy() for k, v in mod.state_dict().items()}
        tokens = s[0, :, :, 0, 0].numpy() + p["pos"]  # (2, 2)
        heads, d = SMALL.heads, SMALL.head_dim
        k = np_linear(tokens, p["to_k.weight"], p["to_k.bias"]).reshape(2, heads, d)
        v = np_linear(tokens, p["to_v.weight"], p["to_v.bias"]).reshape(2, heads, d)
        merged = np.zeros(heads * d)
        for h in range(heads):
            logits = np.array([k[t, h] @ p["query"][h] for t in range(2)])
            logits /= math.sqrt(d)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            merged[h * d:(h + 1) * d] = w[0] * v[0, h] + w[1] * v[1, h]
        summary = np_linear(merged, p["out.weight"], p["out.bias"])
        hidden = np_gelu(np_linear(
            np_layernorm(summary, p["ff.norm.norm.weight"], p["ff.norm.norm.bias"]),
            p["ff.fc1.weight"][:, :, 0, 0], p["ff.fc1.bias"]))
        want = summary + np_linear(hidden, p["ff.fc2.weight"][:, :, 0, 0],
                                   p["ff.fc2.bias"])
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)

    def test_attention_rows_sum_to_one(self):
        mod = TemporalSummarizer(channels=4, timesteps=5, config=SMALL).eval()
        _, attn = mod.attend(torch.rand(2, 5, 4, 3, 3))
        sums = attn.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_timestep_order_matters(self):
        # The per-timestep embeddings are what break permutation invariance;
        # give them an order-one value as training would.
        torch.manual_seed(123)
        mod = TemporalSummarizer(channels=4, timesteps=3, config=SMALL).eval()
        gen = torch.Generator().manual_seed(9)
        with torch.no_grad():
            mod.pos.copy_(torch.randn(3, 4, generator=gen))
            mod.query.copy_(torch.randn(SMALL.heads, SMALL.head_dim, generator=gen))
        s = torch.rand(1, 3, 4, 2, 2)
        base = mod(s)
        flipped = mod(s.flip(dims=(1,)))
        assert (base - flipped).abs().max().item() > 1e-3

    def test_wrong_timestep_count_rejected(self):
        mod = TemporalSummarizer(channels=4, timesteps=3, config=SMALL)
        with pytest.raises(ValueError, match="timesteps"):
            mod(torch.rand(1, 2, 4, 2, 2))


class TestTEAttention:
    def test_identical_values_collapse_to_that_value(self):
        mod = TEAttention(channels=4, config=SMALL).double().eval()
        q_src = torch.rand(1, 4, 3, 3, dtype=torch.float64)
        kv = torch.rand(1, 4, 1, 1, dtype=torch.float64).expand(1, 4, 3, 3)
        out = mod(q_src, kv.contiguous())
        spread = (out - out.mean(dim=(2, 3), keepdim=True)).abs().max()
        assert spread.item() < 1e-10

    def test_rows_sum_to_one_and_are_nonnegative(self):
        mod = TEAttention(channels=4, config=SMALL).eval()
        x = torch.rand(2, 4, 3, 3)
        _, attn = mod(x, x, return_weights=True)
        assert attn.min().item() >= 0
        sums = attn.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_joint_circular_shift_equivariance(self):
        mod = TEAttention(channels=4, config=SMALL,
                          wrap_displacements=True).double().eval()
        q_src = torch.rand(1, 4, 4, 6, dtype=torch.float64)
        kv_src = torch.rand(1, 4, 4, 6, dtype=torch.float64)
        out = mod(q_src, kv_src)
        shifted = mod(torch.roll(q_src, (1, 2), dims=(2, 3)),
                      torch.roll(kv_src, (1, 2), dims=(2, 3)))
        want = torch.roll(out, (1, 2), dims=(2, 3))
        assert (shifted - want).abs().max().item() <= 1e-5

    def test_two_by_two_single_head_matches_enumeration(self):
        cfg = AttentionConfig(heads=1, head_dim=3, depth=1, ff_multiplier=1,
                              dropout=0.0)
        mod = TEAttention(channels=2, config=cfg).double().eval()
        q_src = torch.rand(1, 2, 2, 2, dtype=torch.float64)
        kv_src = torch.rand(1, 2, 2, 2, dtype=torch.float64)
        got = mod(q_src, kv_src)[0].detach().numpy()

        p = {k: v.detach().numpy() for k, v in mod.state_dict().items()}
        qt = q_src[0].numpy().reshape(2, 4).T  # (N, C)
        kt = kv_src[0].numpy().reshape(2, 4).T
        q = np_linear(qt, p["to_q.weight"], p["to_q.bias"])
        k = np_linear(kt, p["to_k.weight"], p["to_k.bias"])
        v = np_linear(kt, p["to_v.weight"], p["to_v.bias"])
        delta = normalized_displacements(2, 2).numpy()
        out = np.zeros((4, 2))
        for i in range(4):
            logits = np.zeros(4)
            for j in range(4):
                score = q[i] @ k[j] / math.sqrt(3)
                h = np.array([delta[i, j, 0], delta[i, j, 1], score])
                h = np_gelu(np_linear(h, p["pairwise.0.weight"], p["pairwise.0.bias"]))
                h = np_gelu(np_linear(h, p["pairwise.2.weight"], p["pairwise.2.bias"]))
                logits[j] = np_linear(h, p["pairwise.4.weight"], p["pairwise.4.bias"])[0]
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i] = np_linear(w @ v, p["out.weight"], p["out.bias"])
        want = out.T.reshape(2, 2, 2)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)

    def test_non_te_needs_grid_shape(self):
        with pytest.raises(ValueError, match="bottleneck_hw"):
            TEAttention(channels=4, config=SMALL, te=False)

    def test_non_te_rejects_mismatched_grid(self):
        mod = TEAttention(channels=4, config=SMALL, te=False, bottleneck_hw=(3, 3))
        with pytest.raises(ValueError, match="position embeddings"):
            mod(torch.rand(1, 4, 4, 4), torch.rand(1, 4, 4, 4))

    def test_non_te_runs_and_uses_absolute_positions(self):
        mod = TEAttention(channels=4, config=SMALL, te=False,
                          bottleneck_hw=(3, 3)).eval()
        x = torch.rand(1, 4, 3, 3)
        out = mod(x, x)
        assert out.shape == (1, 4, 3, 3)
        assert torch.isfinite(out).all()
        # zeroing the embeddings changes the output: they are really in use
        with torch.no_grad():
            mod.q_pos.zero_()
            mod.kv_pos.zero_()
        assert not torch.equal(mod(x, x), out)

    def test_shape_mismatch_rejected(self):
        mod = TEAttention(channels=4, config=SMALL)
        with pytest.raises(ValueError, match="share shape"):
            mod(torch.rand(1, 4, 2, 2), torch.rand(1, 4, 3, 3))


class TestGatedCrossAttention:
    def test_gate_saturated_open_returns_attended_radar(self):
        mod = GatedCrossAttention(channels=4, config=SMALL).eval()
        with torch.no_grad():
            mod.gate[2].bias.fill_(300.0)
        s = torch.rand(1, 4, 3, 3)
        r = torch.rand(1, 4, 3, 3)
        r_hat, gate = mod.parts(s, r)
        assert torch.all(gate == 1.0)
        assert torch.equal(mod(s, r), r_hat)

    def test_gate_saturated_shut_zeroes_radar(self):
        mod = GatedCrossAttention(channels=4, config=SMALL).eval()
        with torch.no_grad():
            mod.gate[2].bias.fill_(-300.0)
        out = mod(torch.rand(1, 4, 3, 3), torch.rand(1, 4, 3, 3))
        assert torch.all(out == 0.0)

    def test_gate_lives_in_unit_interval(self):
        mod = GatedCrossAttention(channels=4, config=SMALL).eval()
        _, gate = mod.parts(torch.randn(2, 4, 3, 3) * 5, torch.randn(2, 4, 3, 3) * 5)
        assert gate.shape == (2, 1, 3, 3)
        assert gate.min().item() >= 0.0 and gate.max().item() <= 1.0

    def test_constant_radar_gives_constant_attended_field(self):
        mod = GatedCrossAttention(channels=4, config=SMALL).double().eval()
        s = torch.rand(1, 4, 3, 3, dtype=torch.float64)
        r = torch.rand(1, 4, 1, 1, dtype=torch.float64).expand(1, 4, 3, 3).contiguous()
        r_hat, _ = mod.parts(s, r)
        spread = (r_hat - r_hat.mean(dim=(2, 3), keepdim=True)).abs().max()
        assert spread.item() < 1e-10


class TestFusionTransformer:
    def test_zero_radar_still_produces_finite_output(self):
        mod = FusionTransformer(channels=4, config=SMALL).eval()
        s = torch.rand(2, 4, 4, 4)
        out = mod(s, torch.zeros_like(s), torch.rand(2, 4, 4, 4))
        assert out.shape == (2, 4, 4, 4)
        assert torch.isfinite(out).all()

    def test_joint_shift_equivariance(self):
        mod = FusionTransformer(channels=4, config=SMALL,
                                wrap_displacements=True).double().eval()
        parts = [torch.rand(1, 4, 4, 4, dtype=torch.float64) for _ in range(3)]
        out = mod(*parts)
        rolled = [torch.roll(p, (1, 3), dims=(2, 3)) for p in parts]
        want = torch.roll(out, (1, 3), dims=(2, 3))
        assert (mod(*rolled) - want).abs().max().item() <= 1e-5

    def test_shape_mismatch_rejected(self):
        mod = FusionTransformer(channels=4, config=SMALL)
        a = torch.rand(1, 4, 4, 4)
        with pytest.raises(ValueError, match="share shape"):
            mod(a, a, torch.rand(1, 4, 2, 2))

    def test_finiteness_through_all_blocks(self):
        torch.manual_seed(3)
        temporal = TemporalSummarizer(4, 3, SMALL).eval()
        cross = GatedCrossAttention(4, SMALL).eval()
        fuse = FusionTransformer(4, SMALL).eval()
        s = torch.randn(2, 3, 4, 4, 4) * 10
        r = torch.randn(2, 4, 4, 4) * 10
        summary = temporal(s)
        corrected = cross(summary, r)
        out = fuse(summary, corrected, s[:, -1])
        assert torch.isfinite(out).all()

    def test_gradients_match_finite_differences(self):
        cfg = AttentionConfig(heads=2, head_dim=2, depth=1, ff_multiplier=1,
                              dropout=0.0)
        mod = FusionTransformer(channels=4, config=cfg).double().eval()
        parts = [torch.rand(1, 4, 4, 4, dtype=torch.float64) for _ in range(3)]

        def forward():
            return scalar_probe_loss(mod(*parts))

        forward().backward()
        params = list(mod.parameters())
        auto = [p.grad.clone() for p in params]
        fd = fd_param_gradients(lambda: forward().item(), params)
        assert_grads_match(auto, fd)


class TestSharedPieces:
    def test_channel_layernorm_is_pointwise(self):
        ln = ChannelLayerNorm(4).double()
        x = torch.rand(1, 4, 3, 3, dtype=torch.float64)
        x[0, :, 2, 2] = x[0, :, 0, 0]
        y = ln(x)
        assert torch.equal(y[0, :, 2, 2], y[0, :, 0, 0])

    def test_feedforward_residual_at_zero_weights(self):
        ff = FeedForward(4, 2, 0.0)
        with torch.no_grad():
            ff.fc2.weight.zero_()
            ff.fc2.bias.zero_()
        x = torch.rand(1, 4, 2, 2)
        assert torch.equal(ff(x), x)
