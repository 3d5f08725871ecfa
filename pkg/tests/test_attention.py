import numpy as np
import pytest
import torch

from askd.attention import (
    CBAM,
    ChannelAttention,
    SpatialAttention,
    channel_attention,
    pick_reduction,
    refine,
    spatial_attention,
)
from askd.errors import DimensionError


def zeroed(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def np_sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def np_channel_attention(f, w1, w2):
    """Independent oracle: sigmoid(MLP(avg) + MLP(max)) with shared weights."""
    avg = f.mean(axis=(1, 2))
    mx = f.max(axis=(1, 2))
    mlp = lambda v: w2 @ np.maximum(w1 @ v, 0.0)
    return np_sigmoid(mlp(avg) + mlp(mx))


def np_spatial_attention(f, kernel):
    """Independent oracle: 7x7 zero-padded conv over [channel-avg; channel-max]."""
    stacked = np.stack([f.mean(axis=0), f.max(axis=0)])  # (2, H, W)
    _, H, W = f.shape
    padded = np.zeros((2, H + 6, W + 6))
    padded[:, 3:H + 3, 3:W + 3] = stacked
    out = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            out[y, x] = np.sum(kernel * padded[:, y:y + 7, x:x + 7])
    return np_sigmoid(out)


class TestChannelAttention:
    def test_zero_params_give_half(self):
        mod = zeroed(ChannelAttention(8, 2))
        out = channel_attention(torch.randn(8, 5, 6), mod)
        assert out.shape == (8, 1, 1)
        assert torch.all(out == 0.5)

    def test_output_shape_64x56x56(self):
        mod = ChannelAttention(64)
        out = channel_attention(torch.randn(64, 56, 56), mod)
        assert out.shape == (64, 1, 1)
        out = mod(torch.randn(3, 64, 56, 56))
        assert out.shape == (3, 64, 1, 1)

    def test_scalar_hand_oracle(self):
        # C=2, H=W=1: avg and max pools both equal (a, b)
        mod = ChannelAttention(2, 2)
        w1 = np.array([[0.3, -0.7]])
        w2 = np.array([[1.1], [-0.4]])
        with torch.no_grad():
            mod.fc1.weight.copy_(torch.from_numpy(w1).float())
            mod.fc2.weight.copy_(torch.from_numpy(w2).float())
        a, b = 0.9, -0.2
        f = torch.tensor([[[a]], [[b]]], dtype=torch.float32)
        got = channel_attention(f, mod).detach().squeeze().numpy()
        expected = np_sigmoid(2.0 * (w2 @ np.maximum(w1 @ np.array([a, b]), 0.0)))
        np.testing.assert_allclose(got, expected, rtol=1e-6)

    def test_channel_mismatch_rejected(self):
        mod = ChannelAttention(8, 2)
        with pytest.raises(DimensionError):
            channel_attention(torch.randn(4, 5, 5), mod)

    def test_reduction_must_divide(self):
        with pytest.raises(DimensionError):
            ChannelAttention(10, 3)

    def test_pick_reduction(self):
        assert pick_reduction(64) == 16
        assert pick_reduction(8) == 2
        assert pick_reduction(24) == 6
        assert pick_reduction(2) == 1
        for c in (2, 3, 8, 24, 48, 64, 100):
            assert c % pick_reduction(c) == 0


class TestSpatialAttention:
    def test_zero_params_give_half(self):
        mod = zeroed(SpatialAttention())
        out = spatial_attention(torch.randn(8, 5, 6), mod)
        assert out.shape == (1, 5, 6)
        assert torch.all(out == 0.5)

    def test_output_shape_256x14x14(self):
        out = spatial_attention(torch.randn(256, 14, 14), SpatialAttention())
        assert out.shape == (1, 14, 14)

    def test_delta_kernel_oracle(self):
        # center weight of the avg channel = 1: conv output equals the avg map,
        # which for C=1 equals f itself, so the gate is sigmoid(f) everywhere
        mod = zeroed(SpatialAttention())
        with torch.no_grad():
            mod.conv.weight[0, 0, 3, 3] = 1.0
        f = torch.randn(1, 7, 7, dtype=torch.float64)
        mod = mod.double()
        got = spatial_attention(f, mod)
        np.testing.assert_allclose(got.detach().squeeze(0).numpy(), torch.sigmoid(f[0]).numpy(), rtol=1e-12)

    def test_random_kernel_matches_direct_conv_oracle(self, rng):
        mod = SpatialAttention().double()
        kernel = rng.normal(size=(2, 7, 7))
        with torch.no_grad():
            mod.conv.weight.copy_(torch.from_numpy(kernel[None]))
        f = rng.normal(size=(3, 9, 8))
        got = spatial_attention(torch.from_numpy(f), mod).detach().squeeze(0).numpy()
        np.testing.assert_allclose(got, np_spatial_attention(f, kernel), rtol=1e-10)


class TestRefine:
    def test_zero_params_quarter_input(self):
        ca, sa = zeroed(ChannelAttention(8, 2)), zeroed(SpatialAttention())
        f = torch.randn(8, 6, 6)
        out, taps = refine(f, ca, sa)
        assert torch.equal(out, 0.25 * f)
        assert taps[0].kind == "channel" and taps[1].kind == "spatial"

    def test_zero_input_keeps_taps_in_open_interval(self):
        ca, sa = ChannelAttention(8, 2), SpatialAttention()
        f = torch.zeros(8, 5, 5)
        out, (tc, ts) = refine(f, ca, sa)
        assert torch.all(out == 0)
        for tap in (tc, ts):
            m = tap.map.detach()
            assert float(m.min()) > 0.0 and float(m.max()) < 1.0

    def test_worked_example_matches_composed_oracles(self, rng):
        ca = ChannelAttention(2, 2).double()
        sa = SpatialAttention().double()
        w1 = rng.normal(size=(1, 2))
        w2 = rng.normal(size=(2, 1))
        kernel = rng.normal(size=(2, 7, 7))
        with torch.no_grad():
            ca.fc1.weight.copy_(torch.from_numpy(w1))
            ca.fc2.weight.copy_(torch.from_numpy(w2))
            sa.conv.weight.copy_(torch.from_numpy(kernel[None]))
        f = rng.normal(size=(2, 2, 2))
        out, (tc, ts) = refine(torch.from_numpy(f), ca, sa)
        gate_c = np_channel_attention(f, w1, w2)
        f_prime = gate_c[:, None, None] * f
        gate_s = np_spatial_attention(f_prime, kernel)
        f_second = gate_s[None] * f_prime
        np.testing.assert_allclose(out.detach().numpy(), f_second, rtol=1e-10)
        np.testing.assert_allclose(tc.map.detach().squeeze().numpy(), gate_c, rtol=1e-10)
        np.testing.assert_allclose(ts.map.detach().squeeze(0).numpy(), gate_s, rtol=1e-10)

    def test_broadcast_matches_nested_loops(self, rng):
        ca = ChannelAttention(3, 1).double()
        sa = SpatialAttention().double()
        f = torch.from_numpy(rng.normal(size=(3, 4, 5)))
        out, (tc, ts) = refine(f, ca, sa)
        expected = np.empty((3, 4, 5))
        fc = f.numpy()
        gc = tc.map.detach().numpy()
        gs = ts.map.detach().numpy()
        for c in range(3):
            for y in range(4):
                for x in range(5):
                    expected[c, y, x] = fc[c, y, x] * gc[c, 0, 0] * gs[0, y, x]
        np.testing.assert_allclose(out.detach().numpy(), expected, atol=1e-6)

    def test_spatial_gate_computed_on_channel_refined_map(self, rng):
        # the recorded spatial tap must equal the gate of gate_c * f, not of f
        ca = ChannelAttention(4, 2).double()
        sa = SpatialAttention().double()
        f = torch.from_numpy(rng.normal(size=(4, 6, 6)))
        _, (tc, ts) = refine(f, ca, sa)
        with torch.no_grad():
            on_refined = sa((tc.map * f).unsqueeze(0)).squeeze(0)
            on_raw = sa(f.unsqueeze(0)).squeeze(0)
        np.testing.assert_allclose(ts.map.detach().numpy(), on_refined.numpy(), rtol=1e-12)
        assert not np.allclose(ts.map.detach().numpy(), on_raw.numpy())

    def test_range_strictly_inside_unit_interval(self, rng):
        for _ in range(5):
            c = int(rng.integers(2, 9))
            ca, sa = ChannelAttention(c, 1), SpatialAttention()
            f = torch.from_numpy(rng.normal(scale=3.0, size=(c, 5, 7))).float()
            _, (tc, ts) = refine(f, ca, sa)
            for tap in (tc, ts):
                m = tap.map.detach()
                assert float(m.min()) > 0.0 and float(m.max()) < 1.0

    def test_cbam_module_equals_refine(self, rng):
        cbam = CBAM(4, 2)
        f = torch.randn(2, 4, 5, 5)
        out, gc, gs = cbam(f)
        out2, (tc, ts) = refine(f, cbam.channel, cbam.spatial)
        assert torch.equal(out, out2)
        assert torch.equal(gc, tc.map) and torch.equal(gs, ts.map)


def finite_difference_grad(fn, tensors, eps=1e-6):
    """Central differences of a scalar function w.r.t. each tensor, float64."""
    grads = []
    for t in tensors:
        g = torch.zeros_like(t)
        flat = t.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = fn().item()
            flat[i] = orig - eps
            lo = fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(a, b):
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


class TestRefineGradients:
    def test_gradients_match_central_differences(self, rng):
        for trial in range(5):
            torch.manual_seed(trial)
            ca = ChannelAttention(4, 2).double()
            sa = SpatialAttention().double()
            f = torch.from_numpy(rng.normal(size=(4, 3, 3))).requires_grad_(True)
            proj = torch.from_numpy(rng.normal(size=(4, 3, 3)))
            params = [f] + list(ca.parameters()) + list(sa.parameters())

            def scalar():
                out, _ = refine(f, ca, sa)
                return (out * proj).sum()

            loss = scalar()
            grads = torch.autograd.grad(loss, params)
            with torch.no_grad():
                fd = finite_difference_grad(scalar, params)
            for g, g_fd in zip(grads, fd):
                assert relative_error(g, g_fd) < 1e-4
