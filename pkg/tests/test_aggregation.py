import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from amecam.aggregation import (
    AggregationConfig,
    AttentionField,
    AttentionNet,
    FgBgEmbedding,
    MapClassifier,
    PixelProjector,
    aggregation_ce_loss,
    attention_forward,
    attentive_aggregate,
    c2am_loss,
    fg_bg_embed,
    save_attention,
)
from amecam.cam import average_aggregate, load_cam_dir, load_map, minmax_normalize
from amecam.errors import BatchTooSmall, ResolutionMismatch, ShapeMismatch

EPS = 1e-6


def _randomize(net, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype))
    return net


def _emb(fg, bg):
    fg = torch.as_tensor(np.asarray(fg, np.float64))
    bg = torch.as_tensor(np.asarray(bg, np.float64))
    return FgBgEmbedding(fg, bg, torch.ones(len(fg)), torch.ones(len(fg)))


def _c2am_oracle(fg, bg, eps):
    """Scalar transcription of the loss, logs capped at 0."""

    def s(u, v):
        return (u @ v / (np.linalg.norm(u) * np.linalg.norm(v)) + 1) / 2

    def lg(x):
        return math.log(min(x + eps, 1.0))

    B = len(fg)
    neg = -sum(lg(1 - s(fg[i], bg[j])) for i in range(B) for j in range(B)) / B**2
    pairs = [(i, j) for i in range(B) for j in range(i + 1, B)]
    pos_fg = -sum(lg(s(fg[i], fg[j])) for i, j in pairs) / len(pairs)
    pos_bg = -sum(lg(s(bg[i], bg[j])) for i, j in pairs) / len(pairs)
    return pos_fg + pos_bg + neg


class TestConfig:
    def test_defaults(self):
        cfg = AggregationConfig()
        assert cfg.loss == "c2am" and cfg.epsilon == 1e-6 and cfg.freeze_backbone and cfg.attention_hidden == 32

    @pytest.mark.parametrize("kw", [{"epsilon": 0.0}, {"loss": "mse"}, {"feature_source": "x"}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            AggregationConfig(**kw)


class TestAttention:
    def test_zero_init_is_uniform(self, rng):
        net = AttentionNet(4, 32)
        att = attention_forward(rng.random((16, 16)), rng.random((4, 16, 16)), net)
        assert att.weights.shape == (4, 16, 16)
        np.testing.assert_allclose(att.weights, 0.25, atol=1e-7)

    def test_shift_invariance(self, rng):
        net = _randomize(AttentionNet(4, 8).double(), 0)
        img = torch.tensor(rng.random((1, 1, 8, 8)))
        cams = torch.tensor(rng.random((1, 4, 8, 8)))
        base = net(img, cams)
        with torch.no_grad():
            net.out.bias += 3.7
        np.testing.assert_allclose(net(img, cams).detach().numpy(), base.detach().numpy(), atol=1e-12)

    def test_convexity_fuzz(self):
        # 40 random nets x 16 x 16 pixels = 10240 pixel checks
        r = np.random.default_rng(0)
        for seed in range(40):
            net = _randomize(AttentionNet(4, 8), seed)
            w = attention_forward(r.random((16, 16)), r.random((4, 16, 16)), net).weights
            assert np.all(w >= 0)
            np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-6)

    def test_resolution_mismatch(self, rng):
        with pytest.raises(ResolutionMismatch):
            attention_forward(rng.random((16, 16)), rng.random((4, 8, 8)), AttentionNet())
        with pytest.raises(ResolutionMismatch):
            AttentionNet()(torch.zeros(1, 1, 8, 8), torch.zeros(1, 4, 4, 4))


class TestAttentiveAggregate:
    def test_one_hot(self, rng):
        cams = rng.random((4, 6, 6))
        for k in range(4):
            w = np.zeros((4, 6, 6))
            w[k] = 1.0
            out = attentive_aggregate(list(cams), AttentionField(w))
            np.testing.assert_array_equal(out.values, minmax_normalize(cams[k]))
            assert out.source == "attentive"

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_uniform_is_average_bitwise(self, seed):
        cams = list(np.random.default_rng(seed).random((4, 7, 5)))
        out = attentive_aggregate(cams, AttentionField(np.full((4, 7, 5), 0.25)))
        assert out.values.tobytes() == average_aggregate(cams).values.tobytes()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_convex_envelope(self, seed):
        r = np.random.default_rng(seed)
        cams = r.random((4, 5, 5))
        logits = r.normal(scale=3, size=(4, 5, 5))
        w = np.exp(logits) / np.exp(logits).sum(axis=0)
        fused = (w * cams).sum(axis=0)
        assert np.all(fused >= cams.min(axis=0) - 1e-12) and np.all(fused <= cams.max(axis=0) + 1e-12)
        np.testing.assert_allclose(attentive_aggregate(list(cams), AttentionField(w)).values, minmax_normalize(fused), atol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            attentive_aggregate(list(rng.random((4, 5, 5))), AttentionField(np.full((3, 5, 5), 1 / 3)))

    def test_export(self, tmp_path):
        att = AttentionField(np.full((4, 3, 3), 0.25))
        side = save_attention(att, tmp_path, "c", 2)
        values, meta = load_map(side)
        assert values.shape == (4, 3, 3) and meta["source"] == "attention"
        # not mistaken for a CAM when loading a map directory
        assert load_cam_dir(tmp_path) == {}


class TestFgBgEmbed:
    def test_full_mask(self, rng):
        f = rng.normal(size=(5, 4, 4))
        with pytest.warns(RuntimeWarning):
            e = fg_bg_embed(torch.ones(4, 4, dtype=torch.float64), torch.tensor(f))
        mean = f.reshape(5, -1).mean(axis=1)
        np.testing.assert_allclose(e.fg[0].numpy(), mean / np.linalg.norm(mean), atol=1e-9)
        assert e.bg_mass.item() == pytest.approx(0.0)

    def test_constant_features(self, rng):
        v = rng.normal(size=5)
        f = torch.tensor(np.broadcast_to(v[:, None, None], (5, 4, 4)).copy())
        e = fg_bg_embed(torch.tensor(rng.random((4, 4))), f)
        unit = v / np.linalg.norm(v)
        np.testing.assert_allclose(e.fg[0].numpy(), unit, atol=1e-9)
        np.testing.assert_allclose(e.bg[0].numpy(), unit, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_loop_oracle(self, seed):
        r = np.random.default_rng(seed)
        M = r.random((5, 6))
        f = r.normal(size=(3, 5, 6))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            e = fg_bg_embed(torch.tensor(M), torch.tensor(f), EPS)
        fg = np.zeros(3)
        bg = np.zeros(3)
        for y in range(5):
            for x in range(6):
                fg += M[y, x] * f[:, y, x]
                bg += (1 - M[y, x]) * f[:, y, x]
        fg /= max(M.sum(), EPS)
        bg /= max((1 - M).sum(), EPS)
        np.testing.assert_allclose(e.fg[0].numpy(), fg / np.linalg.norm(fg), atol=1e-6)
        np.testing.assert_allclose(e.bg[0].numpy(), bg / np.linalg.norm(bg), atol=1e-6)
        np.testing.assert_allclose(e.fg.norm(dim=1).numpy(), 1.0, atol=1e-6)
        assert e.fg_mass.item() == pytest.approx(M.sum())
        assert e.bg_mass.item() == pytest.approx((1 - M).sum())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            fg_bg_embed(torch.zeros(4, 4), torch.zeros(3, 4, 5))

    def test_projector_unit_norm(self, rng):
        proj = PixelProjector([4, 8], dim=6)
        out = proj([torch.randn(2, 4, 8, 8), torch.randn(2, 8, 4, 4)], (16, 16))
        assert out.shape == (2, 6, 16, 16)
        np.testing.assert_allclose(out.norm(dim=1).detach().numpy(), 1.0, atol=1e-5)


class TestC2am:
    def test_orthogonal_anchor(self):
        fg = [[1.0, 0.0], [1.0, 0.0]]
        bg = [[0.0, 1.0], [0.0, 1.0]]
        assert c2am_loss(_emb(fg, bg), EPS).item() == pytest.approx(-math.log(0.5 + EPS), abs=1e-9)
        assert c2am_loss(_emb(fg, bg), EPS).item() == pytest.approx(0.6931, abs=1e-4)

    def test_collapse(self):
        e = [[0.6, 0.8]] * 3
        assert c2am_loss(_emb(e, e), EPS).item() == pytest.approx(-math.log(EPS), rel=1e-9)

    def test_batch_too_small(self):
        with pytest.raises(BatchTooSmall):
            c2am_loss(_emb([[1.0, 0.0]], [[0.0, 1.0]]))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 6))
    def test_matches_oracle_and_nonnegative(self, seed, B):
        r = np.random.default_rng(seed)
        fg, bg = r.normal(size=(B, 5)), r.normal(size=(B, 5))
        got = c2am_loss(_emb(fg, bg), EPS).item()
        assert got >= 0
        assert got == pytest.approx(_c2am_oracle(fg, bg, EPS), rel=1e-9, abs=1e-9)

    def test_gradient_finite_differences(self, rng):
        fg = torch.tensor(rng.normal(size=(3, 4)), requires_grad=True)
        bg = torch.tensor(rng.normal(size=(3, 4)), requires_grad=True)
        c2am_loss(FgBgEmbedding(fg, bg, torch.ones(3), torch.ones(3)), EPS).backward()
        h = 1e-4
        for t, other, is_fg in ((fg, bg, True), (bg, fg, False)):
            base = t.detach().numpy()
            num = np.zeros_like(base)
            for idx in np.ndindex(*base.shape):
                vals = []
                for sgn in (1, -1):
                    p = base.copy()
                    p[idx] += sgn * h
                    o = other.detach().numpy()
                    args = (p, o) if is_fg else (o, p)
                    vals.append(_c2am_oracle(*args, EPS))
                num[idx] = (vals[0] - vals[1]) / (2 * h)
            ana = t.grad.numpy()
            rel = np.abs(ana - num) / np.maximum(np.abs(num), 1e-6)
            assert np.all((rel < 1e-4) | (np.abs(ana - num) < 1e-9))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_rotation_invariance(self, seed):
        r = np.random.default_rng(seed)
        fg, bg = r.normal(size=(4, 6)), r.normal(size=(4, 6))
        q, _ = np.linalg.qr(r.normal(size=(6, 6)))
        a = c2am_loss(_emb(fg, bg)).item()
        b = c2am_loss(_emb(fg @ q, bg @ q)).item()
        assert a == pytest.approx(b, abs=1e-6)

    def test_monotone_in_fg_bg_similarity(self):
        # fg fixed, bg rotates away: within-set similarity stays 1, cross similarity falls
        losses = []
        for theta in np.linspace(0.1, math.pi - 0.1, 15):
            fg = [[1.0, 0.0]] * 3
            bg = [[math.cos(theta), math.sin(theta)]] * 3
            losses.append(c2am_loss(_emb(fg, bg)).item())
        assert all(a > b for a, b in zip(losses, losses[1:]))


class TestAggregationCe:
    def test_zero_head(self, rng):
        head = MapClassifier().double()
        with torch.no_grad():
            head.linear.weight.zero_()
            head.linear.bias.zero_()
        assert aggregation_ce_loss(torch.tensor(rng.random((8, 8))), 1, head).item() == pytest.approx(math.log(2), abs=1e-9)

    def test_saturated(self):
        head = MapClassifier().double()
        with torch.no_grad():
            head.linear.weight.copy_(torch.tensor([[-40.0], [40.0]]))
            head.linear.bias.zero_()
        assert aggregation_ce_loss(torch.ones(8, 8, dtype=torch.float64), 1, head).item() < 1e-8

    def test_matches_oracle(self, rng):
        head = _randomize(MapClassifier().double(), 3)
        M = rng.random((4, 6, 6))
        labels = np.array([0, 1, 1, 0])
        got = aggregation_ce_loss(torch.tensor(M), torch.tensor(labels), head).item()
        w = head.linear.weight.detach().numpy()[:, 0]
        b = head.linear.bias.detach().numpy()
        expect = 0.0
        for m, y in zip(M, labels):
            z = w * m.mean() + b
            expect += math.log(sum(math.exp(v) for v in z)) - z[y]
        assert got == pytest.approx(expect / 4, abs=1e-6)
