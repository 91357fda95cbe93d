import numpy as np
import pytest

from rlnst import autodiff as ad
from rlnst import losses
from rlnst.autodiff import Tensor
from rlnst.rng import Rng


def rand(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).uniform(size=shape) * scale


class TestGram:
    def test_constant_single_channel_closed_form(self):
        g = losses.gram(Tensor(np.full((1, 1, 4, 5), 2.0)))
        assert abs(g.item() - 4.0) < 1e-12

    def test_quadratic_scaling(self):
        feat = Tensor(rand((1, 3, 6, 6), seed=1))
        g1 = losses.gram(feat).data
        g3 = losses.gram(Tensor(feat.data * 3.0)).data
        assert np.allclose(g3, 9.0 * g1, atol=1e-10)

    def test_symmetry(self):
        g = losses.gram(Tensor(rand((2, 4, 5, 5), seed=2))).data
        for item in g:
            assert np.abs(item - item.T).max() <= 1e-12

    def test_positive_semidefinite(self):
        g = losses.gram(Tensor(rand((1, 8, 6, 6), seed=3))).data[0]
        rng = np.random.default_rng(4)
        for _ in range(100):
            x = rng.normal(size=8)
            assert x @ g @ x >= -1e-8

    def test_batch_output_shape(self):
        g = losses.gram(Tensor(rand((3, 5, 4, 4), seed=5)))
        assert g.shape == (3, 5, 5)


class TestContentLoss:
    def test_zero_at_identity(self, model):
        img = Tensor(rand((1, 3, 16, 16), seed=6).astype(np.float32))
        assert losses.content_loss(img, img, model.featnet).item() == 0.0

    def test_nonnegative(self, model):
        a = Tensor(rand((1, 3, 16, 16), seed=7).astype(np.float32))
        b = Tensor(rand((1, 3, 16, 16), seed=8).astype(np.float32))
        assert losses.content_loss(a, b, model.featnet).item() >= 0.0

    def test_shape_mismatch(self, model):
        with pytest.raises(ad.ShapeError):
            losses.content_loss(Tensor(np.zeros((1, 3, 16, 16), np.float32)),
                                Tensor(np.zeros((1, 3, 32, 32), np.float32)),
                                model.featnet)

    def test_gradient_against_oracle(self, model):
        x = Tensor(rand((1, 3, 16, 16), seed=9, scale=100.0), requires_grad=True)
        ref = Tensor(rand((1, 3, 16, 16), seed=10, scale=100.0))

        def f(t):
            return losses.content_loss(t, ref, model.featnet)

        ad.backward(f(x))
        assert ad.rel_error(x.grad, ad.finite_diff_gradient(f, x, 1e-3)) < 1e-4


class TestStyleLoss:
    def test_zero_at_style_image(self, model):
        e = rand((3, 16, 16), seed=11).astype(np.float32)
        target = losses.StyleTarget.from_image(e, model.featnet)
        val = losses.style_loss(Tensor(e[None]), target, model.featnet).item()
        assert abs(val) <= 1e-12

    def test_deterministic_and_positive_off_target(self, model, style_target):
        m = Tensor(rand((1, 3, 64, 64), seed=12).astype(np.float32))
        v1 = losses.style_loss(m, style_target, model.featnet).item()
        v2 = losses.style_loss(m, style_target, model.featnet).item()
        assert v1 == v2
        assert v1 > 0.0

    def test_cache_matches_recomputation(self, model):
        e = rand((3, 16, 16), seed=13).astype(np.float32)
        target = losses.StyleTarget.from_image(e, model.featnet)
        with ad.no_grad():
            taps = model.featnet(Tensor(e[None]))
            for cached, tap in zip(target.grams, taps):
                fresh = losses.gram(tap).data[0]
                assert np.array_equal(cached, fresh.astype(np.float64))

    def test_gradient_against_oracle(self, model):
        e = rand((3, 16, 16), seed=14, scale=100.0)
        target = losses.StyleTarget.from_image(e, model.featnet)
        x = Tensor(rand((1, 3, 16, 16), seed=15, scale=100.0), requires_grad=True)

        def f(t):
            return losses.style_loss(t, target, model.featnet)

        ad.backward(f(x))
        assert ad.rel_error(x.grad, ad.finite_diff_gradient(f, x, 1e-3)) < 1e-4


class TestTvLoss:
    def test_constant_is_zero(self):
        assert losses.tv_loss(Tensor(np.full((1, 3, 8, 8), 0.4))).item() == 0.0

    def test_hand_computed_pair(self):
        val = losses.tv_loss(Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))).item()
        assert abs(val - 0.5) < 1e-15

    def test_single_pixel_rejected(self):
        with pytest.raises(ValueError):
            losses.tv_loss(Tensor(np.ones((1, 3, 1, 1))))

    def test_gradient_against_oracle(self):
        x = Tensor(rand((1, 3, 8, 8), seed=16), requires_grad=True)
        ad.backward(losses.tv_loss(x))
        g = x.grad.copy()
        assert ad.rel_error(g, ad.finite_diff_gradient(
            lambda t: losses.tv_loss(t), x, 1e-3)) < 1e-4


class TestWarp:
    def test_zero_flow_identity(self):
        x = Tensor(rand((1, 3, 6, 6), seed=17))
        out = losses.warp(x, np.zeros((2, 6, 6)))
        assert np.array_equal(out.data, x.data)

    def test_integer_shift_moves_interior(self):
        x = Tensor(np.arange(12.0).reshape(1, 1, 3, 4))
        flow = np.zeros((2, 3, 4))
        flow[0] = 1.0
        out = losses.warp(x, flow).data[0, 0]
        assert np.array_equal(out[:, :3], x.data[0, 0][:, 1:])
        assert np.array_equal(out[:, 3], x.data[0, 0][:, 3])  # border clamp

    def test_gradient_against_oracle(self):
        rng = np.random.default_rng(18)
        x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
        flow = rng.normal(size=(2, 6, 6)) * 1.5
        coef = Tensor(rng.normal(size=(1, 2, 6, 6)))

        def f(t):
            return (losses.warp(t, flow) * coef).sum()

        ad.backward(f(x))
        assert ad.rel_error(x.grad, ad.finite_diff_gradient(f, x, 1e-3)) < 1e-4


class TestSynthMotion:
    def test_degenerate_wavy_gives_constant_translation(self):
        flow = losses.synth_motion(24, 40, Rng(19), wavy_std=0.0,
                                   translation=(5.0, -3.0))
        assert flow.shape == (2, 24, 40)
        assert np.allclose(flow[0], 5.0) and np.allclose(flow[1], -3.0)

    def test_output_shape(self):
        assert losses.synth_motion(17, 33, Rng(20)).shape == (2, 17, 33)

    def test_wavy_component_small(self):
        worst = 0.0
        for seed in range(100):
            flow = losses.synth_motion(64, 64, Rng(seed), translation=(0.0, 0.0))
            worst = max(worst, float(np.abs(flow).max()))
        assert worst < 1.0

    def test_deterministic(self):
        a = losses.synth_motion(32, 32, Rng(21))
        b = losses.synth_motion(32, 32, Rng(21))
        assert a.tobytes() == b.tobytes()


class TestCompoundTemporal:
    def test_zero_under_identity_transform(self, model):
        s = Tensor(rand((1, 3, 16, 16), seed=22).astype(np.float32))
        eps = Rng(23).normal((1, 1, 4, 4)).astype(np.float32)
        out = model.actor(s)
        a = out.mu + out.log_sigma.exp() * Tensor(eps)
        m, _ = model.stylizer(a, out.skips)
        val = losses.compound_temporal_loss(
            model, s, m, np.zeros((2, 16, 16), np.float32),
            np.zeros((1, 3, 16, 16), np.float32), eps)
        assert val.item() == 0.0

    def test_nonnegative(self, model):
        s = Tensor(rand((1, 3, 16, 16), seed=24).astype(np.float32))
        eps = Rng(25).normal((1, 1, 4, 4)).astype(np.float32)
        out = model.actor(s)
        a = out.mu + out.log_sigma.exp() * Tensor(eps)
        m, _ = model.stylizer(a, out.skips)
        flow = losses.synth_motion(16, 16, Rng(26))
        delta = losses.draw_noise((1, 3, 16, 16), Rng(27))
        assert losses.compound_temporal_loss(model, s, m, flow, delta, eps).item() >= 0.0


class TestCombinedLoss:
    def test_zero_weights_reduce_to_content(self, model, style_target):
        m = Tensor(rand((1, 3, 64, 64), seed=28).astype(np.float32))
        c = Tensor(rand((1, 3, 64, 64), seed=29).astype(np.float32))
        weights = losses.LossWeights(lam=0.0, beta=0.0, zeta=0.0)
        total, parts = losses.combined_loss(m, c, style_target, weights, model.featnet)
        assert abs(total.item() - parts["Lco"]) < 1e-12
        assert abs(total.item() - losses.content_loss(m, c, model.featnet).item()) < 1e-12

    def test_all_equal_constant_image_is_zero(self, model):
        e = np.full((3, 16, 16), 0.6, np.float32)
        target = losses.StyleTarget.from_image(e, model.featnet)
        m = Tensor(e[None])
        total, _ = losses.combined_loss(m, Tensor(e[None]), target,
                                        losses.LossWeights(), model.featnet)
        assert abs(total.item()) <= 1e-12

    def test_linear_in_style_weight(self, model, style_target):
        m = Tensor(rand((1, 3, 64, 64), seed=30).astype(np.float32))
        c = Tensor(rand((1, 3, 64, 64), seed=31).astype(np.float32))
        l1, p1 = losses.combined_loss(m, c, style_target,
                                      losses.LossWeights(lam=1e5), model.featnet)
        l2, _ = losses.combined_loss(m, c, style_target,
                                     losses.LossWeights(lam=2e5), model.featnet)
        assert np.isclose(l2.item() - l1.item(), 1e5 * p1["Lst"], rtol=1e-5)

    def test_video_args_rejected_in_image_mode(self, model, style_target):
        m = Tensor(rand((1, 3, 64, 64), seed=32).astype(np.float32))
        with pytest.raises(ValueError):
            losses.combined_loss(m, m, style_target, losses.LossWeights(),
                                 model.featnet, mode="image", video_ctx={})

    def test_video_mode_requires_context(self, model, style_target):
        m = Tensor(rand((1, 3, 64, 64), seed=33).astype(np.float32))
        with pytest.raises(ValueError):
            losses.combined_loss(m, m, style_target, losses.LossWeights(),
                                 model.featnet, mode="video")

    def test_nonnegative_terms(self, model, style_target):
        m = Tensor(rand((1, 3, 64, 64), seed=34).astype(np.float32))
        c = Tensor(rand((1, 3, 64, 64), seed=35).astype(np.float32))
        _, parts = losses.combined_loss(m, c, style_target,
                                        losses.LossWeights(), model.featnet)
        assert all(v >= 0.0 for v in parts.values())


class TestTemporalMetric:
    def test_identical_constant_frames(self):
        frames = [np.full((3, 12, 12), 0.5) for _ in range(3)]
        flows = [losses.synth_motion(12, 12, Rng(s)) for s in (36, 37)]
        assert losses.temporal_metric(frames, flows) < 1e-12

    def test_constant_shift_invariance(self):
        rng = np.random.default_rng(38)
        frames = [rng.uniform(size=(3, 10, 10)) for _ in range(3)]
        flows = [losses.synth_motion(10, 10, Rng(s)) for s in (39, 40)]
        m0 = losses.temporal_metric(frames, flows)
        m1 = losses.temporal_metric([f + 0.17 for f in frames], flows)
        assert abs(m0 - m1) < 1e-12

    def test_too_few_frames_rejected(self):
        with pytest.raises(ValueError):
            losses.temporal_metric([np.zeros((3, 8, 8))], [])

    def test_mask_restricts_domain(self):
        rng = np.random.default_rng(41)
        f0 = rng.uniform(size=(3, 8, 8))
        f1 = f0.copy()
        f1[:, 4:, :] += 10.0  # corrupt the bottom half
        flow = np.zeros((2, 8, 8))
        mask = np.zeros((8, 8))
        mask[:4, :] = 1.0
        assert losses.temporal_metric([f0, f1], [flow], [mask]) < 1e-12
        assert losses.temporal_metric([f0, f1], [flow]) > 1.0


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        losses.LossWeights(lam=-1.0)
