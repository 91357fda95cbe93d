import math

import numpy as np
import pytest

from rlnst import autodiff as ad
from rlnst import losses, nets, training
from rlnst.autodiff import Tensor
from rlnst.rng import Rng
from conftest import structured_pair


def make_transitions(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        out.append(training.Transition(
            s=rng.uniform(size=(3, size, size)).astype(np.float32),
            a=rng.normal(size=(1, size // 4, size // 4)).astype(np.float32),
            r=float(rng.normal()),
            s_next=rng.uniform(size=(3, size, size)).astype(np.float32),
            done=(i % 5 == 4)))
    return out


@pytest.fixture()
def fresh_model():
    return nets.build_model(seed=21)


@pytest.fixture()
def cfg32():
    return training.TrainConfig(iterations=5, seed=3, target_entropy=-64.0)


class TestReplayPool:
    def test_fifo_eviction_exact(self):
        pool = training.ReplayPool(capacity=5)
        items = make_transitions(8)
        for t in items:
            pool.push(t)
        assert len(pool) == 5
        assert pool.ordered() == items[3:]

    def test_sampling_reproducible(self):
        pool = training.ReplayPool(capacity=10)
        for t in make_transitions(10):
            pool.push(t)
        i1 = [id(t) for t in pool.sample(4, Rng(5))]
        i2 = [id(t) for t in pool.sample(4, Rng(5))]
        assert i1 == i2

    def test_empty_pool_rejected(self):
        with pytest.raises(ValueError):
            training.ReplayPool().sample(1, Rng(0))

    def test_bad_capacity(self):
        with pytest.raises(ValueError):
            training.ReplayPool(capacity=0)


class TestReward:
    def test_style_image_gets_zero(self, model, style_target, content_style_64):
        _, style = content_style_64
        r = training.compute_reward(style, style_target, model.featnet)
        assert r == 0.0

    def test_negative_off_target(self, model, style_target):
        img = np.random.default_rng(1).uniform(size=(3, 64, 64)).astype(np.float32)
        assert training.compute_reward(img, style_target, model.featnet) < 0.0

    def test_ordering_reverses_style_loss(self, model, style_target, content_style_64):
        _, style = content_style_64
        rng = np.random.default_rng(2)
        near = (0.9 * style + 0.1 * rng.uniform(size=style.shape)).astype(np.float32)
        far = rng.uniform(size=style.shape).astype(np.float32)
        with ad.no_grad():
            sl_near = losses.style_loss(Tensor(near[None]), style_target, model.featnet).item()
            sl_far = losses.style_loss(Tensor(far[None]), style_target, model.featnet).item()
        assert sl_near < sl_far
        r_near = training.compute_reward(near, style_target, model.featnet)
        r_far = training.compute_reward(far, style_target, model.featnet)
        assert r_near > r_far


class TestRollout:
    def test_single_step_episode(self, fresh_model, style_target, content_style_64):
        content, _ = content_style_64
        ts, _ = training.rollout_episode(fresh_model, content, 1, Rng(4),
                                         target=style_target)
        assert len(ts) == 1
        assert np.array_equal(ts[0].s, content)
        assert ts[0].done

    def test_chaining_bitwise(self, fresh_model, style_target, content_style_64):
        content, _ = content_style_64
        ts, _ = training.rollout_episode(fresh_model, content, 6, Rng(5),
                                         target=style_target)
        for a, b in zip(ts, ts[1:]):
            assert a.s_next.tobytes() == b.s.tobytes()
        assert [t.done for t in ts] == [False] * 5 + [True]

    def test_identity_stylizer_fixed_point(self, fresh_model, style_target,
                                           content_style_64, monkeypatch):
        content, _ = content_style_64

        def identity_step(s, rng=None, mean_action=False, step_hidden=None,
                          frame_hidden=None):
            a = Tensor(np.zeros((1, 1, 16, 16), np.float32))
            logp = Tensor(np.zeros(1, np.float32))
            return Tensor(s.data.copy()), a, logp, None, None

        monkeypatch.setattr(fresh_model, "stylize_step", identity_step)
        ts, _ = training.rollout_episode(fresh_model, content, 4, Rng(6),
                                         target=style_target)
        for t in ts:
            assert np.array_equal(t.s, content)
            assert t.r == ts[0].r

    def test_pool_insertion(self, fresh_model, style_target, content_style_64):
        content, _ = content_style_64
        pool = training.ReplayPool()
        training.rollout_episode(fresh_model, content, 3, Rng(7), pool=pool,
                                 target=style_target)
        assert len(pool) == 3

    def test_video_frame_hiddens_thread_per_step(self, video_model):
        content, _ = structured_pair(32)
        _, fh1 = training.rollout_episode(video_model, content, 3, Rng(8))
        assert len(fh1) == 3 and all(h is not None for h in fh1)
        # the same step index must consume the previous frame's hidden
        ts_cold, _ = training.rollout_episode(video_model, content, 3, Rng(9))
        ts_warm, fh2 = training.rollout_episode(video_model, content, 3, Rng(9),
                                                frame_hiddens=fh1)
        assert not np.array_equal(ts_cold[0].s_next, ts_warm[0].s_next)
        assert all(not np.array_equal(a.data, b.data) for a, b in zip(fh1, fh2))


def group_snapshot(model, owner):
    return {n: p.data.copy() for n, p in model.registry.group(owner)}


def assert_group_equal(model, owner, snap):
    for n, p in model.registry.group(owner):
        assert np.array_equal(p.data, snap[n]), f"{owner} changed: {n}"


def assert_group_changed(model, owner, snap):
    assert any(not np.array_equal(p.data, snap[n])
               for n, p in model.registry.group(owner)), f"{owner} unchanged"


class TestCriticUpdate:
    def test_zero_residual_means_zero_objective(self, fresh_model, cfg32):
        # gamma=0 makes the target exactly r; setting r := Q(s,a) zeroes it
        batch = make_transitions(4, seed=8)
        cfg = training.TrainConfig(gamma=0.0, seed=1, target_entropy=-64.0)
        with ad.no_grad():
            q = fresh_model.critic(Tensor(np.stack([t.s for t in batch])),
                                   Tensor(np.stack([t.a for t in batch])))
        for t, qv in zip(batch, q.data):
            t.r = float(qv)
        snap = group_snapshot(fresh_model, "critic")
        j_q = training.critic_update(batch, fresh_model, cfg, Rng(9))
        assert j_q <= 1e-12
        assert_group_equal(fresh_model, "critic", snap)

    def test_gamma_zero_target_is_reward(self, fresh_model):
        batch = make_transitions(4, seed=10)
        cfg = training.TrainConfig(gamma=0.0, seed=1, target_entropy=-64.0)
        with ad.no_grad():
            q = fresh_model.critic(Tensor(np.stack([t.s for t in batch])),
                                   Tensor(np.stack([t.a for t in batch])))
        expect = float(np.mean(0.5 * (q.data - np.array([t.r for t in batch],
                                                        np.float32)) ** 2))
        j_q = training.critic_update(batch, fresh_model, cfg, Rng(11))
        assert np.isclose(j_q, expect, rtol=1e-5)

    def test_empty_batch_rejected(self, fresh_model, cfg32):
        with pytest.raises(ValueError):
            training.critic_update([], fresh_model, cfg32, Rng(0))

    def test_residual_decreases_on_frozen_batch(self):
        finals = []
        for seed in (0, 1, 2):
            m = nets.build_model(seed=seed)
            batch = make_transitions(4, seed=seed + 50)
            cfg = training.TrainConfig(seed=seed, target_entropy=-64.0)
            vals = [training.critic_update(batch, m, cfg, Rng(seed + 60))
                    for _ in range(200)]
            finals.append(np.mean(vals[-20:]) / np.mean(vals[:20]))
        assert np.median(finals) < 0.5


class TestTargetUpdate:
    def test_tau_one_copies_bitwise(self, fresh_model, cfg32):
        batch = make_transitions(4, seed=12)
        training.critic_update(batch, fresh_model, cfg32, Rng(13))
        training.target_update(fresh_model, 1.0)
        for (cn, cp), (tn, tp) in zip(fresh_model.registry.group("critic"),
                                      fresh_model.registry.group("target_critic")):
            assert cp.data.tobytes() == tp.data.tobytes()

    def test_tau_zero_is_noop(self, fresh_model):
        snap = group_snapshot(fresh_model, "target_critic")
        fresh_model.registry["critic.fc.bias"].data += 5.0
        training.target_update(fresh_model, 0.0)
        assert_group_equal(fresh_model, "target_critic", snap)

    def test_tau_half_averages(self, fresh_model):
        c = fresh_model.registry["critic.fc.bias"]
        t = fresh_model.registry["target_critic.fc.bias"]
        c.data = np.array([2.0], np.float32)
        t.data = np.array([0.0], np.float32)
        training.target_update(fresh_model, 0.5)
        assert t.data[0] == 1.0


class TestPolicyUpdate:
    def test_pure_entropy_raises_log_sigma(self, fresh_model):
        # Q == 0 when the critic head is zeroed; the objective is then
        # alpha * log pi, pure entropy maximization
        fresh_model.registry["critic.fc.weight"].data[:] = 0.0
        fresh_model.registry["critic.fc.bias"].data[:] = 0.0
        batch = make_transitions(4, seed=14)
        cfg = training.TrainConfig(seed=2, target_entropy=-64.0)
        s = Tensor(np.stack([t.s for t in batch]))
        with ad.no_grad():
            before = fresh_model.actor(s).log_sigma.data.mean()
        for i in range(50):
            training.policy_update(batch, fresh_model, cfg, Rng(100 + i))
        with ad.no_grad():
            after = fresh_model.actor(s).log_sigma.data.mean()
        assert after > before

    def test_positive_action_gradient_shifts_mu_up(self, fresh_model):
        # alpha ~ 0 and dQ/da > 0 everywhere: one step must raise mu
        fresh_model.log_alpha.data = np.array([-100.0], np.float32)
        fc = fresh_model.registry["critic.fc.weight"]
        fc.data[:] = 0.0
        fc.data[-64:] = 1.0  # positive weights on the pooled action block
        batch = make_transitions(4, seed=15)
        cfg = training.TrainConfig(seed=3, target_entropy=-64.0)
        s = Tensor(np.stack([t.s for t in batch]))
        with ad.no_grad():
            before = fresh_model.actor(s).mu.data.mean()
        training.policy_update(batch, fresh_model, cfg, Rng(16))
        with ad.no_grad():
            after = fresh_model.actor(s).mu.data.mean()
        assert after > before

    def test_empty_batch_rejected(self, fresh_model, cfg32):
        with pytest.raises(ValueError):
            training.policy_update([], fresh_model, cfg32, Rng(0))


class TestAlphaUpdate:
    def test_stationary_at_target(self, fresh_model):
        cfg = training.TrainConfig(target_entropy=-64.0)
        before = fresh_model.log_alpha.data.copy()
        training.alpha_update(64.0, fresh_model, cfg)  # log_prob == -target_H
        assert fresh_model.log_alpha.data.tobytes() == before.tobytes()

    def test_alpha_rises_when_entropy_below_target(self, fresh_model):
        # entropy -128 sits below the target -64, so the temperature must grow
        cfg = training.TrainConfig(target_entropy=-64.0)
        before = float(fresh_model.log_alpha.data[0])
        training.alpha_update(128.0, fresh_model, cfg)
        assert float(fresh_model.log_alpha.data[0]) > before

    def test_alpha_falls_when_entropy_above_target(self, fresh_model):
        cfg = training.TrainConfig(target_entropy=-64.0)
        before = float(fresh_model.log_alpha.data[0])
        training.alpha_update(-32.0, fresh_model, cfg)  # entropy 32 > target -64
        assert float(fresh_model.log_alpha.data[0]) < before

    def test_alpha_positive_over_many_updates(self, fresh_model):
        cfg = training.TrainConfig(target_entropy=-64.0)
        rng = np.random.default_rng(17)
        for _ in range(10_000):
            training.alpha_update(float(rng.normal(-64.0, 30.0)),
                                  fresh_model, cfg)
            assert fresh_model.alpha > 0.0
            assert math.isfinite(fresh_model.alpha)


class TestStyleUpdate:
    def test_only_actor_and_stylizer_change(self, fresh_model, style_target,
                                            content_style_64):
        content, _ = content_style_64
        cfg = training.TrainConfig(seed=4, target_entropy=-256.0)
        snaps = {g: group_snapshot(fresh_model, g)
                 for g in ("actor", "stylizer", "critic", "target_critic", "featnet")}
        alpha_before = fresh_model.log_alpha.data.copy()
        training.style_update([content], fresh_model, losses.LossWeights(),
                              style_target, cfg, Rng(18))
        assert_group_changed(fresh_model, "actor", snaps["actor"])
        assert_group_changed(fresh_model, "stylizer", snaps["stylizer"])
        assert_group_equal(fresh_model, "critic", snaps["critic"])
        assert_group_equal(fresh_model, "target_critic", snaps["target_critic"])
        assert_group_equal(fresh_model, "featnet", snaps["featnet"])
        assert fresh_model.log_alpha.data.tobytes() == alpha_before.tobytes()

    def test_deterministic_given_seed(self, style_target, content_style_64):
        content, _ = content_style_64
        cfg = training.TrainConfig(seed=5, target_entropy=-256.0)

        def run():
            m = nets.build_model(seed=33)
            training.style_update([content], m, losses.LossWeights(),
                                  style_target, cfg, Rng(19))
            return {n: p.data.copy() for n, p in m.registry.items()}

        r1, r2 = run(), run()
        for n in r1:
            assert r1[n].tobytes() == r2[n].tobytes(), n

    def test_empty_batch_rejected(self, fresh_model, style_target, cfg32):
        with pytest.raises(ValueError):
            training.style_update([], fresh_model, losses.LossWeights(),
                                  style_target, cfg32, Rng(0))


class TestGradientSeparation:
    def test_each_update_touches_only_its_registry(self, style_target,
                                                   content_style_64):
        content, _ = content_style_64
        model = nets.build_model(seed=44)
        cfg = training.TrainConfig(seed=6, target_entropy=-256.0)
        pool = training.ReplayPool()
        training.rollout_episode(model, content, 4, Rng(20), pool=pool,
                                 target=style_target)
        batch = pool.sample(4, Rng(21))
        groups = ("actor", "stylizer", "critic", "target_critic", "featnet")

        def snap_all():
            snaps = {g: group_snapshot(model, g) for g in groups}
            snaps["alpha"] = {"alpha.log_alpha": model.log_alpha.data.copy()}
            return snaps

        # critic update: only critic
        snaps = snap_all()
        training.critic_update(batch, model, cfg, Rng(22))
        assert_group_changed(model, "critic", snaps["critic"])
        for g in ("actor", "stylizer", "target_critic", "featnet"):
            assert_group_equal(model, g, snaps[g])

        # policy update: only actor
        snaps = snap_all()
        training.policy_update(batch, model, cfg, Rng(23))
        assert_group_changed(model, "actor", snaps["actor"])
        for g in ("stylizer", "critic", "target_critic", "featnet"):
            assert_group_equal(model, g, snaps[g])

        # alpha update: only alpha
        snaps = snap_all()
        training.alpha_update(-100.0, model, cfg)
        assert model.log_alpha.data.tobytes() != snaps["alpha"]["alpha.log_alpha"].tobytes()
        for g in groups:
            assert_group_equal(model, g, snaps[g])

        # target update: only target critic
        snaps = snap_all()
        training.target_update(model, 0.5)
        assert_group_changed(model, "target_critic", snaps["target_critic"])
        for g in ("actor", "stylizer", "critic", "featnet"):
            assert_group_equal(model, g, snaps[g])


class TestTrainLoop:
    def test_smoke_rows_and_determinism(self, content_style_64):
        content, style = content_style_64

        def run():
            model = nets.build_model(seed=55)
            cfg = training.TrainConfig(iterations=10, seed=7)
            res = training.train(cfg, model, [content], style)
            return training.format_csv(res.rows)

        csv1 = run()
        assert csv1.splitlines()[0] == training.CSV_HEADER
        assert len(csv1.splitlines()) == 11
        csv2 = run()
        assert csv1 == csv2

    def test_csv_video_column_empty_in_image_mode(self, content_style_64):
        content, style = content_style_64
        model = nets.build_model(seed=56)
        cfg = training.TrainConfig(iterations=2, seed=8)
        res = training.train(cfg, model, [content], style)
        row = training.format_csv(res.rows).splitlines()[1].split(",")
        assert row[5] == ""  # Lct column

    def test_video_mode_populates_lct(self):
        content, style = structured_pair(32)
        model = nets.build_model(seed=57, video=True)
        cfg = training.TrainConfig(iterations=2, seed=9, mode="video")
        res = training.train(cfg, model, [content], style)
        assert res.rows[0]["Lct"] is not None
        assert res.rows[0]["Lct"] >= 0.0

    def test_divergence_raises_with_iteration(self):
        content, style = structured_pair(32)
        model = nets.build_model(seed=58)
        cfg = training.TrainConfig(iterations=80, seed=10, eta=1e3)
        with pytest.raises(training.DivergenceError) as exc:
            training.train(cfg, model, [content], style)
        assert exc.value.iteration >= 1
        assert str(exc.value.iteration) in str(exc.value)


class TestConfigValidation:
    def test_gamma_range(self):
        with pytest.raises(ValueError):
            training.TrainConfig(gamma=1.5)

    def test_tau_range(self):
        with pytest.raises(ValueError):
            training.TrainConfig(tau=-0.1)

    def test_episode_len(self):
        with pytest.raises(ValueError):
            training.TrainConfig(episode_len=0)

    def test_mode(self):
        with pytest.raises(ValueError):
            training.TrainConfig(mode="audio")
