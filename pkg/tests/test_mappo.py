"""Training-stack tests: GAE, clipped objectives, update loop, train()."""

import numpy as np
import pytest

from emvsim.env import EmvRingEnv, EnvConfig
from emvsim.mappo import (PolicyBundle, RolloutBuffer, TrainConfig,
                          actor_objective, collect_rollout, compute_gae,
                          critic_loss, gae_advantages, merge_for_update,
                          ppo_update, train)
from emvsim.nn import MLP, log_softmax, categorical_entropy


def small_env(n=3):
    return EmvRingEnv(EnvConfig(n_agents=n))


def fresh_bundle(env, mode="cooperative", seed=0):
    return PolicyBundle(mode, env.n, env.obs_dim, env.global_dim,
                        np.random.default_rng(seed))


class TestTrainConfig:
    def test_rejects_out_of_range_values(self):
        with pytest.raises(ValueError):
            TrainConfig(clip_eps=0.0)
        with pytest.raises(ValueError):
            TrainConfig(gamma=1.5)
        with pytest.raises(ValueError):
            TrainConfig(gae_lambda=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(ppo_epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(mode="solo")


class TestGae:
    def test_single_terminal_step(self):
        adv = gae_advantages([[1.0]], [[0.5], [0.0]], [[1.0]], 0.99, 0.95)
        assert adv[0, 0] == pytest.approx(0.5, abs=1e-12)

    def test_two_step_backward_recursion(self):
        # Independent scalar recursion: terminal masking zeroes both the
        # bootstrap of the last delta and the tail of the accumulator.
        gamma, lam = 0.99, 0.95
        r, v, done = [1.0, 1.0], [0.5, 0.5, 0.0], [0.0, 1.0]
        acc = 0.0
        expect = [0.0, 0.0]
        for t in (1, 0):
            live = 1.0 - done[t]
            delta = r[t] + gamma * live * v[t + 1] - v[t]
            acc = delta + gamma * lam * live * acc
            expect[t] = acc
        adv = gae_advantages([[1.0], [1.0]], [[0.5], [0.5], [0.0]],
                             [[0.0], [1.0]], gamma, lam)
        assert adv[:, 0] == pytest.approx(expect, abs=1e-12)
        # Frozen: delta_0 = 1 + 0.99*0.5 - 0.5 = 0.995, delta_1 = 0.5,
        # so A_0 = 0.995 + 0.99*0.95*0.5.
        assert adv[0, 0] == pytest.approx(1.46525, abs=1e-10)

    def test_lambda_one_is_discounted_return(self):
        rng = np.random.default_rng(0)
        gamma = 0.99
        for _ in range(10):
            rewards = rng.standard_normal((50, 4))
            values = rng.standard_normal((51, 4))
            dones = np.zeros((50, 4))
            dones[-1] = 1.0
            adv = gae_advantages(rewards, values, dones, gamma, 1.0)
            rtg = np.zeros((50, 4))
            acc = np.zeros(4)
            for t in range(49, -1, -1):
                acc = rewards[t] + gamma * (1.0 - dones[t]) * acc
                rtg[t] = acc
            assert np.max(np.abs((adv + values[:-1]) - rtg)) <= 1e-10

    def test_requires_bootstrap_row(self):
        with pytest.raises(ValueError, match="bootstrap"):
            gae_advantages(np.ones((5, 2)), np.ones((5, 2)), np.zeros((5, 2)),
                           0.99, 0.95)

    def test_normalization_and_returns(self):
        rng = np.random.default_rng(1)
        buf = RolloutBuffer(40, 3, 4, 5)
        buf.rewards = rng.standard_normal((40, 3))
        buf.values = rng.standard_normal((41, 3))
        buf.values[-1] = 0.0
        buf.dones[-1] = 1.0
        adv, rets = compute_gae(buf, 0.99, 0.95)
        assert abs(adv.mean()) <= 1e-10
        assert abs(adv.std() - 1.0) <= 1e-6
        raw = gae_advantages(buf.rewards, buf.values, buf.dones, 0.99, 0.95)
        assert np.allclose(rets, raw + buf.values[:-1], atol=1e-12)


class TestActorObjective:
    def test_unit_ratio_at_collection_params(self):
        rng = np.random.default_rng(2)
        net = MLP((6, 8, 8, 7), rng)
        obs = rng.standard_normal((10, 6))
        actions = rng.integers(0, 7, size=10)
        logits = net(obs)
        logp_old = log_softmax(logits)[np.arange(10), actions]
        adv = rng.standard_normal(10)
        obj, grads, stats = actor_objective(obs, actions, logp_old, adv,
                                            net, 0.2, 0.01)
        want = adv.mean() + 0.01 * categorical_entropy(logits).mean()
        assert obj == pytest.approx(want, abs=1e-12)
        assert stats["mean_ratio"] == pytest.approx(1.0, abs=1e-12)
        assert stats["clip_fraction"] == 0.0

    def test_clip_arithmetic_positive_advantage(self):
        rng = np.random.default_rng(3)
        net = MLP((4, 8, 8, 7), rng)
        obs = rng.standard_normal((1, 4))
        actions = np.array([2])
        logp = log_softmax(net(obs))[0, 2]
        # Behaviour log-prob crafted so the ratio is exactly 1.5.
        obj, _, _ = actor_objective(obs, actions,
                                    np.array([logp - np.log(1.5)]),
                                    np.array([1.0]), net, 0.2, 0.0)
        assert obj == pytest.approx(1.2, abs=1e-9)

    def test_clip_arithmetic_negative_advantage(self):
        rng = np.random.default_rng(4)
        net = MLP((4, 8, 8, 7), rng)
        obs = rng.standard_normal((1, 4))
        actions = np.array([1])
        logp = log_softmax(net(obs))[0, 1]
        obj, _, _ = actor_objective(obs, actions,
                                    np.array([logp - np.log(1.5)]),
                                    np.array([-1.0]), net, 0.2, 0.0)
        assert obj == pytest.approx(-1.5, abs=1e-9)

    def test_clipped_sample_contributes_no_gradient(self):
        rng = np.random.default_rng(5)
        net = MLP((4, 8, 8, 7), rng)
        obs = rng.standard_normal((1, 4))
        actions = np.array([0])
        logp = log_softmax(net(obs))[0, 0]
        _, grads, stats = actor_objective(obs, actions,
                                          np.array([logp - np.log(1.5)]),
                                          np.array([1.0]), net, 0.2, 0.0)
        assert stats["clip_fraction"] == 1.0
        assert all(np.all(g == 0.0) for g in grads)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        net = MLP((6, 8, 8, 7), rng)
        obs = rng.standard_normal((5, 6))
        actions = rng.integers(0, 7, size=5)
        logp_old = log_softmax(net(obs))[np.arange(5), actions] \
            + rng.uniform(-0.1, 0.1, size=5)
        adv = rng.standard_normal(5)

        def objective():
            return actor_objective(obs, actions, logp_old, adv,
                                   net, 0.2, 0.01)[0]

        _, grads, _ = actor_objective(obs, actions, logp_old, adv,
                                      net, 0.2, 0.01)
        h = 1e-5
        worst = 0.0
        for p, g in zip(net.params, grads):
            flat_p, flat_g = p.ravel(), g.ravel()
            for idx in range(flat_p.size):
                orig = flat_p[idx]
                flat_p[idx] = orig + h
                hi = objective()
                flat_p[idx] = orig - h
                lo = objective()
                flat_p[idx] = orig
                fd = (hi - lo) / (2.0 * h)
                denom = max(abs(fd), abs(flat_g[idx]), 1e-8)
                worst = max(worst, abs(fd - flat_g[idx]) / denom)
        assert worst <= 1e-4


class TestCriticLoss:
    @staticmethod
    def constant_critic(value):
        # Single linear layer forced to output a constant.
        net = MLP.from_params((1, 1), [np.zeros((1, 1)), np.array([value])])
        return net

    def test_zero_when_everything_agrees(self):
        net = self.constant_critic(2.0)
        loss, grads = critic_loss(np.zeros((1, 1)), np.array([2.0]),
                                  np.array([2.0]), net, 0.2)
        assert loss == 0.0

    def test_boundary_example(self):
        net = self.constant_critic(1.0)
        loss, _ = critic_loss(np.zeros((1, 1)), np.array([2.0]),
                              np.array([0.8]), net, 0.2)
        assert loss == pytest.approx(1.0, abs=1e-12)

    def test_clipped_branch_dominates(self):
        net = self.constant_critic(1.5)
        loss, grads = critic_loss(np.zeros((1, 1)), np.array([2.0]),
                                  np.array([0.8]), net, 0.2)
        assert loss == pytest.approx(1.0, abs=1e-12)
        # The clipped square won and the clip is active: no gradient.
        assert all(np.all(g == 0.0) for g in grads)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        net = MLP((5, 8, 8, 1), rng)
        glob = rng.standard_normal((6, 5))
        rets = rng.standard_normal(6)
        v_old = net(glob)[:, 0] + rng.uniform(-0.1, 0.1, size=6)
        _, grads = critic_loss(glob, rets, v_old, net, 0.2)
        h = 1e-6
        for p, g in zip(net.params, grads):
            flat_p, flat_g = p.ravel(), g.ravel()
            for idx in range(0, flat_p.size, 7):
                orig = flat_p[idx]
                flat_p[idx] = orig + h
                hi = critic_loss(glob, rets, v_old, net, 0.2)[0]
                flat_p[idx] = orig - h
                lo = critic_loss(glob, rets, v_old, net, 0.2)[0]
                flat_p[idx] = orig
                fd = (hi - lo) / (2.0 * h)
                denom = max(abs(fd), abs(flat_g[idx]), 1e-8)
                assert abs(fd - flat_g[idx]) / denom < 1e-5


class TestBundle:
    def test_cooperative_avs_share_storage(self):
        env = small_env(4)
        b = fresh_bundle(env)
        assert b.actor_for(1) is b.actor_for(2)
        assert b.actor_for(1) is b.actor_for(3)
        assert b.actor_for(0) is not b.actor_for(1)

    def test_competitive_nets_are_distinct(self):
        env = small_env(4)
        b = fresh_bundle(env, mode="competitive")
        assert b.actor_for(0) is not b.actor_for(1)
        assert b.critic_for(0) is not b.critic_for(1)
        nets = b.checkpoint_nets()
        assert len(nets) == 8  # 4 actors + 4 critics

    def test_greedy_actions_shape(self):
        env = small_env(3)
        b = fresh_bundle(env)
        obs, _ = env.reset(seed=0)
        acts = b.act_greedy(obs)
        assert acts.shape == (3,)
        assert np.all((acts >= 0) & (acts < 7))


class TestCollect:
    def test_buffer_length_is_steps_times_agents(self):
        env = small_env(3)
        b = fresh_bundle(env)
        buf = collect_rollout(env, b, 20, np.random.default_rng(0), 5)
        assert len(buf) == 60
        assert buf.obs.shape == (20, 3, env.obs_dim)
        rec = buf.record(0, 1)
        assert rec.agent == 1 and np.isfinite(rec.logp)

    def test_bootstrap_row_is_zero(self):
        env = small_env(3)
        b = fresh_bundle(env)
        buf = collect_rollout(env, b, 10, np.random.default_rng(0), 5)
        assert np.all(buf.values[-1] == 0.0)
        assert buf.dones[-1, 0] == 0.0  # horizon not reached in 10 steps

    def test_deterministic_under_fixed_seed(self):
        env = small_env(3)
        b = fresh_bundle(env)
        buf1 = collect_rollout(env, b, 15, np.random.default_rng(3), 7)
        buf2 = collect_rollout(env, b, 15, np.random.default_rng(3), 7)
        assert np.array_equal(buf1.actions, buf2.actions)
        assert np.array_equal(buf1.rewards, buf2.rewards)
        assert np.array_equal(buf1.logp, buf2.logp)

    def test_emv_routed_to_its_own_actor(self):
        env = small_env(4)
        b = fresh_bundle(env)
        # Pin the EMV actor to one action via an overwhelming output bias.
        b.actor_emv.params[-1][:] = 0.0
        b.actor_emv.params[-1][3] = 50.0
        buf = collect_rollout(env, b, 20, np.random.default_rng(1), 2)
        assert np.all(buf.actions[:, 0] == 3)
        assert not np.all(buf.actions[:, 1:] == 3)


class TestMerge:
    def collect_pair(self, steps=12):
        env = small_env(3)
        b = fresh_bundle(env)
        rng = np.random.default_rng(4)
        bufs = [collect_rollout(env, b, steps, rng, 11),
                collect_rollout(env, b, steps, rng, 12)]
        return env, b, bufs

    def test_single_buffer_matches_compute_gae(self):
        env, b, bufs = self.collect_pair()
        merged = merge_for_update([bufs[0]], 0.99, 0.95)
        solo = collect_rollout(env, b, 12, np.random.default_rng(4), 11)
        compute_gae(solo, 0.99, 0.95)
        assert np.array_equal(merged.advantages, solo.advantages)
        assert np.array_equal(merged.returns, solo.returns)
        assert np.array_equal(merged.obs, solo.obs)

    def test_merged_batch_is_jointly_normalized(self):
        _, _, bufs = self.collect_pair()
        merged = merge_for_update(bufs, 0.99, 0.95)
        assert merged.obs.shape[0] == 24
        assert len(merged) == 24 * 3
        assert merged.advantages.mean() == pytest.approx(0.0, abs=1e-9)
        assert merged.advantages.std() == pytest.approx(1.0, abs=1e-6)
        assert np.all(merged.values[-1] == 0.0)

    def test_episode_segments_keep_their_own_gae(self):
        _, _, bufs = self.collect_pair()
        merged = merge_for_update(bufs, 0.99, 0.95)
        raw = np.concatenate(
            [gae_advantages(b.rewards, b.values, b.dones, 0.99, 0.95)
             for b in bufs], axis=0)
        expect = (raw - raw.mean()) / (raw.std() + 1e-8)
        assert np.allclose(merged.advantages, expect)
        # second segment is bootstrapped from its own episode tail, not
        # chained onto the first episode's values
        assert np.allclose(merged.returns[12:],
                           raw[12:] + bufs[1].values[:-1])


class TestPpoUpdate:
    def make_buffer(self, env, bundle, steps=25):
        buf = collect_rollout(env, bundle, steps, np.random.default_rng(9), 4)
        compute_gae(buf, 0.99, 0.95)
        return buf

    def test_each_network_takes_epochs_times_minibatch_steps(self):
        env = small_env(3)
        b = fresh_bundle(env)
        buf = self.make_buffer(env, b)
        cfg = TrainConfig(episodes=1, steps=25)
        ppo_update(buf, b, cfg, np.random.default_rng(0))
        assert b.opt_av.t == 60
        assert b.opt_emv.t == 60
        assert b.opt_critic.t == 60

    def test_first_epoch_clip_fraction_is_zero(self):
        env = small_env(3)
        b = fresh_bundle(env)
        buf = self.make_buffer(env, b)
        stats = ppo_update(buf, b, TrainConfig(), np.random.default_rng(0))
        assert stats["clip_fraction_first_epoch"] == 0.0
        assert 0.0 <= stats["clip_fraction"] <= 1.0

    def test_zero_advantage_zero_entropy_freezes_actor(self):
        env = small_env(3)
        b = fresh_bundle(env)
        buf = self.make_buffer(env, b)
        buf.advantages = np.zeros_like(buf.advantages)
        before = [p.copy() for p in b.actor_av.params]
        cfg = TrainConfig(entropy_coef=0.0)
        ppo_update(buf, b, cfg, np.random.default_rng(0))
        assert all(np.array_equal(a, c)
                   for a, c in zip(before, b.actor_av.params))

    def test_update_is_seed_deterministic(self):
        env = small_env(3)
        results = []
        for _ in range(2):
            b = fresh_bundle(env, seed=5)
            buf = self.make_buffer(env, b)
            stats = ppo_update(buf, b, TrainConfig(), np.random.default_rng(11))
            results.append((stats, [p.copy() for p in b.actor_av.params]))
        assert results[0][0] == results[1][0]
        assert all(np.array_equal(a, c)
                   for a, c in zip(results[0][1], results[1][1]))

    def test_requires_computed_advantages(self):
        env = small_env(3)
        b = fresh_bundle(env)
        buf = collect_rollout(env, b, 10, np.random.default_rng(0), 1)
        with pytest.raises(ValueError, match="advantages"):
            ppo_update(buf, b, TrainConfig(), np.random.default_rng(0))


class TestTrain:
    def test_writes_curves_checkpoints_and_timings(self, tmp_path):
        env_cfg = EnvConfig(n_agents=3)
        cfg = TrainConfig(episodes=2, steps=20, seed=1)
        bundle, history = train(env_cfg, cfg, str(tmp_path))
        assert len(history) == 2
        curve = (tmp_path / "learning_curve.csv").read_text().strip().split("\n")
        assert len(curve) == 3
        assert curve[0].startswith("episode,summed_reward,collisions")
        for name in ("actor_av.bin", "actor_emv.bin", "critic.bin",
                     "manifest.json", "timings.json"):
            assert (tmp_path / name).exists()
        import json
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["mode"] == "cooperative"
        assert manifest["agent_roles"] == ["emv", "av", "av"]
        assert manifest["iteration"] == 2
        timings = json.loads((tmp_path / "timings.json").read_text())
        assert timings["total_env_steps"] == 40
        assert timings["steps_per_sec"] > 0

    def test_competitive_writes_per_agent_checkpoints(self, tmp_path):
        env_cfg = EnvConfig(n_agents=3)
        cfg = TrainConfig(episodes=1, steps=15, seed=2, mode="competitive")
        train(env_cfg, cfg, str(tmp_path))
        for i in range(3):
            assert (tmp_path / f"actor_{i:02d}.bin").exists()
            assert (tmp_path / f"critic_{i:02d}.bin").exists()

    def test_same_seed_twice_is_bit_identical(self, tmp_path):
        env_cfg = EnvConfig(n_agents=3)
        cfg = TrainConfig(episodes=2, steps=15, seed=3)
        a, b = tmp_path / "a", tmp_path / "b"
        train(env_cfg, cfg, str(a))
        train(env_cfg, cfg, str(b))
        assert (a / "learning_curve.csv").read_bytes() \
            == (b / "learning_curve.csv").read_bytes()
        for name in ("actor_av.bin", "actor_emv.bin", "critic.bin"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_different_seeds_differ(self, tmp_path):
        env_cfg = EnvConfig(n_agents=3)
        a, b = tmp_path / "a", tmp_path / "b"
        train(env_cfg, TrainConfig(episodes=1, steps=15, seed=4), str(a))
        train(env_cfg, TrainConfig(episodes=1, steps=15, seed=5), str(b))
        assert (a / "actor_av.bin").read_bytes() \
            != (b / "actor_av.bin").read_bytes()
