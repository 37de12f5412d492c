"""Multi-agent PPO with a centralized critic, on the ring-road env.

Cooperative mode trains one actor shared by every automated vehicle, a
separate actor for the emergency vehicle (its speed envelope and reward
exposure differ), and a single critic that scores each agent's
privileged global-feature vector.  Competitive mode gives every agent
its own actor and critic, and the environment drops the shared
emergency-vehicle reward terms.

The update is the clipped-surrogate PPO step: per epoch the episode's
samples are reshuffled into minibatches, the actor ascends
mean(min(ratio * adv, clip(ratio) * adv)) + entropy bonus and the critic
descends the clipped value loss, both with analytic gradients through
the tanh networks.  Advantages come from GAE with a zero bootstrap at
the horizon and whole-batch normalization.

Everything is seed-deterministic: environment resets, action sampling,
minibatch shuffles and network init all derive from one seed, so a rerun
yields bit-identical checkpoints and learning curves.
"""

from dataclasses import dataclass
import csv
import hashlib
import json
import os
import time

import numpy as np

from .env import EmvRingEnv, EnvConfig
from .nn import (Adam, MLP, categorical_entropy, categorical_sample,
                 load_checkpoint, log_softmax, save_checkpoint)


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 2000          # training iterations M
    steps: int = 400              # env steps per episode T
    actor_lr: float = 5e-4
    critic_lr: float = 5e-4
    ppo_epochs: int = 15
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    minibatches: int = 4
    seed: int = 0
    mode: str = "cooperative"     # or "competitive"
    rollout_envs: int = 1         # episodes merged into each update batch
    checkpoint_every: int = 0     # extra saves every k episodes; 0 = final only

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.ppo_epochs < 1 or self.minibatches < 1:
            raise ValueError("ppo_epochs and minibatches must be >= 1")
        if self.rollout_envs < 1:
            raise ValueError("rollout_envs must be >= 1")
        if self.mode not in ("cooperative", "competitive"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class TransitionRecord:
    agent: int
    obs: np.ndarray
    glob: np.ndarray
    action: int
    logp: float
    value: float
    reward: float
    done: bool


class RolloutBuffer:
    """One episode of transitions for all agents, as (steps, agents) arrays.

    `values` has one extra row holding the bootstrap value of the
    post-terminal state (zero at the fixed horizon).  The risk, collision
    and speed arrays are monitoring extras for the learning curve.
    """

    def __init__(self, steps: int, n: int, obs_dim: int, global_dim: int):
        self.steps = steps
        self.n = n
        self.obs = np.zeros((steps, n, obs_dim))
        self.glob = np.zeros((steps, n, global_dim))
        self.actions = np.zeros((steps, n), dtype=np.int64)
        self.logp = np.zeros((steps, n))
        self.values = np.zeros((steps + 1, n))
        self.rewards = np.zeros((steps, n))
        self.dones = np.zeros((steps, n))
        self.risks = np.zeros((steps, n))
        self.collisions = np.zeros(steps, dtype=np.int64)
        self.emv_speed = np.zeros(steps)
        self.av_speed = np.zeros(steps)
        self.advantages = None
        self.returns = None
        self.pos = 0

    def add(self, obs, glob, actions, logp, values, rewards, done):
        t = self.pos
        self.obs[t] = obs
        self.glob[t] = glob
        self.actions[t] = actions
        self.logp[t] = logp
        self.values[t] = values
        self.rewards[t] = rewards
        self.dones[t] = float(done)
        self.pos += 1

    def __len__(self):
        return self.pos * self.n

    def record(self, step: int, agent: int) -> TransitionRecord:
        return TransitionRecord(
            agent=agent, obs=self.obs[step, agent], glob=self.glob[step, agent],
            action=int(self.actions[step, agent]),
            logp=float(self.logp[step, agent]),
            value=float(self.values[step, agent]),
            reward=float(self.rewards[step, agent]),
            done=bool(self.dones[step, agent]))


class PolicyBundle:
    """The actor/critic networks for one training mode."""

    def __init__(self, mode: str, n_agents: int, obs_dim: int,
                 global_dim: int, rng, actor_lr: float = 5e-4,
                 critic_lr: float = 5e-4, nets: dict | None = None):
        self.mode = mode
        self.n = n_agents
        self.obs_dim = obs_dim
        self.global_dim = global_dim
        actor_sizes = (obs_dim, 64, 64, 7)
        critic_sizes = (global_dim, 64, 64, 1)
        if mode == "cooperative":
            if nets is None:
                self.actor_av = MLP(actor_sizes, rng, out_gain=0.01)
                self.actor_emv = MLP(actor_sizes, rng, out_gain=0.01)
                self.critic = MLP(critic_sizes, rng, out_gain=1.0)
            else:
                self.actor_av = nets["actor_av"]
                self.actor_emv = nets["actor_emv"]
                self.critic = nets["critic"]
            self.opt_av = Adam(self.actor_av.params, lr=actor_lr)
            self.opt_emv = Adam(self.actor_emv.params, lr=actor_lr)
            self.opt_critic = Adam(self.critic.params, lr=critic_lr)
        elif mode == "competitive":
            if nets is None:
                self.actors = [MLP(actor_sizes, rng, out_gain=0.01)
                               for _ in range(n_agents)]
                self.critics = [MLP(critic_sizes, rng, out_gain=1.0)
                                for _ in range(n_agents)]
            else:
                self.actors = [nets[f"actor_{i:02d}"] for i in range(n_agents)]
                self.critics = [nets[f"critic_{i:02d}"] for i in range(n_agents)]
            self.actor_opts = [Adam(a.params, lr=actor_lr) for a in self.actors]
            self.critic_opts = [Adam(c.params, lr=critic_lr) for c in self.critics]
        else:
            raise ValueError(f"unknown mode {mode!r}")

    def actor_for(self, i: int) -> MLP:
        if self.mode == "competitive":
            return self.actors[i]
        return self.actor_emv if i == 0 else self.actor_av

    def critic_for(self, i: int) -> MLP:
        return self.critics[i] if self.mode == "competitive" else self.critic

    def logits_all(self, obs) -> np.ndarray:
        """(n, obs_dim) -> (n, 7), routing each row to its actor."""
        if self.mode == "cooperative":
            out = np.empty((self.n, 7))
            out[0] = self.actor_emv(obs[0])[0]
            if self.n > 1:
                out[1:] = self.actor_av(obs[1:])
            return out
        return np.concatenate([self.actors[i](obs[i]) for i in range(self.n)])

    def values_all(self, glob) -> np.ndarray:
        if self.mode == "cooperative":
            return self.critic(glob)[:, 0]
        return np.concatenate([self.critics[i](glob[i])[:, 0]
                               for i in range(self.n)])

    def act_sample(self, obs, rng):
        logits = self.logits_all(obs)
        actions = categorical_sample(rng, logits)
        logp = log_softmax(logits)[np.arange(self.n), actions]
        return actions, logp

    def act_greedy(self, obs) -> np.ndarray:
        return self.logits_all(obs).argmax(axis=1)

    def actor_groups(self):
        """(name, net, optimizer, agent indices) per trainable actor."""
        if self.mode == "cooperative":
            groups = [("emv", self.actor_emv, self.opt_emv, [0])]
            if self.n > 1:
                groups.append(("av", self.actor_av, self.opt_av,
                               list(range(1, self.n))))
            return groups
        return [(f"agent{i}", self.actors[i], self.actor_opts[i], [i])
                for i in range(self.n)]

    def critic_groups(self):
        if self.mode == "cooperative":
            return [("critic", self.critic, self.opt_critic,
                     list(range(self.n)))]
        return [(f"critic{i}", self.critics[i], self.critic_opts[i], [i])
                for i in range(self.n)]

    def checkpoint_nets(self) -> dict:
        if self.mode == "cooperative":
            return {"actor_av": self.actor_av, "actor_emv": self.actor_emv,
                    "critic": self.critic}
        nets = {}
        for i, a in enumerate(self.actors):
            nets[f"actor_{i:02d}"] = a
        for i, c in enumerate(self.critics):
            nets[f"critic_{i:02d}"] = c
        return nets


def collect_rollout(env: EmvRingEnv, bundle: PolicyBundle, steps: int,
                    rng, reset_seed: int) -> RolloutBuffer:
    """Roll one episode, recording behaviour log-probs and critic values."""
    obs, glob = env.reset(seed=reset_seed)
    buf = RolloutBuffer(steps, env.n, env.obs_dim, env.global_dim)
    for t in range(steps):
        actions, logp = bundle.act_sample(obs, rng)
        values = bundle.values_all(glob)
        out = env.step(actions)
        buf.add(obs, glob, actions, logp, values, out.reward, out.done)
        buf.risks[t] = out.risk
        buf.collisions[t] = out.collision_events
        buf.emv_speed[t] = env.v[0]
        buf.av_speed[t] = env.v[1:].mean() if env.n > 1 else 0.0
        obs, glob = out.obs, out.global_features
    # values[steps] stays 0: the horizon is terminal, nothing to bootstrap.
    return buf


def gae_advantages(rewards, values, dones, gamma: float, lam: float):
    """Raw (un-normalized) GAE by backward recursion.

    `values` needs one more leading row than `rewards` (the bootstrap).
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    if v.shape[0] != r.shape[0] + 1:
        raise ValueError("values must include a bootstrap row")
    adv = np.zeros_like(r)
    acc = np.zeros(r.shape[1:])
    for t in range(r.shape[0] - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * live * v[t + 1] - v[t]
        acc = delta + gamma * lam * live * acc
        adv[t] = acc
    return adv


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float):
    """Fill buffer.advantages (normalized) and buffer.returns."""
    raw = gae_advantages(buffer.rewards, buffer.values, buffer.dones,
                         gamma, lam)
    buffer.returns = raw + buffer.values[:-1]
    mean = raw.mean()
    std = raw.std()
    buffer.advantages = (raw - mean) / (std + 1e-8)
    return buffer.advantages, buffer.returns


def merge_for_update(buffers: list, gamma: float, lam: float) -> RolloutBuffer:
    """Stack episode buffers into one update batch.

    GAE runs per episode against that episode's own bootstrap row; the
    advantage normalization then spans the merged batch, which is what
    the update consumes.  With a single buffer this reproduces
    compute_gae exactly.
    """
    raws = [gae_advantages(b.rewards, b.values, b.dones, gamma, lam)
            for b in buffers]
    raw = np.concatenate(raws, axis=0)
    first = buffers[0]
    total = sum(b.steps for b in buffers)
    out = RolloutBuffer(total, first.n, first.obs.shape[2],
                        first.glob.shape[2])
    out.obs = np.concatenate([b.obs for b in buffers], axis=0)
    out.glob = np.concatenate([b.glob for b in buffers], axis=0)
    out.actions = np.concatenate([b.actions for b in buffers], axis=0)
    out.logp = np.concatenate([b.logp for b in buffers], axis=0)
    vals = np.concatenate([b.values[:-1] for b in buffers], axis=0)
    out.values = np.concatenate([vals, np.zeros((1, first.n))], axis=0)
    out.rewards = np.concatenate([b.rewards for b in buffers], axis=0)
    out.dones = np.concatenate([b.dones for b in buffers], axis=0)
    out.returns = raw + vals
    out.advantages = (raw - raw.mean()) / (raw.std() + 1e-8)
    out.pos = total
    return out


def actor_objective(obs, actions, logp_old, adv, actor: MLP,
                    clip_eps: float, entropy_coef: float):
    """Clipped surrogate plus entropy bonus: (objective, gradients, stats).

    Gradients are of the objective itself; ascend by feeding their
    negation to a minimizer.
    """
    n = obs.shape[0]
    logits, cache = actor.forward(obs)
    logp_all = log_softmax(logits)
    p = np.exp(logp_all)
    rows = np.arange(n)
    logp_new = logp_all[rows, actions]
    ratio = np.exp(logp_new - logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    surrogate = np.minimum(unclipped, clipped)
    entropy = categorical_entropy(logits)
    objective = surrogate.mean() + entropy_coef * entropy.mean()

    # d surrogate / d logits: flows only where the unclipped branch wins.
    flow = (unclipped <= clipped).astype(np.float64)
    onehot = np.zeros_like(p)
    onehot[rows, actions] = 1.0
    dsur = (flow * ratio * adv)[:, None] * (onehot - p)
    dent = -p * (logp_all + entropy[:, None])
    dlogits = (dsur + entropy_coef * dent) / n
    grads = actor.backward(cache, dlogits)

    stats = {"mean_ratio": float(ratio.mean()),
             "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
             "entropy": float(entropy.mean())}
    return float(objective), grads, stats


def critic_loss(glob, returns, v_old, critic: MLP, clip_eps: float):
    """Clipped value regression: (loss, gradients)."""
    n = glob.shape[0]
    v, cache = critic.forward(glob)
    v = v[:, 0]
    v_clip = np.clip(v, v_old - clip_eps, v_old + clip_eps)
    err = v - returns
    err_clip = v_clip - returns
    per_sample = np.maximum(err * err, err_clip * err_clip)
    loss = float(per_sample.mean())
    grad_v = np.where(err * err >= err_clip * err_clip, 2.0 * err, 0.0) / n
    grads = critic.backward(cache, grad_v[:, None])
    return loss, grads


def ppo_update(buffer: RolloutBuffer, bundle: PolicyBundle,
               cfg: TrainConfig, rng) -> dict:
    """One PPO iteration over the episode buffer; returns update stats."""
    if buffer.advantages is None:
        raise ValueError("advantages not computed; call compute_gae first")

    actor_sets = []
    for name, net, opt, agents in bundle.actor_groups():
        idx = np.array(agents)
        actor_sets.append((name, net, opt,
                           buffer.obs[:, idx].reshape(-1, bundle.obs_dim),
                           buffer.actions[:, idx].ravel(),
                           buffer.logp[:, idx].ravel(),
                           buffer.advantages[:, idx].ravel()))
    critic_sets = []
    for name, net, opt, agents in bundle.critic_groups():
        idx = np.array(agents)
        critic_sets.append((name, net, opt,
                            buffer.glob[:, idx].reshape(-1, bundle.global_dim),
                            buffer.returns[:, idx].ravel(),
                            buffer.values[:-1, idx].ravel()))

    totals = {"mean_ratio": 0.0, "clip_fraction": 0.0, "entropy": 0.0,
              "actor_objective": 0.0, "critic_loss": 0.0}
    first_epoch_clip = []
    n_actor_evals = n_critic_evals = 0

    for epoch in range(cfg.ppo_epochs):
        for name, net, opt, obs, acts, logp_old, adv in actor_sets:
            perm = rng.permutation(obs.shape[0])
            for chunk in np.array_split(perm, cfg.minibatches):
                if chunk.size == 0:
                    continue
                obj, grads, st = actor_objective(
                    obs[chunk], acts[chunk], logp_old[chunk], adv[chunk],
                    net, cfg.clip_eps, cfg.entropy_coef)
                opt.step([-g for g in grads])
                totals["mean_ratio"] += st["mean_ratio"]
                totals["clip_fraction"] += st["clip_fraction"]
                totals["entropy"] += st["entropy"]
                totals["actor_objective"] += obj
                if epoch == 0:
                    first_epoch_clip.append(st["clip_fraction"])
                n_actor_evals += 1
        for name, net, opt, glob, rets, v_old in critic_sets:
            perm = rng.permutation(glob.shape[0])
            for chunk in np.array_split(perm, cfg.minibatches):
                if chunk.size == 0:
                    continue
                loss, grads = critic_loss(glob[chunk], rets[chunk],
                                          v_old[chunk], net, cfg.clip_eps)
                opt.step(grads)
                totals["critic_loss"] += loss
                n_critic_evals += 1

    stats = {k: v / max(n_actor_evals, 1) for k, v in totals.items()
             if k != "critic_loss"}
    stats["critic_loss"] = totals["critic_loss"] / max(n_critic_evals, 1)
    stats["clip_fraction_first_epoch"] = float(np.mean(first_epoch_clip)) \
        if first_epoch_clip else 0.0
    stats["adam_steps_actor"] = n_actor_evals
    stats["adam_steps_critic"] = n_critic_evals
    return stats


def config_hash(env_config: EnvConfig) -> str:
    from dataclasses import asdict
    blob = json.dumps(asdict(env_config), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


CURVE_COLUMNS = ("episode", "summed_reward", "collisions", "mean_risk",
                 "emv_speed", "av_speed")


def _fmt(x) -> str:
    return repr(float(x))


def save_bundle(out_dir: str, bundle: PolicyBundle, env_config: EnvConfig,
                iteration: int):
    nets = bundle.checkpoint_nets()
    files = {}
    for name, net in nets.items():
        fname = f"{name}.bin"
        save_checkpoint(os.path.join(out_dir, fname), {name: net})
        files[name] = fname
    roles = ["emv"] + ["av"] * (bundle.n - 1)
    manifest = {"mode": bundle.mode, "agent_roles": roles,
                "env_config_hash": config_hash(env_config),
                "iteration": iteration, "nets": files,
                "obs_dim": bundle.obs_dim, "global_dim": bundle.global_dim}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_bundle(run_dir: str) -> PolicyBundle:
    """Rebuild a frozen PolicyBundle from a training run directory."""
    manifest_path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no checkpoint manifest in {run_dir}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    nets = {}
    for name, fname in manifest["nets"].items():
        nets.update(load_checkpoint(os.path.join(run_dir, fname)))
    return PolicyBundle(manifest["mode"], len(manifest["agent_roles"]),
                        manifest["obs_dim"], manifest["global_dim"],
                        rng=None, nets=nets)


def train(env_config: EnvConfig, cfg: TrainConfig, out_dir: str):
    """Full training run; writes curves, checkpoints and a timing report.

    Returns (bundle, list of per-episode stat dicts).
    """
    os.makedirs(out_dir, exist_ok=True)
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, reset_ss, sample_ss, shuffle_ss = ss.spawn(4)
    init_rng = np.random.default_rng(init_ss)
    reset_rng = np.random.default_rng(reset_ss)
    sample_rng = np.random.default_rng(sample_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)

    env = EmvRingEnv(env_config)
    bundle = PolicyBundle(cfg.mode, env.n, env.obs_dim, env.global_dim,
                          init_rng, cfg.actor_lr, cfg.critic_lr)

    history = []
    t0 = time.monotonic()
    curve_path = os.path.join(out_dir, "learning_curve.csv")
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        episode = 0
        while episode < cfg.episodes:
            # Fan out over fresh env episodes with the current parameter
            # snapshot; the merged buffer feeds a single update.  Worker
            # order fixes both the seed assignment and the merge order.
            k = min(cfg.rollout_envs, cfg.episodes - episode)
            bufs = []
            for _ in range(k):
                reset_seed = int(reset_rng.integers(0, 2 ** 31))
                bufs.append(collect_rollout(env, bundle, cfg.steps,
                                            sample_rng, reset_seed))
            merged = merge_for_update(bufs, cfg.gamma, cfg.gae_lambda)
            update = ppo_update(merged, bundle, cfg, shuffle_rng)
            for buf in bufs:
                row = {"episode": episode,
                       "summed_reward": float(buf.rewards.sum()),
                       "collisions": int(buf.collisions.sum()),
                       "mean_risk": float(buf.risks.mean()),
                       "emv_speed": float(buf.emv_speed.mean()),
                       "av_speed": float(buf.av_speed.mean())}
                history.append({**row, **update})
                writer.writerow([row["episode"], _fmt(row["summed_reward"]),
                                 row["collisions"], _fmt(row["mean_risk"]),
                                 _fmt(row["emv_speed"]), _fmt(row["av_speed"])])
                episode += 1
            fh.flush()
            if cfg.checkpoint_every:
                prev = (episode - k) // cfg.checkpoint_every
                if episode // cfg.checkpoint_every > prev:
                    save_bundle(out_dir, bundle, env_config, episode)

    save_bundle(out_dir, bundle, env_config, cfg.episodes)
    elapsed = time.monotonic() - t0
    total_steps = cfg.episodes * cfg.steps
    with open(os.path.join(out_dir, "timings.json"), "w") as fh:
        json.dump({"wall_clock_sec": elapsed,
                   "total_env_steps": total_steps,
                   "steps_per_sec": total_steps / elapsed if elapsed > 0 else 0.0},
                  fh, indent=1)
        fh.write("\n")
    return bundle, history
