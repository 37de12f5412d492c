"""Experiment harness: the four studies, run end to end at desk scale.

Every study follows the same shape: train (or load) a policy per seed,
replay a fixed set of evaluation episodes greedily, collect per-episode
metrics, and export per-episode + aggregated CSVs alongside the resolved
config and a run manifest.  Evaluation episodes are seeded by a fixed
formula of (run seed, episode index), so every method inside one study
sees the identical set of initial traffic states and comparisons are
paired.

All CSV content is deterministic for a given config and seed list; wall
clock throughput lives in manifests and timings files only.
"""

from dataclasses import dataclass, field, replace
import csv
import datetime
import json
import os
import time

import numpy as np

from . import __version__
from .baselines import GippsController, GippsParams, MPCController, MPCParams
from .config import ExperimentConfig
from .env import EmvRingEnv
from .mappo import load_bundle, train

# Large co-prime stride keeps per-seed evaluation episode streams disjoint.
EVAL_SEED_STRIDE = 100003

METRIC_NAMES = ("summed_reward", "emv_speed", "av_speed", "collisions",
                "mean_risk", "safety_distance")

DEFAULT_SWEEP_GRID = ((0.0, 1.0), (0.5, 1.0), (1.0, 1.0),
                      (1.0, 0.5), (1.0, 0.0))

EPISODE_KEY_COLUMNS = ("scenario", "method", "agents", "mode",
                       "w_risk", "w_eff")


@dataclass
class MetricsRecord:
    """All evaluation episodes of one experiment arm, plus throughput."""

    key: dict
    episodes: list = field(default_factory=list)
    steps_per_sec: float = 0.0
    error: str = ""

    def aggregate(self) -> dict:
        """Per-metric (mean, sample std) over every stored episode."""
        out = {}
        for name in METRIC_NAMES:
            vals = np.array([ep[name] for ep in self.episodes], dtype=np.float64)
            if vals.size == 0:
                out[name] = (float("nan"), float("nan"))
            elif vals.size == 1:
                out[name] = (float(vals[0]), 0.0)
            else:
                out[name] = (float(vals.mean()), float(vals.std(ddof=1)))
        return out


def record_key(exp: ExperimentConfig, method: str, mode: str = "cooperative",
                agents: int | None = None, w_risk: float | None = None,
                w_eff: float | None = None) -> dict:
    return {"scenario": exp.scenario, "method": method,
            "agents": exp.agents if agents is None else agents,
            "mode": mode,
            "w_risk": exp.reward.w_risk if w_risk is None else w_risk,
            "w_eff": exp.reward.w_eff if w_eff is None else w_eff}


# -- evaluation --------------------------------------------------------------


def run_episode(env: EmvRingEnv, policy, reset_seed: int) -> dict:
    """Greedy replay of one episode; returns the six per-episode metrics.

    The dict carries one extra key, emv_risk (the emergency vehicle's own
    mean risk index), for the cooperative-vs-competitive study; exported
    CSVs keep only the six standard metrics.
    """
    obs, _ = env.reset(seed=reset_seed)
    horizon = env.cfg.horizon
    reward_total = 0.0
    risk_total = 0.0
    emv_risk_total = 0.0
    gap_total = 0.0
    emv_total = 0.0
    av_total = 0.0
    events = 0
    for _ in range(horizon):
        actions = policy(env, obs)
        out = env.step(actions)
        obs = out.obs
        reward_total += float(out.reward.sum())
        risk_total += float(out.risk.mean())
        emv_risk_total += float(out.risk[0])
        events += out.collision_events
        gap_total += float(env.leading_gaps().mean())
        emv_total += float(env.v[0])
        if env.n > 1:
            av_total += float(env.v[1:].mean())
    return {"summed_reward": reward_total,
            "emv_speed": emv_total / horizon,
            "av_speed": av_total / horizon,
            "collisions": events,
            "mean_risk": risk_total / horizon,
            "safety_distance": gap_total / horizon,
            "emv_risk": emv_risk_total / horizon}


def _bundle_policy(run_dir: str):
    bundle = load_bundle(run_dir)

    def policy(env, obs):
        return bundle.act_greedy(obs)

    return policy


def _controller_policy(method: str, exp: ExperimentConfig):
    if method == "gipps":
        ctrl = GippsController(GippsParams(), exp.risk)
    elif method == "mpc":
        ctrl = MPCController(MPCParams(), GippsParams(), exp.risk)
    else:
        raise ValueError(f"unknown controller method {method!r}")

    def policy(env, obs):
        return ctrl.act(env)

    return policy


def _train_steps_per_sec(run_dirs) -> float:
    rates = []
    for d in run_dirs:
        path = os.path.join(d, "timings.json")
        with open(path) as fh:
            rates.append(json.load(fh)["steps_per_sec"])
    return float(np.mean(rates)) if rates else 0.0


def evaluate_method(exp: ExperimentConfig, method: str, key: dict,
                    run_dirs=None, env_config=None) -> MetricsRecord:
    """Greedy evaluation over every (seed, episode) pair in the config.

    `run_dirs` supplies one trained run directory per seed for mappo;
    baselines need none and perform zero parameter updates.
    """
    if env_config is None:
        env_config = exp.env_config()
    env = EmvRingEnv(env_config)
    record = MetricsRecord(key=key)
    t0 = time.monotonic()
    for idx, seed in enumerate(exp.seeds):
        if method == "mappo":
            policy = _bundle_policy(run_dirs[idx])
        else:
            policy = _controller_policy(method, exp)
        for ep in range(exp.eval_episodes):
            reset_seed = EVAL_SEED_STRIDE * seed + ep
            metrics = run_episode(env, policy, reset_seed)
            record.episodes.append({"seed": seed, "episode": ep, **metrics})
    elapsed = time.monotonic() - t0
    if method == "mappo":
        record.steps_per_sec = _train_steps_per_sec(run_dirs or [])
    else:
        total = len(exp.seeds) * exp.eval_episodes * env_config.horizon
        record.steps_per_sec = total / elapsed if elapsed > 0 else 0.0
    return record


# -- training orchestration --------------------------------------------------


def train_seed_runs(exp: ExperimentConfig, subdir: str,
                    mode: str = "cooperative", agents: int | None = None,
                    reward=None) -> list:
    """One training run per configured seed; returns the run directories."""
    env_cfg = exp.env_config(agents=agents, reward=reward,
                             competitive=(mode == "competitive"))
    dirs = []
    for seed in exp.seeds:
        out = os.path.join(exp.out_dir, subdir, f"seed_{seed}")
        cfg = replace(exp.train, seed=seed, mode=mode)
        train(env_cfg, cfg, out)
        dirs.append(out)
    return dirs


# -- studies -----------------------------------------------------------------


def run_comparison(exp: ExperimentConfig, mappo_dirs=None,
                   train_missing: bool = True) -> list:
    """MAPPO vs Gipps vs MPC on identical seeded evaluation episodes."""
    if mappo_dirs is None:
        if not train_missing:
            raise FileNotFoundError(
                "comparison needs a trained checkpoint per seed; pass "
                "mappo_dirs or enable training")
        mappo_dirs = train_seed_runs(exp, os.path.join("compare", "mappo"))
    else:
        for d in mappo_dirs:
            if not os.path.exists(os.path.join(d, "manifest.json")):
                raise FileNotFoundError(f"no checkpoint manifest in {d}")
    records = []
    for method in ("mappo", "gipps", "mpc"):
        key = record_key(exp, method)
        records.append(evaluate_method(
            exp, method, key, run_dirs=mappo_dirs if method == "mappo" else None))
    return records


def sweep_point_dir(w_risk: float, w_eff: float) -> str:
    return f"wr{w_risk:g}_we{w_eff:g}"


def run_reward_sweep(exp: ExperimentConfig, grid=None,
                     pretrained=None) -> list:
    """Train and evaluate one policy per (w_risk, w_eff) grid point.

    `pretrained` optionally maps (w_risk, w_eff) to per-seed run
    directories to reuse; records come back in grid order.
    """
    grid = DEFAULT_SWEEP_GRID if grid is None else tuple(grid)
    pretrained = pretrained or {}
    records = []
    for w_risk, w_eff in grid:
        w_risk, w_eff = float(w_risk), float(w_eff)
        reward = replace(exp.reward, w_risk=w_risk, w_eff=w_eff)
        dirs = pretrained.get((w_risk, w_eff))
        if dirs is None:
            subdir = os.path.join("sweep", sweep_point_dir(w_risk, w_eff))
            dirs = train_seed_runs(exp, subdir, reward=reward)
        key = record_key(exp, "mappo", w_risk=w_risk, w_eff=w_eff)
        records.append(evaluate_method(
            exp, "mappo", key, run_dirs=dirs,
            env_config=exp.env_config(reward=reward)))
    return records


def _combined_curves(run_dirs, seeds, out_path):
    """Merge per-seed learning curves into one CSV with a mean column."""
    series = []
    for d in run_dirs:
        with open(os.path.join(d, "learning_curve.csv")) as fh:
            rows = list(csv.DictReader(fh))
        series.append([float(r["summed_reward"]) for r in rows])
    n_ep = min(len(s) for s in series) if series else 0
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode"]
                        + [f"summed_reward_seed{s}" for s in seeds]
                        + ["summed_reward_mean"])
        for ep in range(n_ep):
            vals = [s[ep] for s in series]
            writer.writerow([ep] + [repr(v) for v in vals]
                            + [repr(float(np.mean(vals)))])


def run_scalability(exp: ExperimentConfig, counts=(10, 20),
                    pretrained=None) -> list:
    """Train and evaluate at each agent count; capacity errors do not abort.

    A count that exceeds the track's capacity yields a record whose
    `error` holds the ValueError text and whose episode list is empty;
    the remaining counts still run.
    """
    pretrained = pretrained or {}
    records = []
    for count in counts:
        count = int(count)
        key = record_key(exp, "mappo", agents=count)
        try:
            dirs = pretrained.get(count)
            if dirs is None:
                subdir = os.path.join("scale", f"n{count}")
                dirs = train_seed_runs(exp, subdir, agents=count)
                _combined_curves(dirs, exp.seeds,
                                 os.path.join(exp.out_dir, subdir,
                                              "learning_curves.csv"))
            record = evaluate_method(exp, "mappo", key, run_dirs=dirs,
                                     env_config=exp.env_config(agents=count))
        except ValueError as exc:
            record = MetricsRecord(key=key, error=str(exc))
        records.append(record)
    return records


def run_competitive(exp: ExperimentConfig, cooperative_dirs=None,
                    competitive_dirs=None) -> list:
    """Cooperative vs competitive training on the road scenario.

    Both modes train (or load) per seed and replay the same evaluation
    episode set; records carry mode="cooperative" / "competitive".
    """
    exp = replace(exp, scenario="road")
    records = []
    if cooperative_dirs is None:
        cooperative_dirs = train_seed_runs(
            exp, os.path.join("competitive", "cooperative"))
    if competitive_dirs is None:
        competitive_dirs = train_seed_runs(
            exp, os.path.join("competitive", "competitive"), mode="competitive")
    for mode, dirs in (("cooperative", cooperative_dirs),
                       ("competitive", competitive_dirs)):
        key = record_key(exp, "mappo", mode=mode)
        env_cfg = exp.env_config(competitive=(mode == "competitive"))
        records.append(evaluate_method(exp, "mappo", key, run_dirs=dirs,
                                       env_config=env_cfg))
    return records


# -- export ------------------------------------------------------------------


def _fmt_cell(v) -> str:
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _open_out(path: str, mode: str = "w"):
    try:
        return open(path, mode, newline="")
    except OSError as exc:
        raise OSError(f"cannot write results file {path}: {exc}") from exc


def export_results(records, out_dir: str, exp: ExperimentConfig,
                   created: str | None = None) -> dict:
    """Write episodes.csv, aggregate.csv, resolved config and manifest.

    `created` pins the manifest timestamp; passing the same value with
    the same records re-exports byte-identical files.  Returns the path
    of every file written.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create results dir {out_dir}: {exc}") from exc

    paths = {"episodes": os.path.join(out_dir, "episodes.csv"),
             "aggregate": os.path.join(out_dir, "aggregate.csv"),
             "config": os.path.join(out_dir, "resolved_config.yaml"),
             "manifest": os.path.join(out_dir, "run_manifest.json")}

    with _open_out(paths["episodes"]) as fh:
        writer = csv.writer(fh)
        writer.writerow(list(EPISODE_KEY_COLUMNS) + ["seed", "episode"]
                        + list(METRIC_NAMES))
        for rec in records:
            base = [_fmt_cell(rec.key[k]) for k in EPISODE_KEY_COLUMNS]
            for ep in rec.episodes:
                writer.writerow(base + [ep["seed"], ep["episode"]]
                                + [_fmt_cell(ep[m]) for m in METRIC_NAMES])

    with _open_out(paths["aggregate"]) as fh:
        writer = csv.writer(fh)
        header = list(EPISODE_KEY_COLUMNS) + ["n_episodes"]
        for m in METRIC_NAMES:
            header += [f"{m}_mean", f"{m}_std"]
        header.append("error")
        writer.writerow(header)
        for rec in records:
            agg = rec.aggregate()
            row = [_fmt_cell(rec.key[k]) for k in EPISODE_KEY_COLUMNS]
            row.append(len(rec.episodes))
            for m in METRIC_NAMES:
                mean, std = agg[m]
                row += [_fmt_cell(mean), _fmt_cell(std)]
            row.append(rec.error)
            writer.writerow(row)

    exp.to_yaml(paths["config"])

    if created is None:
        created = datetime.datetime.now(datetime.timezone.utc).isoformat()
    manifest = {"code_version": __version__,
                "created": created,
                "seeds": list(exp.seeds),
                "records": [{"key": rec.key,
                             "episodes": len(rec.episodes),
                             "steps_per_sec": rec.steps_per_sec,
                             "error": rec.error}
                            for rec in records]}
    with _open_out(paths["manifest"]) as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return paths
