"""Experiment configuration: one structured file drives every CLI command.

An ExperimentConfig names the scenario (which fixes the lane count), the
agent count, the method under test and the knobs of training, reward
shaping and risk assessment.  It loads from and saves to YAML; the saved
form is the fully resolved config (all defaults applied), so a run
directory's snapshot can be fed straight back to `--config` to reproduce
the run.
"""

from dataclasses import asdict, dataclass, fields, replace

import yaml

from .env import EnvConfig, RewardWeights, TrackConfig
from .mappo import TrainConfig
from .risk import RiskParams

SCENARIO_LANES = {"road": 2, "highway": 4}
METHODS = ("mappo", "gipps", "mpc")

# Desk-scale defaults: small enough to train on one core in minutes,
# large enough that the qualitative orderings between methods show up.
# Two-episode update batches tame outlier episodes at no extra step cost.
DESK_EPISODES = 300
DESK_ROLLOUT_ENVS = 2
DESK_SEEDS = (0, 1, 2)
DESK_EVAL_EPISODES = 10


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "road"
    agents: int = 10
    method: str = "mappo"
    train: TrainConfig = TrainConfig(episodes=DESK_EPISODES,
                                     rollout_envs=DESK_ROLLOUT_ENVS)
    reward: RewardWeights = RewardWeights()
    risk: RiskParams = RiskParams()
    eval_episodes: int = DESK_EVAL_EPISODES
    seeds: tuple = DESK_SEEDS
    out_dir: str = "runs"

    def __post_init__(self):
        if self.scenario not in SCENARIO_LANES:
            raise ValueError(f"unknown scenario {self.scenario!r}; "
                             f"expected one of {sorted(SCENARIO_LANES)}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; "
                             f"expected one of {METHODS}")
        if self.agents < 1:
            raise ValueError("need at least one agent")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")
        if len(self.seeds) < 1:
            raise ValueError("need at least one seed")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def lanes(self) -> int:
        return SCENARIO_LANES[self.scenario]

    def env_config(self, agents: int | None = None,
                   reward: RewardWeights | None = None,
                   competitive: bool = False) -> EnvConfig:
        """Materialize the EnvConfig this experiment runs on."""
        return EnvConfig(
            track=TrackConfig(lanes=self.lanes),
            n_agents=self.agents if agents is None else agents,
            horizon=self.train.steps,
            weights=self.reward if reward is None else reward,
            risk=self.risk,
            competitive=competitive,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data or {})
        kwargs = {}
        bases = {f.name: f.default for f in fields(cls)}
        for section, typ in (("train", TrainConfig), ("reward", RewardWeights),
                             ("risk", RiskParams)):
            if section in data:
                kwargs[section] = _build_section(section, typ,
                                                 data.pop(section),
                                                 bases[section])
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs.update(data)
        if "seeds" in kwargs:
            kwargs["seeds"] = tuple(kwargs["seeds"])
        return cls(**kwargs)

    @classmethod
    def from_yaml(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh)
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: expected a mapping at top level")
        try:
            return cls.from_dict(data)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}: {exc}") from exc

    def to_yaml(self, path: str):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True,
                           default_flow_style=False)

    def with_overrides(self, scenario=None, agents=None, method=None,
                       episodes=None, seed=None, out_dir=None) -> "ExperimentConfig":
        """CLI-flag overrides; None leaves the field as configured."""
        cfg = self
        if scenario is not None:
            cfg = replace(cfg, scenario=scenario)
        if agents is not None:
            cfg = replace(cfg, agents=int(agents))
        if method is not None:
            cfg = replace(cfg, method=method)
        if episodes is not None:
            cfg = replace(cfg, train=replace(cfg.train, episodes=int(episodes)))
        if seed is not None:
            cfg = replace(cfg, seeds=(int(seed),))
        if out_dir is not None:
            cfg = replace(cfg, out_dir=out_dir)
        return cfg


def _build_section(name: str, typ, data, base) -> object:
    """Build a config section, with omitted keys taken from `base`.

    `base` is the experiment-level default instance, so a partial mapping
    inherits desk-scale defaults rather than the type's own.
    """
    if isinstance(data, typ):
        return data
    if not isinstance(data, dict):
        raise ValueError(f"config section {name!r} must be a mapping")
    known = {f.name for f in fields(typ)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return replace(base, **data)
