"""Multi-agent ring-road environment with one emergency vehicle.

A single loop of road (400 m by default) carries one emergency vehicle
(EMV, agent 0) and a fleet of automated vehicles (AVs).  Agents issue one
of seven discrete commands per 0.1 s step: four longitudinal accelerations,
two lane changes, or keep.  Lane changes take ten steps during which the
vehicle occupies both lanes and drifts laterally at constant speed.

Each step the environment integrates kinematics, detects and resolves
rectangle collisions, scores every agent's worst pairwise risk within its
perception radius, and pays the composite reward: risk avoidance,
normalized own speed, collision and lane-change penalties, and (in
cooperative mode) shared credit for the emergency vehicle's progress.

Observations are egocentric and bounded to [-1, 1]: own speed, lane
one-hot and ring position, plus K nearest-neighbour slots.  The critic-side
global features append privileged summary statistics to the observation so
their size is independent of the number of agents.

State lives in flat numpy arrays; all per-step geometry (neighbour search,
pair risk) is evaluated as whole-matrix operations, which is what keeps
training throughput acceptable on a single core.
"""

from dataclasses import dataclass, field
from enum import IntEnum
import json

import numpy as np

from .risk import PairKinematics, RiskParams, lat_risk, lon_risk, unified_risk


class Action(IntEnum):
    ACCELERATE = 0        # +1.0 m/s^2
    BRAKE = 1             # -1.0 m/s^2
    HEAVY_ACCELERATE = 2  # +2.5 m/s^2
    HEAVY_BRAKE = 3       # -3.0 m/s^2
    CHANGE_LEFT = 4
    CHANGE_RIGHT = 5
    KEEP = 6


# Acceleration per action index; lane changes and keep are 0.
ACTION_ACCEL = np.array([1.0, -1.0, 2.5, -3.0, 0.0, 0.0, 0.0])

# The five purely longitudinal actions, in action-index order (tie-break order).
LON_ACTIONS = (Action.ACCELERATE, Action.BRAKE, Action.HEAVY_ACCELERATE,
               Action.HEAVY_BRAKE, Action.KEEP)


@dataclass(frozen=True)
class TrackConfig:
    loop_length: float = 400.0  # m
    lanes: int = 2              # 2 = road, 4 = highway
    lane_width: float = 3.5     # m
    dt: float = 0.1             # s

    def __post_init__(self):
        if self.loop_length <= 0 or self.dt <= 0:
            raise ValueError("loop_length and dt must be positive")
        if self.lanes < 2:
            raise ValueError("need at least two lanes")


@dataclass(frozen=True)
class VehicleSpec:
    role: str                      # "av" or "emv"
    v_min: float
    v_max: float
    length: float
    width: float
    perception_radius: float = 20.0  # m

    def __post_init__(self):
        if self.v_min > self.v_max:
            raise ValueError("v_min must not exceed v_max")
        if self.length <= 0 or self.width <= 0:
            raise ValueError("vehicle dimensions must be positive")


@dataclass(frozen=True)
class RewardWeights:
    w_risk: float = 1.0       # weight on (1 - risk)
    w_eff: float = 1.0        # weight on own normalized speed
    p_col: float = -100.0     # collision penalty
    p_lcm: float = -0.1       # own lane-change penalty
    p_lcm_ev: float = -0.2    # shared penalty when the EMV changes lane
    w_ev_speed: float = 1.0   # shared weight on the EMV's normalized speed

    def __post_init__(self):
        if self.p_col >= 0 or self.p_lcm > 0 or self.p_lcm_ev > 0:
            raise ValueError("penalties must be negative (p_lcm/p_lcm_ev may be 0)")


@dataclass(frozen=True)
class EnvConfig:
    track: TrackConfig = TrackConfig()
    av: VehicleSpec = VehicleSpec("av", 7.0, 20.0, 4.0, 2.0)
    emv: VehicleSpec = VehicleSpec("emv", 7.0, 30.0, 6.0, 2.5)
    n_agents: int = 10
    horizon: int = 400            # steps per episode
    k_neighbors: int = 6
    lane_change_steps: int = 10
    spawn_gap: float = 5.0        # minimum initial bumper gap (m)
    spawn_jitter: float = 12.0    # extra random bumper gap inside the platoon (m)
    emv_run_up: float = 120.0     # EMV head start ahead of the platoon (m)
    post_collision_gap: float = 6.0
    weights: RewardWeights = RewardWeights()
    risk: RiskParams = RiskParams()
    competitive: bool = False     # drop the shared EMV reward terms

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("need at least one agent")
        if self.emv.v_max <= self.av.v_max:
            raise ValueError("the EMV must have the higher speed envelope")
        if self.horizon < 1 or self.lane_change_steps < 1 or self.k_neighbors < 1:
            raise ValueError("horizon, lane_change_steps and k_neighbors must be >= 1")


@dataclass
class AgentState:
    """Read-only snapshot of one vehicle, as handed to baselines/metrics."""

    id: int
    is_emv: bool
    s: float
    v: float
    lane: int
    lane_change: tuple | None  # (target lane, steps remaining) or None
    collided_this_step: bool
    lat_pos: float    # lateral centre position (m, lane 0 centre = 0)
    lat_speed: float  # d(lat_pos)/dt, m/s
    length: float
    width: float
    v_min: float
    v_max: float


@dataclass
class StepOutcome:
    reward: np.ndarray        # (n,)
    obs: np.ndarray           # (n, obs_dim)
    global_features: np.ndarray  # (n, global_dim)
    risk: np.ndarray          # (n,) worst pairwise risk within perception
    collision_events: int     # colliding pairs this step
    done: bool


class EmvRingEnv:
    """Ring-road environment; agent 0 is the emergency vehicle."""

    def __init__(self, config: EnvConfig = EnvConfig(), record_trace: bool = False):
        self.cfg = config
        n = config.n_agents
        self.n = n
        tr = config.track
        self.is_emv = np.zeros(n, dtype=bool)
        self.is_emv[0] = True
        specs = [config.emv] + [config.av] * (n - 1)
        self.length = np.array([sp.length for sp in specs])
        self.width = np.array([sp.width for sp in specs])
        self.v_min = np.array([sp.v_min for sp in specs])
        self.v_max = np.array([sp.v_max for sp in specs])
        self.radius = np.array([sp.perception_radius for sp in specs])
        # Road capacity used for the density feature and the spawn check.
        self.capacity = tr.lanes * tr.loop_length / (config.av.length + config.spawn_gap)
        self.record_trace = record_trace
        self.trace: list[dict] = []
        self._eye_lanes = np.eye(tr.lanes)
        self.reset(seed=0)

    # -- dimensions ------------------------------------------------------

    @property
    def obs_dim(self) -> int:
        return 3 + self.cfg.track.lanes + 5 * self.cfg.k_neighbors

    @property
    def global_dim(self) -> int:
        return self.obs_dim + 4

    # -- lifecycle -------------------------------------------------------

    def reset(self, seed: int = 0):
        """Spawn a bunched platoon of AVs with the EMV chasing from behind."""
        cfg = self.cfg
        tr = cfg.track
        n = self.n
        rng = np.random.default_rng(seed)

        # AVs round-robin over lanes in shuffled order; the EMV draws its
        # own lane and later starts behind that lane's tail.
        self.lane = np.zeros(n, dtype=np.int64)
        by_lane: list[list[int]] = [[] for _ in range(tr.lanes)]
        av_order = rng.permutation(np.arange(1, n))
        for k, agent in enumerate(av_order):
            ln = k % tr.lanes
            self.lane[agent] = ln
            by_lane[ln].append(int(agent))
        emv_lane = int(rng.integers(tr.lanes))
        self.lane[0] = emv_lane

        # Speeds come first: initial gaps adapt to the drawn closing speeds.
        self.v = self.v_min + rng.random(n) * (self.v_max - self.v_min)

        # The AVs bunch up behind a shared anchor with small randomized
        # bumper gaps, forming one block of traffic rather than a uniform
        # scatter around the ring.  Any pair closing fast gets its gap
        # widened to what a braking follower plus a fleeing leader can
        # still dissipate, so no spawn is lost before anyone can react.
        # Room for the EMV's head start stays reserved so the
        # wrap-around gap never collapses.
        self.s = np.zeros(n)
        anchor = rng.uniform(0.0, tr.loop_length)
        reserve = cfg.emv_run_up + self.length[0] + 2.0 * cfg.spawn_gap
        for ln, members in enumerate(by_lane):
            if not members:
                continue
            lengths = self.length[members]
            occupancy = float(np.sum(lengths)) + len(members) * cfg.spawn_gap
            if occupancy + reserve > tr.loop_length:
                raise ValueError(
                    f"cannot place {len(members)} vehicles in lane {ln}: "
                    f"{occupancy:.1f} m of bodies plus spawn gaps exceeds the "
                    f"{tr.loop_length - reserve:.1f} m available on the "
                    f"{tr.loop_length:.1f} m loop")
            budget = (tr.loop_length - occupancy - reserve) / len(members)
            jitter = min(cfg.spawn_jitter, budget)
            pos = anchor - rng.uniform(0.0, 8.0)  # per-lane head stagger (m)
            head = pos
            prev = -1
            for agent in members:
                if prev >= 0:
                    gap = cfg.spawn_gap + rng.uniform(0.0, jitter)
                    closing = self.v[agent] - self.v[prev]
                    if closing > 0.0:
                        gap = max(gap, closing * closing / 9.0 + 3.0)
                    pos -= (self.length[prev] + self.length[agent]) / 2.0 + gap
                self.s[agent] = pos % tr.loop_length
                prev = agent
            if head - pos + reserve > tr.loop_length:
                raise ValueError(
                    f"cannot place {len(members)} vehicles in lane {ln}: "
                    f"{head - pos:.1f} m of spaced platoon exceeds the "
                    f"{tr.loop_length - reserve:.1f} m available on the "
                    f"{tr.loop_length:.1f} m loop")
        # The EMV leads the platoon: it gets a free runway ahead before
        # lapping around to the traffic, which by then has dispersed.
        lead_gap = rng.uniform(cfg.emv_run_up / 2.0, cfg.emv_run_up)
        head_members = by_lane[emv_lane]
        if head_members:
            head = head_members[0]
            closing = self.v[head] - self.v[0]
            if closing > 0.0:
                lead_gap = max(lead_gap, closing * closing / 9.0 + 4.0)
            off = (self.length[head] + self.length[0]) / 2.0 + lead_gap
            self.s[0] = (self.s[head] + off) % tr.loop_length
        else:
            self.s[0] = (anchor + lead_gap) % tr.loop_length
        self.lc_target = np.full(n, -1, dtype=np.int64)
        self.lc_left = np.zeros(n, dtype=np.int64)
        self.collided = np.zeros(n, dtype=bool)
        self.began_lc = np.zeros(n, dtype=bool)
        self.step_count = 0
        self.done = False
        self.trace = []
        obs = self._observe_all()
        return obs, self._global_features(obs)

    def snapshot(self) -> dict:
        arrays = ("s", "v", "lane", "lc_target", "lc_left", "collided", "began_lc")
        out = {k: getattr(self, k).copy() for k in arrays}
        out["step_count"] = self.step_count
        out["done"] = self.done
        return out

    def restore(self, snap: dict):
        for k, v in snap.items():
            if isinstance(v, np.ndarray):
                setattr(self, k, v.copy())
            else:
                setattr(self, k, v)

    # -- geometry helpers ------------------------------------------------

    def _progress(self):
        # Fraction of the lane change completed, 0 for non-changing agents.
        changing = self.lc_target >= 0
        steps = self.cfg.lane_change_steps
        return np.where(changing, (steps - self.lc_left) / steps, 0.0)

    def lat_positions(self):
        """Lateral centre position of every vehicle (m)."""
        w = self.cfg.track.lane_width
        drift = self._progress() * (self.lc_target - self.lane)
        return (self.lane + np.where(self.lc_target >= 0, drift, 0.0)) * w

    def lat_speeds(self):
        """Lateral velocity, signed with lat_pos (m/s)."""
        w = self.cfg.track.lane_width
        duration = self.cfg.lane_change_steps * self.cfg.track.dt
        direction = np.sign(self.lc_target - self.lane)
        return np.where(self.lc_target >= 0, direction * w / duration, 0.0)

    def state(self, i: int) -> AgentState:
        lc = None
        if self.lc_target[i] >= 0:
            lc = (int(self.lc_target[i]), int(self.lc_left[i]))
        return AgentState(
            id=i, is_emv=bool(self.is_emv[i]), s=float(self.s[i]),
            v=float(self.v[i]), lane=int(self.lane[i]), lane_change=lc,
            collided_this_step=bool(self.collided[i]),
            lat_pos=float(self.lat_positions()[i]),
            lat_speed=float(self.lat_speeds()[i]),
            length=float(self.length[i]), width=float(self.width[i]),
            v_min=float(self.v_min[i]), v_max=float(self.v_max[i]))

    def lane_members(self, ln: int):
        """Agents whose source lane is ln, sorted by arc position."""
        idx = np.flatnonzero(self.lane == ln)
        return idx[np.argsort(self.s[idx], kind="stable")]

    def leader_in_lane(self, i: int, ln: int):
        """Nearest vehicle ahead of agent i in lane ln: (index, bumper gap).

        Returns (-1, loop_length - own length) when the lane is empty apart
        from i itself; a lone vehicle on a ring is its own leader.
        """
        loop = self.cfg.track.loop_length
        others = np.flatnonzero((self.lane == ln) & (np.arange(self.n) != i))
        if others.size == 0:
            return -1, loop - self.length[i]
        fwd = (self.s[others] - self.s[i]) % loop
        j = others[np.argmin(fwd)]
        gap = fwd[np.argmin(fwd)] - (self.length[i] + self.length[j]) / 2.0
        return int(j), float(gap)

    def follower_in_lane(self, i: int, ln: int):
        """Nearest vehicle behind agent i in lane ln: (index, bumper gap)."""
        loop = self.cfg.track.loop_length
        others = np.flatnonzero((self.lane == ln) & (np.arange(self.n) != i))
        if others.size == 0:
            return -1, loop - self.length[i]
        back = (self.s[i] - self.s[others]) % loop
        j = others[np.argmin(back)]
        gap = back[np.argmin(back)] - (self.length[i] + self.length[j]) / 2.0
        return int(j), float(gap)

    def leading_gaps(self):
        """Same-lane leading bumper gap per agent (safety-distance metric)."""
        return np.array([self.leader_in_lane(i, int(self.lane[i]))[1]
                         for i in range(self.n)])

    # -- step ------------------------------------------------------------

    def step(self, actions) -> StepOutcome:
        if self.done:
            raise RuntimeError("episode is done; call reset")
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.n,):
            raise ValueError(f"expected {self.n} actions, got shape {actions.shape}")
        cfg = self.cfg
        tr = cfg.track

        self.began_lc[:] = False
        accel = np.zeros(self.n)
        for i in range(self.n):
            a = int(actions[i])
            if a in (Action.CHANGE_LEFT, Action.CHANGE_RIGHT):
                if self.lc_target[i] >= 0:
                    continue  # manoeuvre in progress: command does nothing
                target = self.lane[i] + (1 if a == Action.CHANGE_LEFT else -1)
                if 0 <= target < tr.lanes:
                    self.lc_target[i] = target
                    self.lc_left[i] = cfg.lane_change_steps
                    self.began_lc[i] = True
            else:
                accel[i] = ACTION_ACCEL[a]

        self.v = np.clip(self.v + accel * tr.dt, self.v_min, self.v_max)
        self.s = (self.s + self.v * tr.dt) % tr.loop_length

        # Advance lane changes; completion snaps the source lane to target.
        changing = self.lc_target >= 0
        self.lc_left[changing] -= 1
        finished = changing & (self.lc_left == 0)
        self.lane[finished] = self.lc_target[finished]
        self.lc_target[finished] = -1

        events = self._detect_and_resolve_collisions()
        risk = self._agent_risks()
        reward = self._compute_rewards(risk)
        self.step_count += 1
        self.done = self.step_count >= cfg.horizon
        obs = self._observe_all()
        glob = self._global_features(obs)

        if self.record_trace:
            lanes = self.lane
            for i in range(self.n):
                self.trace.append({
                    "step": self.step_count, "agent": i, "s": float(self.s[i]),
                    "lane": int(lanes[i]), "v": float(self.v[i]),
                    "action": int(actions[i]), "reward": float(reward[i]),
                    "risk": float(risk[i])})

        return StepOutcome(reward=reward, obs=obs, global_features=glob,
                           risk=risk, collision_events=events, done=self.done)

    # -- collisions ------------------------------------------------------

    def _lat_intervals(self):
        # Occupied lateral interval; a lane-changing vehicle spans both the
        # source and the target lane bodies.
        w = self.cfg.track.lane_width
        y_now = self.lat_positions()
        y_src = self.lane * w
        y_tgt = np.where(self.lc_target >= 0, self.lc_target * w, y_src)
        lo = np.minimum(np.minimum(y_src, y_tgt), y_now) - self.width / 2.0
        hi = np.maximum(np.maximum(y_src, y_tgt), y_now) + self.width / 2.0
        return lo, hi

    def _detect_and_resolve_collisions(self) -> int:
        loop = self.cfg.track.loop_length
        self.collided[:] = False
        lo, hi = self._lat_intervals()
        ds = (self.s[None, :] - self.s[:, None]) % loop
        ring = np.minimum(ds, loop - ds)
        lon_overlap = ring < (self.length[:, None] + self.length[None, :]) / 2.0
        lat_overlap = (lo[:, None] < hi[None, :]) & (lo[None, :] < hi[:, None])
        hit = lon_overlap & lat_overlap
        iu = np.triu_indices(self.n, k=1)
        pairs = [(int(i), int(j)) for i, j in zip(*iu) if hit[i, j]]
        for i, j in pairs:
            self.collided[i] = True
            self.collided[j] = True
            # The rear of the pair (shorter forward arc) backs off to a
            # fixed bumper gap and both drop to their floor speed.
            fwd_ij = (self.s[j] - self.s[i]) % loop
            rear, front = (i, j) if fwd_ij <= loop - fwd_ij else (j, i)
            self.v[i] = self.v_min[i]
            self.v[j] = self.v_min[j]
            off = (self.length[rear] + self.length[front]) / 2.0 \
                + self.cfg.post_collision_gap
            self.s[rear] = (self.s[front] - off) % loop
        return len(pairs)

    # -- risk ------------------------------------------------------------

    def _pair_risk_matrix(self):
        # Unified risk for every ordered pair, zero outside perception.
        loop = self.cfg.track.loop_length
        n = self.n
        ds = (self.s[None, :] - self.s[:, None]) % loop  # forward arc i -> j
        ring = np.minimum(ds, loop - ds)
        j_ahead = ds <= loop - ds
        v_r = np.where(j_ahead, self.v[:, None], self.v[None, :])
        v_f = np.where(j_ahead, self.v[None, :], self.v[:, None])
        d_lon = ring - (self.length[:, None] + self.length[None, :]) / 2.0

        y = self.lat_positions()
        vy = self.lat_speeds()
        i_left = y[:, None] <= y[None, :]
        v_left = np.where(i_left, vy[:, None], vy[None, :])
        v_right = -np.where(i_left, vy[None, :], vy[:, None])
        d_lat = np.abs(y[:, None] - y[None, :]) \
            - (self.width[:, None] + self.width[None, :]) / 2.0

        k = PairKinematics(v_r=v_r, v_f=v_f, v_left=v_left, v_right=v_right,
                           d_lon=d_lon, d_lat=d_lat)
        p = self.cfg.risk
        r = unified_risk(lon_risk(k, p), lat_risk(k, p), p)
        seen = ring <= self.radius[:, None]
        np.fill_diagonal(seen, False)
        return np.where(seen, r, 0.0)

    def _agent_risks(self):
        return self._pair_risk_matrix().max(axis=1)

    # -- reward ----------------------------------------------------------

    def _compute_rewards(self, risk):
        w = self.cfg.weights
        r = (w.w_risk * (1.0 - risk)
             + w.w_eff * self.v / self.v_max
             + w.p_col * self.collided
             + w.p_lcm * self.began_lc)
        if not self.cfg.competitive:
            r = r + (w.w_ev_speed * self.v[0] / self.v_max[0]
                     + w.p_lcm_ev * float(self.began_lc[0]))
        return r

    # -- observations ----------------------------------------------------

    def _observe_all(self):
        cfg = self.cfg
        tr = cfg.track
        n, k_slots = self.n, cfg.k_neighbors
        loop = tr.loop_length

        dsgn = ((self.s[None, :] - self.s[:, None] + loop / 2.0) % loop) - loop / 2.0
        ring = np.abs(dsgn)
        masked = np.where(ring <= self.radius[:, None], ring, np.inf)
        np.fill_diagonal(masked, np.inf)
        if n <= k_slots:
            # Fewer candidates than slots: pad so each agent still gets
            # k_slots columns; padded entries read as absent.
            pad = np.full((n, k_slots + 1 - n), np.inf)
            masked = np.concatenate([masked, pad], axis=1)
        order = np.argsort(masked, axis=1, kind="stable")[:, :k_slots]
        present = np.take_along_axis(masked, order, axis=1) < np.inf
        safe = np.minimum(order, n - 1)  # in-range lookup for absent slots

        lane_pos = self.lat_positions() / tr.lane_width  # fractional lane index
        d_s = np.take_along_axis(dsgn, safe, axis=1) / self.radius[:, None]
        d_v = (self.v[safe] - self.v[:, None]) / 30.0
        d_lane = (lane_pos[safe] - lane_pos[:, None]) / (tr.lanes - 1)
        emv_flag = self.is_emv[safe].astype(float)

        slots = np.stack([present.astype(float),
                          np.where(present, d_s, 0.0),
                          np.where(present, d_v, 0.0),
                          np.where(present, d_lane, 0.0),
                          np.where(present, emv_flag, 0.0)], axis=2)

        angle = 2.0 * np.pi * self.s / loop
        own = np.concatenate([
            (self.v / self.v_max)[:, None],
            self._eye_lanes[self.lane],
            np.sin(angle)[:, None],
            np.cos(angle)[:, None]], axis=1)
        return np.concatenate([own, slots.reshape(n, 5 * k_slots)], axis=1)

    def _global_features(self, obs=None):
        loop = self.cfg.track.loop_length
        if obs is None:
            obs = self._observe_all()
        av_mean = float(self.v[~self.is_emv].mean()) if self.n > 1 else 0.0
        to_emv = ((self.s[0] - self.s + loop / 2.0) % loop - loop / 2.0) / loop
        extra = np.stack([
            np.full(self.n, self.v[0] / self.v_max[0]),
            to_emv,
            np.full(self.n, av_mean / self.cfg.av.v_max),
            np.full(self.n, self.n / self.capacity)], axis=1)
        return np.concatenate([obs, extra], axis=1)

    # -- trace export ----------------------------------------------------

    def write_trace(self, path):
        """Newline-delimited JSON: one record per (step, agent)."""
        with open(path, "w") as fh:
            for rec in self.trace:
                fh.write(json.dumps(rec) + "\n")
