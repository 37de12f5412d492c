"""Rule-based controllers: Gipps car following and a short-horizon MPC.

Both controllers drive every vehicle in the environment and emit the same
discrete action set the learned policies use.  Longitudinal control picks
the action whose one-step speed lands closest to a continuous target
(Gipps) or wins an exhaustive search over action sequences (MPC).  Lane
selection is shared: a change must leave worst-case-safe gaps to the new
leader and follower, must promise a configured speed advantage, and an
automated vehicle with the emergency vehicle closing in behind yields to
the right regardless of advantage, gap safety permitting.
"""

from dataclasses import dataclass
from itertools import product

import numpy as np

from .env import Action, LON_ACTIONS, ACTION_ACCEL
from .risk import PairKinematics, RiskParams, lon_safe_distance


@dataclass(frozen=True)
class GippsParams:
    a_n: float = 2.5        # comfortable acceleration (m/s^2)
    T: float = 0.7          # planning headway (s)
    b_n: float = -3.0       # own braking, negative by convention
    b_hat: float = -3.0     # assumed leader braking, negative
    S: float = 2.0          # stopped spacing kept to the leader (m)
    v_d: float | None = None  # desired speed (m/s); None = own envelope max
    lane_gain: float = 1.0  # required speed advantage to change lanes (m/s)

    def __post_init__(self):
        if self.b_n >= 0 or self.b_hat >= 0:
            raise ValueError("braking rates are negative by convention")
        if self.a_n <= 0 or self.T <= 0:
            raise ValueError("a_n and T must be positive")
        if self.S < 0:
            raise ValueError("stopped spacing cannot be negative")
        if self.v_d is not None and self.v_d <= 0:
            raise ValueError("desired speed must be positive")


def gipps_free_speed(v: float, v_d: float, p: GippsParams) -> float:
    """Acceleration branch: approach the desired speed v_d."""
    ratio = v / v_d
    return v + 2.5 * p.a_n * p.T * (1.0 - ratio) * np.sqrt(0.025 + ratio)


def gipps_follow_speed(v: float, gap: float, v_lead: float,
                       p: GippsParams) -> float | None:
    """Braking branch: fastest speed that still stops behind the leader.

    Returns None when the discriminant is negative, i.e. no speed both
    reachable and safe exists (caller escalates to an emergency stop).
    The stopped spacing S is held back from the gap, so a follower plans
    to halt S metres short of the leader's tail rather than touching it.
    """
    b, bh = p.b_n, p.b_hat
    room = gap - p.S
    disc = b * b * p.T * p.T - b * (2.0 * room - v * p.T - v_lead * v_lead / bh)
    if disc < 0.0:
        return None
    return b * p.T + np.sqrt(disc)


def gipps_target_speed(v: float, v_min: float, v_max: float,
                       gap: float | None, v_lead: float,
                       p: GippsParams) -> float:
    v_d = v_max if p.v_d is None else min(p.v_d, v_max)
    free = gipps_free_speed(v, v_d, p)
    if gap is None:
        return float(np.clip(free, v_min, v_max))
    follow = gipps_follow_speed(v, gap, v_lead, p)
    if follow is None:
        return v_min
    return float(np.clip(min(free, follow), v_min, v_max))


def closest_speed_action(v: float, v_min: float, v_max: float,
                         target: float, dt: float) -> Action:
    """Longitudinal action whose one-step speed best matches the target.

    Ties resolve to the lowest action index.
    """
    best, pick = None, Action.KEEP
    for a in LON_ACTIONS:
        reached = float(np.clip(v + ACTION_ACCEL[a] * dt, v_min, v_max))
        err = abs(reached - target)
        if best is None or err < best:
            best, pick = err, a
    return pick


def _gap_safe(env, i: int, target_lane: int, rp: RiskParams) -> bool:
    # Worst-case braking gaps to the prospective leader and follower.
    lead, lead_gap = env.leader_in_lane(i, target_lane)
    if lead >= 0:
        need = lon_safe_distance(
            PairKinematics(v_r=env.v[i], v_f=env.v[lead]), rp)
        if lead_gap < need:
            return False
    rear, rear_gap = env.follower_in_lane(i, target_lane)
    if rear >= 0:
        need = lon_safe_distance(
            PairKinematics(v_r=env.v[rear], v_f=env.v[i]), rp)
        if rear_gap < need:
            return False
    return True


def _predicted_speed(env, i: int, lane: int, gp: GippsParams) -> float:
    lead, gap = env.leader_in_lane(i, lane)
    return gipps_target_speed(env.v[i], env.v_min[i], env.v_max[i],
                              gap if lead >= 0 else None,
                              env.v[lead] if lead >= 0 else 0.0, gp)


def gipps_lane_decision(env, i: int, gp: GippsParams,
                        rp: RiskParams) -> Action | None:
    """Lane-change command for agent i, or None to stay put."""
    lane = int(env.lane[i])
    lanes = env.cfg.track.lanes

    if not env.is_emv[i]:
        rear, rear_gap = env.follower_in_lane(i, lane)
        if rear >= 0 and env.is_emv[rear]:
            centre_dist = rear_gap + (env.length[i] + env.length[rear]) / 2.0
            if centre_dist <= env.radius[i] and lane - 1 >= 0 \
                    and _gap_safe(env, i, lane - 1, rp):
                return Action.CHANGE_RIGHT

    here = _predicted_speed(env, i, lane, gp)
    best_gain, pick = 0.0, None
    for cand, act in ((lane + 1, Action.CHANGE_LEFT),
                      (lane - 1, Action.CHANGE_RIGHT)):
        if not 0 <= cand < lanes:
            continue
        if not _gap_safe(env, i, cand, rp):
            continue
        gain = _predicted_speed(env, i, cand, gp) - here
        if gain >= gp.lane_gain and gain > best_gain:
            best_gain, pick = gain, act
    return pick


class GippsController:
    """Drives every agent with Gipps speeds plus the shared lane rules."""

    def __init__(self, params: GippsParams = GippsParams(),
                 risk: RiskParams = RiskParams()):
        self.p = params
        self.risk = risk

    def act(self, env) -> np.ndarray:
        dt = env.cfg.track.dt
        actions = np.full(env.n, int(Action.KEEP), dtype=np.int64)
        for i in range(env.n):
            if env.lc_target[i] < 0:
                lc = gipps_lane_decision(env, i, self.p, self.risk)
                if lc is not None:
                    actions[i] = int(lc)
                    continue
            lead, gap = env.leader_in_lane(i, int(env.lane[i]))
            target = gipps_target_speed(
                env.v[i], env.v_min[i], env.v_max[i],
                gap if lead >= 0 else None,
                env.v[lead] if lead >= 0 else 0.0, self.p)
            actions[i] = int(closest_speed_action(
                env.v[i], env.v_min[i], env.v_max[i], target, dt))
        return actions


@dataclass(frozen=True)
class MPCParams:
    t_hw: float = 1.2    # desired time headway (s)
    s_max: float = 15.0  # spacing-error normalizer (m)
    dv_max: float = 8.0  # relative-speed normalizer (m/s)
    u_max: float = 3.0   # acceleration bound (m/s^2)
    horizon: int = 4

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if min(self.t_hw, self.s_max, self.dv_max, self.u_max) <= 0:
            raise ValueError("t_hw, s_max, dv_max and u_max must be positive")


def mpc_matrices(dt: float):
    a = np.array([[1.0, dt, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    b = np.array([-0.5 * dt * dt, -dt, dt])
    return a, b


def mpc_rollout(x0, useq, dt: float) -> np.ndarray:
    """Reference rollout of x = (gap, closing speed, own speed).

    Returns the state after each input, shape (len(useq), 3).
    """
    a, b = mpc_matrices(dt)
    x = np.asarray(x0, dtype=np.float64)
    out = np.empty((len(useq), 3))
    for t, u in enumerate(useq):
        x = a @ x + b * u
        out[t] = x
    return out


class MPCController:
    """Headway-tracking MPC solved by exhaustive action-sequence search.

    The five longitudinal actions over an N-step horizon give 5^N input
    sequences; each is rolled through the linear gap model, infeasible
    ones (gap or speed driven non-positive) are discarded, and the first
    sequence attaining the minimum quadratic cost wins.  Lane changes
    reuse the Gipps lane rules.
    """

    def __init__(self, params: MPCParams = MPCParams(),
                 gipps: GippsParams = GippsParams(),
                 risk: RiskParams = RiskParams()):
        self.p = params
        self.gipps = gipps
        self.risk = risk
        n = params.horizon
        seqs = np.array(list(product(range(len(LON_ACTIONS)), repeat=n)))
        accel = ACTION_ACCEL[[int(LON_ACTIONS[k]) for k in range(5)]]
        self.u = accel[seqs]                      # (5^N, N) accelerations
        self.first = np.array([int(LON_ACTIONS[k]) for k in seqs[:, 0]])
        self.csum = np.cumsum(self.u, axis=1)     # inclusive prefix sums
        self.gsum = np.cumsum(self.csum - self.u, axis=1)

    def trajectories(self, x0, dt: float):
        """States after each input for every candidate sequence.

        Closed form of the linear recursion, identical to mpc_rollout.
        """
        s0, dv0, v0 = (float(x0[0]), float(x0[1]), float(x0[2]))
        n = self.p.horizon
        t = np.arange(1, n + 1)
        s = s0 + t * dt * dv0 - dt * dt * self.gsum - 0.5 * dt * dt * self.csum
        dv = dv0 - dt * self.csum
        v = v0 + dt * self.csum
        return s, dv, v

    def plan(self, x0, dt: float) -> Action:
        p = self.p
        s, dv, v = self.trajectories(x0, dt)
        feasible = np.all((s > 0.0) & (v > 0.0), axis=1)
        err = (s - v * p.t_hw) / p.s_max
        cost = np.sum(err * err + (dv / p.dv_max) ** 2, axis=1)
        cost = np.where(feasible, cost, np.inf)
        if not np.isfinite(cost).any():
            return Action.HEAVY_BRAKE
        return Action(self.first[int(np.argmin(cost))])

    def act(self, env) -> np.ndarray:
        dt = env.cfg.track.dt
        actions = np.full(env.n, int(Action.KEEP), dtype=np.int64)
        for i in range(env.n):
            if env.lc_target[i] < 0:
                lc = gipps_lane_decision(env, i, self.gipps, self.risk)
                if lc is not None:
                    actions[i] = int(lc)
                    continue
            lead, gap = env.leader_in_lane(i, int(env.lane[i]))
            if lead < 0:
                # Open road: fall back to the Gipps free branch.
                target = gipps_target_speed(env.v[i], env.v_min[i],
                                            env.v_max[i], None, 0.0, self.gipps)
                actions[i] = int(closest_speed_action(
                    env.v[i], env.v_min[i], env.v_max[i], target, dt))
            else:
                x0 = (gap, env.v[lead] - env.v[i], env.v[i])
                actions[i] = int(self.plan(x0, dt))
        return actions
