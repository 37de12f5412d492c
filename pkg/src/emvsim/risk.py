"""Pairwise collision-risk model for ring-road traffic.

Safe-distance bounds and a unified risk index for an ordered pair of
vehicles.  The longitudinal bound is the classic worst-case argument: the
rear vehicle accelerates hard for one response time, then brakes no harder
than a committed minimum, while the front vehicle brakes as hard as it
can.  A second, tighter bound substitutes the rear vehicle's absolute
braking capability.  Risk ramps linearly from 0 (outside the loose bound)
to 1 (inside the tight bound).  The lateral story is analogous with the
two vehicles drifting toward each other during the response window.

All functions broadcast over numpy arrays, so the same code serves both
single-pair queries and the simulator's vectorised all-pairs sweep.
Everything is double precision.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RiskParams:
    """Braking/response constants plus the two risk-propensity exponents."""

    rho: float = 0.1          # response time (s)
    a_max: float = 2.5        # max longitudinal acceleration (m/s^2)
    b_max: float = 2.5        # hardest braking assumed of the front vehicle (m/s^2)
    b_min: float = 1.0        # weakest self-braking the rear vehicle commits to (m/s^2)
    b_cap: float = 3.0        # absolute maximum longitudinal braking (m/s^2)
    a_lat_max: float = 1.0    # max lateral acceleration (m/s^2)
    b_lat_min: float = 2.5    # weakest lateral braking (m/s^2)
    b_lat_cap: float = 4.0    # absolute maximum lateral braking (m/s^2)
    beta: float = 1.0         # longitudinal risk propensity (> 0)
    gamma: float = 1.0        # lateral risk propensity (> 0)

    def __post_init__(self):
        rates = (self.rho, self.a_max, self.b_max, self.b_min, self.b_cap,
                 self.a_lat_max, self.b_lat_min, self.b_lat_cap)
        if any(r <= 0 for r in rates):
            raise ValueError("all rates must be strictly positive")
        if self.b_cap < self.b_min or self.b_lat_cap < self.b_lat_min:
            raise ValueError("braking capability must be >= committed minimum braking")
        if self.beta <= 0 or self.gamma <= 0:
            raise ValueError("risk propensities must be > 0")


@dataclass(frozen=True)
class PairKinematics:
    """Relative state of one vehicle pair.

    Longitudinal speeds are ground speeds of the rear/front vehicle.  The
    lateral speeds are signed toward the other vehicle positive: v_left is
    the left vehicle's drift toward the right one and vice versa.  Gaps are
    edge-to-edge (bumper/side), not centre-to-centre, and may be negative
    when the bodies overlap.
    """

    v_r: float            # rear vehicle longitudinal speed (m/s)
    v_f: float            # front vehicle longitudinal speed (m/s)
    v_left: float = 0.0   # left vehicle lateral speed, toward the right vehicle (m/s)
    v_right: float = 0.0  # right vehicle lateral speed, toward the left vehicle (m/s)
    d_lon: float = 0.0    # longitudinal gap between nearest bumpers (m)
    d_lat: float = 0.0    # lateral gap between nearest sides (m)


@dataclass(frozen=True)
class RiskAssessment:
    """Distances, bounds and indices for one assessed pair."""

    d_lon: float
    d_lat: float
    d_lon_min: float
    d_lon_min_brake: float
    d_lat_min: float
    d_lat_min_brake: float
    r_lon: float
    r_lat: float
    r: float


def lon_safe_distance(k: PairKinematics, p: RiskParams, use_max_brake: bool = False):
    """Minimum initial gap that survives the worst-case longitudinal profile.

    Rear vehicle: full acceleration during the response time, then steady
    braking at b_min (or at the b_cap capability when use_max_brake is
    set).  Front vehicle: maximum braking b_max throughout.  Negative
    results clamp to zero.
    """
    brake = p.b_cap if use_max_brake else p.b_min
    v_peak = k.v_r + p.rho * p.a_max  # rear speed at the end of the response window
    need = (k.v_r * p.rho
            + 0.5 * p.a_max * p.rho ** 2
            + v_peak ** 2 / (2.0 * brake)
            - k.v_f ** 2 / (2.0 * p.b_max))
    return np.maximum(need, 0.0)


def _lat_travel(v, rho, a_lat, brake):
    # Toward-displacement of one vehicle: drift at +a_lat for the response
    # window, then brake the (possibly away-pointing) lateral speed to rest.
    v_peak = v + rho * a_lat
    return 0.5 * (v + v_peak) * rho + v_peak ** 2 / (2.0 * brake)


def lat_safe_distance(k: PairKinematics, p: RiskParams, use_max_brake: bool = False):
    """Minimum lateral gap for the worst-case mutual-drift profile.

    With both lateral speeds signed toward the other vehicle, the classic
    left/right asymmetric formula reduces to a symmetric sum of per-vehicle
    travel terms.  Negative results clamp to zero.
    """
    brake = p.b_lat_cap if use_max_brake else p.b_lat_min
    need = (_lat_travel(k.v_left, p.rho, p.a_lat_max, brake)
            + _lat_travel(k.v_right, p.rho, p.a_lat_max, brake))
    return np.maximum(need, 0.0)


def _ramp_index(d, d_min, d_brake):
    # 0 outside the loose bound, 1 inside the tight bound, linear between.
    # The zero branch additionally requires d_min > 0; a degenerate ramp
    # (equal bounds, or a brake bound clamped to zero) keeps that step rule.
    safe = (d >= d_min) & (d_min > 0.0)
    span = d_min - d_brake
    ramp_ok = (span > 0.0) & (d_brake > 0.0) & (d >= d_brake) & (d < d_min)
    frac = 1.0 - (d - d_brake) / np.where(span > 0.0, span, 1.0)
    return np.where(safe, 0.0, np.where(ramp_ok, frac, 1.0))


def lon_risk(k: PairKinematics, p: RiskParams):
    """Longitudinal risk index in [0, 1]."""
    d_min = lon_safe_distance(k, p, use_max_brake=False)
    d_brake = lon_safe_distance(k, p, use_max_brake=True)
    return _ramp_index(k.d_lon, d_min, d_brake)


def lat_risk(k: PairKinematics, p: RiskParams):
    """Lateral risk index in [0, 1]."""
    d_min = lat_safe_distance(k, p, use_max_brake=False)
    d_brake = lat_safe_distance(k, p, use_max_brake=True)
    return _ramp_index(k.d_lat, d_min, d_brake)


def unified_risk(r_lon, r_lat, p: RiskParams):
    """Combine the two indices: r = r_lon**beta * r_lat**gamma.

    0**beta is 0 for beta > 0, so a pair that is safe in either direction
    has zero unified risk.
    """
    return np.asarray(r_lon, dtype=float) ** p.beta * np.asarray(r_lat, dtype=float) ** p.gamma


def assess(k: PairKinematics, p: RiskParams) -> RiskAssessment:
    """Evaluate all bounds and indices for one pair (or an array of pairs)."""
    rl = lon_risk(k, p)
    rt = lat_risk(k, p)
    return RiskAssessment(
        d_lon=k.d_lon,
        d_lat=k.d_lat,
        d_lon_min=lon_safe_distance(k, p, use_max_brake=False),
        d_lon_min_brake=lon_safe_distance(k, p, use_max_brake=True),
        d_lat_min=lat_safe_distance(k, p, use_max_brake=False),
        d_lat_min_brake=lat_safe_distance(k, p, use_max_brake=True),
        r_lon=rl,
        r_lat=rt,
        r=unified_risk(rl, rt, p),
    )


def pair_kinematics(a, b, track, p: RiskParams) -> PairKinematics:
    """Map two vehicle states on a ring onto pair kinematics.

    ``a`` and ``b`` need positions ``s`` (arc, m), speeds ``v``, lateral
    centre positions ``lat_pos`` (m), lateral speeds ``lat_speed`` (signed
    with lat_pos increasing), and body ``length``/``width``.  The front
    vehicle of the pair is whichever lies ahead along the shorter forward
    arc; gaps are edge-to-edge and negative when the bodies overlap.
    """
    loop = track.loop_length
    fwd = (b.s - a.s) % loop
    if fwd <= loop - fwd:
        rear, front, arc = a, b, fwd
    else:
        rear, front, arc = b, a, loop - fwd
    d_lon = arc - 0.5 * (a.length + b.length)
    if a.lat_pos <= b.lat_pos:
        left, right = a, b
    else:
        left, right = b, a
    d_lat = abs(a.lat_pos - b.lat_pos) - 0.5 * (a.width + b.width)
    return PairKinematics(
        v_r=rear.v,
        v_f=front.v,
        v_left=left.lat_speed,
        v_right=-right.lat_speed,
        d_lon=d_lon,
        d_lat=d_lat,
    )


def assess_pair(a, b, track, p: RiskParams) -> RiskAssessment:
    """Assess the unified risk between two vehicles on the same ring."""
    return assess(pair_kinematics(a, b, track, p), p)
