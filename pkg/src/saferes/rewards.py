"""Task and safety reward streams for controlled vehicles.

The task stream sums collision, headway, speed-tracking, and comfort terms.
The safety stream adds a scenario-mode shaping term on top of the task
stream: an evasive-steer bonus or an emergency-brake bonus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

from saferes import world as W

MODE_AVOID = "avoid"
MODE_BRAKE = "brake"

# brake shaping only for the intersection scenario; the others reward evasion
SCENARIO_MODES = {"LVEB": MODE_AVOID, "OPI": MODE_AVOID, "RPC": MODE_AVOID, "IJ": MODE_BRAKE}


@dataclass
class RewardConfig:
    collision_cost: float = 10.0
    d_safe: float = 10.0  # [m] desired headway
    v_target: float = 14.0  # [m/s]
    a_lat_max: float = 2.0  # [m/s^2] comfort bound
    a_lon_max: float = 4.0  # [m/s^2] comfort bound
    w_com: float = 0.25
    lambda_decay: float = 10.0  # [m] proximity decay of the mode term
    delta0: float = 10.0  # [deg] steer saturation of the evade bonus
    a0: float = 4.0  # [m/s^2] brake saturation of the brake bonus
    eps_ttc: float = 0.1  # [s]
    mode: str = MODE_AVOID

    def __post_init__(self) -> None:
        if self.mode not in (MODE_AVOID, MODE_BRAKE):
            raise ValueError(f"unknown safety mode {self.mode!r}")
        if min(self.collision_cost, self.d_safe, self.lambda_decay, self.delta0, self.a0) <= 0:
            raise ValueError("reward scales must be positive")
        if self.v_target <= 0:
            raise ValueError("v_target must be positive")


def lateral_accel(v: float, steer_deg: float, wheelbase: float = W.WHEELBASE) -> float:
    """Kinematic estimate v^2 * tan(delta) / L."""
    return v * v * math.tan(math.radians(steer_deg)) / wheelbase


def lead_gap(w: W.WorldState, ego_idx: int) -> Tuple[float, float, Optional[int]]:
    """Nearest forward in-lane participant: (bumper gap, its speed along x, index).

    No forward traffic inside sensing range gives (R_PERCEP, 0, None).
    """
    ego = w.participants[ego_idx]
    best = (W.R_PERCEP, 0.0, None)
    for j, other in enumerate(w.participants):
        if j == ego_idx:
            continue
        if other.lane != ego.lane:
            continue
        dx = other.x - ego.x
        if dx <= 0.0:
            continue
        if other.kind == W.Kind.PED:
            gap = dx - W.VEH_LENGTH / 2.0 - W.PED_RADIUS
        else:
            gap = dx - W.VEH_LENGTH
        gap = max(gap, 0.0)
        if gap < best[0]:
            v_along = other.v * math.cos(math.radians(other.theta))
            best = (gap, v_along, j)
    return best


def nearest_conflict(w: W.WorldState, ego_idx: int) -> Tuple[float, float]:
    """Distance and along-road speed of the nearest forward hazard.

    Considers in-lane traffic and any pedestrian ahead that is on the road
    or moving onto it. Used by the safety shaping term only.
    """
    d, v_f, idx = lead_gap(w, ego_idx)
    ego = w.participants[ego_idx]
    for j in w.pedestrians():
        if j == idx:
            continue
        ped = w.participants[j]
        dx = ped.x - ego.x
        if dx <= 0.0 or dx > W.R_PERCEP:
            continue
        on_road = W.ROAD_Y_MIN <= ped.y <= W.ROAD_Y_MAX
        vy = ped.v * math.sin(math.radians(ped.theta))
        approaching = vy > 0.0 and ped.y < W.ROAD_Y_MAX
        if not (on_road or approaching):
            continue
        gap = max(dx - W.VEH_LENGTH / 2.0 - W.PED_RADIUS, 0.0)
        if gap < d:
            d = gap
            v_f = ped.v * math.cos(math.radians(ped.theta))
    return d, v_f


def task_reward(
    w: W.WorldState,
    ego_idx: int,
    collided: bool,
    action: Tuple[float, float],
    cfg: RewardConfig,
) -> float:
    ego = w.participants[ego_idx]
    accel, steer = action
    r_col = -cfg.collision_cost if collided else 0.0
    d, _, _ = lead_gap(w, ego_idx)
    r_dis = -max(0.0, 1.0 - d / cfg.d_safe)
    r_vel = min(max(1.0 - abs(ego.v - cfg.v_target) / cfg.v_target, -1.0), 1.0)
    a_lat = lateral_accel(ego.v, steer)
    r_com = -(abs(a_lat) / cfg.a_lat_max + abs(accel) / cfg.a_lon_max) * cfg.w_com
    return r_col + r_dis + r_vel + r_com


def safety_bonus(
    w: W.WorldState,
    ego_idx: int,
    action: Tuple[float, float],
    cfg: RewardConfig,
) -> float:
    """Mode-dependent shaping: exp(-d/lambda) times an evade or brake factor."""
    ego = w.participants[ego_idx]
    accel, steer = action
    d, v_f = nearest_conflict(w, ego_idx)
    decay = math.exp(-d / cfg.lambda_decay)
    if cfg.mode == MODE_AVOID:
        return decay * (ego.v - v_f) * min(abs(steer) / cfg.delta0, 1.0)
    closing = ego.v - v_f
    ttc = d / closing if closing > 1e-9 else math.inf
    if math.isinf(ttc):
        return 0.0
    # deceleration only: paying for |accel| would reward flooring it at short TTC
    return decay * (1.0 / (ttc + cfg.eps_ttc)) * min(max(-accel, 0.0) / cfg.a0, 1.0)


def safety_reward(
    w: W.WorldState,
    ego_idx: int,
    collided: bool,
    action: Tuple[float, float],
    cfg: RewardConfig,
) -> float:
    return task_reward(w, ego_idx, collided, action, cfg) + safety_bonus(w, ego_idx, action, cfg)


def compute_rewards(
    w: W.WorldState,
    ego_idx: int,
    collided: bool,
    action: Tuple[float, float],
    cfg: RewardConfig,
) -> Tuple[float, float]:
    """(task, safety) reward pair for one controlled vehicle."""
    base = task_reward(w, ego_idx, collided, action, cfg)
    return base, base + safety_bonus(w, ego_idx, action, cfg)
