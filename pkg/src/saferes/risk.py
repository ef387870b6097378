"""Dynamic conflict-zone risk model.

Per controlled vehicle: normalized time-to-collision and post-encroachment
urgencies plus weighted event indicators are blended into a risk score in
[w0, 1]; the scene risk is the max over controlled vehicles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from saferes import world as W

DEFAULT_BETA = {
    W.EVENT_LEAD_BRAKE: 0.40,
    W.EVENT_PED_CROSS: 0.35,
    W.EVENT_CUT_IN: 0.25,
}


@dataclass
class RiskConfig:
    tau_v2v: float = 3.0  # [s] vehicle-vehicle TTC threshold
    tau_v2p: float = 2.0  # [s] vehicle-pedestrian PET threshold
    lambda1: float = 0.4
    lambda2: float = 0.3
    lambda3: float = 0.3
    beta: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_BETA))
    w0: float = 0.05  # risk floor
    tau_risk: float = 0.4  # weight-switch threshold; reachable during pedestrian
    # crossings (peak ped risk is lambda2 + lambda3*beta_ped ~ 0.41), so the
    # high-alpha branch engages in crossing emergencies, not just car-following
    alpha0: float = 0.8  # dominant-side blend weight
    eps_norm: float = 0.01  # urgency floor for finite but distant conflicts
    event_radius: float = 50.0  # [m] an event only counts near its source
    lat_conflict: float = 2.0  # [m] lateral gate for vehicle-vehicle TTC

    def __post_init__(self) -> None:
        if not (0.5 < self.alpha0 < 1.0):
            raise ValueError("alpha0 must lie strictly inside (0.5, 1)")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("risk weights must be nonnegative")
        if any(b < 0 for b in self.beta.values()) or sum(self.beta.values()) > 1.0 + 1e-12:
            raise ValueError("event weights must be nonnegative and sum to at most 1")
        if not (0.0 < self.w0 < 1.0):
            raise ValueError("w0 must lie in (0, 1)")
        if self.tau_v2v <= 0 or self.tau_v2p <= 0 or self.eps_norm <= 0:
            raise ValueError("thresholds must be positive")


def compute_ttc(a: W.ParticipantState, b: W.ParticipantState, veh_len: float = W.VEH_LENGTH) -> float:
    """Bumper-gap TTC between two vehicles along the road axis.

    Overlapping bumpers give 0; opening or constant gaps give +inf.
    Symmetric in its arguments.
    """
    gap = abs(a.x - b.x) - veh_len
    if gap <= 0.0:
        return 0.0
    rear, front = (a, b) if a.x <= b.x else (b, a)
    closing = rear.v - front.v
    if closing <= 0.0:
        return math.inf
    return gap / closing


def compute_pet(veh: W.ParticipantState, ped: W.ParticipantState) -> float:
    """Post-encroachment time at the projected conflict point.

    Conflict point: pedestrian's x, vehicle's lane center. If either party
    never reaches it at current velocity, the PET is +inf.
    """
    cx = ped.x
    cy = W.LANE_CENTERS[veh.lane]
    dx = cx - veh.x
    if dx < 0.0:
        eta_veh = math.inf
    else:
        speed_along = veh.v * math.cos(math.radians(veh.theta))
        eta_veh = dx / speed_along if speed_along > 1e-9 else math.inf
    dy = cy - ped.y
    if dy == 0.0:
        eta_ped = 0.0
    else:
        vy = ped.v * math.sin(math.radians(ped.theta))
        eta_ped = dy / vy if (vy != 0.0 and dy / vy > 0.0) else math.inf
    if math.isinf(eta_veh) or math.isinf(eta_ped):
        return math.inf
    return abs(eta_veh - eta_ped)


def normalize_urgency(value: float, tau: float, eps_norm: float) -> float:
    """clamp(tau / value, eps_norm, 1); value <= 0 maps to 1, +inf to eps_norm."""
    if value <= 0.0:
        return 1.0
    if math.isinf(value):
        return eps_norm
    return min(max(tau / value, eps_norm), 1.0)


@dataclass
class RiskReport:
    av_index: int
    ttc: float  # [s] min vehicle-vehicle TTC
    pet: float  # [s] min vehicle-pedestrian PET
    ttc_norm: float
    pet_norm: float
    events: Dict[str, bool]
    risk: float
    in_dcz: bool


def _min_ttc(w: W.WorldState, ego_idx: int, cfg: RiskConfig, forward_only: bool = False) -> float:
    ego = w.participants[ego_idx]
    best = math.inf
    for j in w.vehicles():
        if j == ego_idx:
            continue
        other = w.participants[j]
        if abs(other.y - ego.y) > cfg.lat_conflict:
            continue
        if forward_only and other.x < ego.x:
            continue
        best = min(best, compute_ttc(ego, other))
    return best


def min_forward_ttc(w: W.WorldState, ego_idx: int, cfg: RiskConfig) -> float:
    """Min TTC against vehicles ahead in the ego's lateral corridor."""
    return _min_ttc(w, ego_idx, cfg, forward_only=True)


def _min_pet(w: W.WorldState, ego_idx: int) -> float:
    ego = w.participants[ego_idx]
    best = math.inf
    for j in w.pedestrians():
        best = min(best, compute_pet(ego, w.participants[j]))
    return best


def _proximate_events(w: W.WorldState, ego_idx: int, cfg: RiskConfig) -> Dict[str, bool]:
    ego = w.participants[ego_idx]
    flags: Dict[str, bool] = {}
    for script in w.scripts:
        tag = script.event_tag
        if not tag or not script.active:
            continue
        src = w.participants[script.index]
        near = math.hypot(src.x - ego.x, src.y - ego.y) <= cfg.event_radius
        flags[tag] = flags.get(tag, False) or near
    return flags


def assess(w: W.WorldState, cfg: RiskConfig) -> List[RiskReport]:
    """Per-AV risk reports. risk = clamp(l1*ttc_n + l2*pet_n + l3*sum(beta*event), w0, 1)."""
    reports = []
    for i in w.av_indices:
        ttc = _min_ttc(w, i, cfg)
        pet = _min_pet(w, i)
        ttc_n = normalize_urgency(ttc, cfg.tau_v2v, cfg.eps_norm)
        pet_n = normalize_urgency(pet, cfg.tau_v2p, cfg.eps_norm)
        events = _proximate_events(w, i, cfg)
        event_sum = sum(cfg.beta.get(tag, 0.0) for tag, on in events.items() if on)
        raw = cfg.lambda1 * ttc_n + cfg.lambda2 * pet_n + cfg.lambda3 * event_sum
        value = min(max(raw, cfg.w0), 1.0)
        in_zone = ttc <= cfg.tau_v2v or pet <= cfg.tau_v2p or any(events.values())
        reports.append(
            RiskReport(
                av_index=i,
                ttc=ttc,
                pet=pet,
                ttc_norm=ttc_n,
                pet_norm=pet_n,
                events=events,
                risk=value,
                in_dcz=in_zone,
            )
        )
    return reports


def scene_risk(reports: List[RiskReport]) -> float:
    if not reports:
        raise ValueError("no controlled vehicles to assess")
    return max(r.risk for r in reports)


def risk_of(w: W.WorldState, cfg: RiskConfig) -> Tuple[List[float], float]:
    reports = assess(w, cfg)
    per_av = [r.risk for r in reports]
    return per_av, scene_risk(reports)


def in_dcz(w: W.WorldState, cfg: RiskConfig) -> List[bool]:
    return [r.in_dcz for r in assess(w, cfg)]


def safety_weight(risk_value: float, cfg: RiskConfig) -> float:
    """Piecewise blend weight: alpha0 above the risk threshold, 1-alpha0 below."""
    if not (0.0 <= risk_value <= 1.0):
        raise ValueError(f"risk out of range: {risk_value}")
    return cfg.alpha0 if risk_value >= cfg.tau_risk else 1.0 - cfg.alpha0
