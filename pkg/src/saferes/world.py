"""Straight-road multi-agent driving world.

Coordinates: x along the road (m), y lateral (m), lane 0 centered at y=0 and
lanes increasing to the left. Headings in degrees, [0, 360), 0 pointing +x,
counterclockwise positive. All simulation state is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

DT = 0.1  # [s]
N_LANES = 3
LANE_WIDTH = 3.5  # [m]
LANE_CENTERS = tuple(i * LANE_WIDTH for i in range(N_LANES))
ROAD_Y_MIN = LANE_CENTERS[0] - LANE_WIDTH / 2.0
ROAD_Y_MAX = LANE_CENTERS[-1] + LANE_WIDTH / 2.0

VEH_LENGTH = 4.8  # [m]
VEH_WIDTH = 1.8  # [m]
WHEELBASE = 2.8  # [m]
PED_RADIUS = 0.3  # [m]

V_MAX = 20.0  # [m/s]
A_MAX = 4.0  # [m/s^2]
DELTA_MAX = 30.0  # [deg]

R_PERCEP = 100.0  # [m] sensing range for relative-motion features
R_COMM = 100.0  # [m] graph edge range

VEH_DIM = 22
PED_DIM = 10
SECTORS = ("front", "rear", "left_front", "left_rear", "right_front", "right_rear")

SCENARIOS = ("LVEB", "OPI", "RPC", "IJ")


class WorldError(Exception):
    pass


class InvalidStateError(WorldError):
    pass


class ConfigError(WorldError):
    pass


class Kind(IntEnum):
    AV = 0
    BV = 1
    PED = 2


class Outcome:
    RUNNING = "running"
    COLLISION = "collision"
    SUCCESS = "success"
    TIMEOUT = "timeout"


def wrap_deg(theta: float) -> float:
    """Wrap an angle into [0, 360)."""
    return float(theta % 360.0)


def wrap180(theta: float) -> float:
    """Wrap an angle into [-180, 180)."""
    return float((theta + 180.0) % 360.0 - 180.0)


def lane_from_y(y: float) -> int:
    """Nearest lane index, clamped to the road."""
    return int(np.clip(round(y / LANE_WIDTH), 0, N_LANES - 1))


@dataclass
class ParticipantState:
    x: float
    y: float
    theta: float  # [deg], [0, 360)
    v: float  # [m/s], >= 0
    lane: int
    kind: Kind

    def lane_onehot(self) -> np.ndarray:
        out = np.zeros(N_LANES)
        out[self.lane] = 1.0
        return out

    def kind_onehot(self) -> np.ndarray:
        out = np.zeros(3)
        out[int(self.kind)] = 1.0
        return out

    def base_features(self) -> np.ndarray:
        """(x, y, theta, v, lane one-hot, kind one-hot), 10 dims."""
        return np.concatenate(
            ([self.x, self.y, self.theta, self.v], self.lane_onehot(), self.kind_onehot())
        )


def step_vehicle(
    state: ParticipantState,
    accel: float,
    steer: float,
    dt: float = DT,
    v_max: float = V_MAX,
    wheelbase: float = WHEELBASE,
) -> ParticipantState:
    """One forward-Euler step of the kinematic bicycle.

    Position and heading advance with the pre-update speed, then
    v <- clip(v + accel*dt, 0, v_max). No reverse motion.
    """
    if not (
        math.isfinite(state.x)
        and math.isfinite(state.y)
        and math.isfinite(state.theta)
        and math.isfinite(state.v)
        and math.isfinite(accel)
        and math.isfinite(steer)
    ):
        raise InvalidStateError("non-finite vehicle state or control")
    rad = math.radians(state.theta)
    x = state.x + state.v * math.cos(rad) * dt
    y = state.y + state.v * math.sin(rad) * dt
    dtheta = math.degrees(state.v / wheelbase * math.tan(math.radians(steer)) * dt)
    theta = wrap_deg(state.theta + dtheta)
    v = min(max(state.v + accel * dt, 0.0), v_max)
    return replace(state, x=x, y=y, theta=theta, v=v, lane=lane_from_y(y))


def step_pedestrian(state: ParticipantState, dt: float = DT) -> ParticipantState:
    """Point-mass pedestrian, constant heading and speed over the step."""
    rad = math.radians(state.theta)
    x = state.x + state.v * math.cos(rad) * dt
    y = state.y + state.v * math.sin(rad) * dt
    return replace(state, x=x, y=y, lane=lane_from_y(y))


def relative_motion_features(
    ego: ParticipantState,
    others: Sequence[ParticipantState],
    r_percep: float = R_PERCEP,
) -> np.ndarray:
    """Nearest-vehicle (gap, closing speed) per sector, shape (6, 2).

    Sectors are front/rear in the ego lane and the two adjacent lanes.
    Empty sector: (r_percep, 0). Closing speed is ego.v - other.v.
    Ties on distance keep the earliest participant in iteration order.
    """
    out = np.empty((6, 2))
    out[:, 0] = r_percep
    out[:, 1] = 0.0
    best = [r_percep] * 6
    for other in others:
        if other is ego or other.kind == Kind.PED:
            continue
        dlane = other.lane - ego.lane
        if abs(dlane) > 1:
            continue
        dx = other.x - ego.x
        dist = abs(dx)
        if dist > r_percep:
            continue
        col = 0 if dlane == 0 else (2 if dlane == 1 else 4)
        sector = col + (0 if dx >= 0.0 else 1)
        if dist < best[sector]:
            best[sector] = dist
            out[sector, 0] = dist
            out[sector, 1] = ego.v - other.v
    return out


@dataclass
class VehicleObservation:
    base: ParticipantState
    sectors: np.ndarray  # (6, 2)

    def vector(self) -> np.ndarray:
        return np.concatenate((self.base.base_features(), self.sectors.ravel()))


def pedestrian_observation(state: ParticipantState) -> np.ndarray:
    if state.kind != Kind.PED:
        raise InvalidStateError("pedestrian observation of a vehicle")
    return state.base_features()


@dataclass
class RoadGraph:
    nodes: np.ndarray  # (n, VEH_DIM); pedestrian rows zero-padded past PED_DIM
    adjacency: np.ndarray  # (n, n), symmetric, unit diagonal


def build_topology(
    participants: Sequence[ParticipantState],
    r_comm: float = R_COMM,
    r_percep: float = R_PERCEP,
) -> RoadGraph:
    """Graph over all participants: edge iff center distance <= r_comm."""
    n = len(participants)
    if n == 0:
        raise InvalidStateError("empty world")
    nodes = np.zeros((n, VEH_DIM))
    for i, p in enumerate(participants):
        if p.kind == Kind.PED:
            nodes[i, :PED_DIM] = p.base_features()
        else:
            feats = relative_motion_features(p, participants, r_percep)
            nodes[i, :PED_DIM] = p.base_features()
            nodes[i, PED_DIM:] = feats.ravel()
    xy = np.array([[p.x, p.y] for p in participants])
    d = np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=-1)
    adjacency = (d <= r_comm).astype(np.float64)
    np.fill_diagonal(adjacency, 1.0)
    return RoadGraph(nodes=nodes, adjacency=adjacency)


# scripted-role identifiers
ROLE_LEAD = "lead"
ROLE_CUTIN = "cutin"
ROLE_PED = "ped"
ROLE_PARKED = "parked"

EVENT_LEAD_BRAKE = "lead-brake"
EVENT_PED_CROSS = "ped-cross"
EVENT_CUT_IN = "cut-in"


@dataclass
class Script:
    """Scripted controller for one background participant."""

    index: int
    role: str
    event_tag: str
    trigger_time: Optional[float] = None  # [s]
    trigger_dist: Optional[float] = None  # [m] longitudinal gap to nearest AV
    active: bool = False
    data: Dict[str, float] = field(default_factory=dict)


DEFAULT_RANGES: Dict[str, Dict[str, Tuple[float, float]]] = {
    "LVEB": {
        "av_speed": (11.0, 13.0),
        "lead_speed": (11.0, 13.0),
        "lead_gap": (30.0, 42.0),
        "trigger_time": (1.0, 2.0),
    },
    "OPI": {
        "av_speed": (11.0, 13.0),
        "hazard_x": (65.0, 85.0),
        "trigger_dist": (20.0, 30.0),
    },
    "RPC": {
        "av_speed": (11.0, 13.0),
        "hazard_x": (65.0, 85.0),
        "trigger_dist": (18.0, 28.0),
        "cutin_speed": (6.0, 9.0),
    },
    "IJ": {
        "av_speed": (11.0, 13.0),
        "hazard_x": (80.0, 100.0),
        # early trigger: the crossing group reaches the ego lane before even a
        # full-throttle approach can clear it, so yielding is the only out
        "trigger_dist": (45.0, 55.0),
    },
}

DEFAULT_COUNTS: Dict[str, Tuple[int, int, int]] = {
    # (n_avs, n_bvs, n_peds)
    "LVEB": (2, 1, 0),
    "OPI": (2, 1, 1),
    "RPC": (2, 1, 0),
    "IJ": (2, 0, 3),
}

EXIT_X = 140.0  # [m] success line
SHOULDER_Y = -2.3  # [m] parked-vehicle center
PED_STAGE_Y = -2.8  # [m] pedestrian kerb position
PED_WALK_SPEED = 1.5  # [m/s]
PED_STOP_Y = 9.6  # [m] off the far edge
LEAD_BRAKE_DECEL = -6.0  # [m/s^2]
CUTIN_RAMP_T = 2.0  # [s] lateral merge duration
CUTIN_ACCEL = 2.5  # [m/s^2]


@dataclass
class ScenarioSpec:
    scenario_id: str
    seed: int
    n_avs: int = 2
    n_bvs: Optional[int] = None
    n_peds: Optional[int] = None
    horizon: int = 200  # [steps]
    dt: float = DT
    ranges: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.scenario_id not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario_id!r}")
        if self.n_avs < 1:
            raise ConfigError("need at least one controlled vehicle")
        if self.horizon < 1 or self.dt <= 0:
            raise ConfigError("bad horizon or dt")
        counts = DEFAULT_COUNTS[self.scenario_id]
        if self.n_bvs is None:
            self.n_bvs = counts[1]
        if self.n_peds is None:
            self.n_peds = counts[2]
        merged = dict(DEFAULT_RANGES[self.scenario_id])
        for key, rng in self.ranges.items():
            if key not in merged:
                raise ConfigError(f"unknown randomization key {key!r} for {self.scenario_id}")
            lo, hi = float(rng[0]), float(rng[1])
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ConfigError(f"bad range for {key!r}: {rng}")
            merged[key] = (lo, hi)
        self.ranges = merged


class WorldState:
    """Mutable simulation state. Participants are ordered AVs, BVs, peds."""

    def __init__(
        self,
        spec: ScenarioSpec,
        participants: List[ParticipantState],
        scripts: List[Script],
        exit_x: float = EXIT_X,
    ):
        self.spec = spec
        self.participants = participants
        self.scripts = scripts
        self.exit_x = exit_x
        self.t = 0.0
        self.step_count = 0
        self.dt = spec.dt
        self.horizon = spec.horizon
        self.events_active: set = set()
        self.last_lane_change: Dict[int, float] = {
            i: -math.inf for i in range(spec.n_avs)
        }
        self.last_controls: Dict[int, Tuple[float, float]] = {}
        self._graph: Optional[RoadGraph] = None

    @property
    def n_avs(self) -> int:
        return self.spec.n_avs

    @property
    def av_indices(self) -> range:
        return range(self.spec.n_avs)

    def vehicles(self) -> List[int]:
        return [i for i, p in enumerate(self.participants) if p.kind != Kind.PED]

    def pedestrians(self) -> List[int]:
        return [i for i, p in enumerate(self.participants) if p.kind == Kind.PED]

    def graph(self) -> RoadGraph:
        if self._graph is None:
            self._graph = build_topology(self.participants)
        return self._graph

    def invalidate(self) -> None:
        self._graph = None


def _stagger_avs(n_avs: int, speeds: Sequence[float]) -> List[ParticipantState]:
    avs = []
    for i in range(n_avs):
        lane = i % 2
        x = 20.0 - 8.0 * i
        avs.append(
            ParticipantState(x=x, y=LANE_CENTERS[lane], theta=0.0, v=float(speeds[i]), lane=lane, kind=Kind.AV)
        )
    return avs


def instantiate_scenario(spec: ScenarioSpec) -> WorldState:
    """Build the initial world for a scenario. Same seed, same world, bit for bit."""
    rng = np.random.default_rng(spec.seed)
    r = spec.ranges

    def draw(key: str) -> float:
        lo, hi = r[key]
        return float(rng.uniform(lo, hi))

    av_speeds = [draw("av_speed") for _ in range(spec.n_avs)]
    participants = _stagger_avs(spec.n_avs, av_speeds)
    scripts: List[Script] = []

    if spec.scenario_id == "LVEB":
        gap = draw("lead_gap")
        lead_v = draw("lead_speed")
        t_trig = draw("trigger_time")
        lead_x = participants[0].x + VEH_LENGTH + gap
        for _ in range(spec.n_bvs):
            idx = len(participants)
            participants.append(
                ParticipantState(x=lead_x, y=LANE_CENTERS[0], theta=0.0, v=lead_v, lane=0, kind=Kind.BV)
            )
            scripts.append(Script(index=idx, role=ROLE_LEAD, event_tag=EVENT_LEAD_BRAKE, trigger_time=t_trig))
            lead_x += 60.0
    elif spec.scenario_id == "OPI":
        hx = draw("hazard_x")
        d_trig = draw("trigger_dist")
        for _ in range(spec.n_bvs):
            idx = len(participants)
            participants.append(
                ParticipantState(x=hx, y=SHOULDER_Y, theta=0.0, v=0.0, lane=0, kind=Kind.BV)
            )
            scripts.append(Script(index=idx, role=ROLE_PARKED, event_tag="", trigger_time=None))
        for j in range(spec.n_peds):
            idx = len(participants)
            participants.append(
                ParticipantState(
                    x=hx + VEH_LENGTH / 2.0 + 1.0 + 0.8 * j,
                    y=PED_STAGE_Y,
                    theta=90.0,
                    v=0.0,
                    lane=0,
                    kind=Kind.PED,
                )
            )
            scripts.append(Script(index=idx, role=ROLE_PED, event_tag=EVENT_PED_CROSS, trigger_dist=d_trig))
    elif spec.scenario_id == "RPC":
        hx = draw("hazard_x")
        d_trig = draw("trigger_dist")
        cut_v = draw("cutin_speed")
        for _ in range(spec.n_bvs):
            idx = len(participants)
            participants.append(
                ParticipantState(x=hx, y=SHOULDER_Y, theta=0.0, v=0.0, lane=0, kind=Kind.BV)
            )
            scripts.append(
                Script(
                    index=idx,
                    role=ROLE_CUTIN,
                    event_tag=EVENT_CUT_IN,
                    trigger_dist=d_trig,
                    data={"v_target": cut_v},
                )
            )
            hx += 40.0
    else:  # IJ
        hx = draw("hazard_x")
        d_trig = draw("trigger_dist")
        for j in range(spec.n_peds):
            idx = len(participants)
            participants.append(
                ParticipantState(
                    x=hx + 0.8 * j, y=PED_STAGE_Y, theta=90.0, v=0.0, lane=0, kind=Kind.PED
                )
            )
            scripts.append(Script(index=idx, role=ROLE_PED, event_tag=EVENT_PED_CROSS, trigger_dist=d_trig))

    return WorldState(spec, participants, scripts)


def trigger_events(world: WorldState) -> List[str]:
    """Fire pending scripted triggers. Returns newly activated tags."""
    fired = []
    for script in world.scripts:
        if script.active or script.role == ROLE_PARKED:
            continue
        hazard = world.participants[script.index]
        hit = False
        if script.trigger_time is not None and world.t >= script.trigger_time - 1e-12:
            hit = True
        if not hit and script.trigger_dist is not None:
            for i in world.av_indices:
                av = world.participants[i]
                gap = hazard.x - av.x
                if 0.0 <= gap <= script.trigger_dist:
                    hit = True
                    break
        if hit:
            script.active = True
            script.data["t_fired"] = world.t
            if script.event_tag:
                if script.event_tag not in world.events_active:
                    fired.append(script.event_tag)
                world.events_active.add(script.event_tag)
    return fired


def _scripted_control(world: WorldState, script: Script) -> Tuple[float, float]:
    """(accel, steer) command for a scripted vehicle at the current step."""
    state = world.participants[script.index]
    if script.role == ROLE_LEAD:
        if script.active and state.v > 0.0:
            return (LEAD_BRAKE_DECEL, 0.0)
        return (0.0, 0.0)
    if script.role == ROLE_CUTIN:
        if script.active:
            v_target = script.data.get("v_target", 8.0)
            return (CUTIN_ACCEL if state.v < v_target else 0.0, 0.0)
        return (0.0, 0.0)
    return (0.0, 0.0)


def _advance_scripted(world: WorldState) -> None:
    for script in world.scripts:
        state = world.participants[script.index]
        if script.role == ROLE_PED:
            if script.active and state.v == 0.0 and state.y < PED_STOP_Y:
                state = replace(state, v=PED_WALK_SPEED, theta=90.0)
            state = step_pedestrian(state, world.dt)
            if state.y >= PED_STOP_Y:
                state = replace(state, v=0.0)
            world.participants[script.index] = state
            world.last_controls[script.index] = (0.0, 0.0)
            continue
        accel, steer = _scripted_control(world, script)
        new = step_vehicle(state, accel, steer, world.dt)
        if script.role == ROLE_CUTIN and script.active:
            # lateral merge overrides the bicycle laterally: linear ramp
            # from the shoulder to the lane-0 center over CUTIN_RAMP_T.
            frac = min((world.t + world.dt - script.data["t_fired"]) / CUTIN_RAMP_T, 1.0)
            y = SHOULDER_Y + (LANE_CENTERS[0] - SHOULDER_Y) * frac
            vy = (LANE_CENTERS[0] - SHOULDER_Y) / CUTIN_RAMP_T if frac < 1.0 else 0.0
            theta = wrap_deg(math.degrees(math.atan2(vy, max(new.v, 0.1))))
            new = replace(new, y=y, theta=theta, lane=lane_from_y(y))
        world.participants[script.index] = new
        world.last_controls[script.index] = (accel, steer)


def step_world(world: WorldState, av_actions: Dict[int, Tuple[float, float]]) -> List[str]:
    """Advance the world one step. Returns event tags fired on this step.

    av_actions maps AV participant index to (accel, steer). Scripted
    participants move by their own controllers after triggers are evaluated.
    """
    fired = trigger_events(world)
    for i in world.av_indices:
        if i not in av_actions:
            raise InvalidStateError(f"missing action for controlled vehicle {i}")
        accel, steer = av_actions[i]
        old = world.participants[i]
        new = step_vehicle(old, accel, steer, world.dt)
        if new.lane != old.lane:
            world.last_lane_change[i] = world.t + world.dt
        world.participants[i] = new
        world.last_controls[i] = (float(accel), float(steer))
    _advance_scripted(world)
    world.t += world.dt
    world.step_count += 1
    world.invalidate()
    return fired


def vehicle_observation(world: WorldState, index: int) -> VehicleObservation:
    p = world.participants[index]
    if p.kind == Kind.PED:
        raise InvalidStateError("vehicle observation of a pedestrian")
    return VehicleObservation(base=p, sectors=relative_motion_features(p, world.participants))


def fuse_observations(world: WorldState) -> np.ndarray:
    """Global fused state: AV blocks, then BV blocks (22 dims), then peds (10)."""
    if not world.participants:
        raise InvalidStateError("empty world")
    parts = []
    for i, p in enumerate(world.participants):
        if p.kind == Kind.PED:
            parts.append(pedestrian_observation(p))
        else:
            parts.append(vehicle_observation(world, i).vector())
    return np.concatenate(parts)


def ego_graph(world: WorldState, av_index: int) -> Tuple[np.ndarray, np.ndarray, int]:
    """Graph input for one AV: node features with positions made ego-relative."""
    if av_index not in world.av_indices:
        raise InvalidStateError(f"index {av_index} is not a controlled vehicle")
    g = world.graph()
    nodes = g.nodes.copy()
    ego = world.participants[av_index]
    nodes[:, 0] -= ego.x
    nodes[:, 1] -= ego.y
    return nodes, g.adjacency, av_index


def rect_corners(state: ParticipantState, length: float = VEH_LENGTH, width: float = VEH_WIDTH) -> np.ndarray:
    c = math.cos(math.radians(state.theta))
    s = math.sin(math.radians(state.theta))
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([state.x, state.y])


def _project(corners: np.ndarray, axis: np.ndarray) -> Tuple[float, float]:
    d = corners @ axis
    return float(d.min()), float(d.max())


def rects_overlap(a: ParticipantState, b: ParticipantState) -> bool:
    """Separating-axis test on the two oriented rectangles."""
    ca, cb = rect_corners(a), rect_corners(b)
    for corners in (ca, cb):
        for k in range(2):
            edge = corners[(k + 1) % 4] - corners[k]
            axis = np.array([-edge[1], edge[0]])
            n = np.linalg.norm(axis)
            if n < 1e-12:
                continue
            axis = axis / n
            amin, amax = _project(ca, axis)
            bmin, bmax = _project(cb, axis)
            if amax < bmin or bmax < amin:
                return False
    return True


def rect_disc_overlap(veh: ParticipantState, ped: ParticipantState, radius: float = PED_RADIUS) -> bool:
    c = math.cos(math.radians(veh.theta))
    s = math.sin(math.radians(veh.theta))
    dx = ped.x - veh.x
    dy = ped.y - veh.y
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    qx = min(max(lx, -VEH_LENGTH / 2.0), VEH_LENGTH / 2.0)
    qy = min(max(ly, -VEH_WIDTH / 2.0), VEH_WIDTH / 2.0)
    return (lx - qx) ** 2 + (ly - qy) ** 2 <= radius**2


def footprints_overlap(a: ParticipantState, b: ParticipantState) -> bool:
    if a.kind == Kind.PED and b.kind == Kind.PED:
        return (a.x - b.x) ** 2 + (a.y - b.y) ** 2 <= (2 * PED_RADIUS) ** 2
    if a.kind == Kind.PED:
        return rect_disc_overlap(b, a)
    if b.kind == Kind.PED:
        return rect_disc_overlap(a, b)
    return rects_overlap(a, b)


@dataclass
class EpisodeStatus:
    outcome: str
    collided_pair: Optional[Tuple[int, int]] = None

    @property
    def done(self) -> bool:
        return self.outcome != Outcome.RUNNING


def check_termination(world: WorldState) -> EpisodeStatus:
    """Collision beats success beats timeout; otherwise running."""
    n = len(world.participants)
    for i in range(n):
        for j in range(i + 1, n):
            if footprints_overlap(world.participants[i], world.participants[j]):
                return EpisodeStatus(Outcome.COLLISION, (i, j))
    if all(world.participants[i].x > world.exit_x for i in world.av_indices):
        return EpisodeStatus(Outcome.SUCCESS)
    if world.t >= world.horizon * world.dt - 1e-12:
        return EpisodeStatus(Outcome.TIMEOUT)
    return EpisodeStatus(Outcome.RUNNING)
