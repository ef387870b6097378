"""Discrete driving policies: action table, feasibility masks, approximators.

The action set couples acceleration and steering: 11 acceleration levels at
zero steer plus 12 nonzero steer levels at zero acceleration, 23 actions
total out of the 143-entry product grid.

Approximators are small float64 networks, one mean-aggregation graph layer
over participant nodes followed by a tanh MLP trunk with action-logit and
value heads. Parameters live in a single flat vector so norm projection and
checkpointing are exact. Backprop is analytic, no autograd.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from saferes import risk as R
from saferes import world as W

N_ACCEL = 11
N_STEER = 13
N_ACTIONS = N_ACCEL + N_STEER - 1  # 23
IDLE_ACTION = 5  # (accel 0, steer 0)

PARAM_BUDGET_RATIO = 0.27  # safety params vs task params
DEFAULT_NORM_CAP = 50.0

LOOKAHEAD_STEPS = 2  # mask horizon for road-edge and lane checks
MAX_HEADING_DEV = 60.0  # [deg] constraint on heading vs lane direction
LANE_CHANGE_COOLDOWN = 2.0  # [s]
TAU_ACCEL = 2.0  # [s] forward TTC below which acceleration is masked


class PolicyError(Exception):
    pass


def build_action_table() -> np.ndarray:
    """(N_ACTIONS, 2) rows of (accel, steer). Index IDLE_ACTION is (0, 0)."""
    accels = np.linspace(-W.A_MAX, W.A_MAX, N_ACCEL)
    steers = np.linspace(-W.DELTA_MAX, W.DELTA_MAX, N_STEER)
    table = np.zeros((N_ACTIONS, 2))
    table[:N_ACCEL, 0] = accels
    nonzero = steers[np.abs(steers) > 1e-12]
    table[N_ACCEL:, 1] = nonzero
    return table


ACTION_TABLE = build_action_table()


# lateral drift of a full counter-steer recovery: integrating v*sin(theta)
# while theta shrinks at (v/L)*tan(delta_max) gives (L/tan(delta_max)) *
# (1 - cos(theta)); speed cancels. One discrete-step slack term bounds the
# forward-Euler overshoot, so states passing this check are recoverable.
_RECOVERY_GAIN = W.WHEELBASE / math.tan(math.radians(W.DELTA_MAX))


def _lookahead_ok(state: W.ParticipantState, accel: float, steer: float, dt: float) -> Tuple[bool, float]:
    """Simulate the action; require the landing state plus its worst-case
    recovery drift to stay inside the road. Bounding the whole recovery
    cone (instead of one coast step) rules out drift-trapped states."""
    nxt = W.step_vehicle(state, accel, steer, dt)
    rad = math.radians(W.wrap180(nxt.theta))
    drift = _RECOVERY_GAIN * (1.0 - math.cos(rad)) + nxt.v * abs(math.sin(rad)) * dt
    if rad >= 0.0:
        on_road = (W.ROAD_Y_MIN <= nxt.y) and (nxt.y + drift <= W.ROAD_Y_MAX)
    else:
        on_road = (W.ROAD_Y_MIN <= nxt.y - drift) and (nxt.y <= W.ROAD_Y_MAX)
    return on_road, abs(W.wrap180(nxt.theta))


def mask_actions(
    world: W.WorldState,
    ego_idx: int,
    risk_cfg: Optional[R.RiskConfig] = None,
    table: np.ndarray = ACTION_TABLE,
) -> np.ndarray:
    """Feasibility mask over the action table for one controlled vehicle.

    Masks: leaving the road within a short lookahead, reversing from
    standstill, heading deviation beyond MAX_HEADING_DEV, a second lane
    change during the cooldown, and acceleration when the forward TTC is
    under TAU_ACCEL. The idle action is always feasible.
    """
    if risk_cfg is None:
        risk_cfg = R.RiskConfig()
    ego = world.participants[ego_idx]
    dt = world.dt
    heading_now = abs(W.wrap180(ego.theta))
    cooldown = (world.t - world.last_lane_change.get(ego_idx, -math.inf)) < LANE_CHANGE_COOLDOWN
    ttc_fwd = R.min_forward_ttc(world, ego_idx, risk_cfg)
    mask = np.ones(len(table), dtype=bool)
    for k, (accel, steer) in enumerate(table):
        if accel < 0.0 and ego.v <= 1e-9:
            mask[k] = False
            continue
        if accel > 0.0 and ttc_fwd < TAU_ACCEL:
            mask[k] = False
            continue
        on_road, heading_next = _lookahead_ok(ego, accel, steer, dt)
        if not on_road:
            mask[k] = False
            continue
        if heading_next > MAX_HEADING_DEV and heading_next >= heading_now:
            mask[k] = False
            continue
        if cooldown and steer != 0.0:
            nxt = W.step_vehicle(ego, accel, steer, dt)
            coast = W.step_vehicle(nxt, 0.0, 0.0, dt)
            if nxt.lane != ego.lane or coast.lane != ego.lane:
                mask[k] = False
    mask[IDLE_ACTION] = True
    return mask


@dataclass(frozen=True)
class ApproximatorSpec:
    node_dim: int = W.VEH_DIM
    graph_dim: int = 64
    hidden: Tuple[int, ...] = (128, 128)
    extra_dim: int = 0
    n_actions: int = N_ACTIONS

    def layer_shapes(self) -> List[Tuple[int, int]]:
        shapes = [(self.node_dim, self.graph_dim)]
        width = self.graph_dim + self.extra_dim
        for h in self.hidden:
            shapes.append((width, h))
            width = h
        shapes.append((width, self.n_actions))
        shapes.append((width, 1))
        return shapes

    @property
    def param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())

    def to_dict(self) -> Dict:
        return {
            "node_dim": self.node_dim,
            "graph_dim": self.graph_dim,
            "hidden": list(self.hidden),
            "extra_dim": self.extra_dim,
            "n_actions": self.n_actions,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "ApproximatorSpec":
        return cls(
            node_dim=int(d["node_dim"]),
            graph_dim=int(d["graph_dim"]),
            hidden=tuple(int(h) for h in d["hidden"]),
            extra_dim=int(d["extra_dim"]),
            n_actions=int(d["n_actions"]),
        )


TASK_SPEC = ApproximatorSpec(graph_dim=64, hidden=(128, 128), extra_dim=0)
SAFE_SPEC = ApproximatorSpec(graph_dim=32, hidden=(48,), extra_dim=N_ACTIONS)


@dataclass
class ParamSet:
    values: np.ndarray  # flat float64
    cap: float = DEFAULT_NORM_CAP

    def copy(self) -> "ParamSet":
        return ParamSet(values=self.values.copy(), cap=self.cap)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def unpack(values: np.ndarray, spec: ApproximatorSpec) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Weight/bias views into the flat vector; views share memory with it."""
    layers = []
    off = 0
    for i_dim, o_dim in spec.layer_shapes():
        w = values[off : off + i_dim * o_dim].reshape(i_dim, o_dim)
        off += i_dim * o_dim
        b = values[off : off + o_dim]
        off += o_dim
        layers.append((w, b))
    if off != values.size:
        raise PolicyError(f"parameter vector size {values.size} does not match spec ({off})")
    return layers


def init_params(
    spec: ApproximatorSpec, cap: float = DEFAULT_NORM_CAP, seed: int = 0
) -> ParamSet:
    """Scaled-normal init; the logit head starts small so the policy is near uniform."""
    rng = np.random.default_rng(seed)
    values = np.zeros(spec.param_count)
    layers = unpack(values, spec)
    for li, (w, b) in enumerate(layers):
        fan_in = w.shape[0]
        w[:] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=w.shape)
        if li == len(layers) - 2:  # logit head
            w *= 0.01
    params = ParamSet(values=values, cap=cap)
    project(params)
    return params


def project(params: ParamSet) -> ParamSet:
    """Scale the flat vector back onto the norm ball of radius cap. Idempotent."""
    norm = params.norm
    if norm > params.cap:
        params.values *= params.cap / norm
    return params


_SCALE = np.ones(W.VEH_DIM)
_SCALE[0] = 1.0 / 100.0  # relative x [m]
_SCALE[1] = 1.0 / 10.0  # relative y [m]
_SCALE[3] = 1.0 / 20.0  # speed [m/s]
_SCALE[W.PED_DIM :: 2] = 1.0 / 100.0  # sector gaps
_SCALE[W.PED_DIM + 1 :: 2] = 1.0 / 20.0  # sector closing speeds


def _scale_nodes(nodes: np.ndarray) -> np.ndarray:
    # scaling targets the standard observation layout; other widths pass through
    if nodes.shape[-1] != W.VEH_DIM:
        return np.array(nodes, dtype=float)
    out = nodes * _SCALE
    out[..., 2] = ((nodes[..., 2] + 180.0) % 360.0 - 180.0) / 180.0
    return out


@dataclass
class ForwardCache:
    agg: np.ndarray
    h_graph: np.ndarray
    trunk: List[np.ndarray]  # trunk[0] is the trunk input, trunk[-1] the output


def forward_batch(
    params: ParamSet,
    spec: ApproximatorSpec,
    nodes: np.ndarray,
    adj: np.ndarray,
    ego: np.ndarray,
    extra: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Batched forward pass.

    nodes (B, n, node_dim), adj (B, n, n), ego (B,) node indices,
    extra (B, extra_dim) or None. Returns (logits (B, A), values (B,), cache).
    Only the ego row of the aggregation is needed because the trunk reads
    the ego node embedding alone.
    """
    if nodes.ndim != 3:
        raise PolicyError("nodes must be (batch, n, features)")
    layers = unpack(params.values, spec)
    feats = _scale_nodes(nodes)
    b_idx = np.arange(nodes.shape[0])
    ego_row = adj[b_idx, ego]  # (B, n)
    weights = ego_row / ego_row.sum(axis=1, keepdims=True)
    agg = np.einsum("bn,bnf->bf", weights, feats)
    wg, bg = layers[0]
    h = np.tanh(agg @ wg + bg)
    if spec.extra_dim and (extra is None or extra.shape[1] != spec.extra_dim):
        raise PolicyError("missing or misshaped extra input")
    z = h if spec.extra_dim == 0 else np.concatenate([h, extra], axis=1)
    trunk = [z]
    for w, b in layers[1:-2]:
        z = np.tanh(z @ w + b)
        trunk.append(z)
    wl, bl = layers[-2]
    wv, bv = layers[-1]
    logits = z @ wl + bl
    values = (z @ wv + bv)[:, 0]
    return logits, values, ForwardCache(agg=agg, h_graph=h, trunk=trunk)


def forward_single(
    params: ParamSet,
    spec: ApproximatorSpec,
    nodes: np.ndarray,
    adj: np.ndarray,
    ego: int,
    extra: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, float]:
    logits, values, _ = forward_batch(
        params,
        spec,
        nodes[None],
        adj[None],
        np.array([ego]),
        None if extra is None else extra[None],
    )
    return logits[0], float(values[0])


def backward_batch(
    params: ParamSet,
    spec: ApproximatorSpec,
    cache: ForwardCache,
    dlogits: np.ndarray,
    dvalues: np.ndarray,
) -> np.ndarray:
    """Gradient of sum(dlogits*logits) + sum(dvalues*values) wrt the flat params."""
    layers = unpack(params.values, spec)
    grad = np.zeros_like(params.values)
    gviews = unpack(grad, spec)
    z_last = cache.trunk[-1]
    wl, _ = layers[-2]
    wv, _ = layers[-1]
    gviews[-2][0][:] = z_last.T @ dlogits
    gviews[-2][1][:] = dlogits.sum(axis=0)
    gviews[-1][0][:] = (z_last * dvalues[:, None]).sum(axis=0)[:, None]
    gviews[-1][1][:] = dvalues.sum()
    dz = dlogits @ wl.T + dvalues[:, None] * wv[:, 0]
    for k in range(len(layers) - 3, 0, -1):
        z_in = cache.trunk[k - 1]
        z_out = cache.trunk[k]
        dpre = dz * (1.0 - z_out**2)
        gviews[k][0][:] = z_in.T @ dpre
        gviews[k][1][:] = dpre.sum(axis=0)
        dz = dpre @ layers[k][0].T
    dh = dz[:, : spec.graph_dim]
    dpre_g = dh * (1.0 - cache.h_graph**2)
    gviews[0][0][:] = cache.agg.T @ dpre_g
    gviews[0][1][:] = dpre_g.sum(axis=0)
    return grad


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over feasible entries; masked entries are exactly zero."""
    x = np.where(mask, logits, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    x = np.where(mask, logits, -np.inf)
    xmax = x.max(axis=-1, keepdims=True)
    shifted = x - xmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def validate_distribution(probs: np.ndarray, tol: float = 1e-9) -> None:
    if probs.ndim != 1 or probs.shape[0] != N_ACTIONS:
        raise PolicyError(f"expected a length-{N_ACTIONS} distribution")
    if not np.all(np.isfinite(probs)) or probs.min() < -1e-12:
        raise PolicyError("distribution has negative or non-finite mass")
    if abs(float(probs.sum()) - 1.0) > tol:
        raise PolicyError("distribution does not sum to 1")


def hybrid(task_probs: np.ndarray, safe_probs: np.ndarray, alpha: float) -> np.ndarray:
    """Residual blend task + alpha*(safe - task). Endpoints return exact copies."""
    if not (0.0 <= alpha <= 1.0):
        raise PolicyError(f"alpha out of [0, 1]: {alpha}")
    if task_probs.shape != safe_probs.shape:
        raise PolicyError("distribution shapes differ")
    if alpha == 0.0:
        return task_probs.copy()
    if alpha == 1.0:
        return safe_probs.copy()
    return task_probs + alpha * (safe_probs - task_probs)


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    validate_distribution(probs, tol=1e-6)
    c = np.cumsum(probs)
    u = rng.random() * c[-1]
    idx = int(np.searchsorted(c, u, side="right"))
    return min(idx, probs.shape[0] - 1)


def greedy_action(probs: np.ndarray) -> int:
    validate_distribution(probs, tol=1e-6)
    return int(np.argmax(probs))


@dataclass
class PolicyPair:
    """Task and safety parameter sets with the safety parameter budget enforced."""

    task: ParamSet
    safe: ParamSet
    task_spec: ApproximatorSpec = TASK_SPEC
    safe_spec: ApproximatorSpec = SAFE_SPEC

    def __post_init__(self) -> None:
        budget = PARAM_BUDGET_RATIO * self.task_spec.param_count
        if self.safe_spec.param_count > budget:
            raise PolicyError(
                f"safety net has {self.safe_spec.param_count} params, budget {budget:.0f}"
            )
        if self.safe.cap > PARAM_BUDGET_RATIO * self.task.cap + 1e-9:
            raise PolicyError("safety norm cap exceeds its share of the task cap")

    @classmethod
    def fresh(
        cls,
        seed: int = 0,
        cap: float = DEFAULT_NORM_CAP,
        task_spec: ApproximatorSpec = TASK_SPEC,
        safe_spec: ApproximatorSpec = SAFE_SPEC,
    ) -> "PolicyPair":
        return cls(
            task=init_params(task_spec, cap=cap, seed=seed),
            safe=init_params(safe_spec, cap=PARAM_BUDGET_RATIO * cap, seed=seed + 1),
            task_spec=task_spec,
            safe_spec=safe_spec,
        )


@dataclass
class ActionChoice:
    index: int
    alpha: float
    task_probs: np.ndarray
    safe_probs: np.ndarray
    hybrid_probs: np.ndarray
    task_logits: np.ndarray
    value_task: float
    value_safe: float

    @property
    def logp_task(self) -> float:
        return float(np.log(self.task_probs[self.index]))

    @property
    def logp_safe(self) -> float:
        return float(np.log(self.safe_probs[self.index]))


def explore_mix(probs: np.ndarray, mask: np.ndarray, eps: float) -> np.ndarray:
    """Behavior distribution for training rollouts: blend toward uniform
    over the feasible set. eps=0 returns probs unchanged."""
    if not 0.0 <= eps <= 1.0:
        raise PolicyError(f"exploration rate out of range: {eps}")
    if eps == 0.0:
        return probs
    uniform = mask.astype(float) / mask.sum()
    return (1.0 - eps) * probs + eps * uniform


def policy_step(
    pair: PolicyPair,
    nodes: np.ndarray,
    adj: np.ndarray,
    ego: int,
    mask: np.ndarray,
    alpha: float,
    rng: Optional[np.random.Generator] = None,
    greedy: bool = False,
    explore_eps: float = 0.0,
) -> ActionChoice:
    """Evaluate both streams, blend, and pick an action."""
    t_logits, t_value = forward_single(pair.task, pair.task_spec, nodes, adj, ego)
    s_logits, s_value = forward_single(
        pair.safe, pair.safe_spec, nodes, adj, ego, extra=t_logits
    )
    t_probs = masked_softmax(t_logits, mask)
    s_probs = masked_softmax(s_logits, mask)
    h_probs = hybrid(t_probs, s_probs, alpha)
    if greedy:
        index = greedy_action(h_probs)
    else:
        if rng is None:
            raise PolicyError("sampling requires a generator")
        index = sample_action(explore_mix(h_probs, mask, explore_eps), rng)
    return ActionChoice(
        index=index,
        alpha=alpha,
        task_probs=t_probs,
        safe_probs=s_probs,
        hybrid_probs=h_probs,
        task_logits=t_logits,
        value_task=t_value,
        value_safe=s_value,
    )


CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str,
    algo: str,
    task: ParamSet,
    task_spec: ApproximatorSpec,
    safe: Optional[ParamSet] = None,
    safe_spec: Optional[ApproximatorSpec] = None,
    meta: Optional[Dict] = None,
) -> None:
    payload = {
        "version": np.int64(CHECKPOINT_VERSION),
        "algo": np.str_(algo),
        "task_values": task.values,
        "task_cap": np.float64(task.cap),
        "task_spec": np.str_(json.dumps(task_spec.to_dict())),
        "action_table": ACTION_TABLE,
        "meta": np.str_(json.dumps(meta or {})),
    }
    if safe is not None:
        if safe_spec is None:
            raise PolicyError("safety params without a spec")
        payload["safe_values"] = safe.values
        payload["safe_cap"] = np.float64(safe.cap)
        payload["safe_spec"] = np.str_(json.dumps(safe_spec.to_dict()))
    np.savez(path, **payload)


@dataclass
class Checkpoint:
    algo: str
    task: ParamSet
    task_spec: ApproximatorSpec
    safe: Optional[ParamSet]
    safe_spec: Optional[ApproximatorSpec]
    meta: Dict
    action_table: np.ndarray

    def pair(self) -> PolicyPair:
        if self.safe is None or self.safe_spec is None:
            raise PolicyError(f"checkpoint for {self.algo!r} has no safety stream")
        return PolicyPair(
            task=self.task, safe=self.safe, task_spec=self.task_spec, safe_spec=self.safe_spec
        )


def load_checkpoint(path: str) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise PolicyError(f"unsupported checkpoint version {version}")
        task_spec = ApproximatorSpec.from_dict(json.loads(str(data["task_spec"])))
        task = ParamSet(values=data["task_values"].copy(), cap=float(data["task_cap"]))
        if task.values.size != task_spec.param_count:
            raise PolicyError("checkpoint parameter count does not match its spec")
        safe = None
        safe_spec = None
        if "safe_values" in data.files:
            safe_spec = ApproximatorSpec.from_dict(json.loads(str(data["safe_spec"])))
            safe = ParamSet(values=data["safe_values"].copy(), cap=float(data["safe_cap"]))
            if safe.values.size != safe_spec.param_count:
                raise PolicyError("checkpoint parameter count does not match its spec")
        table = data["action_table"].copy()
        if table.shape != ACTION_TABLE.shape:
            raise PolicyError("checkpoint action table is incompatible")
        return Checkpoint(
            algo=str(data["algo"]),
            task=task,
            task_spec=task_spec,
            safe=safe,
            safe_spec=safe_spec,
            meta=json.loads(str(data["meta"])),
            action_table=table,
        )
