"""Training: replay, advantage estimation, dual-stream updates, baselines.

The main learner keeps two policy streams. Per step the blend weight alpha
follows scene risk; transitions carry both reward streams and are replayed
with risk-proportional priorities. The task stream's update is weighted by
w*(1-alpha), the safety stream's by w*alpha, both clipped-surrogate policy
gradients with value and entropy terms, followed by a norm projection.

Baselines: CPPO (single task stream, uniform replay, same update path) and
CDQN / CD3QN (Q-learning on the task reward, ring replay).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from saferes import policy as P
from saferes import rewards as RW
from saferes import risk as R
from saferes import world as W

ALGO_DRS = "drs-ppo"
ALGO_CPPO = "cppo"
ALGO_CDQN = "cdqn"
ALGO_CD3QN = "cd3qn"
ALGOS = (ALGO_DRS, ALGO_CPPO, ALGO_CDQN, ALGO_CD3QN)
PPO_FAMILY = (ALGO_DRS, ALGO_CPPO)


class LearnerError(Exception):
    pass


class NumericalError(LearnerError):
    pass


@dataclass
class Transition:
    nodes: np.ndarray
    adj: np.ndarray
    ego: int
    action: int
    mask: np.ndarray
    r_task: float
    r_safe: float
    next_nodes: np.ndarray
    next_adj: np.ndarray
    next_mask: np.ndarray
    risk: float
    alpha: float
    logp_task: float
    logp_safe: float
    value_task: float
    value_safe: float
    done: bool
    adv_task: float = 0.0
    adv_safe: float = 0.0
    ret_task: float = 0.0
    ret_safe: float = 0.0


def gae_advantages(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and returns.

    values has length T+1; the last entry bootstraps truncated episodes and
    is cut off by dones[t] at terminal steps.
    """
    t_len = len(rewards)
    if len(values) != t_len + 1 or len(dones) != t_len:
        raise LearnerError("misaligned advantage inputs")
    adv = np.zeros(t_len)
    last = 0.0
    for t in range(t_len - 1, -1, -1):
        nonterm = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * values[t + 1] * nonterm - values[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
    returns = adv + values[:t_len]
    return adv, returns


def sampling_probabilities(priorities: np.ndarray, kappa: float) -> np.ndarray:
    """p_i proportional to priority^kappa. kappa=0 is exactly uniform."""
    if priorities.size == 0:
        raise LearnerError("empty buffer")
    if np.any(priorities <= 0) or not np.all(np.isfinite(priorities)):
        raise LearnerError("priorities must be positive and finite")
    if kappa == 0.0:
        return np.full(priorities.size, 1.0 / priorities.size)
    scaled = priorities**kappa
    return scaled / scaled.sum()


class ReplayBuffer:
    """Sliding window over the most recent episode batches, with priorities."""

    def __init__(self, max_batches: int = 4):
        if max_batches < 1:
            raise LearnerError("need at least one episode batch")
        self.max_batches = max_batches
        self._batches: List[List[Transition]] = []
        self._flat: List[Transition] = []
        self._priorities = np.zeros(0)

    def __len__(self) -> int:
        return len(self._flat)

    @property
    def priorities(self) -> np.ndarray:
        return self._priorities

    def add_batch(self, transitions: Sequence[Transition]) -> None:
        if not transitions:
            return
        self._batches.append(list(transitions))
        if len(self._batches) > self.max_batches:
            self._batches.pop(0)
        self._flat = [t for batch in self._batches for t in batch]
        self._priorities = np.array([t.risk for t in self._flat])

    def update_priority(self, index: int, priority: float) -> None:
        if not (0 <= index < len(self._flat)):
            raise LearnerError("priority index out of range")
        if priority <= 0 or not math.isfinite(priority):
            raise LearnerError("priorities must be positive and finite")
        self._priorities[index] = priority
        self._flat[index].risk = priority

    def get(self, indices: Sequence[int]) -> List[Transition]:
        return [self._flat[i] for i in indices]

    def sample(
        self, size: int, rng: np.random.Generator, kappa: float, iota: float
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Priority-proportional indices plus max-normalized importance weights."""
        probs = sampling_probabilities(self._priorities, kappa)
        indices = rng.choice(len(self._flat), size=size, replace=True, p=probs)
        weights = (len(self._flat) * probs[indices]) ** (-iota)
        weights = weights / weights.max()
        return indices, weights


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_init(n: int) -> AdamState:
    return AdamState(m=np.zeros(n), v=np.zeros(n))


def adam_step(
    values: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient")
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    mhat = state.m / (1.0 - beta1**state.step)
    vhat = state.v / (1.0 - beta2**state.step)
    values -= lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    lr_task: float = 3e-4
    lr_safe: float = 2e-3
    batch_size: int = 256
    epochs: int = 4
    vf_coef: float = 0.5
    ent_coef: float = 0.02
    ent_coef_safe: float = 0.06
    ent_scale_end: float = 1.0  # entropy coefficients decay linearly to this factor
    huber_delta: float = 5.0  # value-error scale beyond which the loss turns linear
    explore_eps_start: float = 0.0  # uniform mix into the rollout behavior policy
    explore_eps_end: float = 0.0
    norm_cap: float = P.DEFAULT_NORM_CAP
    replay_batches: int = 4
    kappa: float = 1.0
    iota: float = 0.5
    dqn_batch: int = 64
    dqn_buffer: int = 20000
    dqn_target_sync: int = 200
    dqn_warmup: int = 500
    dqn_eps_start: float = 1.0
    dqn_eps_end: float = 0.05
    dqn_eps_frac: float = 0.6
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints

    def to_dict(self) -> Dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: Dict) -> "TrainConfig":
        return cls(**d)


def _gather(transitions: List[Transition]) -> Dict[str, np.ndarray]:
    n_nodes = transitions[0].nodes.shape[0]
    if any(t.nodes.shape[0] != n_nodes for t in transitions):
        raise LearnerError("mixed participant counts in one batch")
    return {
        "nodes": np.stack([t.nodes for t in transitions]),
        "adj": np.stack([t.adj for t in transitions]),
        "ego": np.array([t.ego for t in transitions]),
        "actions": np.array([t.action for t in transitions]),
        "masks": np.stack([t.mask for t in transitions]),
        "alpha": np.array([t.alpha for t in transitions]),
        "logp_task": np.array([t.logp_task for t in transitions]),
        "logp_safe": np.array([t.logp_safe for t in transitions]),
        "adv_task": np.array([t.adv_task for t in transitions]),
        "adv_safe": np.array([t.adv_safe for t in transitions]),
        "ret_task": np.array([t.ret_task for t in transitions]),
        "ret_safe": np.array([t.ret_safe for t in transitions]),
    }


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def surrogate_loss_grad(
    params: P.ParamSet,
    spec: P.ApproximatorSpec,
    nodes: np.ndarray,
    adj: np.ndarray,
    ego: np.ndarray,
    extra: Optional[np.ndarray],
    actions: np.ndarray,
    masks: np.ndarray,
    old_logp: np.ndarray,
    adv: np.ndarray,
    returns: np.ndarray,
    coeff: np.ndarray,
    clip_eps: float,
    vf_coef: float,
    ent_coef: float,
    huber_delta: float = 5.0,
) -> Tuple[float, np.ndarray, Dict[str, float]]:
    """Weighted clipped-surrogate loss with value and entropy terms.

    Every per-sample term scales with coeff, so a zero coefficient removes
    that sample from the gradient exactly. The value term is a Huber loss:
    early returns are two orders larger than policy terms, and a quadratic
    penalty there lets value error steer the shared trunk. Returns
    (loss, flat grad, stats).
    """
    b = len(actions)
    rows = np.arange(b)
    logits, values, cache = P.forward_batch(params, spec, nodes, adj, ego, extra)
    logp_all = P.masked_log_softmax(logits, masks)
    probs = P.masked_softmax(logits, masks)
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - old_logp)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    surr = np.minimum(unclipped, clipped)
    pol_loss = -float(np.mean(coeff * surr))
    verr = values - returns
    quad = np.abs(verr) <= huber_delta
    hub = np.where(
        quad, 0.5 * verr * verr, huber_delta * (np.abs(verr) - 0.5 * huber_delta)
    )
    v_loss = vf_coef * float(np.mean(coeff * hub))
    lp_safe = np.where(masks, logp_all, 0.0)
    entropy = -(probs * lp_safe).sum(axis=1)
    ent_loss = -ent_coef * float(np.mean(coeff * entropy))
    loss = pol_loss + v_loss + ent_loss

    use_unclipped = unclipped <= clipped
    dsurr_dlp = np.where(use_unclipped, adv * ratio, 0.0)
    upstream_pol = -(coeff * dsurr_dlp) / b
    onehot = np.zeros_like(probs)
    onehot[rows, actions] = 1.0
    dlogits = upstream_pol[:, None] * (onehot - probs)
    dent_dlogits = np.where(masks, -probs * (lp_safe + entropy[:, None]), 0.0)
    dlogits += (-(ent_coef * coeff) / b)[:, None] * dent_dlogits
    dvalues = vf_coef * coeff * np.clip(verr, -huber_delta, huber_delta) / b
    grad = P.backward_batch(params, spec, cache, dlogits, dvalues)
    stats = {
        "loss": loss,
        "pol_loss": pol_loss,
        "v_loss": v_loss,
        "entropy": float(np.mean(entropy)),
        "clip_frac": float(np.mean(~use_unclipped)),
    }
    return loss, grad, stats


def q_values_from(logits: np.ndarray, values: np.ndarray, dueling: bool) -> np.ndarray:
    if dueling:
        return values[:, None] + logits - logits.mean(axis=1, keepdims=True)
    return logits


def q_loss_grad(
    params: P.ParamSet,
    spec: P.ApproximatorSpec,
    nodes: np.ndarray,
    adj: np.ndarray,
    ego: np.ndarray,
    actions: np.ndarray,
    targets: np.ndarray,
    dueling: bool,
) -> Tuple[float, np.ndarray]:
    """Mean squared TD error on the chosen actions' Q values."""
    b = len(actions)
    rows = np.arange(b)
    logits, values, cache = P.forward_batch(params, spec, nodes, adj, ego, None)
    q = q_values_from(logits, values, dueling)
    err = q[rows, actions] - targets
    loss = float(np.mean(err * err))
    dqa = 2.0 * err / b
    dq = np.zeros_like(q)
    dq[rows, actions] = dqa
    if dueling:
        dlogits = dq - dq.sum(axis=1, keepdims=True) / q.shape[1]
        dvalues = dq.sum(axis=1)
    else:
        dlogits = dq
        dvalues = np.zeros(b)
    grad = P.backward_batch(params, spec, cache, dlogits, dvalues)
    return loss, grad


def _stream_minibatch(
    params: P.ParamSet,
    spec: P.ApproximatorSpec,
    opt: AdamState,
    batch: Dict[str, np.ndarray],
    extra: Optional[np.ndarray],
    coeff: np.ndarray,
    adv_key: str,
    ret_key: str,
    logp_key: str,
    lr: float,
    cfg: TrainConfig,
    ent_coef: Optional[float] = None,
) -> Dict[str, float]:
    adv = normalize_advantages(batch[adv_key])
    _, grad, stats = surrogate_loss_grad(
        params,
        spec,
        batch["nodes"],
        batch["adj"],
        batch["ego"],
        extra,
        batch["actions"],
        batch["masks"],
        batch[logp_key],
        adv,
        batch[ret_key],
        coeff,
        cfg.clip_eps,
        cfg.vf_coef,
        cfg.ent_coef if ent_coef is None else ent_coef,
        cfg.huber_delta,
    )
    adam_step(params.values, grad, opt, lr)
    P.project(params)
    if not np.all(np.isfinite(params.values)):
        raise NumericalError("parameters diverged")
    stats["grad_norm"] = float(np.linalg.norm(grad))
    return stats


def drs_update(
    buffer: ReplayBuffer,
    pair: P.PolicyPair,
    opt_task: AdamState,
    opt_safe: AdamState,
    cfg: TrainConfig,
    rng: np.random.Generator,
    update_safety: bool = True,
) -> Dict[str, float]:
    """One round of prioritized minibatch updates over the buffer."""
    n = len(buffer)
    if n == 0:
        raise LearnerError("cannot update from an empty buffer")
    stats: Dict[str, float] = {}
    n_minibatches = cfg.epochs * max(1, math.ceil(n / cfg.batch_size))
    size = min(cfg.batch_size, n)
    for _ in range(n_minibatches):
        indices, weights = buffer.sample(size, rng, cfg.kappa, cfg.iota)
        batch = _gather(buffer.get(indices))
        coeff_task = weights * (1.0 - batch["alpha"])
        stats = _stream_minibatch(
            pair.task,
            pair.task_spec,
            opt_task,
            batch,
            None,
            coeff_task,
            "adv_task",
            "ret_task",
            "logp_task",
            cfg.lr_task,
            cfg,
        )
        if update_safety:
            # the safety stream conditions on the freshly updated task logits
            task_logits, _, _ = P.forward_batch(
                pair.task, pair.task_spec, batch["nodes"], batch["adj"], batch["ego"], None
            )
            coeff_safe = weights * batch["alpha"]
            safe_stats = _stream_minibatch(
                pair.safe,
                pair.safe_spec,
                opt_safe,
                batch,
                task_logits,
                coeff_safe,
                "adv_safe",
                "ret_safe",
                "logp_safe",
                cfg.lr_safe,
                cfg,
                ent_coef=cfg.ent_coef_safe,
            )
            stats.update({f"safe_{k}": v for k, v in safe_stats.items()})
    stats["task_norm"] = pair.task.norm
    stats["safe_norm"] = pair.safe.norm
    return stats


def cppo_update(
    buffer: ReplayBuffer,
    params: P.ParamSet,
    spec: P.ApproximatorSpec,
    opt: AdamState,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> Dict[str, float]:
    """Baseline update: uniform replay, task stream only, same code path."""
    n = len(buffer)
    if n == 0:
        raise LearnerError("cannot update from an empty buffer")
    stats: Dict[str, float] = {}
    n_minibatches = cfg.epochs * max(1, math.ceil(n / cfg.batch_size))
    size = min(cfg.batch_size, n)
    zeros_alpha = 0.0
    for _ in range(n_minibatches):
        indices, weights = buffer.sample(size, rng, 0.0, cfg.iota)
        batch = _gather(buffer.get(indices))
        coeff = weights * (1.0 - np.full(len(indices), zeros_alpha))
        stats = _stream_minibatch(
            params,
            spec,
            opt,
            batch,
            None,
            coeff,
            "adv_task",
            "ret_task",
            "logp_task",
            cfg.lr_task,
            cfg,
        )
    stats["task_norm"] = params.norm
    return stats


class RingReplay:
    """Fixed-capacity uniform replay for the Q-learning baselines."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: List[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def add(self, t: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._next] = t
        self._next = (self._next + 1) % self.capacity

    def sample(self, size: int, rng: np.random.Generator) -> List[Transition]:
        idx = rng.integers(0, len(self._items), size=size)
        return [self._items[i] for i in idx]


def dqn_update(
    batch: List[Transition],
    params: P.ParamSet,
    target: P.ParamSet,
    spec: P.ApproximatorSpec,
    opt: AdamState,
    cfg: TrainConfig,
    double: bool,
    dueling: bool,
) -> float:
    """One TD step on the task reward. Targets max over feasible actions only."""
    arrays = _gather(batch)
    next_nodes = np.stack([t.next_nodes for t in batch])
    next_adj = np.stack([t.next_adj for t in batch])
    next_masks = np.stack([t.next_mask for t in batch])
    rewards = np.array([t.r_task for t in batch])
    dones = np.array([float(t.done) for t in batch])
    t_logits, t_values, _ = P.forward_batch(target, spec, next_nodes, next_adj, arrays["ego"], None)
    q_next_target = q_values_from(t_logits, t_values, dueling)
    if double:
        o_logits, o_values, _ = P.forward_batch(params, spec, next_nodes, next_adj, arrays["ego"], None)
        q_next_online = q_values_from(o_logits, o_values, dueling)
        best = np.where(next_masks, q_next_online, -np.inf).argmax(axis=1)
        next_q = q_next_target[np.arange(len(batch)), best]
    else:
        next_q = np.where(next_masks, q_next_target, -np.inf).max(axis=1)
    targets = rewards + cfg.gamma * next_q * (1.0 - dones)
    loss, grad = q_loss_grad(
        params, spec, arrays["nodes"], arrays["adj"], arrays["ego"], arrays["actions"], targets, dueling
    )
    adam_step(params.values, grad, opt, cfg.lr_task)
    if not np.all(np.isfinite(params.values)):
        raise NumericalError("parameters diverged")
    return loss


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class EpisodeResult:
    seed: int
    steps: int
    outcome: str
    transitions: List[List[Transition]]  # one stream per controlled vehicle
    return_task: float
    return_safe: float
    mean_risk: float
    alpha_high_fraction: float
    collisions: int
    trajectory: List[Dict] = field(default_factory=list)


ActorFn = Callable[
    [W.WorldState, int, np.ndarray, np.ndarray, int, np.ndarray, float],
    Tuple[int, Dict[str, float]],
]


def participant_ids(world: W.WorldState) -> List[str]:
    counts = {W.Kind.AV: 0, W.Kind.BV: 0, W.Kind.PED: 0}
    names = {W.Kind.AV: "av", W.Kind.BV: "bv", W.Kind.PED: "ped"}
    ids = []
    for p in world.participants:
        ids.append(f"{names[p.kind]}{counts[p.kind]}")
        counts[p.kind] += 1
    return ids


def rollout_episode(
    scenario: W.ScenarioSpec,
    actor: ActorFn,
    risk_cfg: R.RiskConfig,
    reward_cfg: RW.RewardConfig,
    episode_index: int = 0,
    collect_trajectory: bool = False,
) -> EpisodeResult:
    """Run one episode and build per-vehicle transition streams.

    The actor maps (world, av_index, nodes, adj, ego, mask, alpha) to an
    action index plus a record of log-probs and value estimates. Trajectory
    rows describe each visited state together with the controls that
    produced it (zeros on the first row).
    """
    world = W.instantiate_scenario(scenario)
    ids = participant_ids(world)
    per_av: List[List[Transition]] = [[] for _ in world.av_indices]
    risk_sum = 0.0
    high = 0
    rows: List[Dict] = []
    steps = 0
    status = W.check_termination(world)
    while True:
        reports = R.assess(world, risk_cfg)
        scene = R.scene_risk(reports)
        if collect_trajectory:
            flags = "|".join(sorted(world.events_active))
            for idx, (pid, p) in enumerate(zip(ids, world.participants)):
                ctrl = world.last_controls.get(idx, (0.0, 0.0))
                rows.append(
                    {
                        "episode": episode_index,
                        "t": world.t,
                        "participant_id": pid,
                        "x": p.x,
                        "y": p.y,
                        "theta": p.theta,
                        "v": p.v,
                        "a": ctrl[0],
                        "delta": ctrl[1],
                        "event_flags": flags,
                        "risk": scene,
                    }
                )
        if status.done:
            break
        if steps >= world.horizon + 1:
            raise LearnerError("episode failed to terminate")
        alpha = R.safety_weight(scene, risk_cfg)
        risk_sum += scene
        if scene >= risk_cfg.tau_risk:
            high += 1
        pre = [
            (W.ego_graph(world, i), P.mask_actions(world, i, risk_cfg))
            for i in world.av_indices
        ]
        actions: Dict[int, Tuple[float, float]] = {}
        chosen: List[Tuple[int, Dict[str, float]]] = []
        for i in world.av_indices:
            (nodes, adj, ego), mask = pre[i]
            act_idx, record = actor(world, i, nodes, adj, ego, mask, alpha)
            if not mask[act_idx]:
                raise LearnerError("actor chose a masked action")
            actions[i] = (float(P.ACTION_TABLE[act_idx, 0]), float(P.ACTION_TABLE[act_idx, 1]))
            chosen.append((act_idx, record))
        W.step_world(world, actions)
        status = W.check_termination(world)
        steps += 1
        collided_pair = status.collided_pair if status.outcome == W.Outcome.COLLISION else None
        terminal = status.outcome in (W.Outcome.COLLISION, W.Outcome.SUCCESS)
        post = [
            (W.ego_graph(world, i), P.mask_actions(world, i, risk_cfg))
            for i in world.av_indices
        ]
        for i in world.av_indices:
            act_idx, record = chosen[i]
            involved = collided_pair is not None and i in collided_pair
            r_task, r_safe = RW.compute_rewards(world, i, involved, actions[i], reward_cfg)
            (nodes, adj, ego), mask = pre[i]
            (n_nodes, n_adj, _), n_mask = post[i]
            per_av[i].append(
                Transition(
                    nodes=nodes,
                    adj=adj,
                    ego=ego,
                    action=act_idx,
                    mask=mask,
                    r_task=r_task,
                    r_safe=r_safe,
                    next_nodes=n_nodes,
                    next_adj=n_adj,
                    next_mask=n_mask,
                    risk=scene,
                    alpha=alpha,
                    logp_task=record.get("logp_task", 0.0),
                    logp_safe=record.get("logp_safe", 0.0),
                    value_task=record.get("value_task", 0.0),
                    value_safe=record.get("value_safe", 0.0),
                    done=terminal,
                )
            )
    if collect_trajectory:
        for row in rows:
            row["outcome"] = status.outcome
    returns_task = [sum(t.r_task for t in s) for s in per_av if s]
    returns_safe = [sum(t.r_safe for t in s) for s in per_av if s]
    return EpisodeResult(
        seed=scenario.seed,
        steps=steps,
        outcome=status.outcome,
        transitions=per_av,
        return_task=float(np.mean(returns_task)) if returns_task else 0.0,
        return_safe=float(np.mean(returns_safe)) if returns_safe else 0.0,
        mean_risk=risk_sum / max(steps, 1),
        alpha_high_fraction=high / max(steps, 1),
        collisions=1 if status.outcome == W.Outcome.COLLISION else 0,
        trajectory=rows,
    )


BootstrapFn = Callable[[np.ndarray, np.ndarray, int], Tuple[float, float]]


def finalize_advantages(
    episode: EpisodeResult,
    gamma: float,
    lam: float,
    bootstrap: Optional[BootstrapFn] = None,
) -> None:
    """Fill adv/return fields of both streams for every vehicle's transitions."""
    for stream in episode.transitions:
        if not stream:
            continue
        t_len = len(stream)
        dones = np.array([t.done for t in stream])
        v_task = np.array([t.value_task for t in stream] + [0.0])
        v_safe = np.array([t.value_safe for t in stream] + [0.0])
        if not dones[-1] and bootstrap is not None:
            last = stream[-1]
            v_task[t_len], v_safe[t_len] = bootstrap(last.next_nodes, last.next_adj, last.ego)
        r_task = np.array([t.r_task for t in stream])
        r_safe = np.array([t.r_safe for t in stream])
        adv_t, ret_t = gae_advantages(r_task, v_task, dones, gamma, lam)
        adv_s, ret_s = gae_advantages(r_safe, v_safe, dones, gamma, lam)
        for k, t in enumerate(stream):
            t.adv_task = float(adv_t[k])
            t.ret_task = float(ret_t[k])
            t.adv_safe = float(adv_s[k])
            t.ret_safe = float(ret_s[k])


# ---------------------------------------------------------------------------
# actors


def drs_actor(
    pair: P.PolicyPair,
    rng: Optional[np.random.Generator],
    greedy: bool,
    explore_eps: float = 0.0,
) -> ActorFn:
    def act(world, av_idx, nodes, adj, ego, mask, alpha):
        choice = P.policy_step(
            pair, nodes, adj, ego, mask, alpha, rng=rng, greedy=greedy,
            explore_eps=explore_eps,
        )
        return choice.index, {
            "logp_task": choice.logp_task,
            "logp_safe": choice.logp_safe,
            "value_task": choice.value_task,
            "value_safe": choice.value_safe,
        }

    return act


def task_actor(
    params: P.ParamSet,
    spec: P.ApproximatorSpec,
    rng: Optional[np.random.Generator],
    greedy: bool,
    explore_eps: float = 0.0,
) -> ActorFn:
    """Single-stream actor for the on-policy baseline. Ignores alpha."""

    def act(world, av_idx, nodes, adj, ego, mask, alpha):
        logits, value = P.forward_single(params, spec, nodes, adj, ego)
        probs = P.masked_softmax(logits, mask)
        index = (
            P.greedy_action(probs)
            if greedy
            else P.sample_action(P.explore_mix(probs, mask, explore_eps), rng)
        )
        return index, {
            "logp_task": float(np.log(probs[index])),
            "logp_safe": 0.0,
            "value_task": value,
            "value_safe": 0.0,
        }

    return act


def q_actor(
    params: P.ParamSet,
    spec: P.ApproximatorSpec,
    rng: Optional[np.random.Generator],
    epsilon: float,
    dueling: bool,
) -> ActorFn:
    def act(world, av_idx, nodes, adj, ego, mask, alpha):
        if epsilon > 0.0 and rng is not None and rng.random() < epsilon:
            index = int(rng.choice(np.flatnonzero(mask)))
        else:
            logits, value = P.forward_single(params, spec, nodes, adj, ego)
            q = q_values_from(logits[None], np.array([value]), dueling)[0]
            index = int(np.where(mask, q, -np.inf).argmax())
        return index, {}

    return act


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    algo: str
    scenario_id: str
    seed: int
    episode_rows: List[Dict]
    checkpoint_path: Optional[str]
    pair: Optional[P.PolicyPair] = None
    params: Optional[P.ParamSet] = None  # single-stream algorithms


def episode_seeds(seed: int, count: int) -> np.ndarray:
    return np.random.SeedSequence([seed, 2]).generate_state(count, dtype=np.uint64)


def make_scenario(
    scenario_id: str,
    seed: int,
    horizon: int = 200,
    n_avs: int = 2,
    ranges: Optional[Dict] = None,
    dt: float = W.DT,
) -> W.ScenarioSpec:
    return W.ScenarioSpec(
        scenario_id=scenario_id,
        seed=seed,
        n_avs=n_avs,
        horizon=horizon,
        dt=dt,
        ranges=dict(ranges or {}),
    )


def _episode_row(ep: int, result: EpisodeResult) -> Dict:
    return {
        "episode": ep,
        "seed": result.seed,
        "return_task": result.return_task,
        "return_safe": result.return_safe,
        "collisions": result.collisions,
        "mean_risk": result.mean_risk,
        "alpha_high_fraction": result.alpha_high_fraction,
        "outcome": result.outcome,
        "steps": result.steps,
    }


def _epsilon_schedule(cfg: TrainConfig, episode: int, episodes: int) -> float:
    decay_span = max(1, int(cfg.dqn_eps_frac * episodes))
    frac = min(episode / decay_span, 1.0)
    return cfg.dqn_eps_start + (cfg.dqn_eps_end - cfg.dqn_eps_start) * frac


def _explore_schedule(cfg: TrainConfig, episode: int, episodes: int) -> float:
    frac = episode / max(1, episodes - 1)
    return cfg.explore_eps_start + (cfg.explore_eps_end - cfg.explore_eps_start) * frac


def _ent_config(cfg: TrainConfig, episode: int, episodes: int) -> TrainConfig:
    """Per-episode config with annealed entropy coefficients. Early episodes
    keep the full bonus for exploration; by the end the surrogate sharpens
    the distribution onto the highest-advantage action."""
    frac = episode / max(1, episodes - 1)
    scale = 1.0 + (cfg.ent_scale_end - 1.0) * frac
    if scale == 1.0:
        return cfg
    return replace(cfg, ent_coef=cfg.ent_coef * scale, ent_coef_safe=cfg.ent_coef_safe * scale)


def train(
    algo: str,
    scenario_id: str,
    episodes: int,
    seed: int,
    train_cfg: Optional[TrainConfig] = None,
    risk_cfg: Optional[R.RiskConfig] = None,
    reward_cfg: Optional[RW.RewardConfig] = None,
    out_dir: Optional[str] = None,
    horizon: int = 200,
    n_avs: int = 2,
    ranges: Optional[Dict] = None,
    on_update: Optional[Callable[[Dict[str, float]], None]] = None,
    on_episode: Optional[Callable[[int, EpisodeResult], None]] = None,
) -> TrainResult:
    """Train one algorithm on one scenario. Deterministic in (algo, args, seed)."""
    if algo not in ALGOS:
        raise LearnerError(f"unknown algorithm {algo!r}")
    cfg = train_cfg or TrainConfig()
    rcfg = risk_cfg or R.RiskConfig()
    wcfg = reward_cfg or RW.RewardConfig(mode=RW.SCENARIO_MODES[scenario_id])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    scen_seeds = episode_seeds(seed, episodes)
    rows: List[Dict] = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    final_path = os.path.join(out_dir, "checkpoint.npz") if out_dir else None

    if algo in PPO_FAMILY:
        return _train_ppo_family(
            algo, scenario_id, episodes, seed, cfg, rcfg, wcfg, rng, scen_seeds,
            rows, out_dir, final_path, horizon, n_avs, ranges, on_update, on_episode,
        )
    return _train_dqn_family(
        algo, scenario_id, episodes, seed, cfg, rcfg, wcfg, rng, scen_seeds,
        rows, out_dir, final_path, horizon, n_avs, ranges, on_update, on_episode,
    )


def _train_ppo_family(
    algo, scenario_id, episodes, seed, cfg, rcfg, wcfg, rng, scen_seeds,
    rows, out_dir, final_path, horizon, n_avs, ranges, on_update, on_episode,
) -> TrainResult:
    buffer = ReplayBuffer(cfg.replay_batches)
    if algo == ALGO_DRS:
        pair = P.PolicyPair.fresh(seed=seed, cap=cfg.norm_cap)
        opt_task = adam_init(pair.task.values.size)
        opt_safe = adam_init(pair.safe.values.size)
        params = pair.task
        spec = pair.task_spec

        def bootstrap(nodes, adj, ego):
            t_logits, tv = P.forward_single(pair.task, pair.task_spec, nodes, adj, ego)
            _, sv = P.forward_single(pair.safe, pair.safe_spec, nodes, adj, ego, extra=t_logits)
            return tv, sv

        def make_actor(eps):
            return drs_actor(pair, rng, greedy=False, explore_eps=eps)
    else:
        pair = None
        params = P.init_params(P.TASK_SPEC, cap=cfg.norm_cap, seed=seed)
        spec = P.TASK_SPEC
        opt_task = adam_init(params.values.size)
        opt_safe = None

        def bootstrap(nodes, adj, ego):
            _, tv = P.forward_single(params, spec, nodes, adj, ego)
            return tv, 0.0

        def make_actor(eps):
            return task_actor(params, spec, rng, greedy=False, explore_eps=eps)

    for ep in range(episodes):
        actor = make_actor(_explore_schedule(cfg, ep, episodes))
        scenario = make_scenario(scenario_id, int(scen_seeds[ep]), horizon, n_avs, ranges)
        result = rollout_episode(scenario, actor, rcfg, wcfg, episode_index=ep)
        finalize_advantages(result, cfg.gamma, cfg.gae_lambda, bootstrap)
        buffer.add_batch([t for stream in result.transitions for t in stream])
        cfg_ep = _ent_config(cfg, ep, episodes)
        if algo == ALGO_DRS:
            stats = drs_update(buffer, pair, opt_task, opt_safe, cfg_ep, rng)
        else:
            stats = cppo_update(buffer, params, spec, opt_task, cfg_ep, rng)
        if on_update:
            on_update(stats)
        rows.append(_episode_row(ep, result))
        if on_episode:
            on_episode(ep, result)
        if out_dir and cfg.checkpoint_every and (ep + 1) % cfg.checkpoint_every == 0:
            _save(algo, os.path.join(out_dir, f"checkpoint_ep{ep + 1}.npz"), params, spec, pair, scenario_id, seed, ep + 1)
    if final_path:
        _save(algo, final_path, params, spec, pair, scenario_id, seed, episodes)
    return TrainResult(
        algo=algo,
        scenario_id=scenario_id,
        seed=seed,
        episode_rows=rows,
        checkpoint_path=final_path,
        pair=pair,
        params=None if algo == ALGO_DRS else params,
    )


def _train_dqn_family(
    algo, scenario_id, episodes, seed, cfg, rcfg, wcfg, rng, scen_seeds,
    rows, out_dir, final_path, horizon, n_avs, ranges, on_update, on_episode,
) -> TrainResult:
    dueling = algo == ALGO_CD3QN
    double = algo == ALGO_CD3QN
    params = P.init_params(P.TASK_SPEC, cap=math.inf, seed=seed)
    target = params.copy()
    opt = adam_init(params.values.size)
    ring = RingReplay(cfg.dqn_buffer)
    updates = 0
    for ep in range(episodes):
        epsilon = _epsilon_schedule(cfg, ep, episodes)
        actor = q_actor(params, P.TASK_SPEC, rng, epsilon, dueling)
        scenario = make_scenario(scenario_id, int(scen_seeds[ep]), horizon, n_avs, ranges)
        result = rollout_episode(scenario, actor, rcfg, wcfg, episode_index=ep)
        for stream in result.transitions:
            for t in stream:
                ring.add(t)
        loss = 0.0
        for _ in range(result.steps):
            if len(ring) < cfg.dqn_warmup:
                continue
            batch = ring.sample(cfg.dqn_batch, rng)
            loss = dqn_update(batch, params, target, P.TASK_SPEC, opt, cfg, double, dueling)
            updates += 1
            if updates % cfg.dqn_target_sync == 0:
                target = params.copy()
        if on_update:
            on_update({"loss": loss, "epsilon": epsilon, "updates": float(updates)})
        rows.append(_episode_row(ep, result))
        if on_episode:
            on_episode(ep, result)
    if final_path:
        _save(algo, final_path, params, P.TASK_SPEC, None, scenario_id, seed, episodes)
    return TrainResult(
        algo=algo,
        scenario_id=scenario_id,
        seed=seed,
        episode_rows=rows,
        checkpoint_path=final_path,
        params=params,
    )


def _save(algo, path, params, spec, pair, scenario_id, seed, episodes) -> None:
    meta = {"scenario": scenario_id, "seed": seed, "episodes": episodes}
    if pair is not None:
        P.save_checkpoint(
            path, algo, pair.task, pair.task_spec, pair.safe, pair.safe_spec, meta
        )
    else:
        P.save_checkpoint(path, algo, params, spec, meta=meta)


def eval_actor_from_checkpoint(ckpt: P.Checkpoint) -> ActorFn:
    """Greedy actor for a loaded checkpoint, dispatched on its algorithm."""
    if ckpt.algo == ALGO_DRS:
        return drs_actor(ckpt.pair(), None, greedy=True)
    if ckpt.algo == ALGO_CPPO:
        return task_actor(ckpt.task, ckpt.task_spec, None, greedy=True)
    if ckpt.algo in (ALGO_CDQN, ALGO_CD3QN):
        return q_actor(ckpt.task, ckpt.task_spec, None, 0.0, ckpt.algo == ALGO_CD3QN)
    raise LearnerError(f"unknown algorithm {ckpt.algo!r} in checkpoint")


# ---------------------------------------------------------------------------
# stability diagnostics


@dataclass
class DiagnosticsReport:
    beta_hat: float
    correction_ratio: float
    lyapunov: np.ndarray
    kl_trace: np.ndarray
    decrease_fraction: float

    def is_finite(self) -> bool:
        return bool(
            np.isfinite(self.beta_hat)
            and np.isfinite(self.correction_ratio)
            and np.all(np.isfinite(self.lyapunov))
            and np.all(np.isfinite(self.kl_trace))
        )


def _stream_dists(
    pair: P.PolicyPair, nodes: np.ndarray, adj: np.ndarray, ego: int, mask: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    t_logits, _ = P.forward_single(pair.task, pair.task_spec, nodes, adj, ego)
    s_logits, _ = P.forward_single(pair.safe, pair.safe_spec, nodes, adj, ego, extra=t_logits)
    return P.masked_softmax(t_logits, mask), P.masked_softmax(s_logits, mask)


def lipschitz_estimate(
    pair: P.PolicyPair,
    states: Sequence[Tuple[np.ndarray, np.ndarray, int, np.ndarray]],
    rng: np.random.Generator,
    n_perturbations: int = 8,
    sigma: float = 1e-3,
) -> float:
    """Empirical Lipschitz bound of the safety stream wrt node features."""
    beta = 0.0
    for nodes, adj, ego, mask in states:
        _, base = _stream_dists(pair, nodes, adj, ego, mask)
        for _ in range(n_perturbations):
            noise = rng.normal(0.0, sigma, size=nodes.shape)
            _, moved = _stream_dists(pair, nodes + noise, adj, ego, mask)
            dist = float(np.linalg.norm(moved - base))
            step = float(np.linalg.norm(noise))
            if step > 0:
                beta = max(beta, dist / step)
    return beta


def correction_ratio(
    pair: P.PolicyPair,
    nodes: np.ndarray,
    adj: np.ndarray,
    ego: int,
    mask: np.ndarray,
    fd_step: float = 1e-4,
) -> float:
    """Residual size relative to the task policy's input sensitivity.

    The denominator is the Frobenius norm of the finite-difference Jacobian
    of the task distribution wrt every node feature. A zero numerator gives
    a zero ratio regardless of the denominator.
    """
    t_probs, s_probs = _stream_dists(pair, nodes, adj, ego, mask)
    num = float(np.linalg.norm(s_probs - t_probs))
    if num == 0.0:
        return 0.0
    sq_sum = 0.0
    flat = nodes.ravel()
    for k in range(flat.size):
        bumped = flat.copy()
        bumped[k] += fd_step
        lo = flat.copy()
        lo[k] -= fd_step
        hi_logits, _ = P.forward_single(pair.task, pair.task_spec, bumped.reshape(nodes.shape), adj, ego)
        lo_logits, _ = P.forward_single(pair.task, pair.task_spec, lo.reshape(nodes.shape), adj, ego)
        hi_p = P.masked_softmax(hi_logits, mask)
        lo_p = P.masked_softmax(lo_logits, mask)
        col = (hi_p - lo_p) / (2.0 * fd_step)
        sq_sum += float(np.dot(col, col))
    den = math.sqrt(sq_sum)
    if den == 0.0:
        return math.inf
    return num / den


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) over the support of p. Exactly zero when p is q elementwise."""
    support = p > 0.0
    if np.any(q[support] <= 0.0):
        return math.inf
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def lyapunov_trace(
    pair: P.PolicyPair,
    stream: Sequence[Transition],
    gamma: float,
    lambda_kl: float = 0.1,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-step candidate V_t = Q_safe(s_t,a_t) + lambda_kl*KL(hybrid || task)."""
    values = np.zeros(len(stream))
    kls = np.zeros(len(stream))
    for k, t in enumerate(stream):
        t_probs, s_probs = _stream_dists(pair, t.nodes, t.adj, t.ego, t.mask)
        h_probs = P.hybrid(t_probs, s_probs, t.alpha)
        kls[k] = kl_divergence(h_probs, t_probs)
        if t.done:
            v_next = 0.0
        else:
            t_logits_n, _ = P.forward_single(pair.task, pair.task_spec, t.next_nodes, t.next_adj, t.ego)
            _, v_next = P.forward_single(
                pair.safe, pair.safe_spec, t.next_nodes, t.next_adj, t.ego, extra=t_logits_n
            )
        q_safe = t.r_safe + gamma * v_next
        values[k] = q_safe + lambda_kl * kls[k]
    return values, kls


def stability_report(
    pair: P.PolicyPair,
    episode: EpisodeResult,
    gamma: float,
    rng: np.random.Generator,
    lambda_kl: float = 0.1,
    max_states: int = 24,
    tol: float = 1e-9,
) -> DiagnosticsReport:
    stream = episode.transitions[0]
    if not stream:
        raise LearnerError("empty episode")
    states = [(t.nodes, t.adj, t.ego, t.mask) for t in stream]
    sample = states[:: max(1, len(states) // max_states)][:max_states]
    beta = lipschitz_estimate(pair, sample, rng)
    ratios = [correction_ratio(pair, *s) for s in sample[: max(4, max_states // 4)]]
    values, kls = lyapunov_trace(pair, stream, gamma, lambda_kl)
    if len(values) > 1:
        decreases = np.diff(values) <= tol
        frac = float(np.mean(decreases))
    else:
        frac = 1.0
    return DiagnosticsReport(
        beta_hat=beta,
        correction_ratio=float(max(ratios)),
        lyapunov=values,
        kl_trace=kls,
        decrease_fraction=frac,
    )
