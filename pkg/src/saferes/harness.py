"""Experiment harness: config files, logs, metrics, evaluation, CLI.

Logs are CSV. The trajectory log has one row per (state, participant); the
episode log one row per episode. Summary metrics are always recomputed from
the written logs, never from in-memory shortcuts, so a saved run can be
re-audited byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import statistics
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from saferes import learner as L
from saferes import policy as P
from saferes import rewards as RW
from saferes import risk as R
from saferes import world as W


class HarnessError(Exception):
    pass


# reference (min, max) task returns per scenario for reward normalization;
# measured from converged and all-collision runs of the bundled algorithms
DEFAULT_NORMALIZATION: Dict[str, Tuple[float, float]] = {
    "LVEB": (-40.0, 140.0),
    "OPI": (-50.0, 130.0),
    "RPC": (-65.0, 125.0),
    "IJ": (-55.0, 130.0),
}

EPISODE_COLUMNS = [
    "episode",
    "seed",
    "return_task",
    "return_safe",
    "normalized_return",
    "collisions",
    "mean_risk",
    "alpha_high_fraction",
]

TRAJECTORY_COLUMNS = [
    "episode",
    "t",
    "participant_id",
    "x",
    "y",
    "theta",
    "v",
    "a",
    "delta",
    "event_flags",
    "risk",
    "outcome",
]


def normalized_return(value: float, ref_min: float, ref_max: float) -> float:
    """Affine map onto [0, 1], clipped at the ends."""
    if not (ref_max > ref_min):
        raise HarnessError(f"degenerate normalization reference ({ref_min}, {ref_max})")
    return min(max((value - ref_min) / (ref_max - ref_min), 0.0), 1.0)


@dataclass
class RunConfig:
    algo: str = L.ALGO_DRS
    scenario: str = "LVEB"
    episodes: int = 300
    eval_episodes: int = 100
    seed: int = 0
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    compare_algos: List[str] = field(default_factory=lambda: [L.ALGO_DRS, L.ALGO_CPPO])
    out_dir: str = "runs/latest"
    checkpoint: Optional[str] = None
    horizon: int = 200
    n_avs: int = 2
    ranges: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    normalization: Dict[str, Tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_NORMALIZATION)
    )
    reward_mode: str = "auto"  # auto | avoid | brake
    risk: R.RiskConfig = field(default_factory=R.RiskConfig)
    reward: RW.RewardConfig = field(default_factory=RW.RewardConfig)
    train: L.TrainConfig = field(default_factory=L.TrainConfig)

    def __post_init__(self) -> None:
        if self.algo not in L.ALGOS:
            raise HarnessError(f"unknown algorithm {self.algo!r}")
        if self.scenario not in W.SCENARIOS:
            raise HarnessError(f"unknown scenario {self.scenario!r}")
        if self.reward_mode not in ("auto", RW.MODE_AVOID, RW.MODE_BRAKE):
            raise HarnessError(f"unknown reward mode {self.reward_mode!r}")
        for algo in self.compare_algos:
            if algo not in L.ALGOS:
                raise HarnessError(f"unknown algorithm {algo!r}")

    def effective_reward(self) -> RW.RewardConfig:
        mode = self.reward_mode
        if mode == "auto":
            mode = RW.SCENARIO_MODES[self.scenario]
        d = dict(self.reward.__dict__)
        d["mode"] = mode
        return RW.RewardConfig(**d)

    def norm_ref(self) -> Tuple[float, float]:
        try:
            lo, hi = self.normalization[self.scenario]
        except KeyError:
            raise HarnessError(f"no normalization reference for {self.scenario!r}")
        return float(lo), float(hi)

    def to_dict(self) -> Dict:
        return {
            "algo": self.algo,
            "scenario": self.scenario,
            "episodes": self.episodes,
            "eval_episodes": self.eval_episodes,
            "seed": self.seed,
            "seeds": list(self.seeds),
            "compare_algos": list(self.compare_algos),
            "out_dir": self.out_dir,
            "checkpoint": self.checkpoint,
            "horizon": self.horizon,
            "n_avs": self.n_avs,
            "ranges": {k: [float(v[0]), float(v[1])] for k, v in self.ranges.items()},
            "normalization": {
                k: [float(v[0]), float(v[1])] for k, v in self.normalization.items()
            },
            "reward_mode": self.reward_mode,
            "risk": {k: (dict(v) if isinstance(v, dict) else v) for k, v in self.risk.__dict__.items()},
            "reward": dict(self.reward.__dict__),
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, raw: Dict) -> "RunConfig":
        known = {
            "algo", "scenario", "episodes", "eval_episodes", "seed", "seeds",
            "compare_algos", "out_dir", "checkpoint", "horizon", "n_avs",
            "ranges", "normalization", "reward_mode", "risk", "reward", "train",
        }
        unknown = set(raw) - known
        if unknown:
            raise HarnessError(f"unknown config keys: {sorted(unknown)}")
        kwargs: Dict = {}
        for key in known - {"risk", "reward", "train", "ranges", "normalization", "seeds", "compare_algos"}:
            if key in raw:
                kwargs[key] = raw[key]
        if "seeds" in raw:
            kwargs["seeds"] = [int(s) for s in raw["seeds"]]
        if "compare_algos" in raw:
            kwargs["compare_algos"] = [str(a) for a in raw["compare_algos"]]
        if "ranges" in raw:
            kwargs["ranges"] = {k: (float(v[0]), float(v[1])) for k, v in raw["ranges"].items()}
        if "normalization" in raw:
            norm = dict(DEFAULT_NORMALIZATION)
            norm.update({k: (float(v[0]), float(v[1])) for k, v in raw["normalization"].items()})
            kwargs["normalization"] = norm
        try:
            if "risk" in raw:
                kwargs["risk"] = R.RiskConfig(**raw["risk"])
            if "reward" in raw:
                kwargs["reward"] = RW.RewardConfig(**raw["reward"])
            if "train" in raw:
                kwargs["train"] = L.TrainConfig.from_dict(raw["train"])
        except (TypeError, ValueError) as exc:
            raise HarnessError(f"bad config section: {exc}") from exc
        return cls(**kwargs)


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise HarnessError(f"config root must be a mapping: {path}")
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: str, columns: List[str], rows: List[Dict]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def write_episode_log(path: str, rows: List[Dict], ref: Tuple[float, float]) -> None:
    out = []
    for row in rows:
        r = dict(row)
        r["normalized_return"] = normalized_return(float(r["return_task"]), ref[0], ref[1])
        out.append(r)
    write_csv(path, EPISODE_COLUMNS, out)


def write_trajectory_log(path: str, rows: List[Dict]) -> None:
    write_csv(path, TRAJECTORY_COLUMNS, rows)


@dataclass
class MetricsRow:
    collision_rate: float  # [%]
    avg_speed: float  # [m/s]
    travel_time: float  # [s]
    avg_lat_accel: float  # [m/s^2]
    avg_lon_accel: float  # [m/s^2]
    reward: float  # normalized, [0, 1]

    def to_dict(self) -> Dict[str, float]:
        return dict(self.__dict__)


def compute_metrics(trajectory_csv: str, episode_csv: str) -> MetricsRow:
    """Table metrics recomputed from the two logs alone."""
    outcomes: Dict[int, str] = {}
    durations: Dict[int, float] = {}
    speeds: List[float] = []
    lat: List[float] = []
    lon: List[float] = []
    with open(trajectory_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            ep = int(row["episode"])
            t = float(row["t"])
            outcomes[ep] = row["outcome"]
            durations[ep] = max(durations.get(ep, 0.0), t)
            if row["participant_id"].startswith("av"):
                v = float(row["v"])
                speeds.append(v)
                lat.append(abs(RW.lateral_accel(v, float(row["delta"]))))
                lon.append(abs(float(row["a"])))
    if not outcomes:
        raise HarnessError(f"empty trajectory log: {trajectory_csv}")
    rewards: List[float] = []
    with open(episode_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            rewards.append(float(row["normalized_return"]))
    if not rewards:
        raise HarnessError(f"empty episode log: {episode_csv}")
    n = len(outcomes)
    collisions = sum(1 for o in outcomes.values() if o == W.Outcome.COLLISION)
    return MetricsRow(
        collision_rate=100.0 * collisions / n,
        avg_speed=float(np.mean(speeds)),
        travel_time=float(np.mean(list(durations.values()))),
        avg_lat_accel=float(np.mean(lat)),
        avg_lon_accel=float(np.mean(lon)),
        reward=float(np.mean(rewards)),
    )


def run_evaluation(
    ckpt_path: str,
    cfg: RunConfig,
    out_dir: str,
    eval_seed: Optional[int] = None,
) -> MetricsRow:
    """Greedy rollouts from a checkpoint; metrics recomputed from the logs."""
    ckpt = P.load_checkpoint(ckpt_path)
    actor = L.eval_actor_from_checkpoint(ckpt)
    rcfg = cfg.risk
    wcfg = cfg.effective_reward()
    seed = cfg.seed if eval_seed is None else eval_seed
    scen_seeds = np.random.SeedSequence([seed, 3]).generate_state(
        cfg.eval_episodes, dtype=np.uint64
    )
    os.makedirs(out_dir, exist_ok=True)
    episode_rows: List[Dict] = []
    traj_rows: List[Dict] = []
    for ep in range(cfg.eval_episodes):
        scenario = L.make_scenario(
            cfg.scenario, int(scen_seeds[ep]), cfg.horizon, cfg.n_avs, cfg.ranges
        )
        result = L.rollout_episode(
            scenario, actor, rcfg, wcfg, episode_index=ep, collect_trajectory=True
        )
        episode_rows.append(L._episode_row(ep, result))
        traj_rows.extend(result.trajectory)
    traj_path = os.path.join(out_dir, "eval_trajectory.csv")
    ep_path = os.path.join(out_dir, "eval_episodes.csv")
    write_trajectory_log(traj_path, traj_rows)
    write_episode_log(ep_path, episode_rows, cfg.norm_ref())
    metrics = compute_metrics(traj_path, ep_path)
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump(metrics.to_dict(), fh, indent=2)
    return metrics


def run_training(cfg: RunConfig, out_dir: Optional[str] = None) -> L.TrainResult:
    """Train per config and write the episode log next to the checkpoint."""
    out = out_dir or cfg.out_dir
    result = L.train(
        cfg.algo,
        cfg.scenario,
        cfg.episodes,
        cfg.seed,
        train_cfg=cfg.train,
        risk_cfg=cfg.risk,
        reward_cfg=cfg.effective_reward(),
        out_dir=out,
        horizon=cfg.horizon,
        n_avs=cfg.n_avs,
        ranges=cfg.ranges,
    )
    write_episode_log(os.path.join(out, "train_episodes.csv"), result.episode_rows, cfg.norm_ref())
    save_config(cfg, os.path.join(out, "config.yaml"))
    return result


def run_compare(cfg: RunConfig, out_dir: Optional[str] = None) -> Dict:
    """Train and evaluate each algorithm over the seed list; median summary."""
    out = out_dir or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    rows: List[Dict] = []
    for algo in cfg.compare_algos:
        for seed in cfg.seeds:
            sub = os.path.join(out, f"{algo.replace('-', '_')}_seed{seed}")
            run_cfg = RunConfig.from_dict({**cfg.to_dict(), "algo": algo, "seed": seed, "out_dir": sub})
            result = run_training(run_cfg, sub)
            metrics = run_evaluation(result.checkpoint_path, run_cfg, sub, eval_seed=seed + 777)
            row = {"algo": algo, "seed": seed, **metrics.to_dict()}
            rows.append(row)
    columns = ["algo", "seed"] + list(MetricsRow(0, 0, 0, 0, 0, 0).to_dict().keys())
    write_csv(os.path.join(out, "compare.csv"), columns, rows)
    summary: Dict[str, Dict[str, float]] = {}
    for algo in cfg.compare_algos:
        algo_rows = [r for r in rows if r["algo"] == algo]
        summary[algo] = {
            key: float(statistics.median(r[key] for r in algo_rows))
            for key in MetricsRow(0, 0, 0, 0, 0, 0).to_dict()
        }
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return {"rows": rows, "summary": summary}


def run_diagnostics(cfg: RunConfig, ckpt_path: str, out_dir: Optional[str] = None) -> L.DiagnosticsReport:
    """One greedy episode from a dual-stream checkpoint, stability monitors on it."""
    ckpt = P.load_checkpoint(ckpt_path)
    if ckpt.algo != L.ALGO_DRS:
        raise HarnessError("diagnostics need a dual-stream checkpoint")
    pair = ckpt.pair()
    actor = L.eval_actor_from_checkpoint(ckpt)
    scenario = L.make_scenario(cfg.scenario, cfg.seed, cfg.horizon, cfg.n_avs, cfg.ranges)
    episode = L.rollout_episode(scenario, actor, cfg.risk, cfg.effective_reward())
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    report = L.stability_report(pair, episode, cfg.train.gamma, rng)
    out = out_dir or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    payload = {
        "beta_hat": report.beta_hat,
        "correction_ratio": report.correction_ratio,
        "decrease_fraction": report.decrease_fraction,
        "lyapunov": report.lyapunov.tolist(),
        "kl_trace": report.kl_trace.tolist(),
        "outcome": episode.outcome,
        "steps": episode.steps,
    }
    with open(os.path.join(out, "diagnostics.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    return report


# ---------------------------------------------------------------------------
# command line


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="YAML run config; flags override it")
    sub.add_argument("--scenario", choices=W.SCENARIOS)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--out", dest="out_dir")
    sub.add_argument("--episodes", type=int)
    sub.add_argument("--horizon", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saferes",
        description="Safety-critical driving scenarios with residual-fusion safe RL",
    )
    subs = parser.add_subparsers(dest="mode", required=True)
    p_train = subs.add_parser("train", help="train one algorithm on one scenario")
    _add_common(p_train)
    p_train.add_argument("--algo", choices=L.ALGOS)
    p_eval = subs.add_parser("eval", help="greedy evaluation of a checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--eval-episodes", type=int, dest="eval_episodes")
    p_diag = subs.add_parser("diagnose", help="stability monitors on a checkpoint")
    _add_common(p_diag)
    p_diag.add_argument("--checkpoint", required=True)
    p_comp = subs.add_parser("compare", help="train+eval several algorithms over seeds")
    _add_common(p_comp)
    p_comp.add_argument("--algos", help="comma-separated algorithm list")
    p_comp.add_argument("--seeds", help="comma-separated seed list")
    p_comp.add_argument("--eval-episodes", type=int, dest="eval_episodes")
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
    overrides: Dict = {}
    for key in ("scenario", "seed", "out_dir", "episodes", "horizon", "eval_episodes"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "algo", None):
        overrides["algo"] = args.algo
    if getattr(args, "algos", None):
        overrides["compare_algos"] = [a.strip() for a in args.algos.split(",") if a.strip()]
    if getattr(args, "seeds", None):
        overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
    if getattr(args, "checkpoint", None):
        overrides["checkpoint"] = args.checkpoint
    if overrides:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def run_cli(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _config_from_args(args)
        if args.mode == "train":
            result = run_training(cfg)
            print(f"trained {cfg.algo} on {cfg.scenario}: checkpoint {result.checkpoint_path}")
        elif args.mode == "eval":
            metrics = run_evaluation(cfg.checkpoint, cfg, cfg.out_dir)
            for key, value in metrics.to_dict().items():
                print(f"{key}: {value:.4f}")
        elif args.mode == "diagnose":
            report = run_diagnostics(cfg, cfg.checkpoint)
            print(f"beta_hat: {report.beta_hat:.6f}")
            print(f"correction_ratio: {report.correction_ratio:.6f}")
            print(f"decrease_fraction: {report.decrease_fraction:.4f}")
        elif args.mode == "compare":
            outcome = run_compare(cfg)
            for algo, med in outcome["summary"].items():
                print(
                    f"{algo}: CR {med['collision_rate']:.1f}% speed {med['avg_speed']:.2f} "
                    f"tt {med['travel_time']:.1f} reward {med['reward']:.3f}"
                )
        else:
            parser.error(f"unknown mode {args.mode!r}")
        return 0
    except (HarnessError, W.WorldError, L.LearnerError, P.PolicyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
