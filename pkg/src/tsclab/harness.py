"""Experiment configuration, evaluation runs, metrics export and summaries."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .agents import (A2CConfig, DQNConfig, TrainConfig, load_agent, make_baseline, BASELINES, HEADS,
                     feature_dim)
from .domainrand import DomainConfig, Scenario, generate_scenario
from .encoding import DEFAULT_D_PE, DEFAULT_DS, Features
from .env import EPISODE_S, WARMUP_S, TickMetrics, TrafficEnv
from .reward import RewardConfig, RewardMode

METRIC_COLUMNS = ("time_s", "intersection_id", "queue_len", "standing", "waiting_time_s",
                  "throughput", "travel_time_s")
SUMMARY_METRICS = ("standing", "queue_len", "waiting_time_s", "throughput", "travel_time_s")
# travel time covers arrived vehicles only; those still on the network at the end are counted here
EN_ROUTE = "en_route"
SUMMARY_COLUMNS = SUMMARY_METRICS + (EN_ROUTE,)
NETWORK_ROW = "network"
DEFAULT_WINDOW = 100


def fmt(x) -> str:
    """Six significant digits, integers kept exact."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6g}"


def moving_average(series: Sequence[float], window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Trailing mean; the first ``window - 1`` entries average what is available."""
    if window < 1:
        raise ValueError(f"moving-average window must be at least 1, got {window}")
    x = np.asarray(series, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


# -- configuration ---------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Everything a command needs; written next to its outputs as ``config.json``."""

    seed: int = 0
    head: str = "dqn"
    reward_mode: str = RewardMode.LOG_DISTANCE.value
    ablate: list[str] = field(default_factory=list)
    scenario: str = "generated"
    ds: float = DEFAULT_DS
    d_pe: int = DEFAULT_D_PE
    episode_s: float = EPISODE_S
    warmup_s: float = WARMUP_S
    steps: int = 3000
    checkpoint_every: int = 1000
    checkpoint: str | None = None
    eval_seeds: list[int] = field(default_factory=lambda: [1000, 1001, 1002, 1003, 1004])
    window: int = DEFAULT_WINDOW
    out: str = "runs/out"
    domain: dict = field(default_factory=dict)
    eval_domain: dict | None = None
    dqn: dict = field(default_factory=dict)
    a2c: dict = field(default_factory=dict)

    def __post_init__(self):
        valid_heads = HEADS + tuple(BASELINES)
        if self.head not in valid_heads:
            raise ValueError(f"head must be one of {valid_heads}, got {self.head!r}")
        RewardMode(self.reward_mode)
        Features.ablate(self.ablate)
        if self.window < 1:
            raise ValueError("window must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path | None, **overrides) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text()) if path else {}
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, directory: str | Path) -> Path:
        p = Path(directory) / "config.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return p

    @property
    def features(self) -> Features:
        return Features.ablate(self.ablate)

    @property
    def reward(self) -> RewardConfig:
        return RewardConfig(mode=RewardMode(self.reward_mode))

    def domain_config(self, seed: int | None = None, evaluation: bool = False) -> DomainConfig:
        src = self.eval_domain if evaluation and self.eval_domain is not None else self.domain
        base = DomainConfig.from_dict({**src, "seed": self.seed if seed is None else seed})
        return base

    def train_config(self) -> TrainConfig:
        if self.head not in HEADS:
            raise ValueError(f"cannot train baseline {self.head!r}")
        return TrainConfig(
            head=self.head, steps=self.steps, seed=self.seed, domain=self.domain_config(),
            reward=self.reward, features=self.features, ds=self.ds, d_pe=self.d_pe,
            episode_s=self.episode_s, warmup_s=self.warmup_s, checkpoint_every=self.checkpoint_every,
            dqn=DQNConfig(**self.dqn), a2c=A2CConfig(**self.a2c),
        )

    def scenario_for(self, seed: int) -> Scenario:
        if self.scenario == "generated":
            return generate_scenario(self.domain_config(seed, evaluation=True))
        return Scenario.load(self.scenario)


# -- running ---------------------------------------------------------------------------

def make_env(cfg: ExperimentConfig, scenario: Scenario) -> TrafficEnv:
    return TrafficEnv(scenario, cfg.reward, cfg.ds, cfg.d_pe, cfg.features, cfg.episode_s, cfg.warmup_s)


def run_episode(env: TrafficEnv, policy) -> list[TickMetrics]:
    graphs = env.reset()
    ticks = []
    while not env.done:
        ticks.append(env.step(policy.act(graphs)))
        graphs = env.observe()
    return ticks


def metric_rows(ticks: Sequence[TickMetrics]) -> list[tuple]:
    rows = []
    for t in ticks:
        for vid in sorted(t.queue):
            rows.append((t.time_s, vid, t.queue[vid], t.standing[vid], t.waiting[vid],
                         t.throughput[vid], t.travel_time[vid]))
        rows.append((t.time_s, NETWORK_ROW, t.network_queue, t.network_standing, t.network_waiting,
                     t.network_throughput, t.network_travel_time))
    return rows


def write_metrics_csv(ticks: Sequence[TickMetrics], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in metric_rows(ticks):
            w.writerow([fmt(r[0]), r[1]] + [fmt(x) for x in r[2:]])


def read_network_series(path: str | Path) -> dict[str, np.ndarray]:
    """Network-level columns of a metrics CSV as float arrays."""
    out: dict[str, list[float]] = {k: [] for k in SUMMARY_METRICS}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["intersection_id"] == NETWORK_ROW:
                for k in SUMMARY_METRICS:
                    out[k].append(float(row[k]))
    return {k: np.asarray(v) for k, v in out.items()}


def episode_summary(series: dict[str, np.ndarray]) -> dict[str, float]:
    """Per-episode scalars: tick means, except travel time which is the final running mean."""
    out = {k: float(np.mean(series[k])) if len(series[k]) else 0.0 for k in SUMMARY_METRICS}
    tt = series["travel_time_s"]
    out["travel_time_s"] = float(tt[-1]) if len(tt) else 0.0
    return out


def aggregate(per_episode: Sequence[dict[str, float]]) -> dict[str, tuple[float, float]]:
    """Mean and population standard deviation of each metric across episodes."""
    out = {}
    for k in (c for c in SUMMARY_COLUMNS if c in per_episode[0]):
        v = np.array([e[k] for e in per_episode], dtype=float)
        out[k] = (float(v.mean()), float(v.std()))
    return out


def format_summary(name: str, agg: dict[str, tuple[float, float]]) -> str:
    cells = "  ".join(f"{k}={m:.2f} ± {s:.2f}" for k, (m, s) in agg.items())
    return f"{name}: {cells}"


def evaluate_policy(cfg: ExperimentConfig, policy_factory, out_dir: str | Path | None = None,
                    tag: str = "eval") -> tuple[list[dict[str, float]], dict[str, tuple[float, float]]]:
    """Run one episode per evaluation seed; ``policy_factory(env, seed)`` builds the policy."""
    out = Path(out_dir) if out_dir is not None else None
    episodes = []
    for seed in cfg.eval_seeds:
        env = make_env(cfg, cfg.scenario_for(seed))
        ticks = run_episode(env, policy_factory(env, seed))
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            path = out / f"{tag}_metrics_seed{seed}.csv"
            write_metrics_csv(ticks, path)
            series = read_network_series(path)
        else:
            series = {k: np.asarray(v, dtype=float) for k, v in _series(ticks).items()}
        episodes.append({**episode_summary(series), EN_ROUTE: float(env.state.on_network)})
    agg = aggregate(episodes)
    if out is not None:
        write_summary(out / f"{tag}_summary.csv", cfg.eval_seeds, episodes, agg)
        (out / f"{tag}_summary.txt").write_text(format_summary(tag, agg) + "\n")
    return episodes, agg


def _series(ticks: Sequence[TickMetrics]) -> dict[str, list[float]]:
    # same rounding as the CSV so in-memory and on-disk summaries agree
    r = lambda x: float(fmt(x))  # noqa: E731
    return {
        "standing": [r(t.network_standing) for t in ticks],
        "queue_len": [r(t.network_queue) for t in ticks],
        "waiting_time_s": [r(t.network_waiting) for t in ticks],
        "throughput": [r(t.network_throughput) for t in ticks],
        "travel_time_s": [r(t.network_travel_time) for t in ticks],
    }


def write_summary(path: str | Path, seeds, episodes, agg) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("seed",) + SUMMARY_COLUMNS)
        for s, e in zip(seeds, episodes):
            w.writerow([s] + [fmt(e[k]) for k in SUMMARY_COLUMNS])
        w.writerow(["mean"] + [fmt(agg[k][0]) for k in SUMMARY_COLUMNS])
        w.writerow(["std"] + [fmt(agg[k][1]) for k in SUMMARY_COLUMNS])


def checkpoint_policy(path: str | Path, cfg: ExperimentConfig):
    agent, meta = load_agent(path, feature_dim(cfg.d_pe))

    def factory(env, seed):
        return agent

    return agent, factory


def baseline_policy(name: str):
    def factory(env, seed):
        return make_baseline(name, env, seed)

    return factory

