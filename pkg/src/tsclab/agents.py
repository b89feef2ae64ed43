"""Weight-tied policy heads (Double DQN, A2C), replay, baselines and the training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .domainrand import DomainConfig, generate_scenario
from .encoder import D_LATENT, DENSITY_SCALE, DROPOUT, LEAKY_SLOPE, N_HEADS, GraphBatch, HierarchicalEncoder
from .encoding import DEFAULT_D_PE, DEFAULT_DS, Features, StateGraph
from .env import EPISODE_S, WARMUP_S, TrafficEnv
from .reward import RewardConfig, phase_pressures

log = logging.getLogger(__name__)

HEADS = ("dqn", "a2c")
FIXED_GREEN_S = 30.0


# -- experience -------------------------------------------------------------------

@dataclass
class Transition:
    state: StateGraph
    action: int
    reward: float
    next_state: StateGraph
    done: bool = False
    version: int = 0

    def __post_init__(self):
        if not 0 <= self.action < self.state.n_phases:
            raise ValueError(f"action {self.action} outside 0..{self.state.n_phases - 1}")


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling, without replacement inside a batch."""

    def __init__(self, capacity: int = 50_000, seed: int = 0):
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self.items: list[Transition] = []
        self._next = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.items)

    def push(self, t: Transition) -> None:
        if len(self.items) < self.capacity:
            self.items.append(t)
        else:
            self.items[self._next] = t
        self._next = (self._next + 1) % self.capacity

    def sample(self, n: int) -> list[Transition]:
        if n > len(self.items):
            raise ValueError(f"cannot sample {n} from {len(self.items)} transitions")
        idx = self.rng.choice(len(self.items), size=n, replace=False)
        return [self.items[i] for i in idx]


# -- model --------------------------------------------------------------------------

class PolicyModel:
    """Shared encoder plus per-phase decoders; one parameter set for every intersection."""

    def __init__(self, head: str, feature_dim: int, seed: int = 0, d_latent: int = D_LATENT,
                 n_heads: int = N_HEADS, dropout: float = DROPOUT, dtype=np.float64,
                 density_scale: float = DENSITY_SCALE):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
        self.head, self.feature_dim = head, feature_dim
        self.rng = np.random.default_rng(seed)
        self.store = ParamStore(dtype)
        self.encoder = HierarchicalEncoder(self.store, feature_dim, self.rng, d_latent, n_heads, dropout,
                                           density_scale=density_scale)
        d = d_latent
        names = ("q",) if head == "dqn" else ("actor", "critic")
        for name in names:
            self.store.linear(f"{name}.W1", d, d, self.rng)
            self.store.add(f"{name}.b1", np.zeros(d))
            self.store.linear(f"{name}.W2", d, 1, self.rng)
            self.store.add(f"{name}.b2", np.zeros(1))

    @property
    def training(self) -> bool:
        return self.encoder.training

    @training.setter
    def training(self, value: bool) -> None:
        self.encoder.training = value

    def _decode(self, h: Tensor, name: str) -> Tensor:
        p = self.store
        z = ad.leaky_relu(ad.add(ad.matmul(h, p[f"{name}.W1"]), p[f"{name}.b1"]), LEAKY_SLOPE)
        out = ad.add(ad.matmul(z, p[f"{name}.W2"]), p[f"{name}.b2"])
        return ad.reshape(out, (h.shape[0],))

    def phase_values(self, batch: GraphBatch) -> Tensor:
        """Q-values (DQN) or logits (A2C), one per phase of the batch."""
        return self._decode(self.encoder.forward(batch), "q" if self.head == "dqn" else "actor")

    def forward(self, batch: GraphBatch) -> tuple[Tensor, Tensor | None]:
        h = self.encoder.forward(batch)
        if self.head == "dqn":
            return self._decode(h, "q"), None
        pooled = ad.segment_mean(h, batch.phase_graph, batch.n_graphs)
        return self._decode(h, "actor"), self._decode(pooled, "critic")

    def evaluate(self, graphs: Sequence[StateGraph]) -> list[np.ndarray]:
        batch = GraphBatch.from_graphs(list(graphs))
        with ad.no_grad():
            values, _ = self.forward(batch)
        return batch.split(values.data)

    def meta(self) -> dict:
        enc = self.encoder
        return {"head": self.head, "feature_dim": self.feature_dim, "d_latent": enc.d,
                "n_heads": enc.H, "dropout": enc.dropout, "density_scale": enc.density_scale}


# -- action selection and targets ---------------------------------------------------------

def epsilon_at(step: int, start: float = 1.0, end: float = 0.05, anneal_steps: int = 2000) -> float:
    if step >= anneal_steps:
        return end
    return start + step / anneal_steps * (end - start)


def greedy(values: np.ndarray) -> int:
    return int(np.argmax(values))  # first maximum wins


def select_action(values: np.ndarray, rng: np.random.Generator, epsilon: float = 0.0,
                  sample: bool = False) -> int:
    """Epsilon-greedy over Q-values, or a draw from softmax(values) when ``sample``."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("no actions to choose from")
    if sample:
        p = np.exp(values - values.max())
        p /= p.sum()
        return int(rng.choice(values.size, p=p))
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(values.size))
    return greedy(values)


def double_dqn_target(rewards, dones, q_next_online: Sequence[np.ndarray],
                      q_next_target: Sequence[np.ndarray], gamma: float) -> np.ndarray:
    """``r + gamma * Q_target(s', argmax_a Q_online(s', a))``; ``r`` alone for terminal steps."""
    rewards = np.asarray(rewards, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if rewards.size == 0:
        raise ValueError("empty transition batch")
    boot = np.array([qt[greedy(qo)] for qo, qt in zip(q_next_online, q_next_target)])
    return rewards + gamma * np.where(dones, 0.0, boot)


# -- heads ------------------------------------------------------------------------------

@dataclass
class DQNConfig:
    gamma: float = 0.9
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 64
    buffer_capacity: int = 50_000
    target_sync: int = 100
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_steps: int = 2000
    huber_delta: float = 1.0


@dataclass
class A2CConfig:
    gamma: float = 0.9
    lr: float = 1e-3
    weight_decay: float = 0.01


class StaleTransitionError(RuntimeError):
    pass


class DQNAgent:
    head = "dqn"

    def __init__(self, feature_dim: int, seed: int = 0, config: DQNConfig = DQNConfig(), **model_kw):
        self.config = config
        self.model = PolicyModel("dqn", feature_dim, seed, **model_kw)
        self.target = PolicyModel("dqn", feature_dim, seed, **model_kw)
        self.target.store.copy_values_from(self.model.store)
        self.buffer = ReplayBuffer(config.buffer_capacity, seed + 1)
        self.rng = np.random.default_rng(seed + 2)
        self.updates = 0
        self.skipped_updates = 0

    @property
    def store(self) -> ParamStore:
        return self.model.store

    def epsilon(self, step: int) -> float:
        c = self.config
        return epsilon_at(step, c.eps_start, c.eps_end, c.eps_steps)

    def act(self, graphs: dict[str, StateGraph], step: int | None = None) -> dict[str, int]:
        """Greedy when ``step`` is None, else epsilon-greedy with the annealed epsilon."""
        vids = list(graphs)
        values = self.model.evaluate([graphs[v] for v in vids])
        eps = 0.0 if step is None else self.epsilon(step)
        return {v: select_action(q, self.rng, eps) for v, q in zip(vids, values)}

    def observe(self, transitions: Sequence[Transition]) -> None:
        for t in transitions:
            self.buffer.push(t)

    def loss(self, batch: Sequence[Transition]) -> Tensor:
        c = self.config
        nxt = [t.next_state for t in batch]
        q_on = self.model.evaluate(nxt)
        q_tg = self.target.evaluate(nxt)
        y = double_dqn_target([t.reward for t in batch], [t.done for t in batch], q_on, q_tg, c.gamma)
        gb = GraphBatch.from_graphs([t.state for t in batch])
        q, _ = self.model.forward(gb)
        idx = gb.phase_offsets[:-1] + np.array([t.action for t in batch])
        err = ad.add(ad.gather(q, idx), Tensor(-y, dtype=q.data.dtype))
        return ad.mean(ad.huber(err, c.huber_delta))

    def update(self) -> float | None:
        """One AdamW step on a sampled minibatch; ``None`` while the buffer is underfull."""
        c = self.config
        if len(self.buffer) < c.batch_size:
            self.skipped_updates += 1
            return None
        self.model.training = True
        try:
            loss = self.loss(self.buffer.sample(c.batch_size))
            ad.backward(loss)
        finally:
            self.model.training = False
        ad.adamw_step(self.store, lr=c.lr, weight_decay=c.weight_decay)
        self.updates += 1
        if self.updates % c.target_sync == 0:
            self.target.store.copy_values_from(self.store)
        return float(loss.data)


class A2CAgent:
    head = "a2c"

    def __init__(self, feature_dim: int, seed: int = 0, config: A2CConfig = A2CConfig(), **model_kw):
        self.config = config
        self.model = PolicyModel("a2c", feature_dim, seed, **model_kw)
        self.rng = np.random.default_rng(seed + 2)

    @property
    def store(self) -> ParamStore:
        return self.model.store

    @property
    def version(self) -> int:
        return self.store.step_count

    def act(self, graphs: dict[str, StateGraph], step: int | None = None) -> dict[str, int]:
        """Samples from the policy while training (``step`` given), greedy otherwise."""
        vids = list(graphs)
        logits = self.model.evaluate([graphs[v] for v in vids])
        return {v: select_action(l, self.rng, sample=step is not None) for v, l in zip(vids, logits)}

    def observe(self, transitions: Sequence[Transition]) -> None:
        pass

    def losses(self, batch: Sequence[Transition]) -> tuple[Tensor, Tensor]:
        for t in batch:
            if t.version != self.version:
                raise StaleTransitionError(
                    f"transition from policy version {t.version}, current version is {self.version}"
                )
        with ad.no_grad():
            _, v_next = self.model.forward(GraphBatch.from_graphs([t.next_state for t in batch]))
        r = np.array([t.reward for t in batch])
        done = np.array([t.done for t in batch])
        y = r + self.config.gamma * np.where(done, 0.0, v_next.data)
        gb = GraphBatch.from_graphs([t.state for t in batch])
        logits, v = self.model.forward(gb)
        logp = ad.grouped_log_softmax(ad.reshape(logits, (-1, 1)), gb.phase_graph, gb.n_graphs)
        idx = gb.phase_offsets[:-1] + np.array([t.action for t in batch])
        taken = ad.reshape(ad.gather(logp, idx), (len(batch),))
        adv = ad.add(Tensor(y, dtype=v.data.dtype), ad.neg(v))
        actor = ad.neg(ad.mean(ad.mul(taken, Tensor(adv.data.copy()))))
        critic = ad.mean(ad.square(adv))
        return actor, critic

    def update(self, transitions: Sequence[Transition]) -> float | None:
        if not transitions:
            return None
        self.model.training = True
        try:
            actor, critic = self.losses(transitions)
            total = ad.add(actor, critic)
            ad.backward(total)
        finally:
            self.model.training = False
        ad.adamw_step(self.store, lr=self.config.lr, weight_decay=self.config.weight_decay)
        return float(total.data)


def make_agent(head: str, feature_dim: int, seed: int = 0, **kw):
    if head == "dqn":
        return DQNAgent(feature_dim, seed, kw.pop("config", DQNConfig()), **kw)
    if head == "a2c":
        return A2CAgent(feature_dim, seed, kw.pop("config", A2CConfig()), **kw)
    raise ValueError(f"unknown head {head!r}")


# -- checkpoints ----------------------------------------------------------------------

def save_agent(agent, path: str | Path, extra: dict | None = None) -> None:
    meta = {**agent.model.meta(), **(extra or {})}
    ad.save_checkpoint(agent.store, path, meta)


def load_agent(path: str | Path, feature_dim: int | None = None):
    """Rebuild an agent from a checkpoint; a mismatching feature width is an error."""
    loaded, meta = ad.load_checkpoint(path)
    if feature_dim is not None and feature_dim != meta["feature_dim"]:
        raise ValueError(f"checkpoint expects feature width {meta['feature_dim']}, graphs have {feature_dim}")
    agent = make_agent(meta["head"], meta["feature_dim"], 0, d_latent=meta["d_latent"],
                       n_heads=meta["n_heads"], dropout=meta["dropout"], dtype=loaded.dtype,
                       density_scale=meta["density_scale"])
    store = agent.store
    if set(loaded.params) != set(store.params):
        raise ValueError("checkpoint parameters do not match the model layout")
    for name, p in store.params.items():
        if loaded[name].shape != p.shape:
            raise ValueError(f"parameter {name}: checkpoint shape {loaded[name].shape} != {p.shape}")
        p.data[...] = loaded[name].data
        store.m[name][...] = loaded.m[name]
        store.v[name][...] = loaded.v[name]
    store.step_count = loaded.step_count
    if isinstance(agent, DQNAgent):
        agent.target.store.copy_values_from(store)
    return agent, meta


# -- heuristic baselines -------------------------------------------------------------

class Policy(Protocol):
    def act(self, graphs: dict[str, StateGraph], step: int | None = None) -> dict[str, int]: ...


def fixed_time_phase(t: float, n_phases: int, green_s: float = FIXED_GREEN_S) -> int:
    return int(t // green_s) % n_phases


def max_pressure_action(state, intersection: str) -> int:
    """Phase with the largest summed pressure over its green movements; ties go to the lowest index."""
    return greedy(phase_pressures(state, intersection))


class RandomPolicy:
    def __init__(self, env: TrafficEnv, seed: int = 0):
        self.env, self.rng = env, np.random.default_rng(seed)

    def act(self, graphs, step=None):
        n = self.env.n_phases
        return {v: int(self.rng.integers(n[v])) for v in graphs}


class FixedTimePolicy:
    def __init__(self, env: TrafficEnv, green_s: float = FIXED_GREEN_S):
        self.env, self.green_s = env, green_s

    def act(self, graphs, step=None):
        t = self.env.state.clock - self.env.warmup_s
        n = self.env.n_phases
        return {v: fixed_time_phase(t, n[v], self.green_s) for v in graphs}


class MaxPressurePolicy:
    def __init__(self, env: TrafficEnv):
        self.env = env

    def act(self, graphs, step=None):
        return {v: max_pressure_action(self.env.state, v) for v in graphs}


BASELINES = {"random": RandomPolicy, "fixed-time": FixedTimePolicy, "max-pressure": MaxPressurePolicy}


def make_baseline(name: str, env: TrafficEnv, seed: int = 0):
    if name not in BASELINES:
        raise ValueError(f"unknown baseline {name!r}; expected one of {sorted(BASELINES)}")
    if name == "random":
        return RandomPolicy(env, seed)
    return BASELINES[name](env)


# -- training ----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    head: str = "dqn"
    steps: int = 3000
    seed: int = 0
    domain: DomainConfig = field(default_factory=DomainConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    features: Features = field(default_factory=Features)
    ds: float = DEFAULT_DS
    d_pe: int = DEFAULT_D_PE
    episode_s: float = EPISODE_S
    warmup_s: float = WARMUP_S
    checkpoint_every: int = 1000
    dtype: str = "float32"
    n_envs: int = 1
    updates_per_step: int = 1
    dqn: DQNConfig = field(default_factory=DQNConfig)
    a2c: A2CConfig = field(default_factory=A2CConfig)


LOG_COLUMNS = ("decision_step", "mean_reward", "mean_queue", "loss", "epsilon")


def episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


def feature_dim(d_pe: int) -> int:
    return 2 + d_pe


def train(config: TrainConfig, out_dir: str | Path | None = None):
    """Run ``config.steps`` decision ticks over freshly sampled scenarios.

    Returns the agent and the log rows.  With ``out_dir`` the log is written to
    ``train_log.csv`` and checkpoints to ``checkpoint_<step>.bin`` plus
    ``checkpoint.bin`` at the end.
    """
    head_cfg = config.dqn if config.head == "dqn" else config.a2c
    agent = make_agent(config.head, feature_dim(config.d_pe), config.seed, config=head_cfg,
                       dtype=np.dtype(config.dtype))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows: list[tuple] = []
    episode = 0
    envs: list[TrafficEnv | None] = [None] * config.n_envs
    graphs: list[dict | None] = [None] * config.n_envs
    for step_i in range(config.steps):
        transitions, rewards, queues = [], [], []
        for k in range(config.n_envs):
            env = envs[k]
            if env is None or env.done:
                scenario = generate_scenario(replace(config.domain, seed=episode_seed(config.seed, episode)))
                env = envs[k] = TrafficEnv(scenario, config.reward, config.ds, config.d_pe, config.features,
                                           config.episode_s, config.warmup_s)
                graphs[k] = env.reset()
                episode += 1
            actions = agent.act(graphs[k], step_i)
            version = agent.store.step_count
            metrics = env.step(actions)
            team = env.team_rewards()
            nxt = env.observe()
            transitions += [Transition(graphs[k][v], actions[v], team[v], nxt[v], False, version)
                            for v in env.agents]
            rewards += list(team.values())
            queues += list(metrics.queue.values())
            graphs[k] = nxt
        if config.head == "dqn":
            agent.observe(transitions)
            losses = [agent.update() for _ in range(config.updates_per_step)]
            loss = losses[-1]
            eps = agent.epsilon(step_i)
        else:
            loss = agent.update(transitions)
            eps = 0.0
        rows.append((
            step_i + 1,
            float(np.mean(rewards)),
            float(np.mean(queues)),
            float("nan") if loss is None else loss,
            eps,
        ))
        if out is not None and config.checkpoint_every and (step_i + 1) % config.checkpoint_every == 0:
            save_agent(agent, out / f"checkpoint_{step_i + 1}.bin", checkpoint_meta(config, step_i + 1))
    if out is not None:
        save_agent(agent, out / "checkpoint.bin", checkpoint_meta(config, config.steps))
        write_train_log(rows, out / "train_log.csv")
    return agent, rows


def checkpoint_meta(config: TrainConfig, step: int) -> dict:
    return {"decision_step": step, "ds": config.ds, "d_pe": config.d_pe,
            "features": asdict(config.features), "seed": config.seed}


def write_train_log(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r[0]] + [f"{x:.6g}" for x in r[1:]])
