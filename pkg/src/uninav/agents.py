"""DQN, DDQN and DDQN with prioritized replay on top of the numpy Q-network."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import EpisodeRecord, IntersectionEnv, run_episode
from .nn import QNetwork, RMSprop, td_loss_grad
from .replay import PrioritizedMemory, ReplayMemory, Transition
from .sim import MAX_STEPS

ALGORITHMS = ("dqn", "ddqn", "ddqn-per")


@dataclass(frozen=True)
class ExplorationSchedule:
    start: float = 1.0
    floor: float = 0.05
    decay: float = 0.99

    def __post_init__(self):
        if not 0 <= self.floor <= self.start <= 1 or not 0 < self.decay <= 1:
            raise ValueError("need 0 <= floor <= start <= 1 and 0 < decay <= 1")

    def value(self, episodes_done: int) -> float:
        return max(self.floor, self.start * self.decay ** episodes_done)


@dataclass(frozen=True)
class PerConfig:
    alpha: float = 0.6
    beta0: float = 0.4
    eps: float = 1e-2
    beta_horizon: int | None = None  # None: MAX_STEPS * training episodes

    def __post_init__(self):
        if self.alpha < 0 or not 0 < self.beta0 <= 1 or self.eps <= 0:
            raise ValueError("need alpha >= 0, 0 < beta0 <= 1, eps > 0")
        if self.beta_horizon is not None and self.beta_horizon <= 0:
            raise ValueError("beta_horizon must be positive")


@dataclass(frozen=True)
class TrainingConfig:
    gamma: float = 0.95
    batch_size: int = 32
    replay_capacity: int = 10_000
    warmup: int = 750
    target_sync: int = 5_000
    episodes: int = 450
    lr: float = 0.00025
    rms_decay: float = 0.95
    rms_eps: float = 1e-6
    train_every: int = 1
    checkpoint_every: int = 50
    exploration: ExplorationSchedule = field(default_factory=ExplorationSchedule)

    def __post_init__(self):
        if self.warmup > self.replay_capacity:
            raise ValueError("warmup cannot exceed replay capacity")
        if self.batch_size > self.warmup:
            raise ValueError("batch_size cannot exceed warmup")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if min(self.batch_size, self.target_sync, self.train_every, self.episodes, self.checkpoint_every) < 1:
            raise ValueError("counts must be positive")


def beta_at(step: int, cfg: PerConfig, horizon: int | None = None) -> float:
    """Linear anneal of the importance-sampling exponent from beta0 to 1."""
    horizon = horizon or cfg.beta_horizon
    if step < 0 or not horizon:
        raise ValueError("need step >= 0 and a positive horizon")
    return min(1.0, cfg.beta0 + (1.0 - cfg.beta0) * step / horizon)


def select_action(q, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; ties in the greedy branch go to the lowest index."""
    q = np.asarray(q)
    if rng.random() < epsilon:
        return int(rng.integers(len(q)))
    return int(np.argmax(q))


def td_targets(rewards, terminals, q_next_online, q_next_target, gamma: float, algo: str) -> np.ndarray:
    """Bootstrapped targets for a batch.

    dqn: r + gamma * max_a Q_target(s', a); ddqn: r + gamma * Q_target(s',
    argmax_a Q_online(s', a)); terminal transitions keep r alone.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    q_next_target = np.asarray(q_next_target, dtype=np.float64)
    if algo == "dqn":
        boot = q_next_target.max(axis=1)
    elif algo in ("ddqn", "ddqn-per"):
        pick = np.argmax(np.asarray(q_next_online), axis=1)
        boot = q_next_target[np.arange(len(pick)), pick]
    else:
        raise ValueError(f"unknown algorithm {algo!r}")
    return np.where(np.asarray(terminals, dtype=bool), rewards, rewards + gamma * boot)


def td_target(t: Transition, online: QNetwork, target: QNetwork | None, gamma: float, algo: str) -> float:
    if t.terminal:
        return float(t.reward)
    q_on = online.forward(t.next_grid, t.next_speed)
    q_tg = q_on if target is None else target.forward(t.next_grid, t.next_speed)
    return float(td_targets([t.reward], [False], q_on, q_tg, gamma, algo)[0])


class Learner:
    """Online network, optional target network, replay memory and optimiser.

    ``observe`` is called once per environment step; it stores the
    transition, runs a gradient update when the memory holds at least
    ``warmup`` transitions, and copies the online weights into the target
    network every ``target_sync`` steps.  The DQN variant has no target
    network and bootstraps from the online network.
    """

    def __init__(self, algo: str = "ddqn-per", cfg: TrainingConfig = TrainingConfig(),
                 per: PerConfig = PerConfig(), seed: int = 0, net_kwargs: dict | None = None,
                 beta_horizon: int | None = None):
        if algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {algo!r}; choose from {ALGORITHMS}")
        self.algo, self.cfg, self.per = algo, cfg, per
        ss = np.random.SeedSequence(seed)
        net_seed, rng_seed = ss.generate_state(2)
        self.online = QNetwork(seed=int(net_seed), **(net_kwargs or {}))
        self.target = None if algo == "dqn" else self.online.clone()
        self.rng = np.random.default_rng(int(rng_seed))
        if algo == "ddqn-per":
            self.memory: ReplayMemory = PrioritizedMemory(cfg.replay_capacity, per.alpha, per.eps)
        else:
            self.memory = ReplayMemory(cfg.replay_capacity)
        self.optimizer = RMSprop(self.online.params, cfg.lr, cfg.rms_decay, cfg.rms_eps)
        self.beta_horizon = beta_horizon or per.beta_horizon or MAX_STEPS * cfg.episodes
        self.global_step = 0
        self.episodes_done = 0
        self.n_updates = 0
        self.last_loss = float("nan")
        self.update_steps: list[tuple[int, int]] = []  # (global step, memory size)
        self.sync_steps: list[int] = []
        self.sample_counts = np.zeros(cfg.replay_capacity, dtype=np.int64)

    @property
    def epsilon(self) -> float:
        return self.cfg.exploration.value(self.episodes_done)

    @property
    def beta(self) -> float:
        if self.algo != "ddqn-per":
            return 1.0
        return beta_at(self.global_step, self.per, self.beta_horizon)

    def q_values(self, grid, speed) -> np.ndarray:
        return self.online.forward(grid, speed)[0]

    def act(self, grid, speed, greedy: bool = False) -> int:
        q = self.q_values(grid, speed)
        if greedy:
            return int(np.argmax(q))
        return select_action(q, self.epsilon, self.rng)

    def observe(self, t: Transition) -> None:
        self.memory.push(t)
        self.global_step += 1
        cfg = self.cfg
        if len(self.memory) >= cfg.warmup and self.global_step % cfg.train_every == 0:
            self.update()
        if self.target is not None and self.global_step % cfg.target_sync == 0:
            self.target.copy_from(self.online)
            self.sync_steps.append(self.global_step)

    def update(self) -> float:
        cfg = self.cfg
        batch = self.memory.sample(cfg.batch_size, self.rng, self.beta)
        np.add.at(self.sample_counts, batch.indices, 1)
        q_next = self.online.forward(batch.next_grids, batch.next_speeds)
        q_next_target = q_next if self.target is None else self.target.forward(batch.next_grids, batch.next_speeds)
        targets = td_targets(batch.rewards, batch.terminals, q_next, q_next_target, cfg.gamma, self.algo)
        q = self.online.forward(batch.grids, batch.speeds, cache=True)
        loss, dq, td = td_loss_grad(q, batch.actions, targets, batch.weights)
        self.online.zero_grad()
        self.optimizer.step(self.online.backward(dq))
        self.memory.update_priorities(batch.indices, td)
        self.n_updates += 1
        self.update_steps.append((self.global_step, len(self.memory)))
        self.last_loss = loss
        return loss

    def end_episode(self) -> None:
        self.episodes_done += 1


def train_episode(env: IntersectionEnv, learner: Learner, seed: int) -> EpisodeRecord:
    """One epsilon-greedy episode with learning; epsilon decays at its end."""

    def policy(grid, speed, state):
        return learner.act(grid, speed)

    def on_step(grid, speed, action, reward, next_grid, next_speed, done):
        learner.observe(Transition(grid, float(speed), action, reward, next_grid, float(next_speed), done))

    record = run_episode(env, policy, seed, on_step)
    learner.end_episode()
    return record
