"""Control loop glue: simulator + encoder + reward behind a reset/step API,
and the per-episode record the metrics are computed from."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import sim
from .encoder import RoiSpec, encode
from .reward import RewardParams, step_reward
from .sim import Terminal, WorldState


@dataclass(frozen=True)
class Scenario:
    topology: str = "three-way-25x25"
    pedestrians: tuple[int, int] = (5, 30)
    spawning: bool = True

    def __post_init__(self):
        lo, hi = self.pedestrians
        if not 0 <= lo <= hi:
            raise ValueError("pedestrians must be a (low, high) range with 0 <= low <= high")


@dataclass
class EpisodeRecord:
    seed: int
    outcome: Terminal
    speed_violated: bool
    crossing_time: float
    mean_speed: float
    mean_distance: float  # nan when no pedestrian ever existed
    ret: float
    steps: int
    log: list[dict] = field(default_factory=list, repr=False)

    @property
    def collision_free(self) -> bool:
        return self.outcome is not Terminal.COLLISION

    @property
    def successful(self) -> bool:
        return self.outcome is Terminal.SUCCESS and not self.speed_violated


class IntersectionEnv:
    """Gym-style wrapper; observations are (grid (3, rows, cols), speed)."""

    def __init__(self, scenario: Scenario = Scenario(), reward: RewardParams = RewardParams(),
                 roi: RoiSpec = RoiSpec()):
        self.scenario = scenario
        self.topology = sim.load_topology(scenario.topology)
        self.reward_params = reward
        self.roi = roi
        self.state: WorldState | None = None

    def observe(self) -> tuple[np.ndarray, float]:
        return encode(self.state, self.roi).data, self.state.ego.speed

    def reset(self, seed) -> tuple[np.ndarray, float]:
        self.state = sim.reset(self.topology, seed, self.scenario.pedestrians)
        return self.observe()

    def step(self, action: int):
        """Returns (observation, reward, terminal, speed_violation)."""
        out = sim.step(self.state, sim.apply_action(action))
        state = out.state
        if self.scenario.spawning and out.terminal is Terminal.NONE:
            state = sim.spawn_tick(state)
        self.state = state
        d_right, d_left = sim.bumper_distances(state)
        goal = float(np.hypot(*(state.topology.goal - (state.ego.x, state.ego.y))))
        r = step_reward(d_right, d_left, state.ego.speed, goal, out.terminal, self.reward_params)
        return self.observe(), r, out.terminal, out.speed_violation


Policy = Callable[[np.ndarray, float, WorldState], int]
StepHook = Callable[[np.ndarray, float, int, float, np.ndarray, float, bool], None]


def run_episode(env: IntersectionEnv, policy: Policy, seed: int, on_step: StepHook | None = None,
                keep_log: bool = False) -> EpisodeRecord:
    """Roll one episode; ``on_step`` sees (s, v, a, r, s', v', done) per step."""
    grid, speed = env.reset(seed)
    rewards, speeds, dists, log = [], [], [], []
    violated = False
    while True:
        state = env.state
        action = policy(grid, speed, state)
        (next_grid, next_speed), r, terminal, over = env.step(action)
        done = terminal is not Terminal.NONE
        if on_step is not None:
            on_step(grid, speed, action, r, next_grid, next_speed, done)
        now = env.state
        violated |= over
        rewards.append(r)
        speeds.append(now.ego.speed)
        if now.n_pedestrians:
            dists.append(sim.closest_pedestrian_distance(now))
        if keep_log:
            e = now.ego
            log.append(dict(t=round(now.t, 6), x=e.x, y=e.y, theta=e.heading, V=e.speed, action=action,
                            reward=r, d_min=min(sim.bumper_distances(now)), n_pedestrians=now.n_pedestrians))
        grid, speed = next_grid, next_speed
        if done:
            break
    return EpisodeRecord(
        seed=int(seed), outcome=terminal, speed_violated=violated, crossing_time=env.state.t,
        mean_speed=float(np.mean(speeds)), mean_distance=float(np.mean(dists)) if dists else math.nan,
        ret=math.fsum(rewards), steps=len(rewards), log=log,
    )
