"""Conditional per-step reward: free-driving shaping when every pedestrian is
farther than ``d1`` from both front bumper corners, proximity penalties
otherwise, plus one-off terminal bonuses."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

from .sim import Terminal


@dataclass(frozen=True)
class RewardParams:
    d1: float = 7.0
    d2: float = 25.0
    d3: float = 1.0
    d4: float = 2.0
    v1: float = 1.5
    v2: float = 10.0
    r1: float = 0.005
    r2: float = 0.005
    r3: float = -0.25
    r4: float = 0.25
    r5: float = -5.0
    r6: float = -1.5
    r7: float = -0.25

    def __post_init__(self):
        if not self.d3 < self.d4 < self.d1 < self.d2:
            raise ValueError("reward thresholds must satisfy d3 < d4 < d1 < d2")
        if not self.v1 < self.v2:
            raise ValueError("reward speeds must satisfy v1 < v2")


def free_driving(speed: float, goal_distance: float, p: RewardParams) -> float:
    if speed < p.v1:
        vel = 0.0
    elif speed <= p.v2:
        vel = p.r1 * speed
    else:
        vel = p.r3
    return vel + p.r2 * max(0.0, 1.0 - goal_distance / p.d2)


def proximity(d_min: float, p: RewardParams) -> float:
    if d_min < p.d3:
        return p.r5
    if d_min < p.d4:
        return p.r6
    return p.r7


def step_reward(d_right: float, d_left: float, speed: float, goal_distance: float,
                terminal: Terminal | str = Terminal.NONE, params: RewardParams = RewardParams()) -> float:
    if d_right < 0 or d_left < 0:
        raise ValueError("bumper distances must be non-negative")
    if goal_distance < 0 or speed < 0:
        raise ValueError("speed and goal distance must be non-negative")
    terminal = Terminal(terminal)
    d_min = min(d_right, d_left)
    if d_min > params.d1:
        r = free_driving(speed, goal_distance, params)
    else:
        r = proximity(d_min, params)
    if terminal is Terminal.SUCCESS:
        r += params.r4
    elif terminal is Terminal.COLLISION:
        r += params.r5
    return r


def episode_return(rewards: Iterable[float]) -> float:
    """Undiscounted sum of per-step rewards."""
    return math.fsum(rewards)
