"""Rule-based comparator: constant-velocity time-to-collision check with a
brake / cruise rule table."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sim import DT, FAR, SPEED_LIMIT, WorldState, rect_disc_distance


@dataclass(frozen=True)
class TtcParams:
    threshold: float = 3.0
    bubble: float = 2.0
    cruise_speed: float = 9.0
    horizon: float = 5.0

    def __post_init__(self):
        if min(self.threshold, self.bubble, self.cruise_speed, self.horizon) <= 0:
            raise ValueError("TTC parameters must be positive")
        if self.cruise_speed >= SPEED_LIMIT:
            raise ValueError("cruise_speed must stay under the speed limit")


def min_ttc(state: WorldState, params: TtcParams = TtcParams()) -> float:
    """Earliest predicted contact time with the bubble-inflated ego body.

    Ego keeps its speed along the path, pedestrians keep their velocity; both
    are propagated on the simulator tick over the horizon.  Returns ``FAR``
    when nothing comes within the bubble.
    """
    if state.n_pedestrians == 0:
        return FAR
    ego = state.ego
    n_ticks = int(round(params.horizon / DT))
    times = np.arange(n_ticks + 1) * DT
    xy, heading = state.topology.pose_at(ego.s + ego.speed * times)
    vel = state.ped_velocity()
    length = ego.length + 2 * params.bubble
    width = ego.width + 2 * params.bubble
    for k, tk in enumerate(times):
        peds = state.ped_xy + vel * tk
        gap = rect_disc_distance(peds, xy[k, 0], xy[k, 1], heading[k], length, width, state.ped_radius)
        if np.any(gap < 0):
            return float(tk)
    return FAR


def policy(state: WorldState, params: TtcParams = TtcParams(), ttc: float | None = None) -> int:
    """Brake hard on a predicted conflict, otherwise track the cruise speed."""
    if ttc is None:
        ttc = min_ttc(state, params)
    if ttc < params.threshold:
        return 0
    v = state.ego.speed
    if v < params.cruise_speed:
        return 3
    if v > params.cruise_speed:
        return 1
    return 2
