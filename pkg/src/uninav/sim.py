"""2D world model of an unsignalized intersection with a rail-bound ego vehicle
and straight-line pedestrian walkers.

The ego vehicle only controls its throttle; it follows a fixed left-turn path
made of 100 waypoints.  Pedestrians walk towards random destinations inside the
junction and re-sample destination and speed on arrival.  All randomness comes
from one ``numpy.random.Generator`` per episode, so a (topology, seed, action
sequence) triple always reproduces the same trajectory.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

FPS = 15
DT = 1.0 / FPS
EGO_LENGTH = 4.5
EGO_WIDTH = 2.0
ACCELERATION = 4.0  # m/s^2 at full throttle
MAX_SPEED = 15.0
SPEED_LIMIT = 10.0
TIME_LIMIT = 45.0
MAX_STEPS = math.ceil(TIME_LIMIT * FPS)
PED_RADIUS = 0.3
PED_SPEED_RANGE = (0.2, 1.8)
SPAWN_PERIOD_STEPS = 10 * FPS
SPAWN_BATCH = 5
LAST_SPAWN_STEP = 40 * FPS
FAR = 1e9  # distance sentinel when no pedestrian exists

THROTTLE = (-1.0, -0.4, 0.2, 1.0)
N_ACTIONS = len(THROTTLE)

# candidate draws per spawned pedestrian; fixed so rng consumption never
# depends on where the ego happens to be
_SPAWN_CANDIDATES = 8
_SPAWN_CLEARANCE = 1.0


class Terminal(str, enum.Enum):
    NONE = "none"
    SUCCESS = "success"
    COLLISION = "collision"
    TIMEOUT = "timeout"


def apply_action(action: int) -> float:
    """Map a discrete action id (0..3) to its throttle value."""
    if isinstance(action, bool) or not isinstance(action, (int, np.integer)):
        raise ValueError(f"action id must be an integer, got {action!r}")
    if not 0 <= action < N_ACTIONS:
        raise ValueError(f"unknown action id {action}")
    return THROTTLE[action]


@dataclass(frozen=True)
class IntersectionTopology:
    """Junction geometry and the ego's left-turn path.

    The junction box is centred on the origin with extents ``size_x`` by
    ``size_y``.  The ego enters from the south arm driving north on the lane
    ``lane_offset`` metres right of the road centreline and leaves west on the
    lane ``lane_offset`` metres north of the centreline.
    """

    name: str
    kind: str  # "three-way" | "four-way"
    size_x: float
    size_y: float
    lane_offset: float = 1.75
    approach_length: float = 8.0
    exit_length: float = 8.0
    spawn_inset: float = 1.0
    n_waypoints: int = 100
    waypoints: np.ndarray = field(init=False, repr=False, compare=False)
    cumlen: np.ndarray = field(init=False, repr=False, compare=False)
    seg_heading: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("three-way", "four-way"):
            raise ValueError(f"kind: unknown junction kind {self.kind!r}")
        for name in ("size_x", "size_y", "approach_length", "exit_length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name}: must be positive")
        if self.n_waypoints < 2:
            raise ValueError("n_waypoints: need at least 2")
        if not 0 <= self.spawn_inset < min(self.size_x, self.size_y) / 2:
            raise ValueError("spawn_inset: out of range")
        wp = _left_turn_waypoints(self)
        seg = np.diff(wp, axis=0)
        seglen = np.hypot(seg[:, 0], seg[:, 1])
        if not np.all(seglen > 0):
            raise ValueError("degenerate path: repeated waypoint")
        object.__setattr__(self, "waypoints", wp)
        object.__setattr__(self, "cumlen", np.concatenate([[0.0], np.cumsum(seglen)]))
        object.__setattr__(self, "seg_heading", np.arctan2(seg[:, 1], seg[:, 0]))
        for arr in (self.waypoints, self.cumlen, self.seg_heading):
            arr.flags.writeable = False

    @property
    def spawn_region(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the pedestrian area."""
        hx = self.size_x / 2 - self.spawn_inset
        hy = self.size_y / 2 - self.spawn_inset
        return (-hx, -hy, hx, hy)

    @property
    def goal(self) -> np.ndarray:
        return self.waypoints[-1]

    @property
    def path_length(self) -> float:
        return float(self.cumlen[-1])

    def pose_at(self, s):
        """Position and heading at arc length ``s`` (scalar or array)."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.path_length)
        i = np.clip(np.searchsorted(self.cumlen, s, side="right") - 1, 0, len(self.cumlen) - 2)
        frac = (s - self.cumlen[i]) / (self.cumlen[i + 1] - self.cumlen[i])
        p0 = self.waypoints[i]
        p1 = self.waypoints[i + 1]
        xy = p0 + (p1 - p0) * np.asarray(frac)[..., None]
        return xy, self.seg_heading[i]

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("waypoints", "cumlen", "seg_heading")}
        d["spawn_region"] = list(self.spawn_region)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IntersectionTopology":
        d = dict(d)
        region = d.pop("spawn_region", None)
        known = {"name", "kind", "size_x", "size_y", "lane_offset", "approach_length",
                 "exit_length", "spawn_inset", "n_waypoints"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown topology field(s): {sorted(unknown)}")
        topo = cls(**d)
        if region is not None and not np.allclose(region, topo.spawn_region):
            raise ValueError("spawn_region: inconsistent with size and spawn_inset")
        return topo


def _left_turn_waypoints(t: IntersectionTopology) -> np.ndarray:
    hx, hy = t.size_x / 2, t.size_y / 2
    a = b = t.lane_offset
    radius = min(a + hx, b + hy)
    cx, cy = a - radius, b - radius  # arc centre, tangent to both lanes
    entry_straight = (b - radius) - (-hy - t.approach_length)
    arc = 0.5 * math.pi * radius
    exit_straight = (a - radius) - (-hx - t.exit_length)
    total = entry_straight + arc + exit_straight
    s = np.linspace(0.0, total, t.n_waypoints)
    pts = np.empty((t.n_waypoints, 2))
    for k, sk in enumerate(s):
        if sk <= entry_straight:
            pts[k] = (a, -hy - t.approach_length + sk)
        elif sk <= entry_straight + arc:
            phi = (sk - entry_straight) / radius
            pts[k] = (cx + radius * math.cos(phi), cy + radius * math.sin(phi))
        else:
            pts[k] = (cx - (sk - entry_straight - arc), b)
    return pts


PRESETS = {
    "three-way-25x25": dict(name="three-way-25x25", kind="three-way", size_x=25.0, size_y=25.0),
    "four-way-26x17": dict(name="four-way-26x17", kind="four-way", size_x=26.0, size_y=17.0),
}
ALIASES = {"three-way": "three-way-25x25", "four-way": "four-way-26x17"}


def load_topology(ref: str | Path) -> IntersectionTopology:
    """Resolve a preset id (or its short alias) or a JSON topology file."""
    key = ALIASES.get(str(ref), str(ref))
    if key in PRESETS:
        return IntersectionTopology(**PRESETS[key])
    path = Path(ref)
    if not path.exists():
        raise ValueError(f"unknown topology {ref!r}")
    return IntersectionTopology.from_dict(json.loads(path.read_text()))


def save_topology(topology: IntersectionTopology, path: str | Path) -> None:
    Path(path).write_text(json.dumps(topology.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    heading: float
    speed: float
    s: float  # arc length travelled along the path
    length: float = EGO_LENGTH
    width: float = EGO_WIDTH


@dataclass(frozen=True)
class Pedestrian:
    id: int
    x: float
    y: float
    speed: float
    dest_x: float
    dest_y: float
    radius: float = PED_RADIUS

    @property
    def heading(self) -> float:
        return math.atan2(self.dest_y - self.y, self.dest_x - self.x)


@dataclass
class WorldState:
    """Ground truth for one time instant.

    Pedestrians are stored column-wise (``ped_xy``, ``ped_dest``, ...) so the
    simulator, encoder and TTC baseline can vectorise over them.  The rng is
    shared with successor states: once stepped, a state must not be stepped
    again.
    """

    topology: IntersectionTopology
    ego: EgoState
    ped_id: np.ndarray
    ped_xy: np.ndarray
    ped_dest: np.ndarray
    ped_speed: np.ndarray
    step_index: int
    rng: np.random.Generator
    next_id: int
    terminal: Terminal = Terminal.NONE
    ped_radius: float = PED_RADIUS

    @property
    def t(self) -> float:
        return self.step_index / FPS

    @property
    def n_pedestrians(self) -> int:
        return len(self.ped_id)

    def pedestrians(self) -> list[Pedestrian]:
        return [
            Pedestrian(int(i), float(p[0]), float(p[1]), float(v), float(d[0]), float(d[1]), self.ped_radius)
            for i, p, d, v in zip(self.ped_id, self.ped_xy, self.ped_dest, self.ped_speed)
        ]

    def ped_velocity(self) -> np.ndarray:
        delta = self.ped_dest - self.ped_xy
        dist = np.hypot(delta[:, 0], delta[:, 1])
        unit = np.zeros_like(delta)
        moving = dist > 0
        unit[moving] = delta[moving] / dist[moving, None]
        return unit * self.ped_speed[:, None]

    def ped_heading(self) -> np.ndarray:
        delta = self.ped_dest - self.ped_xy
        return np.arctan2(delta[:, 1], delta[:, 0])

    def with_pedestrians(self, peds: list[Pedestrian]) -> "WorldState":
        """Copy of this state with an explicit pedestrian list (tests, scenarios)."""
        n = len(peds)
        return replace(
            self,
            ped_id=np.array([p.id for p in peds], dtype=np.int64),
            ped_xy=np.array([(p.x, p.y) for p in peds], dtype=float).reshape(n, 2),
            ped_dest=np.array([(p.dest_x, p.dest_y) for p in peds], dtype=float).reshape(n, 2),
            ped_speed=np.array([p.speed for p in peds], dtype=float),
            next_id=max([p.id for p in peds], default=-1) + 1,
            ped_radius=peds[0].radius if peds else self.ped_radius,
        )

    def with_ego(self, **changes) -> "WorldState":
        return replace(self, ego=replace(self.ego, **changes))


@dataclass(frozen=True)
class StepOutcome:
    state: WorldState
    terminal: Terminal
    speed_violation: bool


def _sample_points(rng: np.random.Generator, region, n: int) -> np.ndarray:
    xmin, ymin, xmax, ymax = region
    return np.column_stack([rng.uniform(xmin, xmax, n), rng.uniform(ymin, ymax, n)])


def _spawn(rng, topology: IntersectionTopology, ego: EgoState, n: int) -> tuple:
    region = topology.spawn_region
    cand = _sample_points(rng, region, n * _SPAWN_CANDIDATES).reshape(n, _SPAWN_CANDIDATES, 2)
    dest = _sample_points(rng, region, n)
    speed = rng.uniform(*PED_SPEED_RANGE, n)
    gap = rect_disc_distance(cand.reshape(-1, 2), ego.x, ego.y, ego.heading, ego.length, ego.width, PED_RADIUS)
    clear = gap.reshape(n, _SPAWN_CANDIDATES) > _SPAWN_CLEARANCE
    pick = np.where(clear.any(axis=1), clear.argmax(axis=1), 0)
    return cand[np.arange(n), pick], dest, speed


def reset(topology: IntersectionTopology, seed, n_pedestrians: tuple[int, int] = (5, 30)) -> WorldState:
    """Ego at rest on waypoint 0 and a uniform random number of pedestrians."""
    rng = np.random.default_rng(seed)
    x0, y0 = topology.waypoints[0]
    ego = EgoState(float(x0), float(y0), float(topology.seg_heading[0]), 0.0, 0.0)
    lo, hi = n_pedestrians
    n = int(rng.integers(lo, hi + 1))
    xy, dest, speed = _spawn(rng, topology, ego, n)
    return WorldState(
        topology=topology, ego=ego, ped_id=np.arange(n, dtype=np.int64), ped_xy=xy,
        ped_dest=dest, ped_speed=speed, step_index=0, rng=rng, next_id=n,
    )


def spawn_tick(state: WorldState) -> WorldState:
    """Add five pedestrians at 10, 20, 30 and 40 s; identity otherwise."""
    k = state.step_index
    if k <= 0 or k > LAST_SPAWN_STEP or k % SPAWN_PERIOD_STEPS:
        return state
    xy, dest, speed = _spawn(state.rng, state.topology, state.ego, SPAWN_BATCH)
    ids = np.arange(state.next_id, state.next_id + SPAWN_BATCH, dtype=np.int64)
    return replace(
        state,
        ped_id=np.concatenate([state.ped_id, ids]),
        ped_xy=np.concatenate([state.ped_xy, xy]),
        ped_dest=np.concatenate([state.ped_dest, dest]),
        ped_speed=np.concatenate([state.ped_speed, speed]),
        next_id=state.next_id + SPAWN_BATCH,
    )


def _to_ego_frame(points: np.ndarray, x: float, y: float, heading: float) -> tuple[np.ndarray, np.ndarray]:
    """Longitudinal (forward) and lateral (left) offsets of points."""
    c, s = math.cos(heading), math.sin(heading)
    dx = points[..., 0] - x
    dy = points[..., 1] - y
    return dx * c + dy * s, -dx * s + dy * c


def rect_disc_distance(points, x, y, heading, length, width, radius) -> np.ndarray:
    """Gap between an oriented rectangle and discs centred at ``points``.

    Negative values mean the disc overlaps the rectangle.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    lon, lat = _to_ego_frame(points, x, y, heading)
    ox = np.maximum(np.abs(lon) - length / 2, 0.0)
    oy = np.maximum(np.abs(lat) - width / 2, 0.0)
    return np.hypot(ox, oy) - radius


def collides(state: WorldState) -> bool:
    if state.n_pedestrians == 0:
        return False
    e = state.ego
    gap = rect_disc_distance(state.ped_xy, e.x, e.y, e.heading, e.length, e.width, state.ped_radius)
    # centre inside the body gives gap = -radius; any negative gap overlaps
    return bool(np.any(gap < 0))


def front_corners(ego: EgoState) -> tuple[np.ndarray, np.ndarray]:
    """World coordinates of the front-right and front-left bumper corners."""
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    fwd = np.array([c, s]) * ego.length / 2
    left = np.array([-s, c]) * ego.width / 2
    centre = np.array([ego.x, ego.y])
    return centre + fwd - left, centre + fwd + left


def bumper_distances(state: WorldState) -> tuple[float, float]:
    """Distance from each front bumper corner to the nearest pedestrian disc."""
    if state.n_pedestrians == 0:
        return FAR, FAR
    right, left = front_corners(state.ego)
    out = []
    for corner in (right, left):
        d = np.hypot(*(state.ped_xy - corner).T) - state.ped_radius
        out.append(max(0.0, float(d.min())))
    return out[0], out[1]


def closest_pedestrian_distance(state: WorldState) -> float:
    """Gap between the ego body and the closest pedestrian (0 on contact)."""
    if state.n_pedestrians == 0:
        return FAR
    e = state.ego
    gap = rect_disc_distance(state.ped_xy, e.x, e.y, e.heading, e.length, e.width, state.ped_radius)
    return max(0.0, float(gap.min()))


def _walk(state: WorldState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xy = state.ped_xy.copy()
    dest = state.ped_dest.copy()
    speed = state.ped_speed.copy()
    if len(xy) == 0:
        return xy, dest, speed
    delta = dest - xy
    dist = np.hypot(delta[:, 0], delta[:, 1])
    reach = speed * DT
    arrived = dist <= reach
    moving = ~arrived
    xy[moving] += delta[moving] * (reach[moving] / dist[moving])[:, None]
    xy[arrived] = dest[arrived]
    n_new = int(arrived.sum())
    if n_new:
        dest[arrived] = _sample_points(state.rng, state.topology.spawn_region, n_new)
        speed[arrived] = state.rng.uniform(*PED_SPEED_RANGE, n_new)
    return xy, dest, speed


def step(state: WorldState, throttle: float) -> StepOutcome:
    """Advance the world by one 1/15 s tick."""
    if state.terminal is not Terminal.NONE:
        raise RuntimeError(f"cannot step a terminal state ({state.terminal.value})")
    if not -1.0 <= throttle <= 1.0:
        raise ValueError(f"throttle {throttle} outside [-1, 1]")
    topo = state.topology
    ego = state.ego
    speed = min(max(ego.speed + ACCELERATION * throttle * DT, 0.0), MAX_SPEED)
    s = min(ego.s + speed * DT, topo.path_length)
    xy, heading = topo.pose_at(s)
    new_ego = replace(ego, x=float(xy[0]), y=float(xy[1]), heading=float(heading), speed=speed, s=s)
    ped_xy, ped_dest, ped_speed = _walk(state)
    nxt = replace(
        state, ego=new_ego, ped_xy=ped_xy, ped_dest=ped_dest, ped_speed=ped_speed,
        step_index=state.step_index + 1,
    )
    if collides(nxt):
        terminal = Terminal.COLLISION
    elif s >= topo.path_length:
        terminal = Terminal.SUCCESS
    elif nxt.step_index >= MAX_STEPS:
        terminal = Terminal.TIMEOUT
    else:
        terminal = Terminal.NONE
    nxt.terminal = terminal
    return StepOutcome(nxt, terminal, speed > SPEED_LIMIT)
