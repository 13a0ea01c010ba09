"""Ego-centric region of interest (ROI) and its 3-channel occupancy grid.

Grid rows run from the ROI edge farthest ahead of the ego (row 0) backwards;
columns run from the ego's left (col 0) to its right.  A world point belongs
to a cell when the cell centre lies inside that agent's footprint.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sim import EgoState, WorldState

_SNAP = 1e-9  # absorbs rotation round-off at cell boundaries


@dataclass(frozen=True)
class RoiSpec:
    length: float = 20.0
    width: float = 15.0
    cell_length: float = 0.25
    cell_width: float = 0.25

    def __post_init__(self):
        for name, ratio in (("length", self.length / self.cell_length),
                            ("width", self.width / self.cell_width),
                            ("anchor", 4 * self.length / (5 * self.cell_length))):
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError(f"{name} is not a whole number of cells")

    @property
    def rows(self) -> int:
        return round(self.length / self.cell_length)

    @property
    def cols(self) -> int:
        return round(self.width / self.cell_width)

    @property
    def ahead(self) -> float:
        """Look-ahead distance from the ego centre to the front ROI edge."""
        return 4 * self.length / 5

    @property
    def anchor(self) -> tuple[int, int]:
        return round(4 * self.length / (5 * self.cell_length)), round(self.width / (2 * self.cell_width))

    def cell_centres(self) -> tuple[np.ndarray, np.ndarray]:
        """Forward offsets per row and rightward offsets per column (ego frame)."""
        lon = self.ahead - (np.arange(self.rows) + 0.5) * self.cell_length
        right = -self.width / 2 + (np.arange(self.cols) + 0.5) * self.cell_width
        return lon, right


@dataclass
class RoiGrid:
    data: np.ndarray  # (3, rows, cols) float32

    @property
    def occupancy(self) -> np.ndarray:
        return self.data[0]

    @property
    def rel_speed(self) -> np.ndarray:
        return self.data[1]

    @property
    def rel_heading(self) -> np.ndarray:
        return self.data[2]


def _axes(heading: float) -> tuple[np.ndarray, np.ndarray]:
    c, s = math.cos(heading), math.sin(heading)
    return np.array([c, s]), np.array([s, -c])  # forward, right


def roi_vertices(ego: EgoState, spec: RoiSpec = RoiSpec()) -> np.ndarray:
    """Corners (rear-right, rear-left, front-right, front-left) in world metres."""
    fwd, right = _axes(ego.heading)
    c = np.array([ego.x, ego.y])
    rear = c - fwd * spec.length / 5
    front = c + fwd * spec.ahead
    half = right * spec.width / 2
    return np.array([rear + half, rear - half, front + half, front - half])


def to_roi_frame(points, ego: EgoState) -> tuple[np.ndarray, np.ndarray]:
    """Forward and rightward offsets of world points relative to the ego."""
    fwd, right = _axes(ego.heading)
    d = np.asarray(points, dtype=float) - (ego.x, ego.y)
    return d @ fwd, d @ right


def world_to_cell(point, ego: EgoState, spec: RoiSpec = RoiSpec()) -> tuple[int, int] | None:
    lon, right = to_roi_frame(point, ego)
    row = math.floor((spec.ahead - float(lon)) / spec.cell_length + _SNAP)
    col = math.floor((spec.width / 2 + float(right)) / spec.cell_width + _SNAP)
    if 0 <= row < spec.rows and 0 <= col < spec.cols:
        return row, col
    return None


def wrap_degrees(angle):
    """Wrap degrees into (-180, 180]."""
    a = np.mod(np.asarray(angle, dtype=float) + 180.0, 360.0) - 180.0
    return np.where(a == -180.0, 180.0, a)


def pedestrian_channels(state: WorldState) -> tuple[np.ndarray, np.ndarray]:
    """Relative speed (m/s) and relative heading (deg) of every pedestrian."""
    ego = state.ego
    ego_vel = ego.speed * np.array([math.cos(ego.heading), math.sin(ego.heading)])
    dv = state.ped_velocity() - ego_vel
    rel_speed = np.hypot(dv[:, 0], dv[:, 1])
    rel_heading = wrap_degrees(np.degrees(state.ped_heading() - ego.heading))
    return rel_speed, rel_heading


def ego_mask(ego: EgoState, spec: RoiSpec = RoiSpec()) -> np.ndarray:
    lon, right = spec.cell_centres()
    return (np.abs(lon)[:, None] <= ego.length / 2) & (np.abs(right)[None, :] <= ego.width / 2)


def encode(state: WorldState, spec: RoiSpec = RoiSpec()) -> RoiGrid:
    """Rasterise ego and pedestrians into the (occupancy, speed, heading) grid.

    Where pedestrian discs overlap, the pedestrian closest to the ego centre
    (then lowest id) owns the cell; ego cells override pedestrian cells.
    """
    data = np.zeros((3, spec.rows, spec.cols), dtype=np.float32)
    ego = state.ego
    n = state.n_pedestrians
    if n:
        lon, right = to_roi_frame(state.ped_xy, ego)
        rad = state.ped_radius
        reach = (lon + rad > -spec.length / 5) & (lon - rad < spec.ahead) & (np.abs(right) - rad < spec.width / 2)
        if reach.any():
            rel_speed, rel_heading = pedestrian_channels(state)
            lon_c, right_c = spec.cell_centres()
            dist = np.hypot(lon, right)
            order = np.lexsort((state.ped_id, dist))
            owned = np.zeros((spec.rows, spec.cols), dtype=bool)
            for k in order:
                if not reach[k]:
                    continue
                r0 = max(0, math.ceil((spec.ahead - lon[k] - rad) / spec.cell_length - 0.5) - 1)
                r1 = min(spec.rows, math.floor((spec.ahead - lon[k] + rad) / spec.cell_length - 0.5) + 2)
                c0 = max(0, math.ceil((spec.width / 2 + right[k] - rad) / spec.cell_width - 0.5) - 1)
                c1 = min(spec.cols, math.floor((spec.width / 2 + right[k] + rad) / spec.cell_width - 0.5) + 2)
                if r0 >= r1 or c0 >= c1:
                    continue
                inside = ((lon_c[r0:r1, None] - lon[k]) ** 2 + (right_c[None, c0:c1] - right[k]) ** 2) <= rad * rad
                inside &= ~owned[r0:r1, c0:c1]
                if not inside.any():
                    continue
                owned[r0:r1, c0:c1] |= inside
                data[0, r0:r1, c0:c1][inside] = 1.0
                data[1, r0:r1, c0:c1][inside] = rel_speed[k]
                data[2, r0:r1, c0:c1][inside] = rel_heading[k]
    body = ego_mask(ego, spec)
    data[0][body] = 1.0
    data[1][body] = 0.0
    data[2][body] = 0.0
    return RoiGrid(data)


def write_pgm(grid: RoiGrid, out_dir: str | Path, prefix: str = "roi") -> list[Path]:
    """Dump each channel as an 8-bit binary PGM for visual inspection."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, ch in (("occupancy", grid.occupancy), ("rel_speed", grid.rel_speed),
                     ("rel_heading", grid.rel_heading)):
        ch = np.asarray(ch, dtype=float)
        lo, hi = float(ch.min()), float(ch.max())
        img = np.zeros(ch.shape, dtype=np.uint8) if hi == lo else ((ch - lo) / (hi - lo) * 255).round().astype(np.uint8)
        path = out_dir / f"{prefix}_{name}.pgm"
        with open(path, "wb") as f:
            f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
            f.write(img.tobytes())
        paths.append(path)
    return paths
