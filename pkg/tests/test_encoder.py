import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uninav import sim
from uninav.encoder import RoiSpec, encode, roi_vertices, world_to_cell, wrap_degrees, write_pgm
from uninav.sim import EgoState, Pedestrian

SPEC = RoiSpec()


def make_state(ego, peds, topology=sim.load_topology("three-way")):
    base = sim.reset(topology, 0)
    return replace(base, ego=ego).with_pedestrians(peds)


def rasterize(state, spec=SPEC):
    """O(cells x agents) reference: every cell centre is placed in the world
    and tested against every agent footprint."""
    ego = state.ego
    fx, fy = math.cos(ego.heading), math.sin(ego.heading)
    rx, ry = math.sin(ego.heading), -math.cos(ego.heading)
    out = np.zeros((3, spec.rows, spec.cols), dtype=np.float32)
    peds = state.pedestrians()
    ego_v = (ego.speed * fx, ego.speed * fy)
    for r in range(spec.rows):
        ahead = 16.0 - (r + 0.5) * spec.cell_length
        for c in range(spec.cols):
            right = -7.5 + (c + 0.5) * spec.cell_width
            wx = ego.x + ahead * fx + right * rx
            wy = ego.y + ahead * fy + right * ry
            if abs(ahead) <= ego.length / 2 and abs(right) <= ego.width / 2:
                out[0, r, c] = 1.0
                continue
            best = None
            for p in peds:
                if (wx - p.x) ** 2 + (wy - p.y) ** 2 <= p.radius ** 2:
                    key = (math.hypot(p.x - ego.x, p.y - ego.y), p.id)
                    if best is None or key < best[0]:
                        best = (key, p)
            if best is not None:
                p = best[1]
                d = math.hypot(p.dest_x - p.x, p.dest_y - p.y)
                vx, vy = (p.speed * (p.dest_x - p.x) / d, p.speed * (p.dest_y - p.y) / d) if d else (0.0, 0.0)
                heading = math.degrees(math.atan2(p.dest_y - p.y, p.dest_x - p.x) - ego.heading)
                heading = (heading + 180.0) % 360.0 - 180.0
                out[0, r, c] = 1.0
                out[1, r, c] = math.hypot(vx - ego_v[0], vy - ego_v[1])
                out[2, r, c] = 180.0 if heading == -180.0 else heading
    return out


def random_scene(rng):
    ego = EgoState(*rng.uniform(-10, 10, 2), rng.uniform(-math.pi, math.pi), rng.uniform(0, 12), 0.0)
    n = int(rng.integers(0, 25))
    peds = []
    fwd = np.array([math.cos(ego.heading), math.sin(ego.heading)])
    for i in range(n):
        # most pedestrians near or inside the ROI, a few clustered to force overlaps
        centre = np.array([ego.x, ego.y]) + fwd * rng.uniform(-6, 18) + rng.normal(0, 5, 2)
        if peds and rng.random() < 0.25:
            centre = np.array([peds[-1].x, peds[-1].y]) + rng.normal(0, 0.25, 2)
        dest = centre + rng.normal(0, 5, 2)
        peds.append(Pedestrian(i, *centre, rng.uniform(0.2, 1.8), *dest))
    return make_state(ego, peds)


def test_encoder_matches_brute_force_rasterizer():
    rng = np.random.default_rng(2024)
    overlaps = 0
    for _ in range(500):
        state = random_scene(rng)
        want = rasterize(state)
        got = encode(state).data
        np.testing.assert_array_equal(got, want)
        overlaps += int(want[0].sum() > 144)
    assert overlaps > 200  # pedestrians actually landed in most scenes


def test_empty_scene_is_ego_footprint_only():
    state = make_state(EgoState(3.0, -2.0, 0.7, 5.0, 0.0), [])
    g = encode(state)
    assert g.occupancy.sum() == 144
    rows, cols = np.nonzero(g.occupancy)
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (55, 72, 26, 33)
    assert not g.rel_speed.any() and not g.rel_heading.any()


def test_co_moving_pedestrian_has_zero_relative_channels():
    ego = EgoState(0.0, 0.0, 0.3, 1.2, 0.0)
    fwd = np.array([math.cos(0.3), math.sin(0.3)])
    p = np.array([0.0, 0.0]) + fwd * 8
    dest = p + fwd * 50
    g = encode(make_state(ego, [Pedestrian(0, *p, 1.2, *dest)]))
    cells = g.occupancy.astype(bool)
    cells[55:73, 26:34] = False
    assert cells.sum() > 0
    np.testing.assert_allclose(g.rel_speed[cells], 0, atol=1e-6)
    np.testing.assert_allclose(g.rel_heading[cells], 0, atol=1e-4)


def test_stationary_pedestrian_relative_channels():
    ego = EgoState(0.0, 0.0, 0.0, 3.0, 0.0)
    ped = Pedestrian(0, 6.0, 0.0, 0.0, 6.0, 1.0)  # heading 90 deg, speed 0
    g = encode(make_state(ego, [ped]))
    r, c = world_to_cell((6.0, 0.0), ego)
    assert g.occupancy[r, c] == 1
    assert g.rel_speed[r, c] == pytest.approx(3.0)
    assert g.rel_heading[r, c] == pytest.approx(90.0)


def test_roi_vertices_form_rigid_rectangle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        ego = EgoState(*rng.uniform(-50, 50, 2), rng.uniform(-4, 4), 0.0, 0.0)
        rr, rl, fr, fl = roi_vertices(ego)
        assert np.linalg.norm(rr - rl) == pytest.approx(15.0)
        assert np.linalg.norm(fr - fl) == pytest.approx(15.0)
        assert np.linalg.norm(fr - rr) == pytest.approx(20.0)
        assert np.linalg.norm(fl - rl) == pytest.approx(20.0)
        assert np.dot(fr - rr, rl - rr) == pytest.approx(0.0, abs=1e-9)


def test_roi_vertices_lateral_and_longitudinal_extent():
    rr, rl, fr, fl = roi_vertices(EgoState(0.0, 0.0, 0.0, 0.0, 0.0))
    assert rr[1] == pytest.approx(-7.5)
    assert rl[1] == pytest.approx(7.5)
    # 4 m behind and 16 m ahead of the ego centre along the heading
    assert rr[0] == pytest.approx(-4.0)
    assert fr[0] == pytest.approx(16.0)


@pytest.mark.xfail(strict=True, reason="literal table sign puts the rear edge ahead of the ego; "
                                       "the ROI here is a rigid rectangle facing the direction of travel")
def test_roi_rear_right_x_literal_table_value():
    rr = roi_vertices(EgoState(0.0, 0.0, 0.0, 0.0, 0.0))[0]
    assert rr[0] == pytest.approx(4.0)


def test_roi_vertices_bound_every_cell_centre():
    ego = EgoState(2.0, -1.0, 1.1, 0.0, 0.0)
    rr, rl, fr, fl = roi_vertices(ego)
    fwd = (fr - rr) / 20.0
    side = (rr - rl) / 15.0
    lon, right = SPEC.cell_centres()
    for a in lon[[0, -1]]:
        for b in right[[0, -1]]:
            p = np.array([ego.x, ego.y]) + a * np.array([math.cos(1.1), math.sin(1.1)]) \
                + b * np.array([math.sin(1.1), -math.cos(1.1)])
            assert 0 < np.dot(p - rl, fwd) < 20 and 0 < np.dot(p - rl, side) < 15


def test_world_to_cell_examples():
    for theta in (0.0, 0.5, -2.0, math.pi):
        ego = EgoState(4.0, -3.0, theta, 0.0, 0.0)
        assert world_to_cell((4.0, -3.0), ego) == (64, 30)
        ahead = (4.0 + math.cos(theta), -3.0 + math.sin(theta))
        assert world_to_cell(ahead, ego) == (60, 30)
        behind = (4.0 - 100 * math.cos(theta), -3.0 - 100 * math.sin(theta))
        assert world_to_cell(behind, ego) is None


def test_anchor_cell():
    assert SPEC.anchor == (64, 30)
    assert (SPEC.rows, SPEC.cols) == (80, 60)


@given(x=st.floats(-40, 40), y=st.floats(-40, 40), theta=st.floats(-math.pi, math.pi),
       px=st.floats(-40, 40), py=st.floats(-40, 40))
@settings(max_examples=300, deadline=None)
def test_world_to_cell_indices_in_range(x, y, theta, px, py):
    cell = world_to_cell((px, py), EgoState(x, y, theta, 0.0, 0.0))
    if cell is not None:
        assert 0 <= cell[0] < 80 and 0 <= cell[1] < 60


@given(angle=st.floats(-1e4, 1e4))
def test_wrap_degrees_range(angle):
    w = float(wrap_degrees(angle))
    assert -180.0 < w <= 180.0
    assert math.isclose(math.cos(math.radians(w)), math.cos(math.radians(angle)), abs_tol=1e-6)


def test_wrap_degrees_boundary():
    assert float(wrap_degrees(-180.0)) == 180.0
    assert float(wrap_degrees(540.0)) == 180.0


@given(seed=st.integers(0, 10**6), dx=st.floats(-30, 30), dy=st.floats(-30, 30),
       rot=st.sampled_from([0.5 * math.pi * k for k in range(4)]))
@settings(max_examples=40, deadline=None)
def test_rigid_world_transform_leaves_grid_unchanged(seed, dx, dy, rot):
    """Quarter-turn rotations and dyadic translations are exact in floating point."""
    rng = np.random.default_rng(seed)
    state = random_scene(rng)
    dx, dy = round(dx * 4) / 4, round(dy * 4) / 4
    c, s = round(math.cos(rot)), round(math.sin(rot))

    def move(px, py):
        return c * px - s * py + dx, s * px + c * py + dy

    e = state.ego
    ego = replace(e, x=move(e.x, e.y)[0], y=move(e.x, e.y)[1], heading=e.heading + rot)
    peds = [replace(p, x=move(p.x, p.y)[0], y=move(p.x, p.y)[1],
                    dest_x=move(p.dest_x, p.dest_y)[0], dest_y=move(p.dest_x, p.dest_y)[1])
            for p in state.pedestrians()]
    a = encode(state).data
    b = encode(make_state(ego, peds)).data
    assert np.mean(a[0] != b[0]) < 0.002  # only cells whose centre sits on a disc edge may flip
    both = (a[0] == 1) & (b[0] == 1)
    np.testing.assert_allclose(a[1][both], b[1][both], atol=1e-4)
    np.testing.assert_allclose(np.cos(np.radians(a[2][both])), np.cos(np.radians(b[2][both])), atol=1e-4)


@given(seed=st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_channel_support_inside_occupancy(seed):
    g = encode(random_scene(np.random.default_rng(seed)))
    free = g.occupancy == 0
    assert not g.rel_speed[free].any() and not g.rel_heading[free].any()
    assert g.occupancy.sum() >= 144
    assert set(np.unique(g.occupancy)) <= {0.0, 1.0}


def test_overlap_resolves_to_nearest_then_lowest_id():
    ego = EgoState(0.0, 0.0, 0.0, 0.0, 0.0)
    near = Pedestrian(5, 8.0, 0.0, 1.0, 8.0, 5.0)   # heading +90
    far = Pedestrian(1, 8.2, 0.0, 1.0, 8.2, -5.0)   # heading -90, overlaps near
    g = encode(make_state(ego, [far, near]))
    r, c = world_to_cell((8.1, 0.0), ego)
    assert g.rel_heading[r, c] == pytest.approx(90.0)
    twin = Pedestrian(0, 8.0, 0.0, 1.0, 8.0, -5.0)  # same distance as `near`, lower id
    g = encode(make_state(ego, [near, twin]))
    assert g.rel_heading[r, c] == pytest.approx(-90.0)


def test_ego_cells_override_pedestrians():
    ego = EgoState(0.0, 0.0, 0.0, 4.0, 0.0)
    g = encode(make_state(ego, [Pedestrian(0, 2.3, 0.0, 1.0, 2.3, 3.0)]))
    assert g.rel_speed[55:73, 26:34].max() == 0.0
    assert g.occupancy.sum() > 144


def test_pgm_dump(tmp_path):
    g = encode(sim.reset(sim.load_topology("three-way"), 4))
    paths = write_pgm(g, tmp_path)
    assert len(paths) == 3
    raw = paths[0].read_bytes()
    assert raw.startswith(b"P5\n60 80\n255\n")
    assert len(raw) == len(b"P5\n60 80\n255\n") + 80 * 60
