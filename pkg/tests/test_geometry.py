import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autolabel3d.geometry import (
    Box7,
    Pose,
    SpatialIndex,
    box_corners,
    fit_tightest_box,
    iou_3d,
    iou_bev,
    nms,
    normalize_heading,
    points_in_box,
    radius_neighbors,
    transform_box,
    transform_points,
)

import oracles

finite = st.floats(-50, 50, allow_nan=False)
dims = st.floats(0.2, 6.0)
angles = st.floats(-math.pi, math.pi)


@st.composite
def boxes(draw):
    return Box7(draw(finite), draw(finite), draw(st.floats(-2, 2)), draw(dims), draw(dims), draw(dims), draw(angles))


@st.composite
def near_pairs(draw):
    a = draw(boxes())
    b = Box7(
        a.cx + draw(st.floats(-3, 3)),
        a.cy + draw(st.floats(-3, 3)),
        a.cz + draw(st.floats(-1, 1)),
        draw(dims),
        draw(dims),
        draw(dims),
        draw(angles),
    )
    return a, b


def random_pair(rng):
    a = Box7(*rng.uniform(-1, 1, 3), *rng.uniform(0.5, 4, 3), rng.uniform(-math.pi, math.pi))
    b = Box7(*(a.center + rng.uniform(-1.5, 1.5, 3)), *rng.uniform(0.5, 4, 3), rng.uniform(-math.pi, math.pi))
    return a, b


# ---------------------------------------------------------------- poses


def test_identity_pose_keeps_points():
    p = np.array([[1.0, -2.0, 3.5], [0.1, 0.2, 0.3]])
    assert np.array_equal(transform_points(p, Pose.identity()), p)


def test_translation_pose():
    out = transform_points([[0.0, 0.0, 0.0]], Pose(np.eye(3), [1.0, 0.0, 0.0]))
    assert np.allclose(out, [[1.0, 0.0, 0.0]])


def test_yaw_quarter_turn():
    out = transform_points([[1.0, 0.0, 0.0]], Pose.from_yaw(math.pi / 2))
    assert np.allclose(out, [[0.0, 1.0, 0.0]], atol=1e-12)


def test_non_finite_point_names_index():
    with pytest.raises(ValueError, match="2"):
        transform_points([[0, 0, 0], [1, 1, 1], [np.nan, 0, 0]], Pose.identity())


def test_pose_rejects_reflection():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_pose_inverse_and_compose():
    rng = np.random.default_rng(0)
    a = Pose.from_yaw(0.7, [1.0, 2.0, 0.5])
    b = Pose.from_yaw(-1.2, [-3.0, 0.0, 1.0])
    p = rng.normal(size=(10, 3))
    assert np.allclose(a.inverse().apply(a.apply(p)), p, atol=1e-12)
    assert np.allclose((a @ b).apply(p), a.apply(b.apply(p)), atol=1e-12)


# ---------------------------------------------------------------- boxes


def test_heading_normalisation_boundary():
    assert normalize_heading(-math.pi) == math.pi
    assert Box7(0, 0, 0, 1, 1, 1, -math.pi).heading == math.pi
    assert normalize_heading(3 * math.pi) == pytest.approx(math.pi)


def test_box_rejects_non_positive_dims():
    with pytest.raises(ValueError):
        Box7(0, 0, 0, 0.0, 1, 1, 0)


def test_unit_box_corners():
    c = box_corners(Box7(0, 0, 0, 1, 1, 1, 0))
    assert sorted(map(tuple, c)) == sorted(
        (x, y, z) for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)
    )
    assert np.allclose(c[0], [0.5, 0.5, -0.5]) and np.allclose(c[4], [0.5, 0.5, 0.5])


def test_heading_pi_keeps_corner_set():
    a = box_corners(Box7(1, 2, 0, 4, 2, 1, 0))
    b = box_corners(Box7(1, 2, 0, 4, 2, 1, math.pi))
    key = lambda c: sorted(map(tuple, np.round(c, 9)))
    assert key(a) == key(b)


def test_quarter_heading_swaps_extents():
    c = box_corners(Box7(0, 0, 0, 4, 2, 1, math.pi / 2))
    assert np.ptp(c[:, 0]) == pytest.approx(2.0)
    assert np.ptp(c[:, 1]) == pytest.approx(4.0)


def test_iou_identical_and_disjoint():
    a = Box7(0, 0, 0, 2, 1, 1, 0.3)
    assert iou_3d(a, a) == pytest.approx(1.0)
    assert iou_3d(a, Box7(10, 0, 0, 2, 1, 1, 0.3)) == 0.0


def test_iou_half_offset_cubes():
    a = Box7(0, 0, 0, 1, 1, 1, 0)
    b = Box7(0.5, 0, 0, 1, 1, 1, 0)
    assert iou_3d(a, b) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_z_offset_only():
    a = Box7(0, 0, 0, 1, 1, 2, 0)
    b = Box7(0, 0, 1, 1, 1, 2, 0)
    assert iou_3d(a, b) == pytest.approx(1 / 3)
    assert iou_bev(a, b) == pytest.approx(1.0)


def test_iou_rotated_square_analytic():
    # unit square vs itself rotated 45 deg: octagon of area 2(sqrt2 - 1)
    a = Box7(0, 0, 0, 1, 1, 1, 0)
    b = Box7(0, 0, 0, 1, 1, 1, math.pi / 4)
    inter = 2 * (math.sqrt(2) - 1)
    assert iou_3d(a, b) == pytest.approx(inter / (2 - inter), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_iou_matches_monte_carlo(seed):
    a, b = random_pair(np.random.default_rng(seed))
    assert abs(iou_3d(a, b) - oracles.monte_carlo_iou(a, b, 400_000, seed)) < 0.01


@settings(max_examples=200, deadline=None)
@given(near_pairs())
def test_iou_symmetric_and_bounded(pair):
    a, b = pair
    v = iou_3d(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou_3d(b, a), abs=1e-12)
    assert iou_3d(a, a) == pytest.approx(1.0)


@settings(max_examples=200, deadline=None)
@given(near_pairs(), angles, finite, finite, st.floats(-5, 5))
def test_iou_rigid_invariance(pair, yaw, tx, ty, tz):
    a, b = pair
    pose = Pose.from_yaw(yaw, [tx, ty, tz])
    assert iou_3d(transform_box(a, pose), transform_box(b, pose)) == pytest.approx(iou_3d(a, b), abs=1e-6)


def test_points_in_box_boundaries():
    box = Box7(1, 1, 1, 2, 4, 6, 0.4)
    corners = box_corners(box)
    assert points_in_box(box, [box.center])[0]
    assert points_in_box(box, corners).all()
    local = np.array([[1.001, 0, 0], [0, 1.001, 0], [0, 0, 1.001], [-1.001, 0, 0]]) * [1, 2, 3]
    outside = Pose.from_yaw(box.heading, box.center).apply(local)
    assert not points_in_box(box, outside).any()


def test_fit_unit_cube_corners():
    c = box_corners(Box7(0, 0, 0, 1, 1, 1, 0))
    box = fit_tightest_box(c, heading=0.0)
    assert np.allclose(box.as_array(), [0, 0, 0, 1, 1, 1, 0], atol=1e-12)


def test_fit_rotated_cube_matches_sweep():
    c = box_corners(Box7(0, 0, 0, 1, 1, 1, math.radians(30)))
    box = fit_tightest_box(c)
    area, theta = oracles.sweep_min_area(c[:, :2])
    assert box.bev_area == pytest.approx(1.0, abs=1e-9)
    # the sweep is quantised at 1 mrad, so it can only match from above
    assert box.bev_area <= area + 1e-12 and area - 1.0 < 2e-3
    rem = (box.heading - math.radians(30)) % (math.pi / 2)
    assert min(rem, math.pi / 2 - rem) < 1e-9
    assert abs(theta - math.radians(30)) < 1e-3


def test_fit_rectangle_cloud_matches_sweep():
    rng = np.random.default_rng(3)
    xy = rng.uniform([-2, -0.7], [2, 0.7], size=(300, 2)) @ np.array([[math.cos(1.0), math.sin(1.0)], [-math.sin(1.0), math.cos(1.0)]])
    pts = np.column_stack([xy, rng.uniform(0, 1, 300)])
    box = fit_tightest_box(pts)
    area, _ = oracles.sweep_min_area(xy)
    assert box.bev_area <= area + 1e-9
    assert box.bev_area == pytest.approx(area, rel=1e-3)
    assert box.length >= box.width


def test_fit_single_point_clamped():
    box = fit_tightest_box([[1.0, 2.0, 3.0]], min_size=0.05)
    assert box.dims.tolist() == [0.05, 0.05, 0.05]
    assert np.allclose(box.center, [1, 2, 3])


def test_fit_empty_raises():
    with pytest.raises(ValueError):
        fit_tightest_box(np.zeros((0, 3)))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10_000), st.one_of(st.none(), angles))
def test_fit_contains_points(n, seed, heading):
    pts = np.random.default_rng(seed).normal(scale=3.0, size=(n, 3))
    box = fit_tightest_box(pts, heading=heading)
    assert points_in_box(box, pts, tol=1e-7).all()


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 30), st.integers(0, 10_000), angles, st.floats(0.0, 1.0))
def test_fit_with_heading_is_minimal(n, seed, heading, pad):
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    box = fit_tightest_box(pts, heading=heading, min_size=1e-6)
    bigger = box.replace(length=box.length + pad, width=box.width + pad)
    assert box.volume <= bigger.volume
    shrunk = box.replace(length=box.length * 0.99)
    assert not points_in_box(shrunk, pts).all()


# ---------------------------------------------------------------- nms


def test_nms_single_and_duplicate():
    b = Box7(0, 0, 0, 1, 1, 1, 0)
    assert nms([b], [0.3], 0.5) == [0]
    assert nms([b, b], [0.8, 0.9], 0.5) == [1]


def test_nms_chain_keeps_ends():
    a = Box7(0, 0, 0, 2, 1, 1, 0)
    b = Box7(0.8, 0, 0, 2, 1, 1, 0)
    c = Box7(1.6, 0, 0, 2, 1, 1, 0)
    t = 0.4
    assert iou_3d(a, b) >= t and iou_3d(b, c) >= t and iou_3d(a, c) < t
    keep = nms([a, b, c], [0.9, 0.8, 0.7], t)
    assert keep == [0, 2]
    iou = [[iou_3d(x, y) for y in (a, b, c)] for x in (a, b, c)]
    assert set(keep) == oracles.max_score_subset(iou, [0.9, 0.8, 0.7], t)


def test_nms_length_mismatch():
    with pytest.raises(ValueError):
        nms([Box7(0, 0, 0, 1, 1, 1, 0)], [0.1, 0.2], 0.5)


def test_nms_tie_prefers_lower_index():
    b = Box7(0, 0, 0, 1, 1, 1, 0)
    assert nms([b, b, b], [0.5, 0.5, 0.5], 0.5) == [0]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_nms_order_independent(n, seed):
    rng = np.random.default_rng(seed)
    bs = [Box7(*rng.uniform(-2, 2, 2), 0, *rng.uniform(0.5, 3, 3), rng.uniform(-3, 3)) for _ in range(n)]
    scores = list(rng.permutation(n) / n + 0.01)
    perm = rng.permutation(n)
    keep = nms(bs, scores, 0.3)
    keep_p = nms([bs[i] for i in perm], [scores[i] for i in perm], 0.3)
    assert sorted(keep) == sorted(perm[k] for k in keep_p)


# ---------------------------------------------------------------- radius search


def test_radius_empty_index():
    idx = SpatialIndex(np.zeros((0, 3)))
    assert radius_neighbors(idx, [0, 0, 0], 1.0).size == 0


def test_radius_zero_includes_query_point():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    assert radius_neighbors(SpatialIndex(pts), pts[1], 0.0).tolist() == [1]


def test_radius_negative_raises():
    with pytest.raises(ValueError):
        radius_neighbors(SpatialIndex(np.zeros((2, 3))), [0, 0, 0], -1.0)


def test_radius_matches_linear_scan_500():
    rng = np.random.default_rng(11)
    pts = rng.uniform(-5, 5, (500, 3))
    idx = SpatialIndex(pts)
    for q in rng.uniform(-5, 5, (20, 3)):
        assert np.array_equal(radius_neighbors(idx, q, 1.5), oracles.linear_radius(pts, q, 1.5))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000), st.floats(0.0, 4.0))
def test_radius_property(n, seed, r):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-10, 10, (n, 3))
    q = rng.uniform(-10, 10, 3)
    assert np.array_equal(radius_neighbors(SpatialIndex(pts), q, r), oracles.linear_radius(pts, q, r))
