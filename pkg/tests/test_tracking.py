import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import solve_discrete_are

from autolabel3d.geometry import Box7, Pose, fit_tightest_box, iou_bev, nms
from autolabel3d.proposals import Proposal, propose_boxes
from autolabel3d.tracking import (
    KalmanState,
    LabeledBox,
    RegistrationParams,
    Track,
    TrackerParams,
    amodalize,
    cleanup_labels,
    kf_predict,
    kf_update,
    process_covariance,
    register_track,
    track_proposals,
    transition_matrix,
)

import oracles

H = np.hstack([np.eye(3), np.zeros((3, 3))])


def surface_cloud(rng, dims=(4.0, 1.8, 1.5), n=600):
    """Points on the faces of a box centred at the origin."""
    half = np.asarray(dims) / 2
    pts = rng.uniform(-half, half, size=(n, 3))
    axis = rng.integers(0, 3, n)
    sign = rng.choice([-1.0, 1.0], n)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def prop_at(center, flow=(0.0, 0.0, 0.0), dims=(1.0, 1.0, 1.0), idx=None):
    box = Box7(*center, *dims, 0.0)
    return Proposal(box, np.arange(5) if idx is None else idx, np.asarray(flow, float), 0.0)


# Kalman filter


def test_kf_predict_constant_velocity():
    s = KalmanState(np.array([0, 0, 0, 1, 0, 0.0]), np.eye(6))
    out = kf_predict(s, 1.0)
    assert np.allclose(out.mean, [1, 0, 0, 1, 0, 0])


def test_kf_update_noise_free_takes_measurement():
    s = KalmanState(np.array([0, 0, 0, 1, 0, 0.0]), np.eye(6))
    out = kf_update(s, [2.0, -1.0, 0.5], measurement_noise=0.0)
    assert np.allclose(out.position, [2.0, -1.0, 0.5], atol=1e-12)


def test_kf_errors():
    s = KalmanState(np.zeros(6), np.eye(6))
    with pytest.raises(ValueError):
        kf_predict(s, 0.0)
    with pytest.raises(ValueError):
        KalmanState(np.zeros(6), -np.eye(6))
    bad = np.eye(6)
    bad[0, 1] = 0.5
    with pytest.raises(ValueError):
        KalmanState(np.zeros(6), bad)


def test_kf_converges_to_riccati_fixed_point():
    dt, q, r = 0.1, 4.0, 0.25
    f, qm, rm = transition_matrix(dt), process_covariance(dt, q), r * np.eye(3)
    p_inf = solve_discrete_are(f.T, H.T, qm, rm)
    v = np.array([3.0, -1.0, 0.0])
    s = KalmanState(np.zeros(6), 10 * np.eye(6))
    for k in range(1, 400):
        s = kf_predict(s, dt, q)
        pred_cov = s.covariance
        s = kf_update(s, v * k * dt, r)
    assert np.allclose(pred_cov, p_inf, atol=1e-8)
    assert np.allclose(s.position, v * 399 * dt, atol=1e-6)
    assert np.allclose(s.velocity, v, atol=1e-6)


def test_kf_covariance_psd_random_cycles():
    rng = np.random.default_rng(0)
    s = KalmanState(np.zeros(6), np.eye(6))
    for _ in range(1000):
        s = kf_predict(s, float(rng.uniform(0.01, 1.0)), float(rng.uniform(0, 10)))
        s = kf_update(s, rng.normal(size=3) * 10, float(rng.uniform(1e-4, 5)))
        p = s.covariance
        assert np.abs(p - p.T).max() <= 1e-9
        assert np.linalg.eigvalsh(p).min() >= -1e-9


# association


def test_single_object_one_track():
    per_frame = [[prop_at((k * 0.5, 0, 0), (5, 0, 0))] for k in range(10)]
    tracks = track_proposals(per_frame)
    assert len(tracks) == 1 and tracks[0].frames == list(range(10))


def test_parallel_objects_no_swaps():
    per_frame = []
    for k in range(10):
        a = prop_at((k * 0.5, 0, 0), (5, 0, 0), idx=np.array([0]))
        b = prop_at((k * 0.5, 10, 0), (5, 0, 0), idx=np.array([1]))
        per_frame.append([b, a] if k % 2 else [a, b])
    tracks = track_proposals(per_frame)
    assert len(tracks) == 2
    for t in tracks:
        assert len(t) == 10
        assert len({int(p.point_indices[0]) for _, p in t.observations}) == 1


def test_one_frame_gap_keeps_track():
    per_frame = [[prop_at((k * 0.5, 0, 0), (5, 0, 0))] if k != 4 else [] for k in range(10)]
    tracks = track_proposals(per_frame, TrackerParams(max_misses=2))
    assert len(tracks) == 1 and tracks[0].frames == [k for k in range(10) if k != 4]


def test_long_gap_starts_new_track():
    per_frame = [[prop_at((0, 0, 0))] if k not in (3, 4, 5) else [] for k in range(8)]
    assert len(track_proposals(per_frame, TrackerParams(max_misses=2))) == 2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_track_invariants(seed):
    rng = np.random.default_rng(seed)
    per_frame = [[prop_at(rng.uniform(-15, 15, 3)) for _ in range(rng.integers(0, 5))] for _ in range(12)]
    tracks = track_proposals(per_frame)
    assert len({t.id for t in tracks}) == len(tracks)
    used = set()
    for t in tracks:
        assert all(a < b for a, b in zip(t.frames, t.frames[1:]))
        for f, p in t.observations:
            assert (f, id(p)) not in used
            used.add((f, id(p)))
    assert len(used) == sum(len(p) for p in per_frame)


# registration


def make_track(sets, flows):
    obs = []
    for k, (pts, fl) in enumerate(zip(sets, flows)):
        obs.append((k, Proposal(fit_tightest_box(pts, 0.0), np.arange(len(pts)), np.asarray(fl, float), 0.0)))
    return Track(0, obs)


def test_register_identical_sets_identity():
    pts = surface_cloud(np.random.default_rng(1))
    track = make_track([pts] * 5, [(0, 0, 0)] * 5)
    shape = register_track(track, [pts] * 5)
    for pose in shape.per_frame_transforms:
        assert np.abs(pose.as_matrix() - np.eye(4)).max() <= 1e-9
    assert not any(shape.flagged)


def test_register_length_one():
    pts = surface_cloud(np.random.default_rng(2))
    shape = register_track(make_track([pts], [(0, 0, 0)]), [pts])
    (pose,) = shape.per_frame_transforms
    assert np.array_equal(pose.as_matrix(), np.eye(4))
    assert np.array_equal(shape.aggregated_points, pts)


def test_register_empty_track_errors():
    with pytest.raises(ValueError):
        register_track(Track(0), [])


@pytest.mark.parametrize("flow_scale", [1.0, 0.8, 1.2])
def test_register_recovers_translation(flow_scale):
    rng = np.random.default_rng(3)
    base = surface_cloud(rng)
    step = np.array([0.5, 0.2, 0.0])
    sets = [base + k * step for k in range(6)]
    track = make_track(sets, [flow_scale * step / 0.1] * 6)
    shape = register_track(track, sets)
    for k, pose in enumerate(shape.per_frame_transforms):
        assert np.allclose(pose.translation, -k * step, atol=1e-3)
        assert abs(pose.yaw) < 1e-4


def test_register_noisy_within_tolerance():
    rng = np.random.default_rng(4)
    base = surface_cloud(rng, n=1500)
    step = np.array([0.5, 0.2, 0.0])
    sets = [base + k * step + rng.normal(scale=0.01, size=base.shape) for k in range(6)]
    shape = register_track(make_track(sets, [step / 0.1] * 6), sets)
    for k, pose in enumerate(shape.per_frame_transforms):
        assert np.linalg.norm(pose.translation + k * step) <= 0.02
        assert abs(pose.yaw) <= math.radians(0.5)


def test_register_partition_matches_transforms_and_round_trip():
    rng = np.random.default_rng(5)
    base = surface_cloud(rng)
    sets = [Pose.from_yaw(0.02 * k, (0.4 * k, 0.1 * k, 0)).apply(base) for k in range(5)]
    shape = register_track(make_track(sets, [(4, 1, 0)] * 5), sets)
    for i, (pose, pts) in enumerate(zip(shape.per_frame_transforms, sets)):
        assert np.array_equal(shape.partition(i), pose.apply(pts))
    canon = [shape.partition(i) for i in range(5)]
    again = register_track(make_track(canon, [(0, 0, 0)] * 5), canon)
    for pose in again.per_frame_transforms:
        assert np.abs(pose.as_matrix() - np.eye(4)).max() <= 1e-6


def test_register_kalman_init():
    rng = np.random.default_rng(6)
    base = surface_cloud(rng)
    step = np.array([0.5, 0.2, 0.0])
    sets = [base + k * step for k in range(6)]
    per_frame = [[Proposal(fit_tightest_box(s, 0.0), np.arange(len(s)), step / 0.1, 0.0)] for s in sets]
    (track,) = track_proposals(per_frame)
    shape = register_track(track, sets, params=RegistrationParams(init="kalman"))
    for k, pose in enumerate(shape.per_frame_transforms):
        assert np.allclose(pose.translation, -k * step, atol=1e-3)
    with pytest.raises(ValueError):
        register_track(track, sets, params=RegistrationParams(init="nope"))


# amodal boxes


def test_amodal_single_frame_equals_visible():
    rng = np.random.default_rng(7)
    pts = Pose.from_yaw(0.3, (5, 2, 1)).apply(surface_cloud(rng))
    (prop,) = propose_boxes(np.zeros(len(pts), int), pts, np.zeros(len(pts), bool))
    track = Track(3, [(0, prop)])
    shape = register_track(track, [pts])
    (lab,) = amodalize(track, shape, [0.0])
    assert np.allclose(lab.box.as_array(), prop.box.as_array(), atol=1e-9)
    assert lab.track_id == 3 and lab.frame == 0 and 0 <= lab.score <= 1


def test_amodal_static_matches_tightest_and_shares_dims():
    rng = np.random.default_rng(8)
    base = Pose.from_yaw(0.4, (10, -3, 0.8)).apply(surface_cloud(rng, n=2000))
    sets = [base + rng.normal(scale=0.01, size=base.shape) for _ in range(5)]
    props = [propose_boxes(np.zeros(len(s), int), s, np.zeros(len(s), bool))[0] for s in sets]
    track = Track(0, list(enumerate(props)))
    labels = amodalize(track, register_track(track, sets), [0.0] * 5)
    assert len(labels) == 5
    dims = {tuple(l.box.dims) for l in labels}
    assert len(dims) == 1
    for lab, p in zip(labels, props):
        assert np.allclose(lab.box.dims, p.box.dims, rtol=0.05)


# cleanup


def lab(box, score, frame=0, tid=0):
    return LabeledBox(box, tid, frame, score)


def test_cleanup_coincident():
    b = Box7(0, 0, 0, 4, 2, 1.5, 0)
    out = cleanup_labels([lab(b, 0.5, tid=1), lab(b, 0.9, tid=2)])
    assert [o.track_id for o in out] == [2]


def test_cleanup_drops_tiny_and_huge():
    tiny = Box7(0, 0, 0, 0.01, 0.01, 0.01, 0)
    huge = Box7(5, 5, 0, 30, 2, 2, 0)
    assert cleanup_labels([lab(tiny, 1.0), lab(huge, 1.0, tid=1)], min_dim=0.1, max_diag=20.0) == []


def test_cleanup_chain_matches_oracle():
    boxes = [Box7(0, 0, 0, 2, 1, 1, 0), Box7(0.8, 0, 0, 2, 1, 1, 0), Box7(1.6, 0, 0, 2, 1, 1, 0)]
    scores = [0.9, 0.8, 0.7]
    out = cleanup_labels([lab(b, s, tid=i) for i, (b, s) in enumerate(zip(boxes, scores))], nms_iou=0.4)
    iou = [[iou_bev(a, b) for b in boxes] for a in boxes]
    assert [o.track_id for o in out] == oracles.subset_nms(iou, scores, 0.4)


def test_cleanup_is_per_frame():
    b = Box7(0, 0, 0, 4, 2, 1.5, 0)
    out = cleanup_labels([lab(b, 0.9, frame=0), lab(b, 0.5, frame=1, tid=1)])
    assert len(out) == 2


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_cleanup_pairwise_iou_below_threshold(seed):
    rng = np.random.default_rng(seed)
    labels = [
        lab(Box7(*rng.uniform(-4, 4, 2), 0, *rng.uniform(0.5, 4, 3), rng.uniform(-3, 3)), float(rng.random()), int(rng.integers(0, 3)), i)
        for i in range(int(rng.integers(1, 12)))
    ]
    out = cleanup_labels(labels, nms_iou=0.5)
    for i, a in enumerate(out):
        for b in out[i + 1:]:
            if a.frame == b.frame:
                assert iou_bev(a.box, b.box) < 0.5
