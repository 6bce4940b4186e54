"""Tracking-by-detection, per-track shape registration and amodal boxes."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .geometry import Box7, Pose, fit_tightest_box, iou_bev, min_area_heading, nms, transform_box
from .proposals import Proposal, assign_heading
from .registration import icp

_H = np.hstack([np.eye(3), np.zeros((3, 3))])


def _check_covariance(cov, tol=1e-9):
    cov = np.asarray(cov, dtype=np.float64)
    scale = max(1.0, float(np.abs(cov).max()))
    if np.abs(cov - cov.T).max() > tol * scale:
        raise ValueError("Kalman covariance is not symmetric")
    if np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() < -tol * scale:
        raise ValueError("Kalman covariance is not positive semidefinite")


@dataclass(frozen=True)
class KalmanState:
    """Constant-velocity state (x, y, z, vx, vy, vz)."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64).reshape(6)
        p = np.asarray(self.covariance, dtype=np.float64).reshape(6, 6)
        _check_covariance(p)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", p)

    @property
    def position(self):
        return self.mean[:3]

    @property
    def velocity(self):
        return self.mean[3:]


def transition_matrix(dt):
    f = np.eye(6)
    f[:3, 3:] = dt * np.eye(3)
    return f


def process_covariance(dt, q):
    """White-noise-acceleration process noise with spectral density ``q``."""
    i3 = np.eye(3)
    return q * np.block([[dt**3 / 3 * i3, dt**2 / 2 * i3], [dt**2 / 2 * i3, dt * i3]])


def kf_predict(state, dt, process_noise=1.0):
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    _check_covariance(state.covariance)
    f = transition_matrix(dt)
    p = f @ state.covariance @ f.T + process_covariance(dt, process_noise)
    return KalmanState(f @ state.mean, 0.5 * (p + p.T))


def kf_update(state, measurement, measurement_noise=0.1):
    """Update on a 3D centre measurement (Joseph form).

    ``measurement_noise`` is a variance (scalar) or a 3x3 covariance.
    """
    _check_covariance(state.covariance)
    z = np.asarray(measurement, dtype=np.float64).reshape(3)
    r = np.asarray(measurement_noise, dtype=np.float64)
    r = r * np.eye(3) if r.ndim == 0 else r.reshape(3, 3)
    p = state.covariance
    s = _H @ p @ _H.T + r
    k = np.linalg.solve(s.T, (p @ _H.T).T).T
    mean = state.mean + k @ (z - _H @ state.mean)
    a = np.eye(6) - k @ _H
    p_new = a @ p @ a.T + k @ r @ k.T
    return KalmanState(mean, 0.5 * (p_new + p_new.T))


@dataclass
class Track:
    id: int
    observations: list = field(default_factory=list)
    states: list = field(default_factory=list)
    state: Optional[KalmanState] = None
    misses: int = 0
    alive: bool = True

    @property
    def frames(self):
        return [f for f, _ in self.observations]

    def __len__(self):
        return len(self.observations)


@dataclass(frozen=True)
class TrackerParams:
    dt: float = 0.1
    gate: float = 3.0
    max_misses: int = 2
    process_noise: float = 4.0
    measurement_noise: float = 0.25
    velocity_variance: float = 4.0


def _new_state(prop, params):
    mean = np.concatenate([prop.box.center, prop.mean_flow])
    cov = np.diag([params.measurement_noise] * 3 + [params.velocity_variance] * 3)
    return KalmanState(mean, cov)


def track_proposals(per_frame, params=TrackerParams(), frame_ids=None):
    """Link per-frame proposal lists into tracks.

    ``per_frame[k]`` holds the proposals of frame ``frame_ids[k]`` (default
    ``k``). Association is a minimum-cost assignment on BEV centre distance
    between predicted track positions and proposals, gated at
    ``params.gate``. Unmatched tracks coast for up to ``max_misses`` frames.
    """
    frame_ids = list(range(len(per_frame))) if frame_ids is None else list(frame_ids)
    tracks, live = [], []
    next_id = 0
    for fid, props in zip(frame_ids, per_frame):
        for t in live:
            t.state = kf_predict(t.state, params.dt, params.process_noise)
        matched_t, matched_p = set(), set()
        if live and props:
            pred = np.array([t.state.position[:2] for t in live])
            obs = np.array([p.box.center[:2] for p in props])
            cost = np.linalg.norm(pred[:, None, :] - obs[None, :, :], axis=2)
            big = 1e6
            rows, cols = linear_sum_assignment(np.where(cost <= params.gate, cost, big))
            for r, c in zip(rows, cols):
                if cost[r, c] <= params.gate:
                    t, p = live[r], props[c]
                    t.state = kf_update(t.state, p.box.center, params.measurement_noise)
                    t.observations.append((fid, p))
                    t.states.append(t.state)
                    t.misses = 0
                    matched_t.add(r)
                    matched_p.add(c)
        for r, t in enumerate(live):
            if r not in matched_t:
                t.misses += 1
                if t.misses > params.max_misses:
                    t.alive = False
        live = [t for t in live if t.alive]
        for c, p in enumerate(props):
            if c in matched_p:
                continue
            st = _new_state(p, params)
            t = Track(next_id, [(fid, p)], [st], st)
            next_id += 1
            tracks.append(t)
            live.append(t)
    return tracks


@dataclass
class RegisteredShape:
    """Track points aggregated in the frame of the first observation.

    ``per_frame_transforms[i]`` maps observation ``i``'s points into the
    aggregate; ``offsets`` delimit each observation's slice of
    ``aggregated_points``.
    """

    aggregated_points: np.ndarray
    per_frame_transforms: list
    offsets: np.ndarray
    flagged: list

    def partition(self, i):
        return self.aggregated_points[self.offsets[i]:self.offsets[i + 1]]


@dataclass(frozen=True)
class RegistrationParams:
    init: str = "flow"
    max_iterations: int = 50
    max_correspondence_dist: float = 2.0
    tolerance: float = 1e-4
    residual_cap: float = 0.3
    overlap_dist: float = 0.3
    min_overlap_points: int = 10
    score_cap: float = 0.05


def _initial_offsets(track, dt, mode):
    """Displacement of the object from observation 0 to each observation."""
    obs = track.observations
    if mode == "kalman":
        p0 = track.states[0].position
        return [s.position - p0 for s in track.states]
    if mode != "flow":
        raise ValueError(f"unknown registration init {mode!r}")
    out = [np.zeros(3)]
    for (fa, pa), (fb, pb) in zip(obs[:-1], obs[1:]):
        out.append(out[-1] + 0.5 * (pa.mean_flow + pb.mean_flow) * (fb - fa) * dt)
    return out


def register_track(track, frame_points, dt=0.1, params=RegistrationParams(), point_sets=None):
    """Register every observation onto the growing aggregate with ICP.

    ``frame_points[f]`` are the world-frame points of frame ``f``; each
    observation contributes its proposal's member points (or the matching
    entry of ``point_sets`` when given). The initial guess for observation
    ``i`` is the pose of observation ``i - 1`` shifted by the predicted
    motion between the two. ICP then refines on the source points that
    already lie within ``overlap_dist`` of the aggregate, so views that
    only partly overlap are not dragged onto each other; the refined pose
    replaces the guess only when it lowers the mean nearest-neighbour
    distance (truncated at ``score_cap``). Observations with
    too little overlap, or a refined residual above ``residual_cap``, keep
    the initial guess and are flagged.
    """
    if len(track) < 1:
        raise ValueError("cannot register an empty track")
    sets = point_sets
    if sets is None:
        sets = [np.asarray(frame_points[f], dtype=np.float64)[p.point_indices] for f, p in track.observations]
    offsets0 = _initial_offsets(track, dt, params.init)
    transforms = [Pose.identity()]
    flagged = [False]
    chunks = [np.asarray(sets[0], dtype=np.float64)]
    sizes = [len(chunks[0])]
    agg = chunks[0]
    for i in range(1, len(sets)):
        src = np.asarray(sets[i], dtype=np.float64)
        step = offsets0[i] - offsets0[i - 1]
        prev = transforms[-1]
        init = Pose(prev.rotation, prev.translation - prev.rotation @ step)
        tree = cKDTree(agg)
        d0, _ = tree.query(init.apply(src)) if len(src) else (np.zeros(0), None)
        overlap = src[d0 <= params.overlap_dist]
        pose, bad = init, True
        if len(overlap) >= params.min_overlap_points:
            res = icp(
                overlap,
                agg,
                init=init,
                max_iterations=params.max_iterations,
                max_correspondence_dist=min(params.max_correspondence_dist, params.overlap_dist),
                tolerance=params.tolerance,
                upright=True,
                target_tree=tree,
            )
            if math.isfinite(res.residual) and res.residual <= params.residual_cap:
                bad = False
                # keep the refinement only if it explains the points better
                d1, _ = tree.query(res.pose.apply(src))
                cap = params.score_cap
                if np.minimum(d1, cap).mean() < np.minimum(d0, cap).mean():
                    pose = res.pose
        transforms.append(pose)
        flagged.append(bad)
        moved = pose.apply(src)
        chunks.append(moved)
        sizes.append(len(moved))
        agg = np.vstack([agg, moved])
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.intp)
    return RegisteredShape(agg, transforms, offsets, flagged)


@dataclass(frozen=True)
class LabeledBox:
    box: Box7
    track_id: int
    frame: int
    score: float
    category: Optional[str] = None

    def with_category(self, category):
        return LabeledBox(self.box, self.track_id, self.frame, self.score, category)


def label_score(track_length, support_points, full_length=10, full_support=50):
    """Confidence proxy rewarding persistence and point support."""
    return min(1.0, track_length / full_length) * min(1.0, support_points / full_support)


@dataclass(frozen=True)
class AmodalParams:
    moving_speed: float = 1.0
    min_size: float = 0.05
    snap_to_ground: bool = True
    snap_margin: float = 0.3


def amodalize(track, shape, ego_headings, params=AmodalParams(), ground=None):
    """Fit one box to the aggregated points and map it into every observed frame.

    ``ego_headings[f]`` is the ego yaw at frame ``f``. When ``ground`` (a
    :class:`~autolabel3d.flow.GroundModel` for the first observation's
    frame) is given and ``snap_to_ground`` is set, a box whose bottom is
    within ``clearance + snap_margin`` of the plane is extended down to it,
    recovering the slice removed with the ground points.
    """
    first_frame = track.observations[0][0]
    flows = []
    for (f, prop), pose in zip(track.observations, shape.per_frame_transforms):
        flows.append(pose.rotation @ prop.mean_flow)
    mean_flow = np.mean(flows, axis=0)
    agg = shape.aggregated_points
    raw = min_area_heading(agg[:, :2])
    heading = assign_heading(mean_flow, raw, ego_headings[first_frame], params.moving_speed)
    canon = fit_tightest_box(agg, heading, min_size=params.min_size)
    if ground is not None and params.snap_to_ground:
        floor = float(ground.height_at(canon.cx, canon.cy))
        gap = canon.z_min - floor
        if 0 < gap <= ground.clearance + params.snap_margin:
            canon = canon.replace(cz=0.5 * (floor + canon.z_max), height=canon.z_max - floor)
    score = label_score(len(track), len(agg))
    out = []
    for (f, _), pose in zip(track.observations, shape.per_frame_transforms):
        out.append(LabeledBox(transform_box(canon, pose.inverse()), track.id, f, score))
    return out


def cleanup_labels(boxes, min_dim=0.1, max_diag=20.0, nms_iou=0.5, iou_fn=iou_bev):
    """Per frame: drop tiny / oversized boxes, then greedy NMS on score."""
    by_frame = defaultdict(list)
    for b in boxes:
        if min(b.box.length, b.box.width, b.box.height) < min_dim or b.box.bev_diagonal > max_diag:
            continue
        by_frame[b.frame].append(b)
    out = []
    for f in sorted(by_frame):
        group = sorted(by_frame[f], key=lambda b: b.track_id)
        keep = nms([b.box for b in group], [b.score for b in group], nms_iou, iou_fn=iou_fn)
        out.extend(group[k] for k in keep)
    return out
