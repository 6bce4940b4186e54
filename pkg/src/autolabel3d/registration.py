"""Point-to-point ICP (Besl-McKay) with capped nearest-neighbour correspondences."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._validation import check_points
from .geometry import Pose, yaw_matrix


@dataclass(frozen=True)
class IcpResult:
    pose: Pose
    residual: float
    iterations: int
    converged: bool
    n_inliers: int


def best_fit_transform(source, target, upright=True):
    """Least-squares rigid transform mapping ``source`` rows onto ``target`` rows.

    With ``upright`` the rotation is restricted to yaw (2-D Kabsch in x/y,
    z aligned by mean offset).
    """
    src_c = source.mean(axis=0)
    dst_c = target.mean(axis=0)
    a = source - src_c
    b = target - dst_c
    if upright:
        # closed-form yaw maximising sum of dot products in the xy plane
        sxx = np.dot(a[:, 0], b[:, 0]) + np.dot(a[:, 1], b[:, 1])
        sxy = np.dot(a[:, 0], b[:, 1]) - np.dot(a[:, 1], b[:, 0])
        yaw = math.atan2(sxy, sxx) if (sxx != 0.0 or sxy != 0.0) else 0.0
        rot = yaw_matrix(yaw)
    else:
        h = a.T @ b
        u, _, vt = np.linalg.svd(h)
        d = np.sign(np.linalg.det(vt.T @ u.T))
        rot = vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ u.T
    return Pose(rot, dst_c - rot @ src_c)


def _pose_delta(a, b):
    dr = a.rotation.T @ b.rotation
    angle = math.acos(max(-1.0, min(1.0, (np.trace(dr) - 1.0) / 2.0)))
    return float(np.linalg.norm(a.translation - b.translation)) + angle


def icp(
    source,
    target,
    init=None,
    max_iterations=50,
    max_correspondence_dist=2.0,
    tolerance=1e-4,
    trim_factor=3.0,
    trim_floor=0.05,
    upright=True,
    target_tree=None,
):
    """Register ``source`` onto ``target``; returns the pose mapping source to target.

    Correspondences farther than ``max_correspondence_dist`` are ignored, as
    are those beyond ``max(trim_factor * median, trim_floor)`` of the current
    correspondence distances, so partially overlapping views do not drag the
    estimate. Iteration stops once the pose changes by less than
    ``tolerance`` (metres plus radians).
    """
    src = check_points(source, "source", allow_empty=False)
    dst = check_points(target, "target", allow_empty=False)
    tree = target_tree if target_tree is not None else cKDTree(dst)
    pose = init if init is not None else Pose.identity()
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        moved = pose.apply(src)
        dist, j = tree.query(moved)
        inl = dist <= max_correspondence_dist
        if trim_factor is not None and inl.sum() >= 3:
            cut = max(trim_factor * float(np.median(dist[inl])), trim_floor)
            inl &= dist <= cut
        if inl.sum() < 3:
            break
        new_pose = best_fit_transform(src[inl], dst[j[inl]], upright=upright)
        delta = _pose_delta(pose, new_pose)
        pose = new_pose
        if delta < tolerance:
            converged = True
            break
    dist, _ = tree.query(pose.apply(src))
    inl = dist <= max_correspondence_dist
    residual = float(dist[inl].mean()) if inl.any() else math.inf
    return IcpResult(pose, residual, it, converged, int(inl.sum()))
