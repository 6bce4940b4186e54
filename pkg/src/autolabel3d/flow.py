"""Ground removal, cluster-rigid scene flow and speed masking.

Scene flow here is estimated per spatial cluster with ICP rather than with a
learned model: each connected component of the source sweep is registered to
the next sweep and every member point moves with the cluster's rigid motion.
Flow vectors are world-frame metres per second.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ._validation import check_mask, check_points, check_positive
from .geometry import Pose
from .registration import icp

DEFAULT_CLEARANCE = 0.3


@dataclass(frozen=True)
class GroundModel:
    """Plane ``normal . p + offset = 0`` with upward unit normal."""

    normal: np.ndarray
    offset: float
    clearance: float = DEFAULT_CLEARANCE

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if not np.isfinite(n).all() or norm == 0:
            raise ValueError("ground normal must be finite and non-zero")
        n = n / norm
        off = float(self.offset) / norm
        if n[2] < 0:
            n, off = -n, -off
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", off)

    def signed_distance(self, points):
        return np.asarray(points, dtype=np.float64) @ self.normal + self.offset

    def height_at(self, x, y):
        """z of the plane under (x, y)."""
        nx, ny, nz = self.normal
        return -(self.offset + nx * x + ny * y) / nz


@dataclass(frozen=True)
class FlowField:
    vectors: np.ndarray
    dt: float
    confident: np.ndarray = None

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(v).all():
            raise ValueError("flow vectors must be finite")
        check_positive(self.dt, "dt")
        object.__setattr__(self, "vectors", v)
        conf = np.ones(len(v), dtype=bool) if self.confident is None else check_mask(self.confident, len(v), "confident")
        object.__setattr__(self, "confident", conf)

    def __len__(self):
        return len(self.vectors)

    @property
    def speed(self):
        return np.linalg.norm(self.vectors, axis=1)

    def __neg__(self):
        return FlowField(-self.vectors, self.dt, self.confident)


def fit_ground(
    points,
    band_height=1.5,
    inlier_threshold=0.1,
    iterations=200,
    max_slope_deg=30.0,
    min_inlier_fraction=0.2,
    clearance=DEFAULT_CLEARANCE,
    seed=0,
):
    """RANSAC plane fit over the lowest ``band_height`` metres of the sweep.

    Only planes tilted at most ``max_slope_deg`` from horizontal are
    considered, so walls never win. The consensus set is refined by a
    least-squares (SVD) plane.
    """
    pts = check_points(points)
    if len(pts) < 50:
        raise ValueError(f"ground fitting needs at least 50 points, got {len(pts)}")
    z_floor = np.quantile(pts[:, 2], 0.02)
    cand = pts[pts[:, 2] <= z_floor + band_height]
    if len(cand) < 3:
        raise ValueError("too few candidate ground points in the lowest height band")
    rng = np.random.default_rng(seed)
    min_cos = math.cos(math.radians(max_slope_deg))
    scale = max(float(np.ptp(cand, axis=0).max()), 1.0)
    best_count, best = 0, None
    for _ in range(iterations):
        a, b, c = cand[rng.choice(len(cand), 3, replace=False)]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-9 * scale * scale:
            continue
        n = n / norm
        if abs(n[2]) < min_cos:
            continue
        d = -float(n @ a)
        count = int((np.abs(cand @ n + d) <= inlier_threshold).sum())
        if count > best_count:
            best_count, best = count, (n, d)
    if best is None or best_count < min_inlier_fraction * len(cand):
        raise ValueError(
            "no ground plane with enough inliers (degenerate geometry); "
            "fall back to a fixed height threshold for ground removal"
        )
    n, d = best
    for _ in range(2):
        inl = cand[np.abs(cand @ n + d) <= inlier_threshold]
        centroid = inl.mean(axis=0)
        _, _, vt = np.linalg.svd(inl - centroid, full_matrices=False)
        n = vt[-1]
        if n[2] < 0:
            n = -n
        d = -float(n @ centroid)
    return GroundModel(n, d, clearance)


def remove_ground(points, model):
    """Mask of points kept: strictly more than ``clearance`` above the plane."""
    pts = check_points(points)
    return model.signed_distance(pts) > model.clearance


def connected_clusters(points, radius):
    """Connected components of the ``radius``-neighbourhood graph.

    Labels are numbered by the lowest point index in each component.
    """
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, raw = connected_components(graph, directed=False)
    # renumber by first occurrence
    _, first = np.unique(raw, return_index=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return remap[raw]


def _component_centroids(points, radius, min_points):
    labels = connected_clusters(points, radius)
    if len(labels) == 0:
        return np.zeros((0, 3))
    counts = np.bincount(labels)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, labels, points)
    keep = counts >= min_points
    return sums[keep] / counts[keep, None]


def estimate_scene_flow(
    points_t,
    points_next,
    dt,
    cluster_radius=0.7,
    search_margin=3.0,
    max_correspondence_dist=2.0,
    residual_cap=0.15,
    min_cluster_points=3,
    upright=True,
    max_iterations=50,
    n_candidates=3,
    min_inlier_fraction=0.5,
    score_cap=0.05,
):
    """Cluster-rigid ICP flow from world-frame sweep ``points_t`` to ``points_next``.

    Each cluster is registered from several starts: identity and the
    centroid offsets to the ``n_candidates`` nearest components of the next
    sweep (point-to-point ICP alone slides along flat faces and stalls on
    large displacements). Among the starts and their ICP results, the pose
    with the lowest mean nearest-neighbour distance, each distance
    truncated at ``score_cap``, wins. Clusters where fewer than ``min_inlier_fraction`` of the
    points land within ``residual_cap`` of the next sweep get zero flow and
    ``confident=False``.
    """
    src = check_points(points_t, "points_t")
    dst = check_points(points_next, "points_next")
    dt = check_positive(dt, "dt")
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("scene flow needs two non-empty sweeps")
    vectors = np.zeros_like(src)
    confident = np.zeros(len(src), dtype=bool)
    labels = connected_clusters(src, cluster_radius)
    tree = cKDTree(dst)
    dst_centres = _component_centroids(dst, cluster_radius, min_cluster_points)
    centre_tree = cKDTree(dst_centres) if len(dst_centres) else None
    order = np.argsort(labels, kind="stable")
    bounds = np.flatnonzero(np.diff(labels[order])) + 1
    for members in np.split(order, bounds):
        if len(members) < min_cluster_points:
            continue
        cluster = src[members]
        centre = cluster.mean(axis=0)
        reach = float(np.linalg.norm(cluster - centre, axis=1).max()) + search_margin
        region = np.array(sorted(tree.query_ball_point(centre, reach)), dtype=np.intp)
        if len(region) < 3:
            continue
        target = dst[region]
        target_tree = cKDTree(target)
        inits = [Pose.identity()]
        if centre_tree is not None and n_candidates > 0:
            k = min(n_candidates, len(dst_centres))
            dist, idx = centre_tree.query(centre, k=k)
            for d, j in zip(np.atleast_1d(dist), np.atleast_1d(idx)):
                if d <= search_margin and d > 1e-6:
                    inits.append(Pose(np.eye(3), dst_centres[j] - centre))
        best = None
        for init in inits:
            res = icp(
                cluster,
                target,
                init=init,
                max_iterations=max_iterations,
                max_correspondence_dist=max_correspondence_dist,
                upright=upright,
                target_tree=target_tree,
            )
            # the start itself competes too: ICP can slide a partial view
            # away from an already good alignment
            for pose in (init, res.pose):
                d, _ = target_tree.query(pose.apply(cluster))
                score = float(np.minimum(d, score_cap).mean())
                if best is None or score < best[0] - 1e-12:
                    best = (score, float((d <= residual_cap).mean()), pose)
        _, frac, pose = best
        if frac < min_inlier_fraction:
            continue
        vectors[members] = (pose.apply(cluster) - cluster) / dt
        confident[members] = True
    return FlowField(vectors, dt, confident)


def backward_flow_negated(points_last, points_prev, dt, **kwargs):
    """Flow for the final sweep: registration against the previous one, negated."""
    return -estimate_scene_flow(points_last, points_prev, dt, **kwargs)


def sequence_flow(world_points, dt, **kwargs):
    """Forward flow for every sweep but the last, negated backward flow for the last."""
    n = len(world_points)
    if n < 2:
        raise ValueError("scene flow needs a sequence of at least two sweeps")
    out = [estimate_scene_flow(world_points[t], world_points[t + 1], dt, **kwargs) for t in range(n - 1)]
    out.append(backward_flow_negated(world_points[-1], world_points[-2], dt, **kwargs))
    return out


def speed_mask(flow, eps_sf):
    """True where the flow magnitude is >= ``eps_sf`` (m/s)."""
    eps_sf = check_positive(eps_sf, "eps_sf", allow_zero=True)
    vectors = flow.vectors if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64).reshape(-1, 3)
    return np.linalg.norm(vectors, axis=1) >= eps_sf
