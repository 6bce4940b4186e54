"""Spatio-temporal clustering and visible-extent box proposals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, ClusterMixin

from ._validation import check_mask, check_matrix, check_points, check_positive
from .geometry import Box7, fit_tightest_box, min_area_heading, normalize_heading

NOISE = -1


def composite_features(points, flow=None, embeddings=None, flow_weight=0.5, embedding_weight=0.0):
    """Stack position, ``flow_weight * flow`` and ``embedding_weight * unit(embedding)``."""
    pts = check_points(points)
    parts = [pts]
    if flow_weight and flow is not None:
        f = np.asarray(getattr(flow, "vectors", flow), dtype=np.float64).reshape(-1, 3)
        if len(f) != len(pts):
            raise ValueError(f"flow has {len(f)} rows for {len(pts)} points")
        parts.append(flow_weight * f)
    if embedding_weight and embeddings is not None:
        e = check_matrix(embeddings, "embeddings")
        if len(e) != len(pts):
            raise ValueError(f"embeddings have {len(e)} rows for {len(pts)} points")
        norms = np.linalg.norm(e, axis=1, keepdims=True)
        parts.append(embedding_weight * np.divide(e, norms, out=np.zeros_like(e), where=norms > 0))
    return np.hstack(parts)


def dbscan_labels(features, eps, min_samples):
    """DBSCAN with a k-d tree.

    A point is core when at least ``min_samples`` points (itself included)
    lie within ``eps``. Clusters are numbered in order of their lowest-index
    core point; a border point joins the first cluster that reaches it.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    neighbours = cKDTree(x).query_ball_point(x, eps)
    core = np.fromiter((len(nb) >= min_samples for nb in neighbours), dtype=bool, count=n)
    cluster = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = cluster
        stack = [i]
        while stack:
            p = stack.pop()
            for q in neighbours[p]:
                if labels[q] == NOISE:
                    labels[q] = cluster
                    if core[q]:
                        stack.append(q)
        cluster += 1
    return labels


class SpatioTemporalDBSCAN(ClusterMixin, BaseEstimator):
    """DBSCAN over position, weighted scene flow and (optionally) weighted
    unit embeddings. Two points neighbour each other when their composite
    Euclidean distance is <= ``eps``.
    """

    def __init__(self, eps=1.0, min_samples=5, flow_weight=0.5, embedding_weight=0.0):
        self.eps = eps
        self.min_samples = min_samples
        self.flow_weight = flow_weight
        self.embedding_weight = embedding_weight

    def fit(self, X, y=None, flow=None, embeddings=None):
        check_positive(self.eps, "eps")
        if int(self.min_samples) < 1:
            raise ValueError(f"min_samples must be >= 1, got {self.min_samples}")
        check_positive(self.flow_weight, "flow_weight", allow_zero=True)
        check_positive(self.embedding_weight, "embedding_weight", allow_zero=True)
        feats = composite_features(X, flow, embeddings, self.flow_weight, self.embedding_weight)
        self.labels_ = dbscan_labels(feats, self.eps, int(self.min_samples))
        return self

    def fit_predict(self, X, y=None, flow=None, embeddings=None):
        return self.fit(X, flow=flow, embeddings=embeddings).labels_


def st_cluster(points, flow=None, embeddings=None, eps=1.0, min_samples=5, flow_weight=0.5, embedding_weight=0.0):
    return SpatioTemporalDBSCAN(eps, min_samples, flow_weight, embedding_weight).fit_predict(
        points, flow=flow, embeddings=embeddings
    )


@dataclass(frozen=True)
class Proposal:
    box: Box7
    point_indices: np.ndarray
    mean_flow: np.ndarray
    bg_ratio: float

    @property
    def num_points(self):
        return len(self.point_indices)


def assign_heading(mean_flow, raw_heading, ego_heading, eps_sf):
    """Moving clusters face their flow; static ones keep whichever of
    ``raw_heading`` / ``raw_heading + pi`` is within 90 degrees of the ego
    heading (exactly 90 keeps the raw heading)."""
    f = np.asarray(mean_flow, dtype=np.float64).reshape(-1)
    if np.linalg.norm(f) >= eps_sf and np.any(f[:2] != 0):
        return normalize_heading(math.atan2(f[1], f[0]))
    diff = abs(normalize_heading(raw_heading - ego_heading))
    if diff <= math.pi / 2:
        return normalize_heading(raw_heading)
    return normalize_heading(raw_heading + math.pi)


def propose_boxes(
    labels,
    points,
    bg_mask,
    flow=None,
    r_bg=0.99,
    ego_heading=0.0,
    moving_speed=1.0,
    min_points=5,
    max_diag=20.0,
    min_size=0.05,
    point_indices=None,
):
    """One tightest box per cluster.

    Clusters with more than ``r_bg`` background points, fewer than
    ``min_points`` members or a BEV diagonal above ``max_diag`` are dropped.
    ``point_indices`` maps the rows of ``points`` back to the full sweep.
    """
    pts = check_points(points)
    labels = np.asarray(labels).reshape(-1)
    if len(labels) != len(pts):
        raise ValueError(f"{len(labels)} labels for {len(pts)} points")
    bg = check_mask(bg_mask, len(pts), "bg_mask")
    if not 0 < r_bg <= 1:
        raise ValueError(f"r_bg must be in (0, 1], got {r_bg}")
    vectors = np.zeros_like(pts) if flow is None else np.asarray(getattr(flow, "vectors", flow), dtype=np.float64).reshape(-1, 3)
    index_map = np.arange(len(pts)) if point_indices is None else np.asarray(point_indices)
    proposals = []
    for c in range(int(labels.max()) + 1 if len(labels) else 0):
        members = np.flatnonzero(labels == c)
        if len(members) < min_points:
            continue
        ratio = float(bg[members].mean())
        if ratio > r_bg:
            continue
        cpts = pts[members]
        mean_flow = vectors[members].mean(axis=0)
        heading = assign_heading(mean_flow, min_area_heading(cpts[:, :2]), ego_heading, moving_speed)
        box = fit_tightest_box(cpts, heading, min_size=min_size)
        if box.bev_diagonal > max_diag:
            continue
        proposals.append(Proposal(box, index_map[members], mean_flow, ratio))
    return proposals
