"""Core 3D primitives: rigid poses, upright boxes, oriented IoU, box fitting,
non-maximum suppression and radius search.

Box corner ordering (``box_corners``): the four bottom corners first, then the
four top corners, each face counter-clockwise seen from above starting at the
front-left corner in the box frame::

    0: (+l/2, +w/2, -h/2)   4: (+l/2, +w/2, +h/2)
    1: (-l/2, +w/2, -h/2)   5: (-l/2, +w/2, +h/2)
    2: (-l/2, -w/2, -h/2)   6: (-l/2, -w/2, +h/2)
    3: (+l/2, -w/2, -h/2)   7: (+l/2, -w/2, +h/2)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ._validation import check_points

DEFAULT_MIN_SIZE = 0.05

_LOCAL_CORNERS = np.array(
    [
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, 1],
        [-1, 1, 1],
        [-1, -1, 1],
        [1, -1, 1],
    ],
    dtype=np.float64,
) * 0.5


def normalize_heading(angle):
    """Map an angle to (-pi, pi]; -pi itself maps to pi."""
    a = (float(angle) + math.pi) % (2.0 * math.pi) - math.pi
    if a <= -math.pi:
        a = math.pi
    return a


def yaw_matrix(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``p -> rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise ValueError("pose contains non-finite values")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("pose rotation is not orthonormal with det +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_yaw(cls, yaw, translation=(0.0, 0.0, 0.0)):
        return cls(yaw_matrix(yaw), translation)

    @classmethod
    def from_matrix(cls, matrix):
        m = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def yaw(self):
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def is_upright(self, tol=1e-9):
        return abs(self.rotation[2, 2] - 1.0) <= tol

    def inverse(self):
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other):
        """``self.compose(other)`` applies ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def transform_points(points, pose):
    """Apply ``pose`` to an (N, 3) array of points."""
    pts = check_points(points)
    return pose.apply(pts)


@dataclass(frozen=True)
class Box7:
    """Upright 3D box. ``length`` runs along ``heading``."""

    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    heading: float = 0.0

    def __post_init__(self):
        vals = [float(getattr(self, f)) for f in ("cx", "cy", "cz", "length", "width", "height", "heading")]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box has non-finite parameters: {vals}")
        if min(vals[3:6]) <= 0:
            raise ValueError(f"box dimensions must be positive: {vals[3:6]}")
        for name, v in zip(("cx", "cy", "cz", "length", "width", "height"), vals):
            object.__setattr__(self, name, v)
        object.__setattr__(self, "heading", normalize_heading(vals[6]))

    @classmethod
    def from_array(cls, values):
        return cls(*(float(v) for v in np.asarray(values).reshape(7)))

    def as_array(self):
        return np.array(
            [self.cx, self.cy, self.cz, self.length, self.width, self.height, self.heading]
        )

    @property
    def center(self):
        return np.array([self.cx, self.cy, self.cz])

    @property
    def dims(self):
        return np.array([self.length, self.width, self.height])

    @property
    def volume(self):
        return self.length * self.width * self.height

    @property
    def bev_area(self):
        return self.length * self.width

    @property
    def bev_diagonal(self):
        return math.hypot(self.length, self.width)

    @property
    def z_min(self):
        return self.cz - 0.5 * self.height

    @property
    def z_max(self):
        return self.cz + 0.5 * self.height

    def replace(self, **changes):
        values = {f: getattr(self, f) for f in ("cx", "cy", "cz", "length", "width", "height", "heading")}
        values.update(changes)
        return Box7(**values)


def box_corners(box):
    """(8, 3) corners in the documented module-level ordering."""
    local = _LOCAL_CORNERS * box.dims
    return local @ yaw_matrix(box.heading).T + box.center


def bev_corners(box):
    """(4, 2) counter-clockwise BEV footprint."""
    return box_corners(box)[:4, :2]


def transform_box(box, pose):
    """Apply an upright (yaw-only) pose to a box."""
    if not pose.is_upright(1e-6):
        raise ValueError("only yaw rotations keep a box upright")
    c = pose.apply(box.center)
    return Box7(c[0], c[1], c[2], box.length, box.width, box.height, box.heading + pose.yaw)


def _polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_polygon(subject, clip):
    """Sutherland-Hodgman clipping of convex CCW ``subject`` by convex CCW ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp = output
        output = []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    t = s_prev / (s_prev - s_cur)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif s_prev >= 0:
                t = s_prev / (s_prev - s_cur)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, s_prev = cur, s_cur
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def bev_intersection_area(a, b):
    # bounding-circle rejection before clipping
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > 0.5 * (a.bev_diagonal + b.bev_diagonal):
        return 0.0
    return max(0.0, _polygon_area(_clip_polygon(bev_corners(a), bev_corners(b))))


def iou_bev(a, b):
    inter = bev_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    return min(1.0, inter / (a.bev_area + b.bev_area - inter))


def iou_3d(a, b):
    """Oriented 3D IoU: BEV polygon intersection times vertical overlap."""
    dz = min(a.z_max, b.z_max) - max(a.z_min, b.z_min)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    if inter <= 0.0:
        return 0.0
    return min(1.0, inter / (a.volume + b.volume - inter))


def iou_matrix(boxes_a, boxes_b, iou_fn=iou_3d):
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou_fn(a, b)
    return out


def points_in_box(box, points, tol=1e-9):
    """Boolean mask of points inside ``box``; the boundary counts as inside."""
    pts = check_points(points)
    d = pts - box.center
    c, s = math.cos(box.heading), math.sin(box.heading)
    lx = d[:, 0] * c + d[:, 1] * s
    ly = -d[:, 0] * s + d[:, 1] * c
    return (
        (np.abs(lx) <= 0.5 * box.length + tol)
        & (np.abs(ly) <= 0.5 * box.width + tol)
        & (np.abs(d[:, 2]) <= 0.5 * box.height + tol)
    )


def convex_hull_2d(xy):
    """Andrew's monotone chain. Returns CCW hull vertices without collinear points."""
    pts = np.unique(np.asarray(xy, dtype=np.float64), axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _extents(xy, heading):
    c, s = math.cos(heading), math.sin(heading)
    u = xy[:, 0] * c + xy[:, 1] * s
    v = -xy[:, 0] * s + xy[:, 1] * c
    return u.min(), u.max(), v.min(), v.max()


def min_area_heading(xy):
    """Heading of the minimal-area enclosing rectangle (rotating calipers).

    The heading is returned along the longer rectangle side.
    """
    hull = convex_hull_2d(xy)
    if len(hull) == 1:
        return 0.0
    if len(hull) == 2:
        d = hull[1] - hull[0]
        return normalize_heading(math.atan2(d[1], d[0]))
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.mod(np.arctan2(edges[:, 1], edges[:, 0]), math.pi / 2)
    best, best_area = 0.0, math.inf
    for theta in angles:
        u0, u1, v0, v1 = _extents(hull, theta)
        area = (u1 - u0) * (v1 - v0)
        if area < best_area * (1.0 - 1e-12):
            best, best_area = float(theta), area
    u0, u1, v0, v1 = _extents(hull, best)
    if (u1 - u0) < (v1 - v0):
        best += math.pi / 2
    return normalize_heading(best)


def fit_tightest_box(points, heading=None, min_size=DEFAULT_MIN_SIZE):
    """Tightest upright box around ``points``.

    With ``heading`` given the box axes are fixed to it; otherwise the minimal
    BEV-area orientation is used. Extents below ``min_size`` are widened
    symmetrically so the result is always a valid box.
    """
    pts = check_points(points, allow_empty=False)
    if heading is None:
        heading = min_area_heading(pts[:, :2])
    heading = float(heading)
    u0, u1, v0, v1 = _extents(pts[:, :2], heading)
    z0, z1 = pts[:, 2].min(), pts[:, 2].max()
    uc, vc = 0.5 * (u0 + u1), 0.5 * (v0 + v1)
    c, s = math.cos(heading), math.sin(heading)
    return Box7(
        uc * c - vc * s,
        uc * s + vc * c,
        0.5 * (z0 + z1),
        max(u1 - u0, min_size),
        max(v1 - v0, min_size),
        max(z1 - z0, min_size),
        heading,
    )


def nms(boxes, scores, iou_threshold, iou_fn=iou_3d):
    """Greedy non-maximum suppression.

    Returns kept indices in descending-score order; equal scores are ranked
    by lower index. A box is suppressed when its IoU with an already kept box
    is >= ``iou_threshold``.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError(f"got {len(boxes)} boxes but {len(scores)} scores")
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou_fn(boxes[i], boxes[k]) < iou_threshold for k in keep):
            keep.append(i)
    return keep


class SpatialIndex:
    """Immutable k-d tree over a point set (scipy ``cKDTree``)."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3 if pts.ndim < 2 else pts.shape[-1])
        self.points = check_points(pts, dims=pts.shape[1])
        self.points.flags.writeable = False
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self):
        return len(self.points)

    def query_radius(self, query, r):
        if r < 0:
            raise ValueError(f"radius must be >= 0, got {r}")
        if self._tree is None:
            return np.zeros(0, dtype=np.intp)
        idx = self._tree.query_ball_point(np.asarray(query, dtype=np.float64), r)
        return np.array(sorted(idx), dtype=np.intp)

    def query_radius_many(self, queries, r):
        if self._tree is None:
            return [np.zeros(0, dtype=np.intp) for _ in range(len(queries))]
        lists = self._tree.query_ball_point(np.asarray(queries, dtype=np.float64), r)
        return [np.array(sorted(lst), dtype=np.intp) for lst in lists]

    def nearest(self, queries):
        """Distances and indices of the nearest indexed point for each query."""
        if self._tree is None:
            raise ValueError("nearest() on an empty index")
        return self._tree.query(np.asarray(queries, dtype=np.float64))


def radius_neighbors(index, query, r):
    """Indices of indexed points within Euclidean distance ``r`` (inclusive)."""
    return index.query_radius(query, r)
