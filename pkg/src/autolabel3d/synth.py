"""Deterministic synthetic LiDAR scenes with known boxes, tracks, flow and
embeddings.

Randomness comes from numpy's PCG64 bit generator seeded with the caller's
integer seed; one generator is consumed in a fixed order, so the same
``(spec, seed)`` always reproduces the same arrays.

Objects and background elements are upright boxes whose surfaces carry a
fixed set of points sampled once in the object's own frame. A sample is
observed in a frame when its face looks toward the sensor, it is within
range, and the segment to the sensor crosses no other box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .frame import Frame
from .geometry import Box7, Pose, yaw_matrix
from .metrics import GroundTruthBox
from .semantics import TextQuery

OBJECT_CATEGORIES = ("vehicle", "vru")
BACKGROUND_WORDS = (
    "vegetation", "road", "street", "sky", "tree", "building",
    "house", "skyscraper", "wall", "fence", "sidewalk",
)
VEHICLE_PROMPTS = (
    "car", "vehicle", "parked vehicle", "sedan", "truck", "bus", "van",
    "minivan", "school bus", "pickup truck", "ambulance", "fire truck",
)
VRU_PROMPTS = ("cyclist", "human", "person", "pedestrian", "bicycle")
GROUND_TAG = "road"

# faces: (axis, sign); bottom face is never sampled
_FACES = ((0, 1), (0, -1), (1, 1), (1, -1), (2, 1))


@dataclass(frozen=True)
class ObjectSpec:
    category: str
    dims: tuple
    position: tuple
    heading: float = 0.0
    velocity: tuple = (0.0, 0.0)
    yaw_rate: float = 0.0
    density: float = 40.0
    hidden_frames: tuple = ()

    def pose_at(self, t):
        x = self.position[0] + self.velocity[0] * t
        y = self.position[1] + self.velocity[1] * t
        return x, y, self.heading + self.yaw_rate * t

    @property
    def is_moving(self):
        return math.hypot(*self.velocity) > 0 or self.yaw_rate != 0


@dataclass(frozen=True)
class BackgroundSpec:
    tag: str
    dims: tuple
    position: tuple
    heading: float = 0.0
    density: float = 10.0
    shape: str = "box"


@dataclass(frozen=True)
class EgoSpec:
    position: tuple = (0.0, 0.0)
    heading: float = 0.0
    speed: float = 0.0
    sensor_height: float = 1.8

    def pose_at(self, t):
        c, s = math.cos(self.heading), math.sin(self.heading)
        x = self.position[0] + self.speed * t * c
        y = self.position[1] + self.speed * t * s
        return Pose.from_yaw(self.heading, (x, y, self.sensor_height))


@dataclass(frozen=True)
class EmbeddingSpec:
    dim: int = 16
    noise_deg: float = 10.0


@dataclass(frozen=True)
class SensorSpec:
    range: float = 50.0
    dropout: float = 0.0
    noise: float = 0.01
    ground_spacing: float = 1.0
    ground_slope_deg: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    duration: int = 20
    dt: float = 0.1
    ego: EgoSpec = field(default_factory=EgoSpec)
    objects: tuple = ()
    background: tuple = ()
    embedding: EmbeddingSpec = field(default_factory=EmbeddingSpec)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    ground: bool = True

    def validate(self):
        if self.duration < 1:
            raise ValueError("duration must be >= 1 frame")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not self.objects and not self.background and not self.ground:
            raise ValueError("scene spec is empty: no objects, background or ground")
        for o in self.objects:
            if o.category not in OBJECT_CATEGORIES:
                raise ValueError(f"unknown object category {o.category!r}")
            if min(o.dims) <= 0 or o.density <= 0:
                raise ValueError(f"object dims/density must be positive: {o}")
        for b in self.background:
            if b.tag not in BACKGROUND_WORDS:
                raise ValueError(f"background tag {b.tag!r} is not a background category")
            if b.shape != "box":
                raise ValueError(f"unsupported background shape {b.shape!r}")
            if min(b.dims) <= 0 or b.density <= 0:
                raise ValueError(f"background dims/density must be positive: {b}")
        s, e = self.sensor, self.embedding
        if s.range <= 0 or s.noise < 0 or not 0 <= s.dropout < 1 or s.ground_spacing <= 0:
            raise ValueError(f"invalid sensor model {s}")
        if e.noise_deg < 0 or e.dim < len(vocabulary()):
            raise ValueError(f"embedding dim must be >= {len(vocabulary())} and noise >= 0")


def vocabulary():
    return OBJECT_CATEGORIES + BACKGROUND_WORDS


@dataclass
class SynthDataset:
    frames: list
    gt_boxes: list
    dt: float
    queries: list
    background_queries: list
    prototypes: dict
    spec: SceneSpec

    @property
    def embedding_dim(self):
        return self.spec.embedding.dim

    def gt_for_frame(self, f):
        return [g for g in self.gt_boxes if g.frame == f]


def _sample_box_surface(dims, density, rng):
    """Fixed random samples on the five upper faces, in the box frame."""
    half = 0.5 * np.asarray(dims, dtype=np.float64)
    pts, normals = [], []
    for axis, sign in _FACES:
        others = [a for a in range(3) if a != axis]
        area = 4.0 * half[others[0]] * half[others[1]]
        n = max(4, int(round(area * density)))
        p = np.empty((n, 3))
        p[:, axis] = sign * half[axis]
        for a in others:
            p[:, a] = rng.uniform(-half[a], half[a], n)
        nrm = np.zeros((n, 3))
        nrm[:, axis] = sign
        pts.append(p)
        normals.append(nrm)
    return np.vstack(pts), np.vstack(normals)


def prototypes_for(dim, rng):
    """Orthonormal unit prototype per vocabulary word."""
    words = vocabulary()
    q, r = np.linalg.qr(rng.normal(size=(dim, len(words))))
    q = q * np.sign(np.diag(r))
    return {w: q[:, i].copy() for i, w in enumerate(words)}


def _noisy_embeddings(proto, n, noise_deg, rng):
    g = rng.normal(size=(n, proto.shape[0]))
    g -= np.outer(g @ proto, proto)
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    theta = np.radians(rng.uniform(0.0, noise_deg, n))
    return np.cos(theta)[:, None] * proto + np.sin(theta)[:, None] * g


def _segment_hits_box(sensor, points, center, yaw, half, eps=1e-9):
    """Segments sensor->point that enter the box strictly before the point."""
    rot = yaw_matrix(yaw)
    s = rot.T @ (sensor - center)
    p = (points - center) @ rot
    d = p - s
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - s) / d
        t2 = (half - s) / d
    lo = np.where(d == 0, np.where(np.abs(s) <= half, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(d == 0, np.where(np.abs(s) <= half, np.inf, -np.inf), np.maximum(t1, t2))
    tmin = lo.max(axis=1)
    tmax = hi.min(axis=1)
    return (tmin <= tmax) & (tmax > eps) & (tmin < 1.0 - 1e-6)


def _ground_z(x, y, slope_deg):
    return np.tan(np.radians(slope_deg)) * x


def generate(spec, seed=0):
    """Render ``spec`` into frames, ground-truth boxes and text queries."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    dim = spec.embedding.dim
    protos = prototypes_for(dim, rng)
    obj_samples = [_sample_box_surface(o.dims, o.density, rng) for o in spec.objects]
    bg_samples = [_sample_box_surface(b.dims, b.density, rng) for b in spec.background]
    words = vocabulary()
    sensor_model = spec.sensor

    frames, gts = [], []
    for k in range(spec.duration):
        t = k * spec.dt
        ego = spec.ego.pose_at(t)
        sensor = ego.translation
        # solid boxes in world frame: (center, yaw, half extents)
        solids = []
        for o in spec.objects:
            x, y, yaw = o.pose_at(t)
            z0 = float(_ground_z(x, y, sensor_model.ground_slope_deg))
            solids.append((np.array([x, y, z0 + 0.5 * o.dims[2]]), yaw, 0.5 * np.asarray(o.dims, float)))
        for b in spec.background:
            x, y = b.position
            z0 = float(_ground_z(x, y, sensor_model.ground_slope_deg))
            solids.append((np.array([x, y, z0 + 0.5 * b.dims[2]]), b.heading, 0.5 * np.asarray(b.dims, float)))

        chunks = []  # (world points, instance id, semantic word, flow)
        sources = [(i, obj_samples[i]) for i in range(len(spec.objects))]
        sources += [(len(spec.objects) + j, bg_samples[j]) for j in range(len(spec.background))]
        for sid, (local, normals) in sources:
            is_obj = sid < len(spec.objects)
            if is_obj and k in spec.objects[sid].hidden_frames:
                continue
            center, yaw, _ = solids[sid]
            rot = yaw_matrix(yaw)
            world = local @ rot.T + center
            wn = normals @ rot.T
            vis = np.einsum("ij,ij->i", wn, sensor - world) > 0
            vis &= np.linalg.norm(world - sensor, axis=1) <= sensor_model.range
            for oid, (c2, y2, h2) in enumerate(solids):
                if oid == sid or not vis.any():
                    continue
                idx = np.flatnonzero(vis)
                vis[idx[_segment_hits_box(sensor, world[idx], c2, y2, h2)]] = False
            idx = np.flatnonzero(vis)
            if is_obj:
                o = spec.objects[sid]
                vel = np.array([o.velocity[0], o.velocity[1], 0.0])
                omega = np.array([0.0, 0.0, o.yaw_rate])
                flow = vel + np.cross(omega, world[idx] - center)
                chunks.append((world[idx], sid, o.category, flow))
            else:
                chunks.append((world[idx], -1, spec.background[sid - len(spec.objects)].tag, np.zeros((len(idx), 3))))

        if spec.ground:
            g = sensor_model.ground_spacing
            r = sensor_model.range
            xs = np.arange(math.floor((sensor[0] - r) / g), math.ceil((sensor[0] + r) / g) + 1) * g
            ys = np.arange(math.floor((sensor[1] - r) / g), math.ceil((sensor[1] + r) / g) + 1) * g
            gx, gy = np.meshgrid(xs, ys, indexing="ij")
            gp = np.column_stack([gx.ravel(), gy.ravel(), _ground_z(gx.ravel(), gy.ravel(), sensor_model.ground_slope_deg)])
            gp = gp[np.linalg.norm(gp - sensor, axis=1) <= r]
            keep = np.ones(len(gp), dtype=bool)
            for c2, y2, h2 in solids:
                idx = np.flatnonzero(keep)
                keep[idx[_segment_hits_box(sensor, gp[idx], c2, y2, h2)]] = False
            chunks.append((gp[keep], -1, GROUND_TAG, np.zeros((int(keep.sum()), 3))))

        pts_l, inst_l, sem_l, flow_l = [], [], [], []
        for pts, inst, word, flow in chunks:
            pts_l.append(pts)
            inst_l.append(np.full(len(pts), inst, dtype=np.int32))
            sem_l.append(np.full(len(pts), words.index(word), dtype=np.int32))
            flow_l.append(flow)
        world = np.vstack(pts_l) if pts_l else np.zeros((0, 3))
        inst = np.concatenate(inst_l) if inst_l else np.zeros(0, np.int32)
        sem = np.concatenate(sem_l) if sem_l else np.zeros(0, np.int32)
        gflow = np.vstack(flow_l) if flow_l else np.zeros((0, 3))

        keep = rng.random(len(world)) >= sensor_model.dropout
        world, inst, sem, gflow = world[keep], inst[keep], sem[keep], gflow[keep]
        if sensor_model.noise > 0:
            world = world + rng.normal(scale=sensor_model.noise, size=world.shape)
        emb = np.zeros((len(world), dim))
        for wi, w in enumerate(words):
            sel = np.flatnonzero(sem == wi)
            if len(sel):
                emb[sel] = _noisy_embeddings(protos[w], len(sel), spec.embedding.noise_deg, rng)

        local_pts = ego.inverse().apply(world)
        frames.append(
            Frame(
                index=k,
                timestamp=round(t, 9),
                points=local_pts.astype(np.float32),
                ego_pose=ego,
                embeddings=emb.astype(np.float32),
                extras={
                    "instance": inst,
                    "semantic": sem,
                    "gt_flow": gflow.astype(np.float32),
                },
            )
        )
        for oid, o in enumerate(spec.objects):
            if not (inst == oid).any():
                continue
            center, yaw, _ = solids[oid]
            gts.append(
                GroundTruthBox(
                    Box7(center[0], center[1], center[2], o.dims[0], o.dims[1], o.dims[2], yaw),
                    o.category,
                    k,
                    oid,
                )
            )

    queries = [
        TextQuery("vehicle", VEHICLE_PROMPTS, np.tile(protos["vehicle"], (len(VEHICLE_PROMPTS), 1))),
        TextQuery("vru", VRU_PROMPTS, np.tile(protos["vru"], (len(VRU_PROMPTS), 1))),
    ]
    bg_queries = [TextQuery(w, (w,), protos[w][None, :]) for w in BACKGROUND_WORDS]
    return SynthDataset(frames, gts, spec.dt, queries, bg_queries, protos, spec)


def object_points(frame, object_id):
    """World-frame points of one object in a generated frame."""
    return frame.world_points()[frame.extras["instance"] == object_id]


def length_coverage(points, box, bin_size=0.1):
    """Fraction of ``bin_size`` bins along the box length that hold a point."""
    if len(points) == 0:
        return 0.0
    c, s = math.cos(box.heading), math.sin(box.heading)
    u = (points[:, 0] - box.cx) * c + (points[:, 1] - box.cy) * s + 0.5 * box.length
    n = max(1, int(round(box.length / bin_size)))
    bins = np.clip(np.floor(u / box.length * n).astype(int), 0, n - 1)
    return len(np.unique(bins)) / n


# --------------------------------------------------------------------------
# Presets
# --------------------------------------------------------------------------

CAR = (4.5, 1.9, 1.6)
PEDESTRIAN = (0.8, 0.6, 1.8)


def _urban_mini():
    return SceneSpec(
        duration=20,
        dt=0.1,
        ego=EgoSpec((0.0, 0.0), 0.0, 5.0),
        objects=(
            ObjectSpec("vehicle", CAR, (30.0, 4.0), math.pi, (-8.0, 0.0)),
            ObjectSpec("vru", PEDESTRIAN, (12.0, -6.0), math.pi / 2, (0.0, 1.5), density=60.0),
            ObjectSpec("vehicle", (4.4, 1.8, 1.5), (20.0, -5.0), 0.0),
            ObjectSpec("vru", (0.7, 0.6, 1.75), (8.0, 6.0), 0.0, density=60.0),
        ),
        background=(
            BackgroundSpec("building", (20.0, 10.0, 8.0), (40.0, 16.0)),
            BackgroundSpec("wall", (30.0, 0.3, 2.0), (15.0, -9.5)),
            BackgroundSpec("tree", (1.0, 1.0, 4.0), (25.0, 10.0), density=20.0),
            BackgroundSpec("fence", (10.0, 0.2, 1.2), (3.0, 10.0)),
        ),
    )


def _drive_by():
    gap = 0.8
    wall_y, car_x = 3.5, 20.0
    left_len = 40.0
    right_len = 40.0
    return SceneSpec(
        duration=20,
        dt=0.1,
        ego=EgoSpec((10.0, 0.0), 0.0, 10.0),
        objects=(ObjectSpec("vehicle", CAR, (car_x, 7.0), 0.0),),
        background=(
            BackgroundSpec("wall", (left_len, 0.3, 2.5), (car_x - 0.5 * gap - 0.5 * left_len, wall_y)),
            BackgroundSpec("wall", (right_len, 0.3, 2.5), (car_x + 0.5 * gap + 0.5 * right_len, wall_y)),
        ),
    )


def _follow():
    return SceneSpec(
        duration=20,
        dt=0.1,
        ego=EgoSpec((0.0, 0.0), 0.0, 10.0),
        objects=(ObjectSpec("vehicle", (5.0, 2.0, 2.2), (12.0, 0.0), 0.0, (10.0, 0.0)),),
    )


def _crowd():
    return SceneSpec(
        duration=10,
        dt=0.1,
        ego=EgoSpec((0.0, 0.0), 0.0, 0.0),
        objects=(
            ObjectSpec("vehicle", CAR, (15.0, 4.0), 0.0),
            ObjectSpec("vru", PEDESTRIAN, (12.0, 6.0), 0.0, (1.2, 0.0), density=60.0),
            ObjectSpec("vru", PEDESTRIAN, (13.2, 6.2), 0.0, (1.2, 0.0), density=60.0),
        ),
    )


def _dropout(k=8):
    return SceneSpec(
        duration=20,
        dt=0.1,
        ego=EgoSpec((0.0, 0.0), 0.0, 0.0),
        objects=(ObjectSpec("vehicle", CAR, (10.0, 6.0), 0.0, (6.0, 0.0), hidden_frames=(k, k + 1)),),
    )


def _golden_mini():
    spec = _urban_mini()
    return replace(spec, duration=6, background=spec.background[:2])


def _empty():
    return SceneSpec(duration=5, dt=0.1)


PRESETS = {
    "urban-mini": _urban_mini,
    "drive-by": _drive_by,
    "follow": _follow,
    "crowd": _crowd,
    "dropout": _dropout,
    "golden-mini": _golden_mini,
    "empty": _empty,
}


def occlusion_scenario(name):
    """Canned scene specs by preset name."""
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
