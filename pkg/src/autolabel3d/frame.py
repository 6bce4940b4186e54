from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Pose


@dataclass
class Frame:
    """One LiDAR sweep.

    ``points`` are in the sensor frame; ``ego_pose`` maps sensor to world.
    ``flow`` (if present) is world-frame m/s. ``extras`` holds any further
    per-point arrays (e.g. ground-truth instance ids) keyed by name.
    """

    index: int
    timestamp: float
    points: np.ndarray
    ego_pose: Pose = field(default_factory=Pose.identity)
    embeddings: Optional[np.ndarray] = None
    flow: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points).reshape(-1, 3)
        n = len(self.points)
        for name in ("embeddings", "flow"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr)
                if arr.ndim != 2 or arr.shape[0] != n:
                    raise ValueError(f"frame {self.index}: {name} has shape {arr.shape}, expected ({n}, ...)")
                setattr(self, name, arr)
        for key, arr in self.extras.items():
            if len(arr) != n:
                raise ValueError(f"frame {self.index}: extra {key!r} has length {len(arr)}, expected {n}")

    @property
    def num_points(self):
        return len(self.points)

    def world_points(self):
        return self.ego_pose.apply(self.points.astype(np.float64))

    @property
    def ego_heading(self):
        return self.ego_pose.yaw
