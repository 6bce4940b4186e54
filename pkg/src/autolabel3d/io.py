"""On-disk dataset format, label files and text-query manifests.

Dataset layout (one directory per sequence)::

    manifest.json               versioned manifest, see DatasetManifest
    frames/000000.points.f32    N x 3 float32 little-endian, row-major (sensor frame)
    frames/000000.emb.f32       N x D float32 (optional)
    frames/000000.flow.f32      N x 3 float32 world-frame m/s (optional)
    frames/000000.<extra>.<dt>  further per-point arrays (int32 / float32)
    gt_boxes.txt                label-format ground truth (optional)
    queries.jsonl               object text queries (optional)
    background_queries.jsonl    background text queries (optional)

Label files hold one record per line::

    frame track_id cx cy cz length width height heading score category
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frame import Frame
from .geometry import Box7, Pose
from .metrics import GroundTruthBox
from .semantics import TextQuery
from .tracking import LabeledBox

FORMAT_NAME = "autolabel3d-dataset"
FORMAT_VERSION = 1
LABELS_HEADER = "# autolabel3d labels v1"
LABELS_COLUMNS = "# frame track_id cx cy cz length width height heading score category"
UNASSIGNED_NAME = "-"

_DTYPES = {"float32": "<f4", "int32": "<i4"}


class DatasetFormatError(ValueError):
    pass


@dataclass
class DatasetManifest:
    root: Path
    frames: list
    dt: float
    embedding_dim: int = None
    coordinate_frame: str = "sensor"
    cameras: list = field(default_factory=list)
    gt_boxes: str = None
    queries: str = None
    background_queries: str = None
    version: int = FORMAT_VERSION

    @property
    def frame_count(self):
        return len(self.frames)

    @property
    def path(self):
        return self.root / "manifest.json"

    def to_json(self):
        doc = {
            "format": FORMAT_NAME,
            "version": self.version,
            "frame_count": self.frame_count,
            "dt": self.dt,
            "embedding_dim": self.embedding_dim,
            "coordinate_frame": self.coordinate_frame,
            "cameras": self.cameras,
            "gt_boxes": self.gt_boxes,
            "queries": self.queries,
            "background_queries": self.background_queries,
            "frames": self.frames,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def write(self):
        self.root.mkdir(parents=True, exist_ok=True)
        _atomic_write(self.path, self.to_json().encode("utf-8"))

    def ego_pose(self, index):
        return Pose.from_matrix(self.frames[index]["ego_pose"])


def _atomic_write(path, data):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _write_array(path, arr, dtype):
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())


def _read_array(path, dtype, rows, width):
    if not path.exists():
        raise DatasetFormatError(f"missing array file {path}")
    expected = rows * width * 4
    actual = path.stat().st_size
    if actual != expected:
        raise DatasetFormatError(
            f"size mismatch in {path}: {actual} bytes, expected {expected} ({rows} x {width} x 4)"
        )
    arr = np.frombuffer(path.read_bytes(), dtype=_DTYPES[dtype])
    arr = arr.astype(arr.dtype.newbyteorder("="))
    return arr.reshape(rows, width) if width > 1 else arr


def new_manifest(root, dt, embedding_dim=None):
    return DatasetManifest(Path(root), [], float(dt), embedding_dim)


def load_manifest(root):
    root = Path(root)
    path = root / "manifest.json" if root.is_dir() else root
    if not path.exists():
        raise DatasetFormatError(f"no manifest at {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: invalid JSON ({exc})") from None
    if doc.get("format") != FORMAT_NAME:
        raise DatasetFormatError(f"{path}: not an {FORMAT_NAME} manifest")
    if doc.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"{path}: unsupported manifest version {doc.get('version')} (this reader handles {FORMAT_VERSION})"
        )
    if doc.get("frame_count") != len(doc.get("frames", [])):
        raise DatasetFormatError(f"{path}: frame_count does not match the frame list")
    return DatasetManifest(
        path.parent,
        doc["frames"],
        float(doc["dt"]),
        doc.get("embedding_dim"),
        doc.get("coordinate_frame", "sensor"),
        doc.get("cameras") or [],
        doc.get("gt_boxes"),
        doc.get("queries"),
        doc.get("background_queries"),
        doc["version"],
    )


def save_frame(manifest, frame):
    """Write ``frame``'s arrays and record them in ``manifest`` (not yet flushed)."""
    stem = f"frames/{frame.index:06d}"
    entry = {
        "index": int(frame.index),
        "timestamp": float(frame.timestamp),
        "ego_pose": frame.ego_pose.as_matrix().tolist(),
        "num_points": int(frame.num_points),
        "points": f"{stem}.points.f32",
        "embeddings": None,
        "flow": None,
        "extras": {},
    }
    _write_array(manifest.root / entry["points"], frame.points, "float32")
    if frame.embeddings is not None:
        if manifest.embedding_dim is None:
            manifest.embedding_dim = int(frame.embeddings.shape[1])
        elif frame.embeddings.shape[1] != manifest.embedding_dim:
            raise DatasetFormatError(
                f"frame {frame.index}: embedding dim {frame.embeddings.shape[1]} != {manifest.embedding_dim}"
            )
        entry["embeddings"] = f"{stem}.emb.f32"
        _write_array(manifest.root / entry["embeddings"], frame.embeddings, "float32")
    if frame.flow is not None:
        entry["flow"] = f"{stem}.flow.f32"
        _write_array(manifest.root / entry["flow"], frame.flow, "float32")
    for key in sorted(frame.extras):
        arr = np.asarray(frame.extras[key])
        dtype = "int32" if np.issubdtype(arr.dtype, np.integer) else "float32"
        width = 1 if arr.ndim == 1 else int(arr.shape[1])
        rel = f"{stem}.{key}.{'i32' if dtype == 'int32' else 'f32'}"
        _write_array(manifest.root / rel, arr, dtype)
        entry["extras"][key] = {"file": rel, "dtype": dtype, "width": width}
    while len(manifest.frames) <= frame.index:
        manifest.frames.append(None)
    manifest.frames[frame.index] = entry
    return entry


def load_frame(manifest, index):
    if not 0 <= index < manifest.frame_count:
        raise IndexError(f"frame {index} out of range (0..{manifest.frame_count - 1})")
    entry = manifest.frames[index]
    n = int(entry["num_points"])
    root = manifest.root
    points = _read_array(root / entry["points"], "float32", n, 3)
    emb = None
    if entry.get("embeddings"):
        emb = _read_array(root / entry["embeddings"], "float32", n, int(manifest.embedding_dim))
    flow = None
    if entry.get("flow"):
        flow = _read_array(root / entry["flow"], "float32", n, 3)
    extras = {}
    for key, spec in (entry.get("extras") or {}).items():
        extras[key] = _read_array(root / spec["file"], spec["dtype"], n, int(spec["width"]))
    return Frame(
        index=int(entry["index"]),
        timestamp=float(entry["timestamp"]),
        points=points,
        ego_pose=Pose.from_matrix(entry["ego_pose"]),
        embeddings=emb,
        flow=flow,
        extras=extras,
    )


def load_frames(manifest):
    return [load_frame(manifest, i) for i in range(manifest.frame_count)]


def save_flow(manifest, index, vectors):
    """Attach a precomputed world-frame flow array (N x 3, m/s) to a frame."""
    entry = manifest.frames[index]
    vectors = np.asarray(vectors, dtype=np.float32).reshape(-1, 3)
    if len(vectors) != entry["num_points"]:
        raise DatasetFormatError(
            f"frame {index}: flow has {len(vectors)} rows, frame has {entry['num_points']} points"
        )
    entry["flow"] = f"frames/{index:06d}.flow.f32"
    _write_array(manifest.root / entry["flow"], vectors, "float32")


# --------------------------------------------------------------------------
# labels
# --------------------------------------------------------------------------


def format_label_line(frame, track_id, box, score, category):
    vals = " ".join(f"{v:.6f}" for v in box.as_array())
    cat = category if category else UNASSIGNED_NAME
    return f"{int(frame)} {int(track_id)} {vals} {score:.6f} {cat}"


def write_labels(path, labels):
    """Write LabeledBox / Detection / GroundTruthBox records."""
    lines = [LABELS_HEADER, LABELS_COLUMNS]
    for lab in labels:
        score = getattr(lab, "score", 1.0)
        lines.append(format_label_line(lab.frame, lab.track_id, lab.box, score, lab.category))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_labels(path):
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f"labels file not found: {path}")
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 11:
            raise DatasetFormatError(f"{path}:{lineno}: expected 11 fields, got {len(parts)}")
        try:
            frame, tid = int(parts[0]), int(parts[1])
            box = Box7(*(float(v) for v in parts[2:9]))
            score = float(parts[9])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
        cat = None if parts[10] == UNASSIGNED_NAME else parts[10]
        out.append(LabeledBox(box, tid, frame, score, cat))
    return out


def labels_to_ground_truth(labels):
    return [GroundTruthBox(l.box, l.category, l.frame, l.track_id) for l in labels]


# --------------------------------------------------------------------------
# text queries
# --------------------------------------------------------------------------


def write_queries(path, queries):
    lines = []
    for q in queries:
        for prompt, row in zip(q.prompts, q.embeddings):
            vals = [float(v) for v in np.asarray(row, dtype=np.float32)]
            lines.append(json.dumps({"category": q.category_name, "prompt": prompt, "embedding": vals}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_queries(path):
    """Group prompt records by category, preserving first-seen category order."""
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f"query manifest not found: {path}")
    groups = {}
    dim = None
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            cat, prompt, emb = rec["category"], rec["prompt"], rec["embedding"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise DatasetFormatError(f"{path}:{lineno}: bad query record ({exc})") from None
        if dim is None:
            dim = len(emb)
        elif len(emb) != dim:
            raise DatasetFormatError(f"{path}:{lineno}: embedding has {len(emb)} values, expected {dim}")
        groups.setdefault(cat, ([], []))
        groups[cat][0].append(prompt)
        groups[cat][1].append(np.asarray(emb, dtype=np.float32))
    return [TextQuery(cat, tuple(p), np.vstack(e)) for cat, (p, e) in groups.items()]


def save_synth_dataset(root, dataset):
    """Write a generated dataset (frames, GT boxes, both query manifests)."""
    manifest = new_manifest(root, dataset.dt, dataset.embedding_dim)
    manifest.root.mkdir(parents=True, exist_ok=True)
    for frame in dataset.frames:
        save_frame(manifest, frame)
    manifest.gt_boxes = "gt_boxes.txt"
    write_labels(manifest.root / manifest.gt_boxes, dataset.gt_boxes)
    manifest.queries = "queries.jsonl"
    write_queries(manifest.root / manifest.queries, dataset.queries)
    manifest.background_queries = "background_queries.jsonl"
    write_queries(manifest.root / manifest.background_queries, dataset.background_queries)
    manifest.write()
    return manifest
