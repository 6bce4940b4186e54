"""Pipeline configuration: dataclass defaults plus a flat, commented INI file.

Every key lives in the ``[autolabel]`` section; list values are
comma-separated. ``data/default_config.ini`` ships the annotated defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .synth import BACKGROUND_WORDS, VEHICLE_PROMPTS, VRU_PROMPTS

SECTION = "autolabel"


@dataclass(frozen=True)
class PipelineConfig:
    # values fixed by the method
    eps_sf: float = 1.0
    eps_bg: float = 0.02
    r_bg: float = 0.99
    dbscan_eps: float = 1.0
    pca_components: int = 64
    background_categories: tuple = BACKGROUND_WORDS
    vehicle_queries: tuple = VEHICLE_PROMPTS
    vru_queries: tuple = VRU_PROMPTS
    region_length: float = 100.0
    region_width: float = 40.0
    iou_thresholds: tuple = (0.4, 0.5)
    # design decisions
    min_pts: int = 5
    flow_weight: float = 0.5
    embedding_weight: float = 0.0
    background_filter: bool = True
    use_pca: bool = False
    clearance: float = 0.3
    heading_min_speed: float = 1.0
    min_cluster_points: int = 5
    min_box_size: float = 0.1
    flow_cluster_radius: float = 0.7
    flow_search_margin: float = 3.0
    flow_residual_cap: float = 0.15
    icp_max_iterations: int = 50
    icp_max_correspondence: float = 2.0
    icp_tolerance: float = 1e-4
    association_gate: float = 3.0
    max_misses: int = 2
    kf_process_noise: float = 4.0
    kf_measurement_noise: float = 0.25
    registration_init: str = "flow"
    registration_residual_cap: float = 0.3
    registration_overlap: float = 0.3
    snap_to_ground: bool = True
    nms_iou: float = 0.5
    nms_mode: str = "bev"
    min_dim: float = 0.1
    max_diag: float = 20.0
    mot_iou: float = 0.4
    ground_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ValueError(f"invalid config: {msg}")

        need(self.eps_sf >= 0, "eps_sf must be >= 0")
        need(-1 <= self.eps_bg <= 1, "eps_bg must be in [-1, 1]")
        need(0 < self.r_bg <= 1, "r_bg must be in (0, 1]")
        need(self.dbscan_eps > 0, "dbscan_eps must be > 0")
        need(self.min_pts >= 1, "min_pts must be >= 1")
        need(self.flow_weight >= 0 and self.embedding_weight >= 0, "feature weights must be >= 0")
        need(self.pca_components >= 1, "pca_components must be >= 1")
        need(self.clearance >= 0, "clearance must be >= 0")
        need(self.association_gate > 0, "association_gate must be > 0")
        need(self.max_misses >= 0, "max_misses must be >= 0")
        need(0 < self.nms_iou <= 1, "nms_iou must be in (0, 1]")
        need(self.nms_mode in ("bev", "3d"), "nms_mode must be 'bev' or '3d'")
        need(self.registration_init in ("flow", "kalman"), "registration_init must be 'flow' or 'kalman'")
        need(self.min_dim >= 0 and self.max_diag > 0, "size limits must be positive")
        need(all(0 < t <= 1 for t in self.iou_thresholds), "iou_thresholds must be in (0, 1]")
        need(0 < self.mot_iou <= 1, "mot_iou must be in (0, 1]")
        need(len(self.background_categories) >= 1, "background_categories must not be empty")
        need(self.region_length > 0 and self.region_width > 0, "region dims must be > 0")

    def updated(self, **changes):
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


# source annotation written next to every key in the config file:
# "method" values are fixed by the labeling method, "decision" values are
# choices made where the method leaves a gap
SOURCES = {
    "eps_sf": "method: moving-only speed threshold, m/s (0 = all motion states)",
    "eps_bg": "method: background cosine-similarity threshold",
    "r_bg": "method: max background-point ratio per box",
    "dbscan_eps": "method: clustering neighbourhood threshold, m",
    "pca_components": "method: feature compression dimensionality",
    "background_categories": "method: a-priori background categories",
    "vehicle_queries": "method: vehicle query prompts",
    "vru_queries": "method: VRU query prompts",
    "region_length": "method: evaluation region along ego heading, m",
    "region_width": "method: evaluation region across ego heading, m",
    "iou_thresholds": "method: AP IoU thresholds",
    "min_pts": "decision: DBSCAN core-point neighbour count (self included)",
    "flow_weight": "decision: alpha, scale of flow (m/s) in the clustering metric",
    "embedding_weight": "decision: beta, scale of embedding cosine distance in the clustering metric",
    "background_filter": "decision: drop mostly-background clusters (needs embeddings)",
    "use_pca": "decision: compress features before similarity (off at synthetic D=16)",
    "clearance": "decision: points within this height of the ground plane are removed, m",
    "heading_min_speed": "decision: below this speed (m/s) headings follow the ego direction",
    "min_cluster_points": "decision: smallest cluster that becomes a proposal",
    "min_box_size": "decision: floor on fitted box dims, m (keeps single-face views)",
    "flow_cluster_radius": "decision: connectivity radius of rigid flow clusters, m",
    "flow_search_margin": "decision: search radius beyond a cluster for its next position, m",
    "flow_residual_cap": "decision: inlier distance for a confident flow registration, m",
    "icp_max_iterations": "decision: ICP iteration cap",
    "icp_max_correspondence": "decision: ICP correspondence distance cap, m",
    "icp_tolerance": "decision: ICP convergence on pose change (m + rad)",
    "association_gate": "decision: BEV centre distance gate for tracking, m",
    "max_misses": "decision: frames a track may coast without detections",
    "kf_process_noise": "decision: Kalman white-acceleration density",
    "kf_measurement_noise": "decision: Kalman centre measurement variance, m^2",
    "registration_init": "decision: track registration start, flow or kalman",
    "registration_residual_cap": "decision: residual above which a track observation is flagged, m",
    "registration_overlap": "decision: distance defining overlap with the track aggregate, m",
    "snap_to_ground": "decision: extend amodal boxes down to the ground plane",
    "nms_iou": "decision: label cleanup NMS threshold",
    "nms_mode": "decision: IoU used by cleanup NMS, bev or 3d",
    "min_dim": "decision: boxes with a smaller dimension are dropped, m",
    "max_diag": "decision: boxes with a larger BEV diagonal are dropped, m",
    "mot_iou": "decision: CLEAR-MOT match threshold",
    "ground_seed": "decision: RANSAC seed for ground fitting",
}


def _field_types():
    return {f.name: type(f.default) if not isinstance(f.default, tuple) else tuple for f in fields(PipelineConfig)}


def _parse_value(kind, default, raw):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low not in ("true", "false", "yes", "no", "1", "0"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "yes", "1")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is tuple:
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if default and isinstance(default[0], float):
            return tuple(float(s) for s in items)
        return tuple(items)
    return raw


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_from_mapping(mapping, base=None):
    base = base or PipelineConfig()
    kinds = _field_types()
    changes = {}
    for key, raw in mapping.items():
        if key not in kinds:
            raise ValueError(f"unknown config key {key!r}")
        try:
            changes[key] = _parse_value(kinds[key], getattr(base, key), raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ValueError(f"config key {key!r}: {exc}") from None
    return replace(base, **changes)


def load_config(path=None):
    """Read an INI config; without ``path`` the shipped defaults are read."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    if path is None:
        text = resources.files("autolabel3d").joinpath("data/default_config.ini").read_text(encoding="utf-8")
        parser.read_string(text)
    else:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        parser.read(path, encoding="utf-8")
    if not parser.has_section(SECTION):
        raise ValueError(f"config has no [{SECTION}] section")
    return config_from_mapping(dict(parser.items(SECTION)))


def format_config(config=None):
    config = config or PipelineConfig()
    lines = [
        "# autolabel3d pipeline configuration",
        "# Each key is annotated with where its default comes from:",
        "#   method   - value fixed by the labeling method and its evaluation protocol",
        "#   decision - chosen here where the method leaves it open",
        "",
        f"[{SECTION}]",
    ]
    for key, value in asdict(config).items():
        note = SOURCES[key]
        lines.append(f"# {note}")
        lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def write_config(path, config=None):
    Path(path).write_text(format_config(config), encoding="utf-8")
