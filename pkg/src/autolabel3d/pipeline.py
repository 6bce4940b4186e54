"""End-to-end auto labeling: flow, masks, proposals, tracking, amodal boxes,
open-vocabulary categories and evaluation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import PipelineConfig
from .flow import GroundModel, estimate_scene_flow, fit_ground, remove_ground, speed_mask
from .geometry import iou_3d, iou_bev
from .metrics import FpTaxonomy, GroundTruthBox, Region, average_precision, clear_mot, filter_region, fp_breakdown, mean_ap
from .proposals import propose_boxes, st_cluster
from .semantics import UNASSIGNED, TextQuery, assign_box_category, assign_point_categories, background_mask, compress_query, pca_fit, pca_transform
from .tracking import AmodalParams, RegistrationParams, TrackerParams, amodalize, cleanup_labels, register_track, track_proposals

log = logging.getLogger(__name__)


def _map(fn, items, workers):
    """Ordered map; results do not depend on ``workers``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _fallback_ground(points, clearance):
    z0 = float(np.quantile(points[:, 2], 0.02)) if len(points) else 0.0
    return GroundModel(np.array([0.0, 0.0, 1.0]), -z0, clearance)


def estimate_ground(points, config):
    """Plane fit with a flat height-threshold fallback for degenerate sweeps."""
    try:
        return fit_ground(points, clearance=config.clearance, seed=config.ground_seed)
    except ValueError as exc:
        log.debug("ground fit failed (%s); using height threshold", exc)
        return _fallback_ground(points, config.clearance)


@dataclass
class Preprocessed:
    world_points: list
    grounds: list
    non_ground: list


def preprocess(frames, config, workers=1):
    world = [f.world_points() for f in frames]
    grounds = _map(lambda p: estimate_ground(p, config), world, workers)
    keep = [remove_ground(p, g) if len(p) else np.zeros(0, bool) for p, g in zip(world, grounds)]
    return Preprocessed(world, grounds, keep)


def compute_flows(frames, config=PipelineConfig(), dt=0.1, workers=1, pre=None):
    """World-frame flow (m/s) for every point of every frame.

    Ground points get zero flow. Frames but the last use forward registration
    to the next sweep; the last uses negated backward registration, as do
    clusters whose forward registration is not confident.
    """
    pre = pre or preprocess(frames, config, workers)
    n = len(frames)
    kw = dict(
        cluster_radius=config.flow_cluster_radius,
        search_margin=config.flow_search_margin,
        max_correspondence_dist=config.icp_max_correspondence,
        residual_cap=config.flow_residual_cap,
        max_iterations=config.icp_max_iterations,
    )

    def register(t, other):
        pts, mask = pre.world_points[t], pre.non_ground[t]
        dst = pre.world_points[other][pre.non_ground[other]]
        if not mask.any() or len(dst) == 0:
            return None
        return estimate_scene_flow(pts[mask], dst, dt, **kw)

    def one(t):
        pts, mask = pre.world_points[t], pre.non_ground[t]
        out = np.zeros((len(pts), 3))
        if n < 2:
            return out
        fwd = register(t, t + 1) if t < n - 1 else None
        vec = np.zeros((int(mask.sum()), 3))
        done = np.zeros(len(vec), dtype=bool)
        if fwd is not None:
            vec, done = fwd.vectors.copy(), fwd.confident.copy()
        if t > 0 and not done.all():
            # the object may be gone in the next sweep: fall back to the
            # negated registration against the previous one
            bwd = register(t, t - 1)
            if bwd is not None:
                use = ~done & bwd.confident
                vec[use] = -bwd.vectors[use]
        out[mask] = vec
        return out

    return _map(one, range(n), workers)


@dataclass
class AutolabelResult:
    labels: list
    tracks: list
    proposals: list
    features: list = field(repr=False)
    flows: list = field(repr=False)
    pca: object = None

    @property
    def track_ids(self):
        return sorted({l.track_id for l in self.labels})


def _check_embeddings(frames, config, background_queries):
    missing = [f.index for f in frames if f.embeddings is None]
    if config.background_filter:
        if missing:
            raise ValueError(
                f"frames {missing[:10]} have no per-point embeddings but background filtering is enabled; "
                "supply embeddings or set background_filter = false"
            )
        if not background_queries:
            raise ValueError("background filtering is enabled but no background queries were given")


def select_background(queries, config):
    """Background queries restricted to ``config.background_categories``."""
    keep = [q for q in queries if q.category_name in config.background_categories]
    if queries and not keep:
        raise ValueError(
            f"none of the background queries {[q.category_name for q in queries]} "
            f"is in background_categories {list(config.background_categories)}"
        )
    return keep


def select_prompts(queries, config):
    """Keep only the configured prompts of the vehicle / VRU query sets.

    Other categories pass through unchanged.
    """
    allowed = {"vehicle": config.vehicle_queries, "vru": config.vru_queries}
    out = []
    for q in queries:
        if q.category_name not in allowed:
            out.append(q)
            continue
        rows = [i for i, p in enumerate(q.prompts) if p in allowed[q.category_name]]
        if not rows:
            raise ValueError(f"query {q.category_name!r} has none of the configured prompts")
        out.append(TextQuery(q.category_name, tuple(q.prompts[i] for i in rows), q.embeddings[rows]))
    return out


def run_autolabel(frames, config=PipelineConfig(), background_queries=None, dt=0.1, workers=1, flows=None):
    """Auto label a sequence of frames.

    Returns amodal per-frame boxes with track ids, the tracks, the per-frame
    proposals and the per-point features used (one array per frame, or None).
    Precomputed world-frame ``flows`` (or ``frame.flow`` on every frame) skip
    flow estimation.
    """
    frames = list(frames)
    config.validate()
    _check_embeddings(frames, config, background_queries)
    if not frames:
        return AutolabelResult([], [], [], [], [])
    pre = preprocess(frames, config, workers)
    if flows is None and all(f.flow is not None for f in frames):
        flows = [np.asarray(f.flow, dtype=np.float64) for f in frames]
    if flows is None:
        flows = compute_flows(frames, config, dt, workers, pre)

    features = [None if f.embeddings is None else np.asarray(f.embeddings, dtype=np.float64) for f in frames]
    bg_queries = select_background(list(background_queries or []), config)
    pca = None
    if config.use_pca and all(x is not None for x in features):
        pca = pca_fit((x for x in features if len(x)), config.pca_components)
        features = [pca_transform(pca, x) for x in features]
        bg_queries = [compress_query(q, pca) for q in bg_queries]

    moving_speed = max(config.eps_sf, config.heading_min_speed)

    def frame_proposals(t):
        pts, flow = pre.world_points[t], flows[t]
        sel = np.flatnonzero(speed_mask(flow, config.eps_sf) & pre.non_ground[t])
        if len(sel) == 0:
            return []
        if config.background_filter:
            bg = background_mask(features[t][sel], bg_queries, config.eps_bg)
        else:
            bg = np.zeros(len(sel), dtype=bool)
        emb = features[t][sel] if (features[t] is not None and config.embedding_weight > 0) else None
        labels = st_cluster(
            pts[sel],
            flow=flow[sel],
            embeddings=emb,
            eps=config.dbscan_eps,
            min_samples=config.min_pts,
            flow_weight=config.flow_weight,
            embedding_weight=config.embedding_weight,
        )
        return propose_boxes(
            labels,
            pts[sel],
            bg,
            flow=flow[sel],
            r_bg=config.r_bg,
            ego_heading=frames[t].ego_heading,
            moving_speed=moving_speed,
            min_points=config.min_cluster_points,
            max_diag=config.max_diag,
            min_size=config.min_box_size,
            point_indices=sel,
        )

    per_frame = _map(frame_proposals, range(len(frames)), workers)
    tparams = TrackerParams(
        dt=dt,
        gate=config.association_gate,
        max_misses=config.max_misses,
        process_noise=config.kf_process_noise,
        measurement_noise=config.kf_measurement_noise,
    )
    tracks = track_proposals(per_frame, tparams)
    rparams = RegistrationParams(
        init=config.registration_init,
        max_iterations=config.icp_max_iterations,
        max_correspondence_dist=config.icp_max_correspondence,
        tolerance=config.icp_tolerance,
        residual_cap=config.registration_residual_cap,
        overlap_dist=config.registration_overlap,
    )
    aparams = AmodalParams(moving_speed=moving_speed, min_size=config.min_box_size, snap_to_ground=config.snap_to_ground)
    headings = [f.ego_heading for f in frames]

    def label_track(track):
        shape = register_track(track, pre.world_points, dt, rparams)
        ground = pre.grounds[track.observations[0][0]]
        return amodalize(track, shape, headings, aparams, ground=ground)

    boxes = [b for group in _map(label_track, tracks, workers) for b in group]
    iou_fn = iou_bev if config.nms_mode == "bev" else iou_3d
    labels = cleanup_labels(boxes, config.min_dim, config.max_diag, config.nms_iou, iou_fn=iou_fn)
    labels.sort(key=lambda l: (l.frame, l.track_id))
    kept = {l.track_id for l in labels}
    return AutolabelResult(labels, [t for t in tracks if t.id in kept], per_frame, features, flows, pca)


def run_query(labels, frames, queries, pca=None):
    """Attach a category name (majority vote of enclosed points) to every label.

    Labels whose enclosed points vote for no query get ``None``.
    """
    queries = list(queries)
    if not queries:
        raise ValueError("at least one query category is required")
    if pca is not None:
        queries = [compress_query(q, pca) for q in queries]
    by_index = {f.index: f for f in frames}
    cache = {}
    out = []
    for lab in labels:
        if lab.frame not in by_index:
            raise ValueError(f"label refers to frame {lab.frame}, which is not in the dataset")
        if lab.frame not in cache:
            f = by_index[lab.frame]
            if f.embeddings is None:
                raise ValueError(f"frame {f.index} has no embeddings to query")
            feats = np.asarray(f.embeddings, dtype=np.float64)
            if pca is not None:
                feats = pca_transform(pca, feats)
            if feats.shape[1] != queries[0].dim:
                raise ValueError(
                    f"query embeddings have dim {queries[0].dim} but frame {f.index} features have dim {feats.shape[1]}"
                )
            cache[lab.frame] = (f.world_points(), *assign_point_categories(feats, queries))
        pts, cats, scores = cache[lab.frame]
        c = assign_box_category(lab.box, pts, cats, scores)
        out.append(lab.with_category(None if c == UNASSIGNED else queries[c].category_name))
    return out


def _clean(x):
    if isinstance(x, float):
        return None if math.isnan(x) else round(float(x), 6)
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def _tax(t):
    return {"localization": t.localization, "confusion_other": t.confusion_other, "confusion_background": t.confusion_background}


def run_eval(detections, gts, ego_poses, config=PipelineConfig()):
    """Detection and tracking report inside the ego-centred evaluation region.

    ``ego_poses`` maps frame index to the ego pose (a list works too).
    Returns a JSON-ready dict; NaN (no ground truth) becomes None.
    """
    poses = dict(enumerate(ego_poses)) if isinstance(ego_poses, (list, tuple)) else dict(ego_poses)
    bad = sorted({d.frame for d in detections} - set(poses)) + sorted({g.frame for g in gts} - set(poses))
    if bad:
        raise ValueError(f"frame misalignment: frames {sorted(set(bad))} are not in the dataset")
    regions = {f: Region.around_pose(p, config.region_length, config.region_width) for f, p in poses.items()}
    dets = filter_region(detections, regions)
    gts = filter_region(gts, regions)
    cats = sorted({g.category for g in gts if g.category is not None})
    report = {"num_detections": len(dets), "num_ground_truth": len(gts), "ap": {}, "map": {}, "ap_class_agnostic": {}}
    for thr in config.iou_thresholds:
        key = f"{thr:.2f}"
        per = {c: average_precision([d for d in dets if d.category == c], [g for g in gts if g.category == c], thr) for c in cats}
        report["ap"][key] = per
        report["map"][key] = mean_ap(per) if per else float("nan")
        report["ap_class_agnostic"][key] = average_precision(dets, gts, thr)
    mot = clear_mot(dets, gts, config.mot_iou)
    report["mot"] = {
        "mota": mot.mota,
        "motp": mot.motp,
        "misses": mot.misses,
        "false_positives": mot.false_positives,
        "id_switches": mot.id_switches,
        "num_gt": mot.num_gt,
        "num_matches": mot.num_matches,
    }
    thr = config.iou_thresholds[0]
    per_cat = fp_breakdown(dets, gts, thr, per_category=True)
    total = FpTaxonomy()
    for t in per_cat.values():
        total = total + t
    report["fp_taxonomy"] = {"iou_threshold": thr, "total": _tax(total), "per_category": {str(c): _tax(t) for c, t in per_cat.items()}}
    return _clean(report)


def format_report(report):
    """Human-readable table for an evaluation report."""
    lines = [f"detections: {report['num_detections']}  ground truth: {report['num_ground_truth']}"]
    cats = sorted({c for per in report["ap"].values() for c in per})
    header = "IoU    " + "".join(f"{c:>10}" for c in cats) + f"{'mAP':>10}{'agnostic':>10}"
    lines.append(header)

    def fmt(v):
        return f"{'-':>10}" if v is None else f"{100 * v:>10.1f}"

    for key in sorted(report["ap"]):
        row = f"{key:<7}" + "".join(fmt(report["ap"][key].get(c)) for c in cats)
        lines.append(row + fmt(report["map"][key]) + fmt(report["ap_class_agnostic"][key]))
    m = report["mot"]
    mota = "-" if m["mota"] is None else f"{m['mota']:.1f}"
    motp = "-" if m["motp"] is None else f"{m['motp']:.1f}"
    lines.append(f"MOTA {mota}  MOTP {motp}  misses {m['misses']}  FP {m['false_positives']}  IDSW {m['id_switches']}")
    t = report["fp_taxonomy"]["total"]
    lines.append(
        f"FP taxonomy: localization {t['localization']}  other objects {t['confusion_other']}  background {t['confusion_background']}"
    )
    return "\n".join(lines) + "\n"


def ground_truth_from_labels(labels):
    return [GroundTruthBox(l.box, l.category, l.frame, l.track_id) for l in labels]


class AutoLabeler(BaseEstimator):
    """Estimator wrapper around :func:`run_autolabel` / :func:`run_query`.

    ``fit(frames)`` runs the pipeline and stores ``labels_`` and ``tracks_``;
    ``predict(frames, queries)`` returns the labels with categories attached.
    """

    def __init__(self, config=None, dt=0.1, workers=1):
        self.config = config
        self.dt = dt
        self.workers = workers

    def fit(self, frames, y=None, background_queries=None):
        cfg = self.config or PipelineConfig()
        self.result_ = run_autolabel(frames, cfg, background_queries, self.dt, self.workers)
        self.labels_ = self.result_.labels
        self.tracks_ = self.result_.tracks
        return self

    def predict(self, frames, queries):
        if not hasattr(self, "labels_"):
            raise NotFittedError("AutoLabeler is not fitted; call fit(frames) first")
        return run_query(self.labels_, frames, queries, self.result_.pca)
