"""Detection and tracking evaluation: 3D AP / mAP, CLEAR-MOT and a
false-positive taxonomy."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Box7, iou_3d


@dataclass(frozen=True)
class Detection:
    box: Box7
    score: float
    category: Optional[str] = None
    frame: int = 0
    track_id: int = -1


@dataclass(frozen=True)
class GroundTruthBox:
    box: Box7
    category: Optional[str] = None
    frame: int = 0
    track_id: int = -1


@dataclass(frozen=True)
class Region:
    """BEV rectangle ``length`` x ``width`` centred at (cx, cy), long side along ``heading``."""

    cx: float = 0.0
    cy: float = 0.0
    heading: float = 0.0
    length: float = 100.0
    width: float = 40.0

    @classmethod
    def around_pose(cls, pose, length=100.0, width=40.0):
        return cls(float(pose.translation[0]), float(pose.translation[1]), pose.yaw, length, width)

    def contains(self, x, y):
        c, s = math.cos(self.heading), math.sin(self.heading)
        dx, dy = x - self.cx, y - self.cy
        return abs(dx * c + dy * s) <= 0.5 * self.length and abs(-dx * s + dy * c) <= 0.5 * self.width


def _region_for(region, frame):
    if region is None:
        return None
    if isinstance(region, Region):
        return region
    return region[frame]


def filter_region(items, region):
    if region is None:
        return list(items)
    out = []
    for it in items:
        r = _region_for(region, it.frame)
        if r is None or r.contains(it.box.cx, it.box.cy):
            out.append(it)
    return out


def match_detections(dets, gts, iou_threshold, iou_fn=iou_3d):
    """Greedy matching in descending score order (ties by input order).

    Each detection takes the unmatched same-frame GT with the highest IoU;
    it is a true positive when that IoU is >= ``iou_threshold``. Returns
    the ranking (indices into ``dets``) and the TP flag per ranked detection.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    gts_by_frame = defaultdict(list)
    for j, g in enumerate(gts):
        gts_by_frame[g.frame].append(j)
    taken = set()
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        best, best_iou = None, -1.0
        for j in gts_by_frame.get(d.frame, ()):
            if j in taken:
                continue
            v = iou_fn(d.box, gts[j].box)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= iou_threshold:
            taken.add(best)
            tp[rank] = True
    return order, tp


def average_precision(dets, gts, iou_threshold=0.4, region=None, iou_fn=iou_3d, interpolate=False):
    """Average precision over the full ranked list.

    By default the sum over true positives of precision x recall step
    (no interpolation). With ``interpolate=True`` the precision envelope
    ``max_{r' >= r} p(r')`` replaces the raw precision. Returns NaN when
    there is no ground truth.
    """
    dets = filter_region(dets, region)
    gts = filter_region(gts, region)
    if not gts:
        return float("nan")
    if not dets:
        return 0.0
    _, tp = match_detections(dets, gts, iou_threshold, iou_fn)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    if interpolate:
        precision = np.maximum.accumulate(precision[::-1])[::-1]
    return float(precision[tp].sum() / len(gts))


def mean_ap(aps):
    values = list(aps.values()) if isinstance(aps, dict) else list(aps)
    if not values:
        raise ValueError("mean_ap needs at least one category")
    return float(np.mean(values))


@dataclass(frozen=True)
class MotResult:
    mota: float
    motp: float
    misses: int
    false_positives: int
    id_switches: int
    num_gt: int
    num_matches: int


def clear_mot(hyps, gts, match_iou=0.4, iou_fn=iou_3d):
    """CLEAR-MOT over frame-stamped hypotheses and GT (both carry ``frame``,
    ``track_id`` and ``box``).

    Matches from the previous frame are kept while their IoU stays at or
    above ``match_iou``; the rest are assigned by minimum (1 - IoU) cost.
    MOTA is reported x100; MOTP is the mean (1 - IoU) x100 over matches
    (lower is better).
    """
    hyp_by = defaultdict(dict)
    gt_by = defaultdict(dict)
    for h in hyps:
        hyp_by[h.frame][h.track_id] = h.box
    for g in gts:
        gt_by[g.frame][g.track_id] = g.box
    mapping = {}
    misses = fps = switches = matches = 0
    dissim = 0.0
    num_gt = sum(len(v) for v in gt_by.values())
    for f in sorted(set(hyp_by) | set(gt_by)):
        g_f, h_f = gt_by.get(f, {}), hyp_by.get(f, {})
        pairs = {}
        used_h = set()
        for gid in sorted(g_f):
            hid = mapping.get(gid)
            if hid is not None and hid in h_f and hid not in used_h:
                v = iou_fn(g_f[gid], h_f[hid])
                if v >= match_iou:
                    pairs[gid] = (hid, v)
                    used_h.add(hid)
        rest_g = [g for g in sorted(g_f) if g not in pairs]
        rest_h = [h for h in sorted(h_f) if h not in used_h]
        if rest_g and rest_h:
            ious = np.array([[iou_fn(g_f[g], h_f[h]) for h in rest_h] for g in rest_g])
            cost = np.where(ious >= match_iou, 1.0 - ious, 1e6)
            for r, c in zip(*linear_sum_assignment(cost)):
                if ious[r, c] >= match_iou:
                    gid, hid = rest_g[r], rest_h[c]
                    if gid in mapping and mapping[gid] != hid:
                        switches += 1
                    pairs[gid] = (hid, ious[r, c])
        for gid, (hid, v) in pairs.items():
            mapping[gid] = hid
            dissim += 1.0 - v
        matches += len(pairs)
        misses += len(g_f) - len(pairs)
        fps += len(h_f) - len(pairs)
    mota = 100.0 * (1.0 - (misses + fps + switches) / num_gt) if num_gt else float("nan")
    motp = 100.0 * dissim / matches if matches else float("nan")
    return MotResult(mota, motp, misses, fps, switches, num_gt, matches)


@dataclass(frozen=True)
class FpTaxonomy:
    localization: int = 0
    confusion_other: int = 0
    confusion_background: int = 0

    @property
    def total(self):
        return self.localization + self.confusion_other + self.confusion_background

    def __add__(self, other):
        return FpTaxonomy(
            self.localization + other.localization,
            self.confusion_other + other.confusion_other,
            self.confusion_background + other.confusion_background,
        )


def fp_breakdown(dets, gts, iou_threshold=0.4, low_iou=0.1, iou_fn=iou_3d, per_category=False):
    """Classify false positives among the top ceil(#GT / 2) detections per category.

    Localization: same-category IoU in (low_iou, iou_threshold), or a
    duplicate of an already matched GT. Confusion with other objects: IoU
    >= low_iou with a GT of another category. Everything else is confusion
    with background.
    """
    cats = sorted({g.category for g in gts} | {d.category for d in dets}, key=str)
    result = {}
    for c in cats:
        dets_c = [d for d in dets if d.category == c]
        gts_c = [g for g in gts if g.category == c]
        others = [g for g in gts if g.category != c]
        top_n = math.ceil(len(gts_c) / 2)
        tax = FpTaxonomy()
        if top_n and dets_c:
            order, tp = match_detections(dets_c, gts_c, iou_threshold, iou_fn)
            loc = oth = bg = 0
            for rank in range(min(top_n, len(order))):
                if tp[rank]:
                    continue
                d = dets_c[order[rank]]
                same = max((iou_fn(d.box, g.box) for g in gts_c if g.frame == d.frame), default=0.0)
                other = max((iou_fn(d.box, g.box) for g in others if g.frame == d.frame), default=0.0)
                if same > low_iou:
                    loc += 1
                elif other >= low_iou:
                    oth += 1
                else:
                    bg += 1
            tax = FpTaxonomy(loc, oth, bg)
        result[c] = tax
    if per_category:
        return result
    total = FpTaxonomy()
    for t in result.values():
        total = total + t
    return total
