"""Detection evaluation: greedy matching, AP, heading-weighted APH, and the
difficulty-by-range report grid."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .geometry import Box7, bev_iou, iou_3d, points_in_box

log = logging.getLogger(__name__)

RANGE_BINS = (("0-30m", 0.0, 30.0), ("30-50m", 30.0, 50.0), ("50m-Inf", 50.0, math.inf))
LEVELS = {"LEVEL_1": 5, "LEVEL_2": 1}


@dataclass
class Detection:
    box: Box7
    score: float
    cls: str

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")


@dataclass
class EvalSpec:
    iou_thresholds: Dict[str, float] = field(
        default_factory=lambda: {"vehicle": 0.7, "pedestrian": 0.5, "cyclist": 0.5})
    levels: Dict[str, int] = field(default_factory=lambda: dict(LEVELS))
    range_bins: Tuple = RANGE_BINS
    iou_mode: str = "3d"  # or "bev"
    interpolation: str = "all"  # "all", "11" or "40" recall points

    def __post_init__(self):
        for k, t in self.iou_thresholds.items():
            if not 0.0 < t < 1.0:
                raise ValueError(f"IoU threshold for {k!r} must lie in (0, 1), got {t}")
        edges = [lo for _, lo, _ in self.range_bins]
        if edges != sorted(edges):
            raise ValueError("range bins must be ordered")
        if self.iou_mode not in ("3d", "bev"):
            raise ValueError(f"iou_mode must be '3d' or 'bev', got {self.iou_mode!r}")
        if self.interpolation not in ("all", "11", "40"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")


@dataclass
class MatchResult:
    order: np.ndarray  # detection indices by descending score
    tp: np.ndarray  # per sorted detection
    matched_gt: np.ndarray  # per sorted detection, -1 if unmatched
    gt_matched: np.ndarray  # per gt


def heading_error(a: float, b: float) -> float:
    """Absolute heading difference on the full circle, in [0, pi]."""
    d = abs(a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


def match(detections: Sequence[Detection], gts: Sequence[Box7], iou_threshold: float,
          iou_fn=iou_3d, iou=None) -> MatchResult:
    """Greedy one-to-one matching in descending score order.

    Each detection claims the still-unmatched ground truth with the highest
    IoU, provided it reaches ``iou_threshold``.
    """
    scores = np.array([d.score for d in detections], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if iou is None:
        iou = np.array([[iou_fn(d.box, g) for g in gts] for d in detections]).reshape(len(detections), len(gts))
    gt_matched = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(detections), dtype=bool)
    matched = np.full(len(detections), -1)
    for rank, di in enumerate(order):
        if not len(gts):
            break
        cand = np.where(gt_matched, -1.0, iou[di])
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            gt_matched[j] = True
            tp[rank] = True
            matched[rank] = j
    return MatchResult(order, tp, matched, gt_matched)


def _interpolated_ap(tp_mass: np.ndarray, is_tp: np.ndarray, num_gt: int, interpolation: str) -> float:
    n = len(is_tp)
    if num_gt == 0:
        return 1.0 if n == 0 else 0.0
    if n == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    precision = np.cumsum(tp_mass) / ranks
    recall = np.cumsum(is_tp) / num_gt
    # monotone envelope: best precision at this or any higher recall
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "all":
        prev = np.concatenate([[0.0], recall[:-1]])
        return float(np.sum((recall - prev) * envelope))
    k = 11 if interpolation == "11" else 40
    levels = np.linspace(0.0, 1.0, 11) if k == 11 else np.linspace(1.0 / 40, 1.0, 40)
    total = 0.0
    for r in levels:
        hit = recall >= r
        total += envelope[hit][0] if hit.any() else 0.0
    return float(total / len(levels))


def average_precision(flags, num_gt: int, interpolation: str = "all") -> float:
    """AP of TP/FP flags listed in descending score order."""
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    f = np.asarray(flags, dtype=bool)
    return _interpolated_ap(f.astype(np.float64), f, num_gt, interpolation)


def aph(flags, heading_errors, num_gt: int, interpolation: str = "all") -> float:
    """Heading-weighted AP.

    ``heading_errors`` aligns with ``flags`` (values at FP positions are
    ignored). Each TP adds ``1 - err/pi`` to the precision numerator; recall
    still counts TPs.
    """
    f = np.asarray(flags, dtype=bool)
    err = np.asarray(heading_errors, dtype=np.float64).reshape(len(f))
    weights = np.where(f, 1.0 - np.clip(err, 0.0, math.pi) / math.pi, 0.0)
    return _interpolated_ap(weights, f, num_gt, interpolation)


def bev_distance(box: Box7) -> float:
    return math.hypot(box.x, box.y)


def _range_name(dist: float, bins) -> str:
    for name, lo, hi in bins:
        if lo <= dist < hi:
            return name
    return bins[-1][0]


def _accumulate(frames, spec: EvalSpec, cls_name: str, level: Optional[str], rng_name: Optional[str]):
    """Collect (score, tp, heading error) over frames for one report cell."""
    thr = spec.iou_thresholds[cls_name]
    scores, tps, herrs = [], [], []
    num_gt = 0
    for fr in frames:
        gts, dets, counts, iou = fr["gts"], fr["dets"], fr["counts"], fr["iou"]
        gi = [i for i, (_, c) in enumerate(gts) if c == cls_name]
        di = [i for i, d in enumerate(dets) if d.cls == cls_name]
        if rng_name is not None:
            di = [i for i in di if _range_name(bev_distance(dets[i].box), spec.range_bins) == rng_name]
        valid = []
        for i in gi:
            ok = True
            if rng_name is not None and _range_name(bev_distance(gts[i][0]), spec.range_bins) != rng_name:
                ok = False
            if level is not None:
                need = spec.levels[level]
                c = counts[i]
                if c is None:
                    ok = ok and need <= 1
                else:
                    ok = ok and c >= need
            valid.append(ok)
        valid = np.array(valid, dtype=bool)
        num_gt += int(valid.sum())
        if not di:
            continue
        sub_iou = iou[np.ix_(di, gi)] if gi else np.zeros((len(di), 0))
        m = match([dets[i] for i in di], [gts[i][0] for i in gi], thr, iou=sub_iou)
        for rank, local in enumerate(m.order):
            j = m.matched_gt[rank]
            if j >= 0 and not valid[j]:
                # matched an object outside this cell: neither TP nor FP
                continue
            det = dets[di[local]]
            scores.append(det.score)
            tps.append(bool(m.tp[rank]))
            herrs.append(heading_error(det.box.theta, gts[gi[j]][0].theta) if j >= 0 else 0.0)
    order = np.argsort(-np.array(scores, dtype=np.float64), kind="stable")
    flags = np.array(tps, dtype=bool)[order]
    errs = np.array(herrs, dtype=np.float64)[order]
    return flags, errs, num_gt


def point_counts(gts: Sequence[Tuple[Box7, str]], cloud) -> List[int]:
    if cloud is None:
        return [None] * len(gts)
    return [int(points_in_box(cloud, b).sum()) for b, _ in gts]


def evaluate(detections: Mapping[str, Sequence[Detection]], gts: Mapping[str, Sequence[Tuple[Box7, str]]],
             clouds: Optional[Mapping[str, np.ndarray]], spec: Optional[EvalSpec] = None,
             classes: Optional[Sequence[str]] = None) -> Dict[tuple, dict]:
    """Evaluate per class x difficulty x range.

    Returns ``{(class, level, range): {"AP", "APH", "num_gt", "num_det"}}``
    with ``range`` one of ``"Overall"`` and the configured bins.
    """
    spec = spec or EvalSpec()
    clouds = clouds or {}
    iou_fn = iou_3d if spec.iou_mode == "3d" else bev_iou
    frames = []
    for fid in sorted(set(gts) | set(detections)):
        g = list(gts.get(fid, []))
        d = list(detections.get(fid, []))
        cloud = clouds.get(fid)
        if cloud is None and g:
            log.warning("no cloud for frame %s: its objects count toward LEVEL_2 only", fid)
        iou = np.array([[iou_fn(x.box, b) for b, _ in g] for x in d]).reshape(len(d), len(g))
        frames.append({"gts": g, "dets": d, "counts": point_counts(g, cloud), "iou": iou})
    if classes is None:
        classes = sorted({c for f in frames for _, c in f["gts"]} | {x.cls for f in frames for x in f["dets"]})
    report = {}
    for cls_name in classes:
        if cls_name not in spec.iou_thresholds:
            raise KeyError(f"no IoU threshold for class {cls_name!r}")
        for level in spec.levels:
            for rng_name in [None] + [name for name, _, _ in spec.range_bins]:
                flags, errs, n = _accumulate(frames, spec, cls_name, level, rng_name)
                report[(cls_name, level, rng_name or "Overall")] = {
                    "AP": average_precision(flags, n, spec.interpolation),
                    "APH": aph(flags, errs, n, spec.interpolation),
                    "num_gt": n,
                    "num_det": int(len(flags)),
                }
    return report


def format_report(report: Dict[tuple, dict]) -> str:
    """Fixed-width text table: one row per class and level, AP/APH per range."""
    ranges = []
    for _, _, r in report:
        if r not in ranges:
            ranges.append(r)
    head = f"{'class':<12}{'level':<9}" + "".join(f"{r + ' AP/APH':>22}" for r in ranges)
    lines = [head, "-" * len(head)]
    rows = []
    for c, lv, _ in report:
        if (c, lv) not in rows:
            rows.append((c, lv))
    for c, lv in rows:
        cells = "".join(f"{report[(c, lv, r)]['AP'] * 100:>13.2f}/{report[(c, lv, r)]['APH'] * 100:<8.2f}"
                        for r in ranges)
        lines.append(f"{c:<12}{lv:<9}{cells}")
    return "\n".join(lines) + "\n"


def report_records(report: Dict[tuple, dict]) -> List[dict]:
    return [{"class": c, "level": lv, "range": r, **vals} for (c, lv, r), vals in report.items()]
