"""Encoding-variant comparison on a synthetic split: train, refine, score."""

from __future__ import annotations

import dataclasses
import time
from typing import Dict, List, Optional, Sequence

import numpy as np

from .geometry import iou_3d
from .metrics import Detection, EvalSpec, evaluate
from .trainer import TrainConfig, refine, train

MATCH_FLOOR = 0.3  # proposals overlapping no object this much are treated as false positives


def matched_pairs(proposals, gts, floor: float = MATCH_FLOOR):
    """``(index, gt_box)`` for proposals whose best-IoU object clears ``floor``."""
    out = []
    for i, (f, p) in enumerate(proposals):
        best, best_iou = None, floor
        for g, _ in gts.get(f, []):
            v = iou_3d(p.box, g)
            if v >= best_iou:
                best, best_iou = g, v
        if best is not None:
            out.append((i, best))
    return out


def mean_iou(boxes, pairs) -> float:
    if not pairs:
        return float("nan")
    return float(np.mean([iou_3d(boxes[i], g) for i, g in pairs]))


def score_detections(dets_by_frame, val, spec: Optional[EvalSpec] = None) -> Dict[str, float]:
    """LEVEL_2 overall AP per class, in percent."""
    rep = evaluate(dets_by_frame, val.gts, val.clouds, spec or EvalSpec(), classes=val.classes)
    return {c: 100.0 * rep[(c, "LEVEL_2", "Overall")]["AP"] for c in val.classes}


def variant_study(dataset, variants: Sequence[str], config: TrainConfig, log=None) -> Dict[str, dict]:
    """Train one model per variant on ``train``; evaluate refined ``val`` proposals.

    The ``"proposals"`` entry scores the unrefined proposals. Each entry has
    ``ap`` (class -> LEVEL_2 AP in percent), ``mean_iou`` over matched
    proposals and, for trained variants, ``seconds`` and ``final_loss``.
    """
    tr, val = dataset.subset("train"), dataset.subset("val")
    props = [(f, p) for f in sorted(val.proposals) for p in val.proposals[f]]
    pairs = matched_pairs(props, val.gts)
    base: Dict[str, List[Detection]] = {}
    for f, p in props:
        base.setdefault(f, []).append(Detection(p.box, p.score, p.cls))
    results = {"proposals": {"ap": score_detections(base, val), "mean_iou": mean_iou([p.box for _, p in props], pairs)}}
    for v in variants:
        cfg = dataclasses.replace(config, variant=v)
        t0 = time.perf_counter()
        ckpt, records = train(tr, cfg)
        secs = time.perf_counter() - t0
        refined = refine(ckpt, props, val.clouds, seed=cfg.seed)
        dets: Dict[str, List[Detection]] = {}
        for r in refined:
            dets.setdefault(r.frame_id, []).append(Detection(r.box, r.score, r.cls))
        last = [r["total"] for r in records if r["epoch"] == cfg.epochs - 1]
        results[v] = {"ap": score_detections(dets, val), "mean_iou": mean_iou([r.box for r in refined], pairs),
                      "seconds": secs, "final_loss": float(np.mean(last)) if last else float("nan")}
        if log:
            log(v, results[v])
    return results
