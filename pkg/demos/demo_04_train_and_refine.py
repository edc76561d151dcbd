"""
Training a refiner on synthetic scenes
======================================

Synthetic LiDAR-like scenes give ground truth, noisy proposals stand in for
a first-stage detector. A small PointNet learns to rescore and correct them.
Takes about a minute on one core; the acceptance suite runs the full
comparison across encodings.
"""

import time

from boxrefine.data import synthetic_dataset
from boxrefine.metrics import Detection
from boxrefine.study import matched_pairs, mean_iou, score_detections
from boxrefine.synthetic import ProposalNoise, SceneConfig
from boxrefine.trainer import TrainConfig, refine, train

ds = synthetic_dataset(SceneConfig(), 150, 0, ProposalNoise(), 1.0, 0.25)
tr, val = ds.subset("train"), ds.subset("val")
print("train frames", len(tr.clouds), "val frames", len(val.clouds))

cfg = TrainConfig(epochs=20, points_per_proposal=128, variant="boundary_offset")
t0 = time.perf_counter()
ckpt, log = train(tr, cfg)
print(f"trained {log[-1]['iteration'] + 1} steps in {time.perf_counter() - t0:.1f} s, "
      f"last loss {log[-1]['total']:.3f}, lr {log[-1]['lr']:.4f}")

###############################################################################
# Refine the validation proposals and compare against the raw ones.

props = [(f, p) for f in sorted(val.proposals) for p in val.proposals[f]]
out = refine(ckpt, props, val.clouds)
pairs = matched_pairs(props, val.gts)
print(f"mean IoU  proposals {mean_iou([p.box for _, p in props], pairs):.3f}  "
      f"refined {mean_iou([r.box for r in out], pairs):.3f}")

raw, ref = {}, {}
for (f, p), r in zip(props, out):
    raw.setdefault(f, []).append(Detection(p.box, p.score, p.cls))
    ref.setdefault(f, []).append(Detection(r.box, r.score, r.cls))
print("LEVEL_2 AP, proposals:", {k: round(v, 2) for k, v in score_detections(raw, val).items()})
print("LEVEL_2 AP, refined:  ", {k: round(v, 2) for k, v in score_detections(ref, val).items()})
