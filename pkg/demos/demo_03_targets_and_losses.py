"""
Regression targets and the loss
===============================

A proposal is labelled with the class of the ground truth box it overlaps
enough, and regresses that box as offsets in its own frame. Headings are
folded so that a box pointing backwards costs nothing.
"""

import math

import numpy as np

from boxrefine.geometry import Box7, iou_3d
from boxrefine.targets import (
    LossConfig, assign_label, classification_loss, decode_box, encode_targets, regression_loss, total_loss,
)

gt = Box7(5.0, 2.0, 0.0, 1.9, 4.6, 1.7, 0.3)
prop = Box7(5.3, 1.8, 0.1, 2.1, 4.2, 1.6, 0.3 + math.pi - 0.05)

t = encode_targets(prop, gt)
print("targets:", np.round(t, 4))
print("heading residual in (-pi/2, pi/2]:", -math.pi / 2 < t[6] <= math.pi / 2)

back = decode_box(prop, t)
print("decoded IoU with gt:", round(iou_3d(back, gt), 12))

label, matched = assign_label(prop, [(gt, "vehicle")], LossConfig(), ["vehicle", "pedestrian"])
print(f"proposal IoU {iou_3d(prop, gt):.3f} -> label {label}")

###############################################################################
# Cross entropy plus twenty times smooth L1 over positives.

logits = np.zeros((2, 3))
labels = np.array([1, 0])
pred = np.zeros((2, 7))
targets = np.stack([t, np.zeros(7)])
cls = classification_loss(logits, labels)
reg = regression_loss(pred, targets, labels > 0)
print(f"cls {cls:.4f} (ln 3 = {math.log(3):.4f})  reg {reg:.4f}  total {total_loss(cls, reg):.4f}")
