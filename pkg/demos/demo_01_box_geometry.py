"""
Box geometry in the proposal frame
==================================

Every box is seven numbers: center, size (w across, l along the heading,
h up) and a heading about the vertical axis. Refinement happens in each
proposal's own frame, so the first thing to get right is moving points in
and out of it, then measuring overlap.
"""

import math

import numpy as np

from boxrefine.geometry import Box7, bev_iou, enlarge, from_canonical, iou_3d, points_in_box, to_canonical

# a car-sized box ten meters out, pointing along +y
box = Box7(10.0, 0.0, 0.0, 1.9, 4.6, 1.7, math.pi / 2)

# one meter ahead of the car lands on the canonical +x axis
pts = np.array([[10.0, 1.0, 0.0], [10.0, 0.0, 0.0], [11.0, 0.0, 0.5]])
local = to_canonical(pts, box)
print("canonical:\n", np.round(local, 6))
print("round trip error:", np.abs(from_canonical(local, box) - pts).max())

# enlarging grows width and length only; the point 1 m to the side is
# outside the box but inside the enlarged one
print("inside:", points_in_box(pts, box), "inside enlarged:", points_in_box(pts, enlarge(box, 1.0, 1.0)))

###############################################################################
# Overlap: the bird's-eye polygon intersection times the vertical overlap.

other = Box7(10.3, 0.4, 0.2, 1.8, 4.4, 1.6, math.pi / 2 + 0.1)
print(f"BEV IoU {bev_iou(box, other):.4f}  3D IoU {iou_3d(box, other):.4f}")

# a box and its 180 degree flip cover the same space
flipped = Box7(*box.center, *box.dims, box.theta - math.pi)
print("flip IoU:", round(iou_3d(box, flipped), 12))
