"""
Average precision, with and without heading
===========================================

Detections are matched greedily by score; AP integrates the precision
envelope over recall. APH discounts each match by how far its heading is
off, so a box facing backwards counts as a miss for APH but not for AP.
"""

import math

import numpy as np

from boxrefine.geometry import Box7
from boxrefine.metrics import Detection, aph, average_precision, evaluate, format_report

# hit, miss, hit against two objects
print("AP [TP, FP, TP] / 2 gt =", average_precision([1, 0, 1], 2), "=", 5 / 6)
print("APH with a backwards second hit:", aph([1, 0, 1], [0.0, 0.0, math.pi], 2))

gts = {"a": [(Box7(10, 0, 0, 1.9, 4.6, 1.7, 0), "vehicle"), (Box7(40, 5, 0, 0.8, 0.9, 1.7, 0), "pedestrian")]}
dets = {"a": [Detection(Box7(10.1, 0, 0, 1.9, 4.6, 1.7, math.pi), 0.9, "vehicle"),
              Detection(Box7(40, 5.1, 0, 0.8, 0.9, 1.7, 0), 0.8, "pedestrian")]}
cloud = np.array([[10, 0, 0]] * 6 + [[40, 5, 0]] * 2, dtype=float)

###############################################################################
# The pedestrian has two points, so it counts at LEVEL_2 only; cells with
# nothing to find and nothing claimed read 100. The vehicle is flipped.

print(format_report(evaluate(dets, gts, {"a": cloud})))
