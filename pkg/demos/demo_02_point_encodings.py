"""
Why raw coordinates hide the box size
=====================================

Enlarging a proposal before pooling gives the network context, but if the
enlarged ring holds no points, a small and a large proposal over the same
object see exactly the same coordinates. Only encodings that carry the
proposal size can tell them apart.
"""

import numpy as np

from boxrefine.encoding import VARIANTS, AnchorTable, crop_points, encode_crop, voxelize
from boxrefine.geometry import Box7

rng = np.random.default_rng(0)

# points on a 4 m long object
cloud = np.column_stack([rng.uniform(-2, 2, 200), rng.uniform(-0.9, 0.9, 200), rng.uniform(-0.8, 0.8, 200)])
tight = Box7(0, 0, 0, 1.9, 4.1, 1.7, 0)
loose = Box7(0, 0, 0, 2.6, 5.5, 1.7, 0)

a, b = crop_points(cloud, tight, class_hint="vehicle"), crop_points(cloud, loose, class_hint="vehicle")
print("points pooled:", len(a), len(b))

anchors = AnchorTable({"vehicle": (1.9, 4.6, 1.7)})
for v in VARIANTS:
    fa = encode_crop(a, v, anchors=anchors)
    fb = encode_crop(b, v, anchors=anchors)
    same = fa.shape == fb.shape and np.allclose(fa, fb)
    print(f"{v:16s} channels {fa.shape[1]}  identical inputs for both proposals: {same}")

###############################################################################
# The anchor variant appends the class mean size, not the proposal's, so it
# too is blind to the difference; boundary offsets and virtual points are not.
#
# A voxel grid over the enlarged proposal is the dense alternative.

grid = voxelize(a)
print("occupied voxels:", int((grid.counts > 0).sum()), "of", grid.counts.size)
