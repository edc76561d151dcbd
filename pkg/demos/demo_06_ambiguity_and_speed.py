"""
How often enlargement adds nothing, and what points cost
========================================================

Counts, on synthetic scenes, the proposals whose enlarged box holds exactly
the points of the original one, then times the network as the number of
sampled points grows.
"""

import numpy as np

from boxrefine.network import init_model, param_count
from boxrefine.synthetic import ProposalNoise, SceneConfig, ambiguity_study, generate_scenes, make_proposals
from boxrefine.trainer import bench

cfg = SceneConfig()
scenes = generate_scenes(cfg, 100, seed=1)
rng = np.random.default_rng(1)
props = [[p.box for p in make_proposals(s, rng, ProposalNoise(), 1.0, cfg)] for s in scenes]
stats = ambiguity_study([s.cloud for s in scenes], props, enlarge_wl=1.0)
print(f"{stats['num_proposals']} proposals: {100 * stats['frac_same_count']:.1f}% gain no points, "
      f"{100 * stats['frac_lt_10_new']:.1f}% gain fewer than ten")

###############################################################################
# Latency at batch 128 (a few repeats only, for speed).

model = init_model(np.random.default_rng(0))
res = bench(model, [64, 256, 1024], batch=128, repeats=3)
print("parameters:", res["parameters"], "=", param_count())
for row in res["rows"]:
    print(f"{row['points']:5d} points  {row['median_ms']:8.1f} ms")
