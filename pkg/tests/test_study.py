import math

from boxrefine.data import synthetic_dataset
from boxrefine.geometry import Box7
from boxrefine.synthetic import Proposal, ProposalNoise, SceneConfig
from boxrefine.study import matched_pairs, mean_iou, variant_study
from boxrefine.trainer import TrainConfig


def test_matched_pairs_floor():
    g = Box7(0, 0, 0, 2, 4, 1.5)
    gts = {"a": [(g, "vehicle")]}
    props = [("a", Proposal(g, "vehicle", 0.9)), ("a", Proposal(Box7(0, 3.5, 0, 2, 4, 1.5), "vehicle", 0.5)),
             ("b", Proposal(g, "vehicle", 0.5))]
    pairs = matched_pairs(props, gts)
    assert [i for i, _ in pairs] == [0]
    assert mean_iou([p.box for _, p in props], pairs) == 1.0
    assert math.isnan(mean_iou([], []))


def test_variant_study_shape():
    ds = synthetic_dataset(SceneConfig(), 8, 0, ProposalNoise(), 1.0, 0.25)
    cfg = TrainConfig(epochs=1, points_per_proposal=16, widths=(8, 8, 16))
    seen = []
    res = variant_study(ds, ["plain", "anchor"], cfg, log=lambda v, r: seen.append(v))
    assert seen == ["plain", "anchor"]
    assert set(res) == {"proposals", "plain", "anchor"}
    for r in res.values():
        assert set(r["ap"]) == {"vehicle", "pedestrian"}
        assert all(0 <= v <= 100 for v in r["ap"].values())
    assert res["plain"]["seconds"] > 0 and math.isfinite(res["plain"]["final_loss"])
