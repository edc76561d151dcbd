import numpy as np
import pytest

from boxrefine.geometry import Box7, bev_iou, enlarge, iou_3d, points_in_box
from boxrefine.synthetic import (
    ClassPreset, ProposalNoise, SceneConfig, ambiguity_study, generate_scene, generate_scenes, jitter_box,
    make_proposals,
)


def test_scene_layout():
    cfg = SceneConfig()
    for s in generate_scenes(cfg, 20, 0):
        boxes = [b for b, _ in s.gts]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert iou_3d(boxes[i], boxes[j]) == 0.0
        for b in boxes:
            r = np.hypot(b.x, b.y)
            assert cfg.range_min <= r <= cfg.range_max
            assert b.z == pytest.approx(b.h / 2)
        assert np.all(np.isfinite(s.cloud))


def test_object_points_lie_on_boxes():
    cfg = SceneConfig(ground_points=0)
    s = generate_scene(cfg, np.random.default_rng(1))
    inside = np.zeros(len(s.cloud), dtype=bool)
    for b, _ in s.gts:
        inside |= points_in_box(s.cloud, b)
    assert len(s.cloud) > 0 and inside.all()


def test_density_falls_with_range():
    near = SceneConfig(classes=[ClassPreset("vehicle", (1, 1), (1.9, 4.6, 1.7), 0.0)], range_min=8,
                       range_max=9, ground_points=0, occlusion_prob=0)
    far = SceneConfig(classes=near.classes, range_min=50, range_max=51, ground_points=0, occlusion_prob=0)
    n_near = np.mean([len(s.cloud) for s in generate_scenes(near, 20, 0)])
    n_far = np.mean([len(s.cloud) for s in generate_scenes(far, 20, 0)])
    assert n_near > 10 * n_far


def test_generation_is_seeded():
    a = generate_scenes(SceneConfig(), 3, 7)
    b = generate_scenes(SceneConfig(), 3, 7)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.cloud, y.cloud)
        assert x.gts == y.gts


def test_jitter():
    b = Box7(1, 2, 0.8, 1.9, 4.6, 1.7, 0.4)
    rng = np.random.default_rng(0)
    assert jitter_box(b, rng, 0, 0, 0) == b
    for _ in range(100):
        j = jitter_box(b, rng, 0.5, 0.05, 0.17)
        assert np.max(np.abs(j.center - b.center)) <= 0.5
        assert np.all(np.abs(np.log(j.dims / b.dims)) <= 0.05 + 1e-12)
    x = jitter_box(b, np.random.default_rng(3), 0.5, 0.05, 0.17)
    assert x == jitter_box(b, np.random.default_rng(3), 0.5, 0.05, 0.17)
    with pytest.raises(ValueError):
        jitter_box(b, rng, -1, 0, 0)


def test_proposals():
    cfg = SceneConfig()
    s = generate_scene(cfg, np.random.default_rng(2))
    exact = make_proposals(s, np.random.default_rng(0), ProposalNoise(0, 0, 0), 0.0, cfg)
    assert [(p.box, p.cls) for p in exact] == list(s.gts)
    noisy = make_proposals(s, np.random.default_rng(0), ProposalNoise(), 3.0, cfg)
    assert len(noisy) >= len(s.gts)
    for p in noisy[len(s.gts):]:
        assert all(iou_3d(p.box, g) < 0.7 for g, _ in s.gts)
        assert 0 <= p.score <= 0.8


def test_mean_iou_drops_with_noise():
    scenes = generate_scenes(SceneConfig(ground_points=0, surface_density=1), 60, 0)
    means = []
    for scale in (0.1, 0.3, 0.6):
        rng = np.random.default_rng(0)
        ious = [iou_3d(p.box, g) for s in scenes
                for p, (g, _) in zip(make_proposals(s, rng, ProposalNoise(scale, scale / 2, scale / 2), 0.0), s.gts)]
        means.append(np.mean(ious))
    assert means[0] > means[1] > means[2]


def test_ambiguity_extremes():
    box = Box7(10, 0, 0.85, 1.9, 4.6, 1.7)
    on_box = np.random.default_rng(0).uniform(-0.5, 0.5, (200, 3)) * box.dims[[1, 0, 2]] + box.center
    stats = ambiguity_study([on_box], [[box]])
    assert stats["frac_same_count"] == 1.0 and stats["num_proposals"] == 1
    xs, ys = np.meshgrid(np.arange(0, 20, 0.1), np.arange(-5, 5, 0.1))
    ground = np.stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)], 1)
    stats = ambiguity_study([ground], [[box.replace(z=0.0)]])
    assert stats["frac_same_count"] == 0.0 and stats["frac_lt_10_new"] == 0.0
    assert ambiguity_study([], [])["num_proposals"] == 0


def test_ambiguity_phenomenon_on_default_scenes():
    cfg = SceneConfig()
    scenes = generate_scenes(cfg, 40, 0)
    props = [[p.box for p in make_proposals(s, np.random.default_rng(i), ProposalNoise(), 1.0, cfg)]
             for i, s in enumerate(scenes)]
    stats = ambiguity_study([s.cloud for s in scenes], props)
    assert stats["frac_same_count"] >= 0.10


def test_scene_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(range_min=10, range_max=5)
    with pytest.raises(ValueError):
        SceneConfig(classes=[ClassPreset("a", (1, 1), (1, 1, 1)), ClassPreset("a", (1, 1), (1, 1, 1))])
