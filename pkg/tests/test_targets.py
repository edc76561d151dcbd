import math

import numpy as np
import pytest

from boxrefine.geometry import Box7, iou_3d, rigid_transform_box
from boxrefine.targets import (
    LossConfig, assign_label, classification_loss, cross_entropy_with_grad, decode_box, encode_targets,
    heading_residual, make_target, regression_loss, regression_loss_with_grad, total_loss,
)

CLASSES = ["vehicle", "pedestrian"]


def random_pair(rng):
    p = Box7(*rng.uniform(-40, 40, 2), rng.uniform(-2, 2), *rng.uniform(0.3, 6, 3), rng.uniform(-math.pi, math.pi))
    g = Box7(*(p.center + rng.uniform(-2, 2, 3)), *rng.uniform(0.3, 6, 3), rng.uniform(-math.pi, math.pi))
    return p, g


def test_assign_label_examples():
    gt = Box7(10, 0, 0, 1.9, 4.6, 1.7)
    cfg = LossConfig()
    assert assign_label(gt, [(gt, "vehicle")], cfg, CLASSES) == (1, gt)
    # shift along heading until IoU = 0.4: overlap 4.6 - d, iou = (4.6-d)/(4.6+d)
    d = 4.6 * 0.6 / 1.4
    far = gt.replace(x=10 + d)
    assert iou_3d(far, gt) == pytest.approx(0.4)
    assert assign_label(far, [(gt, "vehicle")], cfg, CLASSES) == (0, None)
    assert assign_label(gt, [], cfg, CLASSES) == (0, None)


def test_assign_label_picks_highest_iou():
    prop = Box7(0, 0, 0, 2, 4, 1.5)
    # (4 - d) / (4 + d) = t  ->  d = 4 (1 - t) / (1 + t)
    a = prop.replace(x=4 * 0.28 / 1.72)
    b = prop.replace(x=-4 * 0.25 / 1.75)
    assert iou_3d(prop, a) == pytest.approx(0.72)
    assert iou_3d(prop, b) == pytest.approx(0.75)
    label, gt = assign_label(prop, [(a, "vehicle"), (b, "vehicle")], LossConfig(), CLASSES)
    assert label == 1 and gt == b


def test_pedestrian_threshold():
    prop = Box7(0, 0, 0, 0.8, 0.9, 1.7)
    gt = prop.replace(x=0.9 * 0.45 / 1.55)  # IoU 0.55
    assert assign_label(prop, [(gt, "pedestrian")], LossConfig(), CLASSES)[0] == 2


def test_encode_examples():
    p = Box7(3, 4, 0.5, 2, 4, 1.5, 0.3)
    np.testing.assert_allclose(encode_targets(p, p), np.zeros(7), atol=1e-15)
    assert encode_targets(p, p.replace(theta=p.theta + math.pi))[6] == pytest.approx(0.0, abs=1e-12)
    assert encode_targets(p, p.replace(theta=p.theta + 2.0))[6] == pytest.approx(2.0 - math.pi)
    assert encode_targets(p, p.replace(w=2 * p.w))[3] == pytest.approx(math.log(2))


def test_center_target_uses_canonical_offsets():
    p = Box7(0, 0, 0, 2, 4, 1, math.pi / 2)
    # one meter along the heading is the canonical +x axis
    t = encode_targets(p, p.replace(y=1.0))
    np.testing.assert_allclose(t[:3], [1 / p.w, 0, 0], atol=1e-12)


def test_heading_residual_range():
    d = np.linspace(-10, 10, 2001)
    r = heading_residual(d)
    assert np.all(r > -math.pi / 2) and np.all(r <= math.pi / 2)
    assert heading_residual(-math.pi / 2) == pytest.approx(math.pi / 2)


def test_decode_examples():
    p = Box7(1, 2, 3, 2, 4, 1.5, 0.8)
    assert decode_box(p, np.zeros(7)) == p
    assert decode_box(p, [0, 0, 0, math.log(2), 0, 0, 0]).w == pytest.approx(4)
    with pytest.raises(ValueError):
        decode_box(p, [0, 0, 0, 800, 0, 0, 0])
    with pytest.raises(ValueError):
        decode_box(p, [np.nan] * 7)


def test_roundtrip_and_invariance():
    rng = np.random.default_rng(0)
    for _ in range(500):
        p, g = random_pair(rng)
        t = encode_targets(p, g)
        d = decode_box(p, t)
        np.testing.assert_allclose(d.center, g.center, atol=1e-9)
        np.testing.assert_allclose(d.dims, g.dims, rtol=1e-12)
        err = abs(math.remainder(d.theta - g.theta, math.pi))
        assert err < 1e-9
        yaw, shift = rng.uniform(-3, 3), rng.uniform(-50, 50, 3)
        moved = encode_targets(rigid_transform_box(p, yaw, shift), rigid_transform_box(g, yaw, shift))
        np.testing.assert_allclose(moved, t, atol=1e-9)


def test_anchor_dims_roundtrip():
    rng = np.random.default_rng(1)
    dims = np.array([1.9, 4.6, 1.7])
    for _ in range(50):
        p, g = random_pair(rng)
        d = decode_box(p, encode_targets(p, g, dims), dims)
        np.testing.assert_allclose(d.center, g.center, atol=1e-9)
        np.testing.assert_allclose(d.dims, g.dims, rtol=1e-12)


def test_make_target():
    p = Box7(0, 0, 0, 2, 4, 1)
    assert not make_target(p, 0, None).valid_regression
    t = make_target(p, 1, p.replace(x=0.2))
    assert t.valid_regression and t.class_label == 1
    assert t.regression.shape == (7,)


def test_classification_loss():
    assert classification_loss(np.zeros((1, 4)), [2]) == pytest.approx(math.log(4), abs=1e-12)
    for margin in (5, 20, 60):
        logits = np.array([[0.0, margin, 0.0]])
        assert classification_loss(logits, [1]) < 3 * math.exp(-margin)
    x = np.array([[0.3, -1.2, 2.0]])
    assert classification_loss(np.repeat(x, 2, 0), [0, 0]) == pytest.approx(classification_loss(x, [0]))
    with pytest.raises(ValueError):
        classification_loss(x, [3])


def test_cross_entropy_gradient():
    rng = np.random.default_rng(2)
    logits, labels = rng.normal(size=(5, 4)), rng.integers(0, 4, 5)
    _, g = cross_entropy_with_grad(logits, labels)
    eps = 1e-6
    for i in range(5):
        for j in range(4):
            up, dn = logits.copy(), logits.copy()
            up[i, j] += eps
            dn[i, j] -= eps
            fd = (cross_entropy_with_grad(up, labels)[0] - cross_entropy_with_grad(dn, labels)[0]) / (2 * eps)
            assert g[i, j] == pytest.approx(fd, abs=1e-8)


def test_regression_loss():
    t = np.random.default_rng(3).normal(size=(4, 7))
    assert regression_loss(t, t) == 0
    p = np.zeros(7)
    q = p.copy()
    q[2] = 0.5
    assert regression_loss(q, p) == pytest.approx(0.125)
    q[2] = 3.0
    assert regression_loss(q, p) == pytest.approx(2.5)
    loss, grad = regression_loss_with_grad(t + 1, t, np.zeros(4, bool))
    assert loss == 0 and not grad.any()
    # mean over positives only
    pos = np.array([True, False, True, False])
    off = t.copy()
    off[:, 0] += 0.5
    assert regression_loss(off, t, pos) == pytest.approx(0.125)


def test_total_loss():
    assert total_loss(1.0, 0.1) == pytest.approx(3.0, abs=1e-12)
    assert total_loss(0.7, 0.0) == 0.7
    assert total_loss(0.7, 5.0, LossConfig(lam=0)) == 0.7
    with pytest.raises(ValueError):
        LossConfig(lam=-1)
    with pytest.raises(ValueError):
        LossConfig(beta=0)
