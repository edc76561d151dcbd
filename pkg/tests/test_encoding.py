import numpy as np
import pytest

from boxrefine.encoding import (
    AnchorTable, ProposalCrop, VARIANTS, crop_points, encode_anchor, encode_batch, encode_boundary_offset,
    encode_crop, encode_plain, encode_size_normalized, encode_virtual_points, input_channels, sample_fixed,
    virtual_lattice, voxelize,
)
from boxrefine.geometry import Box7, corners_3d, from_canonical, to_canonical


def crop_of(points, box=Box7(0, 0, 0, 2, 4, 1), empty=False):
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return ProposalCrop(box, pts, len(pts), 1.0, empty)


def test_crop_examples():
    box = Box7(5, -3, 1, 2, 4, 1.5, 0.6)
    c = crop_points(np.array([box.center]), box)
    assert c.raw_count == 1
    np.testing.assert_allclose(c.points, [[0, 0, 0]], atol=1e-12)
    # 0.4 m past the +w face, inside the +1 m enlargement (0.5 m per side)
    outside = from_canonical([[0, box.w / 2 + 0.4, 0]], box)
    assert crop_points(outside, box).raw_count == 1
    assert crop_points(outside, box, enlarge_wl=0.0).raw_count == 0
    # height is not enlarged
    above = from_canonical([[0, 0, box.h / 2 + 0.1]], box)
    assert crop_points(above, box).raw_count == 0
    assert crop_points(np.zeros((0, 3)), box).raw_count == 0


def test_sample_fixed_cases():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(512, 3))
    same = sample_fixed(crop_of(pts), 512, rng)
    np.testing.assert_array_equal(same.points, pts)

    few = sample_fixed(crop_of(pts[:3]), 512, rng)
    assert few.points.shape == (512, 3)
    assert {tuple(p) for p in few.points} == {tuple(p) for p in pts[:3]}

    big = rng.normal(size=(1000, 3))
    sub = sample_fixed(crop_of(big), 512, rng)
    assert len({tuple(p) for p in sub.points}) == 512
    assert {tuple(p) for p in sub.points} <= {tuple(p) for p in big}

    empty = sample_fixed(crop_of(np.zeros((0, 3))), 16, rng)
    assert empty.empty and empty.points.shape == (16, 3) and not empty.points.any()


def test_plain_and_ambiguity_negative_control():
    pts = np.array([[1, 2, 3], [0, 0, 0]], float)
    np.testing.assert_array_equal(encode_plain(crop_of(pts)), pts)
    small = crop_of(pts, Box7(0, 0, 0, 2, 4, 1))
    large = crop_of(pts, Box7(0, 0, 0, 3, 5, 1))
    np.testing.assert_array_equal(encode_plain(small), encode_plain(large))
    assert not np.array_equal(encode_boundary_offset(small), encode_boundary_offset(large))


def test_size_normalized():
    box = Box7(0, 0, 0, 2, 4, 1)
    np.testing.assert_allclose(encode_size_normalized(crop_of([[2, 0, 0], [0, 0, 0], [1, 0.5, 0.25]], box)),
                               [[0.5, 0, 0], [0, 0, 0], [0.25, 0.25, 0.25]])
    rb = Box7(3, 1, 0.5, 1.7, 4.3, 1.5, 0.9)
    corners = to_canonical(corners_3d(rb), rb)
    np.testing.assert_allclose(np.abs(encode_size_normalized(crop_of(corners, rb))), 0.5, atol=1e-12)


def test_anchor():
    table = AnchorTable({"vehicle": (1.9, 4.6, 1.7), "pedestrian": (0.8, 0.9, 1.7)})
    f = encode_anchor(crop_of([[1, 1, 0]]), "vehicle", table)
    np.testing.assert_allclose(f, [[1, 1, 0, 1.9, 4.6, 1.7]])
    g = encode_anchor(crop_of([[1, 1, 0]]), "pedestrian", table)
    np.testing.assert_array_equal(g[:, :3], f[:, :3])
    assert not np.array_equal(g[:, 3:], f[:, 3:])
    sentinel = sample_fixed(crop_of(np.zeros((0, 3))), 4, np.random.default_rng(0))
    np.testing.assert_allclose(encode_anchor(sentinel, "vehicle", table), [[0, 0, 0, 1.9, 4.6, 1.7]] * 4)
    with pytest.raises(KeyError):
        encode_anchor(crop_of([[0, 0, 0]]), "cyclist", table)


def test_anchor_table_from_boxes():
    t = AnchorTable.from_boxes([Box7(0, 0, 0, 1, 2, 3), Box7(0, 0, 0, 3, 4, 5)], ["a", "a"])
    np.testing.assert_allclose(t["a"], [2, 3, 4])


def test_boundary_offset():
    box = Box7(0, 0, 0, 2, 4, 1)
    np.testing.assert_allclose(encode_boundary_offset(crop_of([[0, 0, 0]], box)),
                               [[0, 0, 0, -2, 2, -1, 1, -0.5, 0.5]])
    f = encode_boundary_offset(crop_of([[2, 0, 0]], box))
    np.testing.assert_allclose(f[0, 3:5], [0, 4])


def test_virtual_points():
    box = Box7(0, 0, 0, 2, 2, 2)
    lat = virtual_lattice(box, 2)
    assert {tuple(p) for p in lat} == {(sx, sy, sz) for sx in (-0.5, 0.5) for sy in (-0.5, 0.5) for sz in (-0.5, 0.5)}
    f = encode_virtual_points(crop_of([[1, 0, 0]], box), grid=2)
    assert f.shape == (9, 4)
    np.testing.assert_allclose(f[0], [1, 0, 0, 1])
    assert not f[1:, 3].any()
    sentinel = sample_fixed(crop_of(np.zeros((0, 3)), box), 4, np.random.default_rng(0))
    assert not encode_virtual_points(sentinel, 2)[:, 3].any()


def test_voxelize():
    box = Box7(0, 0, 0, 2, 4, 1)
    v = voxelize(crop_of([[0, 0, 0]], box))
    np.testing.assert_array_equal(v.indices, [[7, 7, 7]])
    assert v.counts.sum() == 1
    edge = voxelize(crop_of([[2.5, 1.5, 0.5], [-2.5, -1.5, -0.5]], box))
    np.testing.assert_array_equal(edge.indices, [[13, 13, 13], [0, 0, 0]])
    empty = voxelize(sample_fixed(crop_of(np.zeros((0, 3)), box), 8, np.random.default_rng(0)))
    assert not empty.grid.any() and not empty.counts.any()


def test_batch_shapes_all_variants():
    rng = np.random.default_rng(1)
    table = AnchorTable({"vehicle": (1.9, 4.6, 1.7)})
    crops = []
    for _ in range(3):
        c = crop_of(rng.normal(size=(20, 3)))
        c.class_hint = "vehicle"
        crops.append(sample_fixed(c, 32, rng))
    for v in VARIANTS:
        b = encode_batch(crops, v, table)
        extra = 4 ** 3 if v == "virtual_points" else 0
        assert b.features.shape == (3, 32 + extra, input_channels(v))
    with pytest.raises(ValueError):
        encode_crop(crops[0], "voxel")
    with pytest.raises(ValueError):
        encode_batch(crops, "anchor", None)
