"""Point pooling per proposal and the size-aware per-point encodings.

Every encoder takes a sampled :class:`ProposalCrop` (points already in the
proposal's canonical frame) and returns a ``(num_points, channels)`` array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .geometry import Box7, enlarge, points_in_box, to_canonical

VARIANTS = ("plain", "size_normalized", "anchor", "boundary_offset", "virtual_points")

DEFAULT_ENLARGE = 1.0
DEFAULT_POINTS = 512
DEFAULT_VIRTUAL_GRID = 4
VOXEL_GRID = 14


@dataclass
class ProposalCrop:
    proposal: Box7
    points: np.ndarray
    raw_count: int
    enlarge_wl: float = DEFAULT_ENLARGE
    empty: bool = False
    class_hint: Optional[str] = None

    def __len__(self):
        return len(self.points)


@dataclass
class AnchorTable:
    """Per-class reference sizes ``(w, l, h)`` in meters."""

    sizes: Dict[str, tuple]

    def __post_init__(self):
        for name, dims in self.sizes.items():
            if len(dims) != 3 or min(dims) <= 0:
                raise ValueError(f"anchor for {name!r} must be three positive sizes, got {dims}")
        self.sizes = {k: tuple(float(v) for v in dims) for k, dims in self.sizes.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in self.sizes:
            raise KeyError(f"no anchor for class {name!r}; known: {sorted(self.sizes)}")
        return np.array(self.sizes[name])

    def __contains__(self, name):
        return name in self.sizes

    @classmethod
    def from_boxes(cls, boxes: Iterable[Box7], classes: Iterable[str]) -> "AnchorTable":
        """Mean ground-truth size per class."""
        acc: Dict[str, list] = {}
        for box, cls_name in zip(boxes, classes):
            acc.setdefault(cls_name, []).append(box.dims)
        if not acc:
            raise ValueError("cannot build an anchor table from zero boxes")
        return cls({k: tuple(np.mean(v, axis=0)) for k, v in acc.items()})

    def to_dict(self):
        return {k: list(v) for k, v in self.sizes.items()}


@dataclass
class EncodedBatch:
    variant: str
    features: np.ndarray  # (B, M, C)
    proposals: List[Box7]
    empty: np.ndarray  # (B,) bool
    target_dims: np.ndarray  # (B, 3) denominators for regression targets, (w, l, h)

    @property
    def channels(self) -> int:
        return self.features.shape[-1]

    def __len__(self):
        return self.features.shape[0]


@dataclass
class VoxelGrid:
    """Voxelized crop: point-to-voxel indices plus a max-pooled feature grid."""

    indices: np.ndarray  # (n, 3) int
    grid: np.ndarray  # (G, G, G, F)
    counts: np.ndarray  # (G, G, G) int
    extent: np.ndarray  # (3,) enlarged extent along canonical x, y, z
    point_lists: Dict[tuple, np.ndarray] = field(default_factory=dict)


def crop_points(cloud, proposal: Box7, enlarge_wl: float = DEFAULT_ENLARGE, class_hint=None) -> ProposalCrop:
    """Points inside the enlarged proposal, in the original proposal's frame."""
    if enlarge_wl < 0:
        raise ValueError(f"enlarge_wl must be >= 0, got {enlarge_wl}")
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2:
        cloud = cloud.reshape(-1, 3)
    big = enlarge(proposal, enlarge_wl, enlarge_wl)
    mask = points_in_box(cloud[:, :3], big) if len(cloud) else np.zeros(0, dtype=bool)
    local = to_canonical(cloud[mask, :3], proposal) if mask.any() else np.zeros((0, 3))
    return ProposalCrop(proposal, local, int(mask.sum()), enlarge_wl, False, class_hint)


def sample_fixed(crop: ProposalCrop, n: int, rng: np.random.Generator) -> ProposalCrop:
    """Resample a crop to exactly ``n`` points.

    More than ``n`` points: a random subset without replacement. Fewer: every
    point is kept once and the rest are repeats drawn uniformly. No points:
    ``n`` zero sentinels and ``empty=True``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    pts = crop.points
    k = len(pts)
    if k == 0:
        out = np.zeros((n, 3))
        empty = True
    elif k > n:
        out = pts[np.sort(rng.choice(k, size=n, replace=False))]
        empty = False
    else:
        extra = rng.integers(0, k, size=n - k)
        out = np.concatenate([pts, pts[extra]], axis=0)
        empty = False
    return ProposalCrop(crop.proposal, out, crop.raw_count, crop.enlarge_wl, empty, crop.class_hint)


def encode_plain(crop: ProposalCrop) -> np.ndarray:
    return np.array(crop.points[:, :3], dtype=np.float64)


def encode_size_normalized(crop: ProposalCrop) -> np.ndarray:
    p = crop.proposal
    return crop.points[:, :3] / np.array([p.l, p.w, p.h])


def encode_anchor(crop: ProposalCrop, class_hint: str, anchors: AnchorTable) -> np.ndarray:
    dims = anchors[class_hint]
    xyz = crop.points[:, :3]
    return np.concatenate([xyz, np.broadcast_to(dims, (len(xyz), 3))], axis=1)


def encode_boundary_offset(crop: ProposalCrop) -> np.ndarray:
    """xyz plus signed offsets to the six faces of the un-enlarged proposal."""
    p = crop.proposal
    x, y, z = crop.points[:, 0], crop.points[:, 1], crop.points[:, 2]
    hl, hw, hh = p.l / 2, p.w / 2, p.h / 2
    return np.stack([x, y, z, x - hl, x + hl, y - hw, y + hw, z - hh, z + hh], axis=1)


def virtual_lattice(proposal: Box7, grid: int = DEFAULT_VIRTUAL_GRID) -> np.ndarray:
    """Cell centers of a ``grid``^3 lattice over the proposal, canonical frame."""
    if grid < 2:
        raise ValueError(f"virtual grid must be >= 2, got {grid}")
    frac = (np.arange(grid) + 0.5) / grid - 0.5
    gx, gy, gz = np.meshgrid(frac * proposal.l, frac * proposal.w, frac * proposal.h, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def encode_virtual_points(crop: ProposalCrop, grid: int = DEFAULT_VIRTUAL_GRID) -> np.ndarray:
    # empty-crop sentinels are not real points
    flag = 0.0 if crop.empty else 1.0
    real = np.concatenate([crop.points[:, :3], np.full((len(crop.points), 1), flag)], axis=1)
    virt = virtual_lattice(crop.proposal, grid)
    virt = np.concatenate([virt, np.zeros((len(virt), 1))], axis=1)
    return np.concatenate([real, virt], axis=0)


def voxelize(crop: ProposalCrop, grid: int = VOXEL_GRID, point_features=None) -> VoxelGrid:
    """Assign crop points to a ``grid``^3 lattice over the enlarged proposal.

    ``point_features`` (n, F) are max-pooled per voxel; defaults to the point
    coordinates. Empty voxels, and every voxel of an empty crop, stay zero.
    """
    p = crop.proposal
    extent = np.array([p.l + crop.enlarge_wl, p.w + crop.enlarge_wl, p.h])
    pts = crop.points[:, :3]
    feats = pts if point_features is None else np.asarray(point_features, dtype=np.float64)
    idx = np.floor((pts + extent / 2) / extent * grid).astype(np.int64)
    idx = np.clip(idx, 0, grid - 1)
    out = np.zeros((grid, grid, grid, feats.shape[1]))
    counts = np.zeros((grid, grid, grid), dtype=np.int64)
    lists: Dict[tuple, np.ndarray] = {}
    if not crop.empty and len(pts):
        flat = np.ravel_multi_index(idx.T, (grid,) * 3)
        order = np.argsort(flat, kind="stable")
        uniq, starts = np.unique(flat[order], return_index=True)
        bounds = np.append(starts, len(order))
        for u, s, e in zip(uniq, bounds[:-1], bounds[1:]):
            members = order[s:e]
            key = np.unravel_index(u, (grid,) * 3)
            out[key] = feats[members].max(axis=0)
            counts[key] = len(members)
            lists[tuple(int(k) for k in key)] = members
    return VoxelGrid(idx, out, counts, extent, lists)


def input_channels(variant: str) -> int:
    return {"plain": 3, "size_normalized": 3, "anchor": 6, "boundary_offset": 9, "virtual_points": 4}[
        check_variant(variant)
    ]


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ValueError(f"unknown encoding variant {variant!r}; expected one of {VARIANTS}")
    return variant


def encode_crop(crop: ProposalCrop, variant: str, anchors: Optional[AnchorTable] = None,
                grid: int = DEFAULT_VIRTUAL_GRID) -> np.ndarray:
    check_variant(variant)
    if variant == "plain":
        return encode_plain(crop)
    if variant == "size_normalized":
        return encode_size_normalized(crop)
    if variant == "anchor":
        if anchors is None:
            raise ValueError("anchor variant needs an AnchorTable")
        return encode_anchor(crop, crop.class_hint, anchors)
    if variant == "boundary_offset":
        return encode_boundary_offset(crop)
    return encode_virtual_points(crop, grid)


def encode_batch(crops: Sequence[ProposalCrop], variant: str, anchors: Optional[AnchorTable] = None,
                 grid: int = DEFAULT_VIRTUAL_GRID, dtype=np.float64) -> EncodedBatch:
    """Stack sampled crops (all the same size) into one batch."""
    if not crops:
        raise ValueError("cannot encode an empty list of crops")
    feats = np.stack([encode_crop(c, variant, anchors, grid) for c in crops]).astype(dtype, copy=False)
    if variant == "anchor":
        dims = np.stack([anchors[c.class_hint] for c in crops])
    else:
        dims = np.stack([c.proposal.dims for c in crops])
    return EncodedBatch(
        variant=variant,
        features=feats,
        proposals=[c.proposal for c in crops],
        empty=np.array([c.empty for c in crops], dtype=bool),
        target_dims=dims,
    )
