"""Oriented 3D box algebra.

Boxes are gravity aligned and described by seven numbers
``(x, y, z, w, l, h, theta)``: the center, the width along the box's lateral
(y) axis, the length along the heading (x) axis, the height, and the yaw about
+z. Point clouds are plain ``(N, 3 + extra)`` float arrays; extra channels are
carried through transforms untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

AREA_EPS = 1e-12


def wrap_heading(theta):
    """Wrap an angle (or array of angles) into (-pi, pi]."""
    arr = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"heading must be finite, got {theta!r}")
    out = np.pi - np.mod(np.pi - arr, 2.0 * np.pi)
    if np.ndim(theta) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Box7:
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.w, self.l, self.h, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box fields must be finite: {vals}")
        if self.w <= 0 or self.l <= 0 or self.h <= 0:
            raise ValueError(f"box dimensions must be positive: w={self.w}, l={self.l}, h={self.h}")
        for name in ("x", "y", "z", "w", "l", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "theta", wrap_heading(float(self.theta)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def dims(self) -> np.ndarray:
        """(w, l, h)."""
        return np.array([self.w, self.l, self.h])

    @property
    def volume(self) -> float:
        return self.w * self.l * self.h

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h, self.theta])

    @classmethod
    def from_array(cls, arr) -> "Box7":
        a = np.asarray(arr, dtype=np.float64).ravel()
        if a.shape != (7,):
            raise ValueError(f"expected 7 box fields, got shape {a.shape}")
        return cls(*(float(v) for v in a))

    def replace(self, **kw) -> "Box7":
        fields = dict(x=self.x, y=self.y, z=self.z, w=self.w, l=self.l, h=self.h, theta=self.theta)
        fields.update(kw)
        return Box7(**fields)


def _rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def to_canonical(points, box: Box7) -> np.ndarray:
    """Express points in the box frame: origin at center, +x along heading, +z up."""
    pts = np.array(points, dtype=np.float64, copy=True, ndmin=2)
    if pts.size == 0:
        return pts.reshape(0, max(pts.shape[-1], 3))
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx = pts[:, 0] - box.x
    dy = pts[:, 1] - box.y
    pts[:, 0] = c * dx + s * dy
    pts[:, 1] = -s * dx + c * dy
    pts[:, 2] = pts[:, 2] - box.z
    return pts


def from_canonical(points, box: Box7) -> np.ndarray:
    """Inverse of :func:`to_canonical`."""
    pts = np.array(points, dtype=np.float64, copy=True, ndmin=2)
    if pts.size == 0:
        return pts.reshape(0, max(pts.shape[-1], 3))
    c, s = math.cos(box.theta), math.sin(box.theta)
    px, py = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * px - s * py + box.x
    pts[:, 1] = s * px + c * py + box.y
    pts[:, 2] = pts[:, 2] + box.z
    return pts


def enlarge(box: Box7, dw: float, dl: float) -> Box7:
    """Grow width and length by the given totals; height is left alone."""
    if dw < 0 or dl < 0:
        raise ValueError(f"enlargement must be non-negative, got dw={dw}, dl={dl}")
    return box.replace(w=box.w + dw, l=box.l + dl)


def points_in_box(points, box: Box7) -> np.ndarray:
    """Boolean mask of points inside the closed box."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if len(pts) == 0:
        return np.zeros(0, dtype=bool)
    local = to_canonical(pts[:, :3], box)
    return (
        (np.abs(local[:, 0]) <= box.l / 2)
        & (np.abs(local[:, 1]) <= box.w / 2)
        & (np.abs(local[:, 2]) <= box.h / 2)
    )


def contains(box: Box7, point) -> bool:
    return bool(points_in_box(np.asarray(point, dtype=np.float64)[:3], box)[0])


def bev_corners(box: Box7) -> np.ndarray:
    """Counter-clockwise (4, 2) footprint corners."""
    hl, hw = box.l / 2, box.w / 2
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return local @ _rot2(box.theta).T + np.array([box.x, box.y])


def corners_3d(box: Box7) -> np.ndarray:
    """(8, 3) corners; bottom ring first, then top ring."""
    ring = bev_corners(box)
    zb, zt = box.z - box.h / 2, box.z + box.h / 2
    return np.vstack([np.c_[ring, np.full(4, zb)], np.c_[ring, np.full(4, zt)]])


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW ``clipper``."""
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp = output
        output = []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def bev_intersection_area(a: Box7, b: Box7) -> float:
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.w, a.l)
    rb = 0.5 * math.hypot(b.w, b.l)
    if math.hypot(a.x - b.x, a.y - b.y) > ra + rb:
        return 0.0
    area = polygon_area(clip_polygon(bev_corners(a), bev_corners(b)))
    return area if area > AREA_EPS else 0.0


def _iou_from_overlap(overlap: float, size_a: float, size_b: float) -> float:
    if overlap <= 0.0:
        return 0.0
    return min(1.0, max(0.0, overlap / (size_a + size_b - overlap)))


def _key(box: Box7):
    return (box.x, box.y, box.z, box.w, box.l, box.h, box.theta)


def bev_iou(a: Box7, b: Box7) -> float:
    """Rotated-rectangle IoU in the ground plane."""
    if a == b:
        return 1.0
    # canonical argument order so rounding cannot break symmetry
    if _key(a) > _key(b):
        a, b = b, a
    return _iou_from_overlap(bev_intersection_area(a, b), a.w * a.l, b.w * b.l)


def vertical_overlap(a: Box7, b: Box7) -> float:
    lo = max(a.z - a.h / 2, b.z - b.h / 2)
    hi = min(a.z + a.h / 2, b.z + b.h / 2)
    return max(0.0, hi - lo)


def iou_3d(a: Box7, b: Box7) -> float:
    """Volume IoU of two gravity-aligned boxes."""
    if a == b:
        return 1.0
    dz = vertical_overlap(a, b)
    if dz <= 0.0:
        return 0.0
    if _key(a) > _key(b):
        a, b = b, a
    return _iou_from_overlap(bev_intersection_area(a, b) * dz, a.volume, b.volume)


def iou_matrix(boxes_a, boxes_b, mode: str = "3d") -> np.ndarray:
    fn = iou_3d if mode == "3d" else bev_iou
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = fn(a, b)
    return out


def rigid_transform_box(box: Box7, yaw: float, translation) -> Box7:
    """Apply a yaw rotation about the origin followed by a translation."""
    tx, ty, tz = translation
    cx, cy = _rot2(yaw) @ np.array([box.x, box.y])
    return box.replace(x=cx + tx, y=cy + ty, z=box.z + tz, theta=box.theta + yaw)


def rigid_transform_points(points, yaw: float, translation) -> np.ndarray:
    pts = np.array(points, dtype=np.float64, copy=True, ndmin=2)
    pts[:, :2] = pts[:, :2] @ _rot2(yaw).T
    pts[:, :3] += np.asarray(translation, dtype=np.float64)
    return pts
