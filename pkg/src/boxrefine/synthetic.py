"""Desk-scale LiDAR-like scenes.

Objects are boxes standing on a ground plane at z = 0. Each object receives
points on the faces turned toward the sensor, with a budget falling off as
1/r^2; ground returns are denser near the sensor for the same reason.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Box7, bev_iou, enlarge, iou_3d, points_in_box

log = logging.getLogger(__name__)


@dataclass
class ClassPreset:
    name: str
    count: Tuple[int, int]  # inclusive range per scene
    size_mean: Tuple[float, float, float]  # (w, l, h)
    size_sigma: float = 0.08  # relative log-normal spread


@dataclass
class SceneConfig:
    classes: List[ClassPreset] = field(default_factory=lambda: [
        ClassPreset("vehicle", (3, 7), (1.9, 4.6, 1.7)),
        ClassPreset("pedestrian", (2, 5), (0.8, 0.9, 1.7)),
    ])
    range_min: float = 5.0
    range_max: float = 65.0
    sensor_origin: Tuple[float, float, float] = (0.0, 0.0, 2.0)
    surface_density: float = 40.0  # points per m^2 of facing area at the reference range
    reference_range: float = 10.0
    ground_points: int = 4000
    ground_noise: float = 0.02
    occlusion_prob: float = 0.2
    placement_margin: float = 0.5
    max_retries: int = 50

    def __post_init__(self):
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError(f"class names must be distinct, got {names}")
        for c in self.classes:
            if min(c.size_mean) <= 0 or c.size_sigma < 0 or c.count[0] < 0 or c.count[1] < c.count[0]:
                raise ValueError(f"invalid class preset {c}")
        if not 0 < self.range_min < self.range_max:
            raise ValueError("need 0 < range_min < range_max")

    @property
    def class_names(self) -> List[str]:
        return [c.name for c in self.classes]

    def preset(self, name: str) -> ClassPreset:
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(name)


@dataclass
class Scene:
    frame_id: str
    cloud: np.ndarray  # (N, 3)
    gts: List[Tuple[Box7, str]]


@dataclass
class Proposal:
    box: Box7
    cls: str
    score: float


@dataclass
class ProposalNoise:
    center: float = 0.3  # uniform, meters, per axis
    size: float = 0.15  # uniform, log-ratio, per dimension
    heading: float = 0.1  # uniform, radians

    def __post_init__(self):
        if min(self.center, self.size, self.heading) < 0:
            raise ValueError("noise magnitudes must be non-negative")


def jitter_box(box: Box7, rng: np.random.Generator, center: float, size: float, heading: float) -> Box7:
    """Uniform noise on center, log-size and heading."""
    if min(center, size, heading) < 0:
        raise ValueError("jitter magnitudes must be non-negative")
    dc = rng.uniform(-center, center, 3) if center else np.zeros(3)
    ds = rng.uniform(-size, size, 3) if size else np.zeros(3)
    dt = rng.uniform(-heading, heading) if heading else 0.0
    dims = box.dims * np.exp(ds)
    return Box7(box.x + dc[0], box.y + dc[1], box.z + dc[2], dims[0], dims[1], dims[2], box.theta + dt)


def _face_samples(box: Box7, sensor: np.ndarray, n_total_scale: float, rng: np.random.Generator):
    """Points on the faces whose outward normal points toward the sensor."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    ex = np.array([c, s, 0.0])
    ey = np.array([-s, c, 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    center = box.center
    half = {"x": box.l / 2, "y": box.w / 2, "z": box.h / 2}
    faces = []
    for axis, normal, u, v, du, dv in (
        ("x", ex, ey, ez, box.w, box.h),
        ("y", ey, ex, ez, box.l, box.h),
        ("z", ez, ex, ey, box.l, box.w),
    ):
        for sign in (1.0, -1.0):
            if axis == "z" and sign < 0:
                continue  # the underside faces the ground
            fc = center + sign * half[axis] * normal
            to_sensor = sensor - fc
            dist = np.linalg.norm(to_sensor)
            cosang = float(np.dot(sign * normal, to_sensor) / dist)
            if cosang <= 0:
                continue
            faces.append((fc, u, v, du, dv, du * dv * cosang, sign * normal, axis))
    if not faces:
        return np.zeros((0, 3))
    chunks = []
    for fc, u, v, du, dv, weight, normal, axis in faces:
        n = rng.poisson(n_total_scale * weight)
        if n == 0:
            continue
        a = rng.uniform(-du / 2, du / 2, n)
        b = rng.uniform(-dv / 2, dv / 2, n)
        pts = fc + a[:, None] * u + b[:, None] * v
        # range noise along the inward normal; the 1 um floor keeps points
        # strictly inside the closed box under rounding
        depth = np.clip(rng.normal(0, 0.01, n), -0.004, -1e-6) if axis != "z" else np.full(n, -1e-6)
        pts += depth[:, None] * normal
        chunks.append(pts)
    return np.concatenate(chunks) if chunks else np.zeros((0, 3))


def _place_box(preset: ClassPreset, config: SceneConfig, rng: np.random.Generator) -> Box7:
    r = rng.uniform(config.range_min, config.range_max)
    phi = rng.uniform(-math.pi, math.pi)
    dims = np.array(preset.size_mean) * np.exp(rng.normal(0.0, preset.size_sigma, 3))
    return Box7(r * math.cos(phi), r * math.sin(phi), dims[2] / 2, dims[0], dims[1], dims[2],
                rng.uniform(-math.pi, math.pi))


def generate_scene(config: SceneConfig, rng: np.random.Generator, frame_id: str = "0") -> Scene:
    sensor = np.asarray(config.sensor_origin, dtype=np.float64)
    gts: List[Tuple[Box7, str]] = []
    margin = config.placement_margin
    for preset in config.classes:
        want = int(rng.integers(preset.count[0], preset.count[1] + 1))
        for _ in range(want):
            for _attempt in range(config.max_retries):
                box = _place_box(preset, config, rng)
                grown = enlarge(box, margin, margin)
                if all(bev_iou(grown, enlarge(g, margin, margin)) == 0.0 for g, _ in gts):
                    gts.append((box, preset.name))
                    break
            else:
                log.info("frame %s: could not place a %s after %d tries", frame_id, preset.name,
                         config.max_retries)
    chunks = []
    for box, _ in gts:
        r = math.hypot(box.x - sensor[0], box.y - sensor[1])
        scale = config.surface_density * (config.reference_range / max(r, 1.0)) ** 2
        pts = _face_samples(box, sensor, scale, rng)
        if len(pts) and rng.random() < config.occlusion_prob:
            keep = rng.random(len(pts)) >= rng.uniform(0.3, 0.9)
            pts = pts[keep]
        chunks.append(pts)
    if config.ground_points > 0:
        # log-uniform radius gives an areal density falling off as 1/r^2
        lo, hi = 2.0, config.range_max + 10.0
        r = np.exp(rng.uniform(math.log(lo), math.log(hi), config.ground_points))
        phi = rng.uniform(-math.pi, math.pi, config.ground_points)
        ground = np.stack([r * np.cos(phi), r * np.sin(phi),
                           rng.normal(0.0, config.ground_noise, config.ground_points)], axis=1)
        for box, _ in gts:
            under = points_in_box(ground, box.replace(z=0.0, h=1.0))
            ground = ground[~under]
        chunks.append(ground)
    cloud = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    return Scene(frame_id, cloud, gts)


def generate_scenes(config: SceneConfig, n: int, seed: int, prefix: str = "") -> List[Scene]:
    """``n`` scenes; scene ``i`` draws from its own stream seeded by ``(seed, i)``."""
    return [generate_scene(config, np.random.default_rng([seed, i]), f"{prefix}{i:06d}") for i in range(n)]


def make_proposals(scene: Scene, rng: np.random.Generator, noise: ProposalNoise, fp_rate: float,
                   config: Optional[SceneConfig] = None,
                   iou_thresholds: Optional[Dict[str, float]] = None) -> List[Proposal]:
    """One jittered proposal per object plus Poisson(``fp_rate``) background boxes.

    Background boxes are rejection-sampled so their IoU with every object stays
    below that object's positive threshold.
    """
    if fp_rate < 0:
        raise ValueError("fp_rate must be >= 0")
    config = config or SceneConfig()
    thresholds = iou_thresholds or {"vehicle": 0.7, "pedestrian": 0.5, "cyclist": 0.5}
    out = []
    for box, cls_name in scene.gts:
        jb = jitter_box(box, rng, noise.center, noise.size, noise.heading)
        out.append(Proposal(jb, cls_name, float(rng.uniform(0.5, 1.0))))
    n_fp = int(rng.poisson(fp_rate)) if fp_rate > 0 else 0
    for _ in range(n_fp):
        preset = config.classes[int(rng.integers(len(config.classes)))]
        for _attempt in range(config.max_retries):
            box = _place_box(preset, config, rng)
            if all(iou_3d(box, g) < thresholds.get(c, 0.5) for g, c in scene.gts):
                out.append(Proposal(box, preset.name, float(rng.uniform(0.0, 0.8))))
                break
    return out


def ambiguity_study(clouds: Sequence[np.ndarray], proposals: Sequence[Sequence[Box7]],
                    enlarge_wl: float = 1.0) -> Dict[str, float]:
    """How often enlarging a proposal adds no points, or fewer than ten.

    ``clouds[i]`` pairs with ``proposals[i]``. Returns the fractions of all
    proposals whose point count is unchanged by the enlargement
    (``frac_same_count``) and that gain 1 to 9 points (``frac_lt_10_new``).
    """
    same = small = total = 0
    for cloud, boxes in zip(clouds, proposals):
        cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3) if len(cloud) == 0 else np.asarray(cloud)
        for box in boxes:
            inner = int(points_in_box(cloud, box).sum()) if len(cloud) else 0
            outer = int(points_in_box(cloud, enlarge(box, enlarge_wl, enlarge_wl)).sum()) if len(cloud) else 0
            gained = outer - inner
            total += 1
            same += gained == 0
            small += 1 <= gained <= 9
    if total == 0:
        return {"frac_same_count": 0.0, "frac_lt_10_new": 0.0, "num_proposals": 0}
    return {"frac_same_count": same / total, "frac_lt_10_new": small / total, "num_proposals": total}
