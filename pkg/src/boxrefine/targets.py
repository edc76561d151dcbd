"""Label assignment, box regression targets and the training losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .geometry import Box7, iou_3d, wrap_heading

DEFAULT_THRESHOLDS = {"vehicle": 0.7, "pedestrian": 0.5, "cyclist": 0.5}


@dataclass
class LossConfig:
    lam: float = 20.0
    beta: float = 1.0
    iou_thresholds: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.beta <= 0:
            raise ValueError(f"smooth-L1 beta must be positive, got {self.beta}")
        for name, t in self.iou_thresholds.items():
            if not 0.0 < t < 1.0:
                raise ValueError(f"IoU threshold for {name!r} must lie in (0, 1), got {t}")


@dataclass
class RefinementTarget:
    class_label: int
    center_t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    size_t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    heading_t: float = 0.0
    valid_regression: bool = False

    @property
    def regression(self) -> np.ndarray:
        return np.concatenate([self.center_t, self.size_t, [self.heading_t]])


def assign_label(proposal: Box7, gts: Sequence[Tuple[Box7, str]], config: LossConfig,
                 classes: Sequence[str]) -> Tuple[int, Optional[Box7]]:
    """Match the proposal to its highest-IoU ground truth.

    Returns ``(label, gt)`` where ``label`` is ``1 + classes.index(cls)`` when
    the best IoU clears that class's threshold, else ``(0, None)``.
    """
    best, best_iou = None, -1.0
    for gt, cls_name in gts:
        iou = iou_3d(proposal, gt)
        if iou > best_iou:
            best, best_iou = (gt, cls_name), iou
    if best is None:
        return 0, None
    gt, cls_name = best
    if cls_name not in config.iou_thresholds:
        raise KeyError(f"no IoU threshold configured for class {cls_name!r}")
    if best_iou >= config.iou_thresholds[cls_name]:
        return classes.index(cls_name) + 1, gt
    return 0, None


def heading_residual(delta):
    """Fold an orientation difference into (-pi/2, pi/2], treating flips as equal."""
    d = np.mod(np.asarray(delta, dtype=np.float64), np.pi)
    out = np.where(d <= np.pi / 2, d, d - np.pi)
    return float(out) if np.ndim(delta) == 0 else out


def encode_targets(proposal: Box7, gt: Box7, dims=None) -> np.ndarray:
    """Seven regression targets of ``gt`` relative to ``proposal``.

    Center offsets are measured in the proposal's canonical frame and divided
    by ``(w, l, h)``; sizes are log-ratios; heading is the flip-folded
    residual. ``dims`` replaces the proposal's ``(w, l, h)`` as denominators
    (anchor mode).
    """
    w, l, h = proposal.dims if dims is None else np.asarray(dims, dtype=np.float64)
    c, s = math.cos(proposal.theta), math.sin(proposal.theta)
    dx, dy = gt.x - proposal.x, gt.y - proposal.y
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    lz = gt.z - proposal.z
    return np.array([
        lx / w, ly / l, lz / h,
        math.log(gt.w / w), math.log(gt.l / l), math.log(gt.h / h),
        heading_residual(gt.theta - proposal.theta),
    ])


def make_target(proposal: Box7, label: int, gt: Optional[Box7], dims=None) -> RefinementTarget:
    if label == 0 or gt is None:
        return RefinementTarget(class_label=0)
    t = encode_targets(proposal, gt, dims)
    return RefinementTarget(label, t[:3], t[3:6], float(t[6]), True)


def decode_box(proposal: Box7, regression, dims=None) -> Box7:
    """Inverse of :func:`encode_targets` (heading recovered up to a flip)."""
    r = np.asarray(regression, dtype=np.float64)
    if r.shape != (7,) or not np.all(np.isfinite(r)):
        raise ValueError(f"regression must be 7 finite values, got {regression!r}")
    w, l, h = proposal.dims if dims is None else np.asarray(dims, dtype=np.float64)
    with np.errstate(over="raise"):
        try:
            size = np.array([w, l, h]) * np.exp(r[3:6])
        except FloatingPointError:
            raise ValueError(f"size regression {r[3:6]} overflows") from None
    if not np.all(np.isfinite(size)) or np.any(size <= 0):
        raise ValueError(f"size regression {r[3:6]} yields invalid dimensions {size}")
    lx, ly, lz = r[0] * w, r[1] * l, r[2] * h
    c, s = math.cos(proposal.theta), math.sin(proposal.theta)
    return Box7(
        proposal.x + c * lx - s * ly,
        proposal.y + s * lx + c * ly,
        proposal.z + lz,
        size[0], size[1], size[2],
        wrap_heading(proposal.theta + r[6]),
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_with_grad(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b = len(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(b), labels] - log_norm
    loss = float(-logp.mean())
    grad = softmax(logits)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def classification_loss(logits, labels) -> float:
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= np.shape(logits)[1]):
        raise ValueError("labels must index into the logit columns")
    return cross_entropy_with_grad(logits, labels)[0]


def smooth_l1(x, beta: float = 1.0):
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def smooth_l1_grad(x, beta: float = 1.0):
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


def regression_loss_with_grad(predictions, targets, positive, beta: float = 1.0):
    """Smooth-L1 summed over the 7 components, averaged over positives.

    Returns ``(loss, grad)``; rows outside ``positive`` get zero gradient and
    a batch without positives has loss 0.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    grad = np.zeros_like(pred)
    n_pos = int(pos.sum())
    if n_pos == 0:
        return 0.0, grad
    diff = pred[pos] - tgt[pos]
    loss = float(smooth_l1(diff, beta).sum() / n_pos)
    grad[pos] = smooth_l1_grad(diff, beta) / n_pos
    return loss, grad


def regression_loss(predictions, targets, positive=None, beta: float = 1.0) -> float:
    pred = np.atleast_2d(predictions)
    if positive is None:
        positive = np.ones(len(pred), dtype=bool)
    return regression_loss_with_grad(pred, np.atleast_2d(targets), positive, beta)[0]


def total_loss(cls: float, reg: float, config: Optional[LossConfig] = None) -> float:
    lam = LossConfig().lam if config is None else config.lam
    return cls + lam * reg
