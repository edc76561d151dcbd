"""Training loop, checkpoints, the refinement pass and latency benchmark."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import data as fileio
from .encoding import (AnchorTable, check_variant, crop_points, encode_batch, input_channels,
                       sample_fixed)
from .geometry import Box7
from .network import (OptimizerState, PointNetModel, backward, forward, init_model, poly_lr,
                      sgd_step)
from .synthetic import Proposal, jitter_box
from .targets import (LossConfig, assign_label, cross_entropy_with_grad, decode_box, encode_targets,
                      regression_loss_with_grad, softmax)

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class JitterConfig:
    center: float = 0.5
    size: float = 0.05
    heading: float = 0.17


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr0: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lam: float = 20.0
    beta: float = 1.0
    poly_power: float = 1.0
    points_per_proposal: int = 512
    variant: str = "plain"
    enlarge_wl: float = 1.0
    virtual_grid: int = 4
    widths: Tuple[int, ...] = (64, 64, 512)
    head_hidden: Tuple[int, ...] = ()
    seed: int = 0
    jitter: JitterConfig = field(default_factory=JitterConfig)
    gt_ratio: float = 1.0
    class_balanced: bool = False
    dtype: str = "float32"
    max_grad_norm: float = 1.0  # 0 disables clipping
    warmup_iters: int = 0
    iou_thresholds: Dict[str, float] = field(
        default_factory=lambda: {"vehicle": 0.7, "pedestrian": 0.5, "cyclist": 0.5})

    def __post_init__(self):
        if isinstance(self.jitter, dict):
            self.jitter = JitterConfig(**self.jitter)
        self.widths = tuple(self.widths)
        self.head_hidden = tuple(self.head_hidden)
        check_variant(self.variant)
        for name in ("epochs", "batch_size", "points_per_proposal", "virtual_grid"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("lr0", "lam", "beta", "poly_power"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_grad_norm < 0 or self.warmup_iters < 0:
            raise ValueError("max_grad_norm and warmup_iters must be non-negative")
        if self.momentum < 0 or self.weight_decay < 0 or self.enlarge_wl < 0 or self.gt_ratio < 0:
            raise ValueError("momentum, weight_decay, enlarge_wl and gt_ratio must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["head_hidden"] = list(self.head_hidden)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lam, self.beta, dict(self.iou_thresholds))


@dataclass
class Checkpoint:
    model: PointNetModel
    optimizer: OptimizerState
    config: TrainConfig
    classes: List[str]
    anchors: Dict[str, List[float]]
    epoch: int = 0
    iteration: int = 0
    rng_state: dict = field(default_factory=dict)

    @property
    def variant(self) -> str:
        return self.config.variant

    def anchor_table(self) -> Optional[AnchorTable]:
        return AnchorTable(dict(self.anchors)) if self.anchors else None


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = {f"param/{k}": v for k, v in ckpt.model.params.items()}
    arrays.update({f"momentum/{k}": v for k, v in ckpt.optimizer.buffers.items()})
    meta = {
        "kind": "boxrefine-checkpoint",
        "model": ckpt.model.config(),
        "optimizer": {"momentum": ckpt.optimizer.momentum, "weight_decay": ckpt.optimizer.weight_decay},
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config.digest(),
        "variant": ckpt.config.variant,
        "classes": ckpt.classes,
        "anchors": ckpt.anchors,
        "epoch": ckpt.epoch,
        "iteration": ckpt.iteration,
        "rng_state": ckpt.rng_state,
    }
    fileio.save_container(path, arrays, meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = fileio.load_container(path)
    if meta.get("kind") != "boxrefine-checkpoint":
        raise fileio.SchemaError(f"{path}: not a model checkpoint")
    mc = meta["model"]
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    model = PointNetModel(mc["input_channels"], mc["num_classes"], tuple(mc["widths"]),
                          tuple(mc["head_hidden"]), params)
    # a fresh version number: caches from other model objects are stale
    model = model.astype(next(iter(params.values())).dtype)
    buffers = {k[len("momentum/"):]: v for k, v in arrays.items() if k.startswith("momentum/")}
    opt = OptimizerState(meta["optimizer"]["momentum"], meta["optimizer"]["weight_decay"], buffers)
    config = TrainConfig(**meta["config"])
    if config.digest() != meta["config_hash"]:
        raise fileio.SchemaError(f"{path}: config hash mismatch")
    return Checkpoint(model, opt, config, list(meta["classes"]), dict(meta["anchors"]), meta["epoch"],
                      meta["iteration"], meta["rng_state"])


def jitter_proposal(box: Box7, rng: np.random.Generator, magnitudes: JitterConfig) -> Box7:
    """Uniform noise on center (m), log-size and heading (rad)."""
    return jitter_box(box, rng, magnitudes.center, magnitudes.size, magnitudes.heading)


@dataclass
class _Sample:
    frame_id: str
    box: Box7
    cls: str
    key: Optional[tuple] = None  # cache key for label assignment of fixed proposals


def _anchor_table(dataset, classes) -> AnchorTable:
    if dataset.anchors:
        return AnchorTable(dict(dataset.anchors))
    boxes, names = [], []
    for f in sorted(dataset.gts):
        for b, c in dataset.gts[f]:
            boxes.append(b)
            names.append(c)
    return AnchorTable.from_boxes(boxes, names)


def _epoch_samples(dataset, config: TrainConfig, rng: np.random.Generator) -> List[_Sample]:
    base = [_Sample(f, p.box, p.cls, (f, i)) for f in sorted(dataset.proposals)
            for i, p in enumerate(dataset.proposals[f])]
    pool = [(f, b, c) for f in sorted(dataset.gts) for b, c in dataset.gts[f]]
    n_extra = int(round(config.gt_ratio * len(base))) if pool else 0
    if not base and pool:
        n_extra = int(round(max(config.gt_ratio, 1.0) * len(pool)))
    extra = []
    for j in rng.integers(0, len(pool), size=n_extra) if n_extra else []:
        f, b, c = pool[int(j)]
        extra.append(_Sample(f, jitter_proposal(b, rng, config.jitter), c))
    samples = base + extra
    if not samples:
        return []
    if config.class_balanced:
        names = np.array([s.cls for s in samples])
        uniq, counts = np.unique(names, return_counts=True)
        weight = {u: 1.0 / c for u, c in zip(uniq, counts)}
        p = np.array([weight[n] for n in names])
        idx = rng.choice(len(samples), size=len(samples), replace=True, p=p / p.sum())
        return [samples[i] for i in idx]
    return [samples[i] for i in rng.permutation(len(samples))]


def _prepare(samples: Sequence[_Sample], dataset, config: TrainConfig, classes, anchors,
             rng: np.random.Generator, label_cache: Optional[dict] = None):
    loss_cfg = config.loss_config()
    crops, labels, targets = [], [], []
    for s in samples:
        crop = crop_points(dataset.clouds[s.frame_id], s.box, config.enlarge_wl, s.cls)
        crops.append(sample_fixed(crop, config.points_per_proposal, rng))
        if label_cache is not None and s.key is not None and s.key in label_cache:
            label, gt = label_cache[s.key]
        else:
            label, gt = assign_label(s.box, dataset.gts.get(s.frame_id, []), loss_cfg, classes)
            if label_cache is not None and s.key is not None:
                label_cache[s.key] = (label, gt)
        labels.append(label)
        if label > 0:
            dims = anchors[s.cls] if config.variant == "anchor" else None
            targets.append(encode_targets(s.box, gt, dims))
        else:
            targets.append(np.zeros(7))
    batch = encode_batch(crops, config.variant, anchors, config.virtual_grid, np.dtype(config.dtype))
    return batch, np.array(labels, dtype=np.int64), np.array(targets)


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale all gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def learning_rate(iteration: int, max_iter: int, config: TrainConfig) -> float:
    lr = poly_lr(iteration, max_iter, config.lr0, config.poly_power)
    if config.warmup_iters and iteration < config.warmup_iters:
        lr *= (iteration + 1) / config.warmup_iters
    return lr


def train_step(model, opt, batch, labels, targets, config: TrainConfig, lr: float):
    """One forward/backward/update. Returns ``(cls_loss, reg_loss, total)``."""
    logits, reg, cache = forward(model, batch)
    cls_loss, dlogits = cross_entropy_with_grad(logits, labels)
    reg_loss, dreg = regression_loss_with_grad(reg, targets, labels > 0, config.beta)
    total = cls_loss + config.lam * reg_loss
    if not math.isfinite(total):
        raise NumericError(f"non-finite loss {total}")
    grads = backward(model, cache, dlogits, config.lam * dreg)
    clip_gradients(grads, config.max_grad_norm)
    sgd_step(model, grads, opt, lr)
    return cls_loss, reg_loss, total


def train(dataset, config: TrainConfig, out_dir=None, resume: Optional[Checkpoint] = None,
          on_record: Optional[Callable[[dict], None]] = None, stop_after_epoch: Optional[int] = None):
    """Train a refinement network.

    Epoch ``e`` draws every random choice from a generator seeded with
    ``(seed, e)``, so a run resumed from any epoch checkpoint replays the
    uninterrupted run exactly. Returns ``(checkpoint, log_records)``.
    """
    classes = list(dataset.classes)
    anchors = _anchor_table(dataset, classes) if config.variant == "anchor" else None
    anchor_dict = anchors.to_dict() if anchors else (dict(dataset.anchors) if dataset.anchors else {})
    out = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        if resume.config.digest() != config.digest():
            raise ValueError("checkpoint was trained with a different config; refusing to resume")
        ckpt = resume
    else:
        model = init_model(np.random.default_rng(config.seed), config.widths, input_channels(config.variant),
                           len(classes), config.head_hidden, np.dtype(config.dtype))
        ckpt = Checkpoint(model, OptimizerState.for_model(model, config.momentum, config.weight_decay),
                          config, classes, anchor_dict)
    n_base = sum(len(v) for v in dataset.proposals.values())
    n_pool = sum(len(v) for v in dataset.gts.values())
    n_samples = n_base + (int(round(config.gt_ratio * n_base)) if n_pool else 0)
    if n_base == 0 and n_pool:
        n_samples = int(round(max(config.gt_ratio, 1.0) * n_pool))
    if n_samples == 0:
        raise ValueError("dataset has no proposals or ground truth to train on")
    steps_per_epoch = math.ceil(n_samples / config.batch_size)
    max_iter = config.epochs * steps_per_epoch
    label_cache: dict = {}
    records: List[dict] = []
    last_epoch = config.epochs if stop_after_epoch is None else min(config.epochs, stop_after_epoch)
    for epoch in range(ckpt.epoch, last_epoch):
        rng = np.random.default_rng([config.seed, epoch])
        samples = _epoch_samples(dataset, config, rng)
        for step in range(steps_per_epoch):
            chunk = samples[step * config.batch_size:(step + 1) * config.batch_size]
            batch, labels, targets = _prepare(chunk, dataset, config, classes, anchors, rng, label_cache)
            lr = learning_rate(ckpt.iteration, max_iter, config)
            try:
                cls_l, reg_l, total = train_step(ckpt.model, ckpt.optimizer, batch, labels, targets, config, lr)
            except FloatingPointError as exc:
                raise NumericError(f"epoch {epoch} batch {step}: {exc}") from None
            rec = {"iteration": ckpt.iteration, "epoch": epoch, "batch": step, "lr": lr,
                   "cls_loss": cls_l, "reg_loss": reg_l, "total": total,
                   "num_pos": int((labels > 0).sum()), "batch_size": len(labels)}
            records.append(rec)
            if on_record:
                on_record(rec)
            ckpt.iteration += 1
        ckpt.epoch = epoch + 1
        ckpt.rng_state = np.random.default_rng([config.seed, ckpt.epoch]).bit_generator.state
        if out is not None:
            save_checkpoint(ckpt, out / f"checkpoint_epoch{ckpt.epoch:03d}.bxr")
            save_checkpoint(ckpt, out / "checkpoint_last.bxr")
        ep = [r for r in records if r["epoch"] == epoch]
        log.info("epoch %d: mean loss %.4f", epoch, np.mean([r["total"] for r in ep]) if ep else float("nan"))
    if out is not None:
        prev = fileio.read_jsonl(out / "train_log.jsonl") if resume is not None and (out / "train_log.jsonl").exists() else []
        prev = [r for r in prev if r["iteration"] < (records[0]["iteration"] if records else math.inf)]
        fileio.atomic_write(out / "train_log.jsonl", fileio.dumps_jsonl(prev + records))
    return ckpt, records


@dataclass
class RefinedDetection:
    frame_id: str
    box: Box7
    cls: str
    score: float
    empty: bool
    proposal: Box7
    probs: np.ndarray


def refine(ckpt: Checkpoint, proposals: Sequence[Tuple[str, Proposal]], clouds: Dict[str, np.ndarray],
           seed: int = 0, batch_size: int = 128, pass_through_empty: bool = False,
           variant: Optional[str] = None) -> List[RefinedDetection]:
    """Rescore and refine proposals with a trained checkpoint.

    Score is the best foreground probability and class its argmax. Proposals
    whose crop holds no points keep their geometry and get score 0 (or their
    incoming score with ``pass_through_empty``). Log-size outputs are clipped
    to +-10 so decoded boxes stay finite.
    """
    config = ckpt.config
    if variant is not None and variant != config.variant:
        raise ValueError(f"checkpoint was trained for {config.variant!r}, not {variant!r}")
    anchors = ckpt.anchor_table() if config.variant == "anchor" else None
    rng = np.random.default_rng(seed)
    out: List[RefinedDetection] = []
    for start in range(0, len(proposals), batch_size):
        chunk = proposals[start:start + batch_size]
        crops = [sample_fixed(crop_points(clouds[f], p.box, config.enlarge_wl, p.cls),
                              config.points_per_proposal, rng) for f, p in chunk]
        batch = encode_batch(crops, config.variant, anchors, config.virtual_grid, ckpt.model.dtype)
        logits, reg, _ = forward(ckpt.model, batch)
        probs = softmax(np.asarray(logits, dtype=np.float64))
        reg = np.asarray(reg, dtype=np.float64)
        reg[:, 3:6] = np.clip(reg[:, 3:6], -10.0, 10.0)
        for i, (f, p) in enumerate(chunk):
            if crops[i].empty:
                score = float(p.score) if pass_through_empty else 0.0
                out.append(RefinedDetection(f, p.box, p.cls, score, True, p.box, probs[i]))
                continue
            k = int(np.argmax(probs[i, 1:]))
            dims = anchors[p.cls] if anchors is not None else None
            box = decode_box(p.box, reg[i], dims)
            out.append(RefinedDetection(f, box, ckpt.classes[k], float(probs[i, 1 + k]), False, p.box, probs[i]))
    return out


def bench(model: PointNetModel, n_points: Sequence[int], batch: int = 128, repeats: int = 20,
          warmup: int = 2, seed: int = 0) -> dict:
    """Median forward latency per point count on random features."""
    if list(n_points) != sorted(n_points):
        raise ValueError("point counts must be ascending")
    rng = np.random.default_rng(seed)
    rows = []
    for n in n_points:
        x = rng.standard_normal((batch, n, model.input_channels)).astype(model.dtype)
        for _ in range(warmup):
            forward(model, x)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            forward(model, x)
            times.append(time.perf_counter() - t0)
        rows.append({"points": int(n), "batch": batch, "median_ms": 1e3 * float(np.median(times)),
                     "runs": repeats})
    return {"parameters": model.num_parameters(), "rows": rows}
