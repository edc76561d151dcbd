"""Shared-MLP + max-pool point network with hand-written backpropagation.

Per-point features go through ``len(widths)`` affine+ReLU layers with weights
shared across points, are max-pooled over the point axis, and feed two heads:
``C + 1`` class logits and 7 box-regression outputs.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_WIDTHS = (64, 64, 512)
REG_OUTPUTS = 7
OUTPUT_INIT_GAIN = 0.01

_versions = itertools.count(1)


@dataclass
class PointNetModel:
    input_channels: int
    num_classes: int
    widths: Tuple[int, ...] = DEFAULT_WIDTHS
    head_hidden: Tuple[int, ...] = ()
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = 0

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def layer_shapes(self) -> Dict[str, tuple]:
        shapes = {}
        fan_in = self.input_channels
        for i, w in enumerate(self.widths):
            shapes[f"embed{i}.W"] = (fan_in, w)
            shapes[f"embed{i}.b"] = (w,)
            fan_in = w
        for head, out in (("cls", self.num_classes + 1), ("reg", REG_OUTPUTS)):
            fan = self.widths[-1]
            for j, hw in enumerate(self.head_hidden):
                shapes[f"{head}{j}.W"] = (fan, hw)
                shapes[f"{head}{j}.b"] = (hw,)
                fan = hw
            shapes[f"{head}_out.W"] = (fan, out)
            shapes[f"{head}_out.b"] = (out,)
        return shapes

    def touch(self) -> None:
        """Mark parameters as changed after editing them in place."""
        self.version = next(_versions)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype) -> "PointNetModel":
        return PointNetModel(self.input_channels, self.num_classes, self.widths, self.head_hidden,
                             {k: v.astype(dtype) for k, v in self.params.items()}, next(_versions))

    def config(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
            "widths": list(self.widths),
            "head_hidden": list(self.head_hidden),
        }


def init_model(rng: np.random.Generator, widths: Sequence[int] = DEFAULT_WIDTHS, input_channels: int = 3,
               num_classes: int = 3, head_hidden: Sequence[int] = (), dtype=np.float64) -> PointNetModel:
    """He-normal weights for ReLU layers, down-scaled LeCun-normal output layers, zero biases."""
    if min(widths) <= 0 or input_channels <= 0 or num_classes <= 0:
        raise ValueError("layer widths, input channels and class count must be positive")
    model = PointNetModel(int(input_channels), int(num_classes), tuple(int(w) for w in widths),
                          tuple(int(w) for w in head_hidden))
    for name, shape in model.layer_shapes().items():
        if name.endswith(".b"):
            model.params[name] = np.zeros(shape, dtype=dtype)
            continue
        if name.endswith("_out.W"):
            # small output layers keep the initial loss near log(C+1)
            scale = OUTPUT_INIT_GAIN * math.sqrt(1.0 / shape[0])
        else:
            scale = math.sqrt(2.0 / shape[0])
        model.params[name] = (rng.standard_normal(shape) * scale).astype(dtype)
    model.touch()
    return model


def param_count(widths=DEFAULT_WIDTHS, input_channels=3, num_classes=3, head_hidden=()) -> int:
    model = PointNetModel(input_channels, num_classes, tuple(widths), tuple(head_hidden))
    return int(sum(np.prod(s) for s in model.layer_shapes().values()))


@dataclass
class ForwardCache:
    version: int
    shape: tuple
    embed_inputs: List[np.ndarray]  # input of each embed layer, (B*M, fan_in)
    argmax: np.ndarray  # (B, F) winning point per channel
    pooled: np.ndarray  # (B, F)
    head_inputs: Dict[str, List[np.ndarray]]


def _head_forward(model, head, x):
    inputs = []
    for j in range(len(model.head_hidden)):
        inputs.append(x)
        x = np.maximum(x @ model.params[f"{head}{j}.W"] + model.params[f"{head}{j}.b"], 0)
    inputs.append(x)
    return x @ model.params[f"{head}_out.W"] + model.params[f"{head}_out.b"], inputs


def forward(model: PointNetModel, features) -> Tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Run the network on ``(B, M, C)`` features.

    Returns ``(logits (B, C+1), regression (B, 7), cache)``.
    """
    x = features.features if hasattr(features, "features") else features
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim != 3 or x.shape[2] != model.input_channels:
        raise ValueError(f"expected (B, M, {model.input_channels}) features, got shape {x.shape}")
    b, m, _ = x.shape
    h = x.reshape(b * m, -1)
    inputs = []
    last = len(model.widths) - 1
    for i in range(last):
        inputs.append(h)
        h = np.maximum(h @ model.params[f"embed{i}.W"] + model.params[f"embed{i}.b"], 0)
    inputs.append(h)
    # Last layer in channel-major layout so the max over points runs along
    # contiguous memory. Bias and ReLU commute with the max and are applied
    # after pooling. argmax returns the first index on ties.
    zt = (model.params[f"embed{last}.W"].T @ h.T).reshape(-1, b, m)
    idx = zt.argmax(axis=2).T
    top = np.take_along_axis(zt, idx.T[:, :, None], axis=2)[:, :, 0].T
    pooled = np.maximum(top + model.params[f"embed{last}.b"], 0)
    logits, cls_in = _head_forward(model, "cls", pooled)
    reg, reg_in = _head_forward(model, "reg", pooled)
    cache = ForwardCache(model.version, (b, m), inputs, idx, pooled, {"cls": cls_in, "reg": reg_in})
    return logits, reg, cache


def _head_backward(model, head, inputs, dout, grads):
    n_hidden = len(model.head_hidden)
    grads[f"{head}_out.W"] = inputs[-1].T @ dout
    grads[f"{head}_out.b"] = dout.sum(axis=0)
    d = dout @ model.params[f"{head}_out.W"].T
    for j in reversed(range(n_hidden)):
        d = d * (inputs[j + 1] > 0)
        grads[f"{head}{j}.W"] = inputs[j].T @ d
        grads[f"{head}{j}.b"] = d.sum(axis=0)
        d = d @ model.params[f"{head}{j}.W"].T
    return d


def backward(model: PointNetModel, cache: ForwardCache, dlogits, dreg) -> Dict[str, np.ndarray]:
    """Gradients of the loss w.r.t. every parameter, given output gradients."""
    if cache.version != model.version:
        raise RuntimeError("stale forward cache: the model changed since this forward pass")
    dt = model.dtype
    grads: Dict[str, np.ndarray] = {}
    dpool = _head_backward(model, "cls", cache.head_inputs["cls"], np.asarray(dlogits, dt), grads)
    dpool = dpool + _head_backward(model, "reg", cache.head_inputs["reg"], np.asarray(dreg, dt), grads)

    b, m = cache.shape
    n_layers = len(model.widths)
    last = n_layers - 1
    # the max routes gradient to one point per channel; a non-positive max
    # means that point's ReLU was off
    dz = dpool * (cache.pooled > 0)
    rows = (np.arange(b)[:, None] * m + cache.argmax).ravel()  # (B*F,)
    chans = np.tile(np.arange(dz.shape[1]), b)
    x_last = cache.embed_inputs[last]
    dzf = dz.ravel()
    W = model.params[f"embed{last}.W"]
    # dW[:, k] = sum_b x[row(b,k)] * dz[b,k]
    gathered = x_last[rows].reshape(b, -1, x_last.shape[1])  # (B, F, fan_in)
    grads[f"embed{last}.W"] = np.einsum("bfi,bf->if", gathered, dz)
    grads[f"embed{last}.b"] = dz.sum(axis=0)
    if n_layers == 1:
        return grads
    dh = np.zeros_like(x_last)
    np.add.at(dh, rows, W.T[chans] * dzf[:, None])
    for i in range(last - 1, -1, -1):
        d = dh * (cache.embed_inputs[i + 1] > 0)
        grads[f"embed{i}.W"] = cache.embed_inputs[i].T @ d
        grads[f"embed{i}.b"] = d.sum(axis=0)
        if i > 0:
            dh = d @ model.params[f"embed{i}.W"].T
    return {k: grads[k].astype(dt, copy=False) for k in model.params}


@dataclass
class OptimizerState:
    momentum: float = 0.9
    weight_decay: float = 1e-5
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: PointNetModel, momentum=0.9, weight_decay=1e-5) -> "OptimizerState":
        return cls(momentum, weight_decay, {k: np.zeros_like(v) for k, v in model.params.items()})


def sgd_step(model: PointNetModel, grads: Dict[str, np.ndarray], state: OptimizerState, lr: float):
    """In-place SGD with momentum and L2 weight decay: v = m v + g + wd p; p -= lr v."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}; step aborted")
    for name, p in model.params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"gradient shape {grads[name].shape} does not match {name} {p.shape}")
    for name, p in model.params.items():
        v = state.buffers.setdefault(name, np.zeros_like(p))
        v *= state.momentum
        v += grads[name]
        if state.weight_decay:
            v += state.weight_decay * p
        p -= lr * v
    model.touch()
    return model, state


def poly_lr(iteration: int, max_iter: int, lr0: float = 0.02, power: float = 1.0) -> float:
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    if max_iter == 0:
        return lr0
    return lr0 * (1.0 - iteration / max_iter) ** power
