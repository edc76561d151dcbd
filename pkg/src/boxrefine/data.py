"""On-disk formats: JSONL datasets and the binary checkpoint container.

Dataset directory layout::

    manifest.json    format version, units, classes, splits, anchor table
    clouds.jsonl     {"frame_id": str, "points": [[x, y, z], ...]}
    gt.jsonl         {"frame_id", "class", "x", "y", "z", "w", "l", "h", "theta"}
    proposals.jsonl  same fields as gt.jsonl plus "score"

Angles are radians and lengths meters. ``w`` spans the box's lateral axis and
``l`` its heading axis. Refined-box files reuse the proposal schema and add
``"empty"`` (no points in the crop).

Checkpoint container (little-endian)::

    bytes 0-7    magic b"BXRFCKPT"
    bytes 8-11   uint32 container version (1)
    bytes 12-19  uint64 header length H
    next H       UTF-8 JSON header: {"meta": {...}, "arrays": [{"name",
                 "dtype", "shape", "offset", "nbytes"}, ...]}
    remainder    raw C-order array data; offsets relative to the data start
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .geometry import Box7
from .encoding import AnchorTable
from .synthetic import Proposal, ProposalNoise, Scene, SceneConfig, generate_scenes, make_proposals

FORMAT_VERSION = 1
MAGIC = b"BXRFCKPT"
BOX_FIELDS = ("x", "y", "z", "w", "l", "h", "theta")


class SchemaError(ValueError):
    """A file or config violates its schema."""


def atomic_write(path, data) -> None:
    """Write bytes or text to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in records)


def read_jsonl(path) -> List[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return out


def box_record(frame_id: str, box: Box7, cls: str, score: Optional[float] = None, **extra) -> dict:
    rec = {"frame_id": frame_id, "class": cls}
    rec.update(zip(BOX_FIELDS, (float(v) for v in box.to_array())))
    if score is not None:
        rec["score"] = float(score)
    rec.update(extra)
    return rec


def parse_box_record(rec: dict, where: str, need_score: bool = False) -> Tuple[str, Box7, str, Optional[float]]:
    for key in ("frame_id", "class") + BOX_FIELDS + (("score",) if need_score else ()):
        if key not in rec:
            raise SchemaError(f"{where}: missing field {key!r}")
    try:
        vals = [float(rec[k]) for k in BOX_FIELDS]
        box = Box7(*vals)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: {exc}") from None
    score = rec.get("score")
    if score is not None and not (isinstance(score, (int, float)) and 0.0 <= score <= 1.0):
        raise SchemaError(f"{where}: field 'score' must be a number in [0, 1]")
    return str(rec["frame_id"]), box, str(rec["class"]), score


@dataclass
class Dataset:
    clouds: Dict[str, np.ndarray]
    gts: Dict[str, List[Tuple[Box7, str]]]
    proposals: Dict[str, List[Proposal]]
    classes: List[str]
    splits: Dict[str, List[str]] = field(default_factory=dict)
    anchors: Dict[str, List[float]] = field(default_factory=dict)

    def subset(self, split: str) -> "Dataset":
        if split not in self.splits:
            raise KeyError(f"no split {split!r}; have {sorted(self.splits)}")
        ids = self.splits[split]
        return Dataset(
            {f: self.clouds[f] for f in ids},
            {f: self.gts.get(f, []) for f in ids},
            {f: self.proposals.get(f, []) for f in ids},
            list(self.classes), {split: list(ids)}, dict(self.anchors),
        )

    @property
    def frame_ids(self) -> List[str]:
        return sorted(self.clouds)

    @classmethod
    def from_scenes(cls, scenes: List[Scene], proposals: Dict[str, List[Proposal]], classes: List[str],
                    splits=None, anchors=None) -> "Dataset":
        return cls({s.frame_id: s.cloud for s in scenes}, {s.frame_id: list(s.gts) for s in scenes},
                   proposals, list(classes), splits or {"all": [s.frame_id for s in scenes]}, anchors or {})


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    frames = ds.frame_ids
    manifest = {
        "format_version": FORMAT_VERSION,
        "units": {"length": "m", "angle": "rad", "w": "lateral extent", "l": "extent along heading"},
        "classes": ds.classes,
        "splits": ds.splits,
        "anchors": ds.anchors,
    }
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    atomic_write(out / "clouds.jsonl", dumps_jsonl(
        {"frame_id": f, "points": np.round(ds.clouds[f][:, :3], 6).tolist()} for f in frames))
    atomic_write(out / "gt.jsonl", dumps_jsonl(
        box_record(f, b, c) for f in frames for b, c in ds.gts.get(f, [])))
    atomic_write(out / "proposals.jsonl", dumps_jsonl(
        box_record(f, p.box, p.cls, p.score) for f in frames for p in ds.proposals.get(f, [])))


def load_boxes(path, need_score=False):
    out: Dict[str, list] = {}
    for i, rec in enumerate(read_jsonl(path), 1):
        fid, box, cls, score = parse_box_record(rec, f"{path}:{i}", need_score)
        out.setdefault(fid, []).append((box, cls, score, rec))
    return out


def load_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{d / 'manifest.json'}: invalid JSON ({exc.msg})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise SchemaError(f"{d / 'manifest.json'}: unsupported format_version {manifest.get('format_version')!r}")
    classes = manifest.get("classes")
    if not isinstance(classes, list) or not classes:
        raise SchemaError(f"{d / 'manifest.json'}: 'classes' must be a non-empty list")
    clouds = {}
    for i, rec in enumerate(read_jsonl(d / "clouds.jsonl"), 1):
        if "frame_id" not in rec or "points" not in rec:
            raise SchemaError(f"{d / 'clouds.jsonl'}:{i}: need 'frame_id' and 'points'")
        pts = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 3) if rec["points"] else np.zeros((0, 3))
        if not np.all(np.isfinite(pts)):
            raise SchemaError(f"{d / 'clouds.jsonl'}:{i}: non-finite point coordinates")
        clouds[str(rec["frame_id"])] = pts
    gts: Dict[str, list] = {}
    for fid, items in load_boxes(d / "gt.jsonl").items():
        if fid not in clouds:
            raise SchemaError(f"{d / 'gt.jsonl'}: frame {fid!r} has no cloud record")
        gts[fid] = [(b, c) for b, c, _, _ in items]
    props: Dict[str, list] = {}
    if (d / "proposals.jsonl").exists():
        for fid, items in load_boxes(d / "proposals.jsonl").items():
            if fid not in clouds:
                raise SchemaError(f"{d / 'proposals.jsonl'}: frame {fid!r} has no cloud record")
            props[fid] = [Proposal(b, c, 0.0 if s is None else s) for b, c, s, _ in items]
    return Dataset(clouds, gts, props, classes, manifest.get("splits", {}), manifest.get("anchors", {}))


def save_container(path, arrays: Dict[str, np.ndarray], meta: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes(order="C")
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")).encode()
    atomic_write(path, MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs))


def load_container(path) -> Tuple[Dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise SchemaError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[20:20 + hlen].decode())
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        buf = raw[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def synthetic_dataset(scene_cfg: SceneConfig, num_scenes: int, seed: int, noise: ProposalNoise,
                      fp_rate: float, val_fraction: float = 0.2, iou_thresholds=None) -> Dataset:
    """Scenes plus corrupted proposals, split train/val by frame order.

    The anchor table holds per-class mean sizes over the training split.
    """
    scenes = generate_scenes(scene_cfg, num_scenes, seed)
    proposals = {}
    for i, s in enumerate(scenes):
        rng = np.random.default_rng([seed, i, 1])
        proposals[s.frame_id] = make_proposals(s, rng, noise, fp_rate, scene_cfg, iou_thresholds)
    n_val = int(round(val_fraction * len(scenes)))
    n_train = len(scenes) - n_val
    ids = [s.frame_id for s in scenes]
    splits = {"train": ids[:n_train], "val": ids[n_train:]}
    train_boxes = [(b, c) for s in scenes[:n_train] for b, c in s.gts]
    anchors = AnchorTable.from_boxes([b for b, _ in train_boxes], [c for _, c in train_boxes]).to_dict() \
        if train_boxes else {}
    return Dataset.from_scenes(scenes, proposals, scene_cfg.class_names, splits, anchors)
