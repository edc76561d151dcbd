"""``boxrefine`` command line: generate, train, refine, eval, ambiguity, bench.

Exit codes: 0 success, 2 schema/config error, 3 numeric failure, 4 I/O error.
``BOXREFINE_THREADS`` sets the default BLAS thread cap (``--threads`` wins).
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from . import data as fileio
from .config import RunConfig, config_to_dict, load_config, parse_config
from .encoding import input_channels
from .metrics import Detection, evaluate, format_report, report_records
from .network import init_model
from .synthetic import ambiguity_study
from .trainer import NumericError, bench, load_checkpoint, refine, train

EXIT_OK, EXIT_SCHEMA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("boxrefine")


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else parse_config({})
    raw = config_to_dict(cfg)
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
        raw["train"]["seed"] = args.seed
    for flag, key in (("variant", "variant"), ("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("points", "points_per_proposal")):
        if getattr(args, flag, None) is not None:
            raw["train"][key] = getattr(args, flag)
    if getattr(args, "num_scenes", None) is not None:
        raw["scene"]["num_scenes"] = args.num_scenes
    if getattr(args, "threads", None) is not None:
        raw["threads"] = args.threads
    return parse_config(raw)


def _echo_config(cfg: RunConfig, out_dir) -> None:
    text = yaml.safe_dump(config_to_dict(cfg), sort_keys=True)
    fileio.atomic_write(Path(out_dir) / "config.effective.yaml", text)


def cmd_generate(args) -> int:
    cfg = _effective_config(args)
    gen = cfg.scene
    ds = fileio.synthetic_dataset(gen.scene, gen.num_scenes, cfg.seed, gen.noise, gen.fp_rate,
                                  gen.val_fraction, cfg.train.iou_thresholds)
    splits = ds.splits
    fileio.save_dataset(ds, args.out)
    _echo_config(cfg, args.out)
    print(f"wrote {len(ds.clouds)} frames ({len(splits['train'])} train / {len(splits['val'])} val) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    ds = fileio.load_dataset(args.data)
    if args.split:
        ds = ds.subset(args.split)
    resume = load_checkpoint(args.resume) if args.resume else None
    _echo_config(cfg, args.out)
    try:
        ckpt, records = train(ds, cfg.train, args.out, resume=resume)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    last = records[-1] if records else {}
    print(f"trained {ckpt.config.variant}: epoch {ckpt.epoch}, iteration {ckpt.iteration}, "
          f"last loss {last.get('total', float('nan')):.4f}")
    return EXIT_OK


def cmd_refine(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = fileio.load_dataset(args.data)
    if args.split:
        ds = ds.subset(args.split)
    props = [(f, p) for f in sorted(ds.proposals) for p in ds.proposals[f]]
    out = refine(ckpt, props, ds.clouds, seed=args.seed or 0, variant=args.variant,
                 pass_through_empty=args.pass_through_empty)
    records = [fileio.box_record(r.frame_id, r.box, r.cls, r.score, empty=r.empty) for r in out]
    fileio.atomic_write(args.out, fileio.dumps_jsonl(records))
    print(f"refined {len(records)} proposals ({sum(r.empty for r in out)} empty) -> {args.out}")
    return EXIT_OK


def load_detections(path):
    dets = {}
    for fid, items in fileio.load_boxes(path, need_score=True).items():
        dets[fid] = [Detection(b, s, c) for b, c, s, _ in items]
    return dets


def cmd_eval(args) -> int:
    cfg = _effective_config(args)
    ds = fileio.load_dataset(args.data)
    if args.split:
        ds = ds.subset(args.split)
    if args.detections == "gt":
        dets = {f: [Detection(b, 1.0, c) for b, c in g] for f, g in ds.gts.items()}
    else:
        dets = {f: d for f, d in load_detections(args.detections).items() if f in ds.clouds}
    spec = cfg.eval
    if args.iou_mode:
        spec = dataclasses.replace(spec, iou_mode=args.iou_mode)
    report = evaluate(dets, ds.gts, ds.clouds, spec, classes=ds.classes)
    text = format_report(report)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        fileio.atomic_write(out / "report.txt", text)
        fileio.atomic_write(out / "report.jsonl", fileio.dumps_jsonl(report_records(report)))
        _echo_config(cfg, out)
    return EXIT_OK


def cmd_ambiguity(args) -> int:
    ds = fileio.load_dataset(args.data)
    if args.split:
        ds = ds.subset(args.split)
    frames = sorted(ds.clouds)
    stats = ambiguity_study([ds.clouds[f] for f in frames],
                            [[p.box for p in ds.proposals.get(f, [])] for f in frames], args.enlarge)
    stats["enlarge_wl"] = args.enlarge
    text = (f"proposals: {stats['num_proposals']}\n"
            f"same point count after +{args.enlarge} m: {100 * stats['frac_same_count']:.1f}%\n"
            f"fewer than 10 new points: {100 * stats['frac_lt_10_new']:.1f}%\n")
    print(text, end="")
    if args.out:
        fileio.atomic_write(Path(args.out) / "ambiguity.json", json.dumps(stats, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint).model
    else:
        model = init_model(np.random.default_rng(0), input_channels=input_channels(args.variant or "plain"),
                           num_classes=args.num_classes)
    points = [int(p) for p in args.points.split(",")]
    result = bench(model, points, batch=args.batch, repeats=args.repeats)
    lines = [f"parameters: {result['parameters']}", f"{'points':>8}{'batch':>8}{'median_ms':>12}"]
    lines += [f"{r['points']:>8}{r['batch']:>8}{r['median_ms']:>12.3f}" for r in result["rows"]]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        fileio.atomic_write(Path(args.out) / "bench.json", json.dumps(result, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boxrefine", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--num-scenes", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a refinement network")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.add_argument("--variant")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--points", type=int, help="points sampled per proposal")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("refine", help="refine and rescore proposals")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--split", default="val")
    r.add_argument("--seed", type=int)
    r.add_argument("--variant")
    r.add_argument("--pass-through-empty", action="store_true")
    r.set_defaults(func=cmd_refine)

    e = sub.add_parser("eval", help="AP/APH report")
    e.add_argument("--detections", required=True, help="boxes file with scores, or 'gt'")
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.add_argument("--split", default="val")
    e.add_argument("--iou-mode", choices=("3d", "bev"))
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ambiguity", help="point-count change under proposal enlargement")
    a.add_argument("--data", required=True)
    a.add_argument("--split")
    a.add_argument("--enlarge", type=float, default=1.0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ambiguity)

    b = sub.add_parser("bench", help="forward latency vs sampled points")
    b.add_argument("--checkpoint")
    b.add_argument("--variant")
    b.add_argument("--num-classes", type=int, default=3)
    b.add_argument("--points", default="64,128,256,512,1024")
    b.add_argument("--batch", type=int, default=128)
    b.add_argument("--repeats", type=int, default=20)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads if args.threads is not None else os.environ.get("BOXREFINE_THREADS")
    limiter = contextlib.nullcontext()
    if threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(int(threads))
    try:
        with limiter:
            return args.func(args)
    except fileio.SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (KeyError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
