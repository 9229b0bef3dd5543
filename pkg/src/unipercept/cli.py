"""Command-line entry point: ``unipercept <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

log = logging.getLogger("unipercept")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(path):
    from .data_pipeline import ingest
    from .engine import load_pixels

    res = ingest("synthetic", path)
    base = Path(path).parent
    return res.records, [load_pixels(r, base) for r in res.records], res.categories


# ------------------------------------------------------------ subcommands


def cmd_generate(args):
    from .datamodel import ImageRecord, VideoClipRecord, write_unified
    from .config import _build
    from .synthetic import SyntheticSceneSpec, generate_synthetic

    spec_dict = {}
    if args.spec:
        spec_dict = yaml.safe_load(Path(args.spec).read_text()) or {}
    spec = _build(SyntheticSceneSpec, spec_dict)
    data = generate_synthetic(spec, args.seed, args.count)
    out = _out_dir(args)
    (out / "pixels").mkdir(exist_ok=True)
    records = []
    for rec, pix in zip(data.records, data.images):
        if isinstance(rec, VideoClipRecord):
            frames = []
            for f, p in zip(rec.frames, pix):
                name = f"pixels/{f.image_id}.npy"
                np.save(out / name, p)
                frames.append(dataclasses.replace(f, file=name))
            records.append(VideoClipRecord(rec.clip_id, tuple(frames)))
        else:
            name = f"pixels/{rec.image_id}.npy"
            np.save(out / name, pix)
            records.append(dataclasses.replace(rec, file=name))
    write_unified(out / "records.jsonl", records, data.categories)
    print(json.dumps({"records": len(records), "out": str(out / "records.jsonl")}))
    return 0


def cmd_train(args):
    from .config import dump_config, load_config
    from .engine import train

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, optim=dataclasses.replace(cfg.optim, steps=args.steps))
    out = _out_dir(args)
    dump_config(cfg, out / "config.yaml")
    res = train(cfg, out)
    print(json.dumps({"checkpoint": str(res.checkpoint), "metrics": str(out / "metrics.jsonl"), "steps": cfg.optim.steps}))
    return 0


def cmd_eval_det(args):
    from .engine import load_checkpoint
    from .evaluation import eval_detection, mean_ap

    _, model, student, _ = load_checkpoint(args.checkpoint)
    records, images, cats = _load_dataset(args.data)
    res = eval_detection(model, student, records, images, cats)
    summary = {kind: {thr: mean_ap(v) for thr, v in d.items()} for kind, d in res.items()}
    report = {"per_category": res, "mean": summary}
    _emit(report, args)
    return 0


def cmd_eval_track(args):
    from .engine import load_checkpoint
    from .evaluation import eval_tracking

    _, model, student, _ = load_checkpoint(args.checkpoint)
    clips, images, cats = _load_dataset(args.data)
    rep = eval_tracking(model, student, clips, images, cats, score_threshold=args.score_threshold)
    _emit(
        {
            "identity_accuracy": rep.identity_accuracy,
            "association_precision": rep.association_precision,
            "association_recall": rep.association_recall,
        },
        args,
    )
    return 0


def cmd_prompt_segment(args):
    from .engine import load_checkpoint
    from .evaluation import prompt_segment
    from .visual_prompter import parse_prompt

    _, model, _, _ = load_checkpoint(args.checkpoint)
    image = np.load(args.image).astype(np.float32)
    res = prompt_segment(model, image, parse_prompt(args.prompt))
    report = {"confidence": res.confidence, "query": res.query, "low_confidence": res.low_confidence, "area": int(res.mask.sum())}
    if args.out_dir:
        out = _out_dir(args)
        np.save(out / "mask.npy", res.mask)
        report["mask"] = str(out / "mask.npy")
    print(json.dumps(report))
    return 0


def cmd_ingest(args):
    from .data_pipeline import ingest
    from .datamodel import write_unified

    res = ingest(args.format, args.inp)
    write_unified(args.out, res.records, res.categories, res.descriptor)
    for line, obj, reason in res.rejections:
        print(f"rejected line {line} object {obj}: {reason}", file=sys.stderr)
    print(json.dumps({"records": len(res.records), "annotations_in": res.input_annotations, "annotations_out": res.output_annotations, "rejected": len(res.rejections)}))
    return 0


def cmd_sample_plan(args):
    from .config import load_config
    from .data_pipeline import build_sampling_plan, write_plan

    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    plan = build_sampling_plan([d.descriptor() for d in cfg.datasets], seed, args.steps)
    write_plan(args.out, plan)
    counts = {d.name: plan.names.count(d.name) for d in cfg.datasets}
    print(json.dumps({"steps": len(plan), "counts": counts}))
    return 0


def cmd_filter_parts(args):
    from .data_pipeline import filter_part_level
    from .datamodel import ImageRecord, read_unified, write_unified

    uf = read_unified(args.inp)
    out, before, after = [], 0, 0
    for rec in uf.records:
        if not isinstance(rec, ImageRecord):
            out.append(rec)
            continue
        with_mask = [i for i, a in enumerate(rec.annotations) if a.mask is not None]
        keep = set(with_mask[k] for k in filter_part_level([rec.annotations[i].mask for i in with_mask], args.iou))
        anns = tuple(a for i, a in enumerate(rec.annotations) if a.mask is None or i in keep)
        before += len(rec.annotations)
        after += len(anns)
        out.append(dataclasses.replace(rec, annotations=anns))
    write_unified(args.out, out, uf.categories, uf.descriptor)
    print(json.dumps({"annotations_in": before, "annotations_out": after}))
    return 0


def _emit(report, args):
    text = json.dumps(report, indent=2, default=float)
    if getattr(args, "out_dir", None):
        (_out_dir(args) / "eval.json").write_text(text + "\n")
    print(text)


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unipercept", description="Unified object perception toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", help="write a synthetic dataset (unified records + pixel arrays)")
    s.add_argument("--spec", help="YAML scene spec; defaults when omitted")
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("train", help="run training from a YAML config")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int, help="override optim.steps")
    s.add_argument("--out-dir", default="runs/train")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval-det", help="box / mask AP per category")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="unified records file")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_eval_det)

    s = sub.add_parser("eval-track", help="identity accuracy on video clips")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--score-threshold", type=float, default=0.3)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_eval_track)

    s = sub.add_parser("prompt-segment", help="segment the object designated by a visual prompt")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True, help=".npy array [3, H, W]")
    s.add_argument("--prompt", required=True, help="point:x,y | box:cx,cy,w,h | scribble:x1,y1;x2,y2;... | mask:<file>")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_prompt_segment)

    s = sub.add_parser("ingest", help="convert a source annotation file into unified records")
    s.add_argument("--format", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("sample-plan", help="write the per-step dataset draw sequence")
    s.add_argument("--config", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample_plan)

    s = sub.add_parser("filter-parts", help="drop part-level masks by area-scored mask NMS")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--iou", type=float, default=0.7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_filter_parts)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
