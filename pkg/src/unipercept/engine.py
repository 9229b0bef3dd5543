"""Joint training loop: plan-driven dataset draws, dynamic losses, checkpoints and metrics log."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .config import RunConfig, config_to_dict
from .data_pipeline import build_sampling_plan, frame_pair_indices, ingest
from .datamodel import ImageRecord, VideoClipRecord, decode_rle
from .decoder import UnifiedModel
from .losses import ImageTargets, compose_losses
from .synthetic import generate_synthetic
from .text_branch import StudentEncoder, TeacherEncoder, pad_category_list
from .visual_prompter import PromptSpec, point_from_box, prompt_from_mask

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class CheckpointMismatch(RuntimeError):
    pass


@dataclass
class TrainSource:
    name: str
    task: str
    descriptor: object
    records: list
    images: list
    categories: list
    category_pad: int = 100
    max_gap: int = 5


def build_sources(cfg: RunConfig) -> list[TrainSource]:
    sources = []
    for ds in cfg.datasets:
        if ds.synthetic is not None:
            data = generate_synthetic(ds.synthetic, ds.seed, ds.count)
            records, images, cats = data.records, data.images, data.categories
            desc = ds.descriptor()
        else:
            res = ingest("synthetic", ds.path)
            records, cats = res.records, res.categories
            images = [load_pixels(r, Path(ds.path).parent) for r in records]
            desc = ds.descriptor(res.descriptor.granularity)
        sources.append(TrainSource(ds.name, ds.task, desc, records, images, cats, ds.category_pad, ds.max_gap))
    return sources


def load_pixels(record, base: Path):
    if isinstance(record, VideoClipRecord):
        return np.stack([load_pixels(f, base) for f in record.frames])
    if record.file is None:
        raise ValueError(f"record {record.image_id} has no pixel file")
    return np.load(base / record.file).astype(np.float32)


# ----------------------------------------------------------------- batches


@dataclass
class Batch:
    images: torch.Tensor
    targets: list
    sentences: list  # per image: list of strings for its S_align columns
    prompts: Optional[list] = None
    frame_pairs: list = field(default_factory=list)
    records: list = field(default_factory=list)


def _targets_for(record: ImageRecord, labels, with_masks, num_text, track=False):
    anns = record.annotations
    boxes = torch.tensor([a.box.as_list() for a in anns], dtype=torch.float32).reshape(-1, 4)
    masks = None
    if with_masks:
        if anns:
            masks = torch.from_numpy(np.stack([decode_rle(a.mask) for a in anns]).astype(np.float32))
        else:
            masks = torch.zeros(0, record.height, record.width)
    return ImageTargets(
        boxes=boxes,
        labels=None if labels is None else torch.as_tensor(labels, dtype=torch.long).reshape(-1),
        masks=masks,
        track_ids=[a.track_id for a in anns] if track else None,
        num_text=num_text,
    )


def _category_columns(source: TrainSource, records, rng):
    """Category names for S_align columns and the id -> column map for this batch."""
    n = len(source.categories)
    if n > source.category_pad:
        positives = sorted({a.category_id for r in records for a in r.annotations})
        negatives = [c for c in range(n) if c not in set(positives)]
        ids = pad_category_list(positives, negatives, source.category_pad, rng)
    else:
        ids = list(range(n))
    return [source.categories[i] for i in ids], {c: j for j, c in enumerate(ids)}


def _prompt_for(record: ImageRecord, rng, background_prob=0.2):
    """Random prompt on one object (or on background); returns (prompt, annotation index or None)."""
    anns = record.annotations
    if not anns or rng.random() < background_prob:
        grid = np.zeros((record.height, record.width), dtype=bool)
        for a in anns:
            grid |= decode_rle(a.mask).astype(bool) if a.mask is not None else False
        free = np.argwhere(~grid)
        y, x = free[int(rng.integers(len(free)))]
        return PromptSpec("point", ((x + 0.5) / record.width, (y + 0.5) / record.height)), None
    idx = int(rng.integers(len(anns)))
    ann = anns[idx]
    kind = ("point", "box", "scribble", "mask")[int(rng.integers(4))]
    if ann.mask is None and kind in ("scribble", "mask"):
        kind = "box"
    if kind == "box":
        return PromptSpec("box", ann.box), idx
    if kind == "point":
        if ann.mask is None:
            return point_from_box(ann.box), idx
        ys, xs = np.nonzero(decode_rle(ann.mask))
        k = int(rng.integers(len(xs)))
        return PromptSpec("point", ((xs[k] + 0.5) / record.width, (ys[k] + 0.5) / record.height)), idx
    grid = decode_rle(ann.mask)
    if kind == "mask":
        return prompt_from_mask(grid), idx
    ys, xs = np.nonzero(grid)
    pick = rng.choice(len(xs), size=min(3, len(xs)), replace=False)
    pts = tuple(((xs[k] + 0.5) / record.width, (ys[k] + 0.5) / record.height) for k in sorted(pick))
    if len(pts) < 2:
        pts = pts + pts
    return PromptSpec("scribble", pts), idx


def make_batch(source: TrainSource, batch_size: int, rng) -> Batch:
    desc = source.descriptor
    with_masks = "mask" in desc.loss_mask or desc.granularity.has_mask
    if source.task == "video":
        n_clips = max(1, batch_size // 2)
        clip_idx = rng.choice(len(source.records), size=n_clips, replace=len(source.records) < n_clips)
        recs, pix, pairs = [], [], []
        for ci in clip_idx:
            clip = source.records[ci]
            i, j = frame_pair_indices(len(clip.frames), rng, source.max_gap)
            pairs.append((len(recs), len(recs) + 1))
            recs += [clip.frames[i], clip.frames[j]]
            pix += [source.images[ci][i], source.images[ci][j]]
    else:
        idx = rng.choice(len(source.records), size=min(batch_size, len(source.records)), replace=False)
        recs = [source.records[i] for i in idx]
        pix = [source.images[i] for i in idx]
        pairs = []
    images = torch.from_numpy(np.stack(pix))

    targets, sentences, prompts = [], [], None
    if source.task == "prompt":
        prompts = []
        for r in recs:
            pr, k = _prompt_for(r, rng)
            prompts.append(pr)
            sub = ImageRecord(r.image_id, r.height, r.width, r.channels, () if k is None else (r.annotations[k],))
            targets.append(_targets_for(sub, None, with_masks, 0))
            sentences.append([])
    elif source.task == "grounding":
        for r in recs:
            exprs = [a.expression for a in r.annotations]
            targets.append(_targets_for(r, list(range(len(exprs))), with_masks, len(exprs)))
            sentences.append(exprs)
    else:
        if source.task == "class_agnostic":
            names, colmap = ["object"], None
        else:
            names, colmap = _category_columns(source, recs, rng)
        for r in recs:
            if colmap is None:
                labels = [0] * len(r.annotations)
            else:
                labels = [colmap[a.category_id] for a in r.annotations]
            targets.append(_targets_for(r, labels, with_masks, len(names), track=source.task == "video"))
            sentences.append(list(names))
    return Batch(images, targets, sentences, prompts, pairs, recs)


def encode_text(sentences_per_image, student, dim):
    """Padded ``[B, K, D]`` text rows, validity mask and the unique sentences encoded."""
    unique = sorted({s for ss in sentences_per_image for s in ss})
    b = len(sentences_per_image)
    kmax = max((len(ss) for ss in sentences_per_image), default=0)
    if not unique:
        return torch.zeros(b, 0, dim), torch.zeros(b, 0, dtype=torch.bool), [], None
    rows = student(unique)
    index = {s: i for i, s in enumerate(unique)}
    text = rows.new_zeros(b, kmax, dim)
    valid = torch.zeros(b, kmax, dtype=torch.bool)
    for i, ss in enumerate(sentences_per_image):
        if ss:
            text[i, : len(ss)] = rows[torch.tensor([index[s] for s in ss])]
            valid[i, : len(ss)] = True
    return text, valid, unique, rows


# ---------------------------------------------------------------- training


def build_models(cfg: RunConfig):
    torch.manual_seed(cfg.seed)
    model = UnifiedModel(cfg.model)
    student = StudentEncoder(cfg.model.text_dim, cfg.model.vocab_size, cfg.model.text_layers)
    teacher = TeacherEncoder(cfg.model.text_dim, cfg.model.vocab_size, seed=cfg.teacher_seed)
    return model, student, teacher


def make_optimizer(cfg: RunConfig, model, student):
    o = cfg.optim
    backbone = list(model.backbone.parameters())
    ids = {id(p) for p in backbone}
    rest = [p for p in model.parameters() if id(p) not in ids]
    groups = [
        {"params": rest, "lr": o.lr, "base_lr": o.lr},
        {"params": backbone, "lr": o.lr * o.backbone_lr_mult, "base_lr": o.lr * o.backbone_lr_mult},
    ]
    if cfg.stage != "pretrain":
        t = o.lr * o.text_lr_mult
        groups.append({"params": list(student.parameters()), "lr": t, "base_lr": t})
    return torch.optim.AdamW(groups, lr=o.lr, weight_decay=o.weight_decay)


def lr_factor(cfg: RunConfig, step: int) -> float:
    o = cfg.optim
    return o.decay_factor if step >= int(o.decay_at * o.steps) else 1.0


def save_checkpoint(path, cfg: RunConfig, model, student, step: int) -> None:
    torch.save(
        {
            "config_hash": cfg.model_hash(),
            "config": config_to_dict(cfg),
            "step": step,
            "model": model.state_dict(),
            "student": student.state_dict(),
        },
        path,
    )


def load_checkpoint(path, cfg: Optional[RunConfig] = None):
    """Rebuild ``(cfg, model, student, teacher)``; refuses a checkpoint whose model hash differs from ``cfg``."""
    from .config import config_from_dict

    blob = torch.load(path, map_location="cpu", weights_only=False)
    saved_cfg = config_from_dict(blob["config"])
    if saved_cfg.model_hash() != blob["config_hash"]:
        raise CheckpointMismatch("checkpoint is internally inconsistent")
    if cfg is not None and cfg.model_hash() != blob["config_hash"]:
        raise CheckpointMismatch(
            f"config hash {cfg.model_hash()} does not match checkpoint {blob['config_hash']}"
        )
    cfg = cfg or saved_cfg
    model, student, teacher = build_models(cfg)
    model.load_state_dict(blob["model"])
    student.load_state_dict(blob["student"])
    model.eval()
    student.eval()
    return cfg, model, student, teacher


@dataclass
class TrainResult:
    cfg: RunConfig
    model: UnifiedModel
    student: StudentEncoder
    teacher: TeacherEncoder
    sources: list
    log_lines: list
    checkpoint: Optional[Path] = None


def format_metrics(step: int, dataset: str, lr: float, scalars: dict) -> str:
    return json.dumps({"step": step, "dataset": dataset, "lr": lr, **scalars})


def train(cfg: RunConfig, out_dir=None, sources=None, on_step: Optional[Callable] = None) -> TrainResult:
    """Run ``cfg.optim.steps`` steps and write ``checkpoint.pt`` and ``metrics.jsonl`` under ``out_dir``."""
    cfg.validate()
    sources = sources if sources is not None else build_sources(cfg)
    by_name = {s.name: s for s in sources}
    model, student, teacher = build_models(cfg)
    model.train()
    student.train()
    opt = make_optimizer(cfg, model, student)
    plan = build_sampling_plan([s.descriptor for s in sources], cfg.seed, cfg.optim.steps)
    rng = np.random.default_rng([cfg.seed, 1])
    teacher_cache: dict = {}
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.jsonl", "w")
    lines = []
    params = [p for g in opt.param_groups for p in g["params"]]
    try:
        for step, name in enumerate(plan.names):
            src = by_name[name]
            factor = lr_factor(cfg, step)
            for g in opt.param_groups:
                g["lr"] = g["base_lr"] * factor
            batch = make_batch(src, cfg.optim.batch_size, rng)
            desc = src.descriptor
            loss_mask = cfg.effective_loss_mask(desc)
            if loss_mask != desc.loss_mask:
                from dataclasses import replace

                desc = replace(desc, loss_mask=loss_mask)
            if cfg.stage == "pretrain":
                with torch.no_grad():
                    text, valid, unique, rows = encode_text(batch.sentences, student, cfg.model.text_dim)
                text_rows = None
            else:
                text, valid, unique, rows = encode_text(batch.sentences, student, cfg.model.text_dim)
                text_rows = None
                if rows is not None and "distillation" in desc.loss_mask:
                    for s in unique:
                        if s not in teacher_cache:
                            teacher_cache[s] = torch.as_tensor(teacher.encode(s), dtype=torch.float32)
                    text_rows = (rows, torch.stack([teacher_cache[s] for s in unique]))
            out = model(batch.images, text, valid, batch.prompts, rng)
            report = compose_losses(desc, out, batch.targets, weights=cfg.loss_weights, frame_pairs=batch.frame_pairs, text_rows=text_rows)
            if not torch.isfinite(report.total):
                if out_dir is not None:
                    save_checkpoint(out_dir / "checkpoint.pt", cfg, model, student, step)
                raise TrainingDiverged(f"non-finite loss at step {step} ({name})")
            opt.zero_grad()
            report.total.backward()
            if cfg.optim.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.optim.grad_clip)
            opt.step()
            if step % cfg.log_every == 0 or step == cfg.optim.steps - 1:
                line = format_metrics(step, name, opt.param_groups[0]["lr"], report.scalars())
                lines.append(line)
                if log_fh is not None:
                    log_fh.write(line + "\n")
            if on_step is not None:
                on_step(step, name, report)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    student.eval()
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "checkpoint.pt"
        save_checkpoint(ckpt, cfg, model, student, cfg.optim.steps)
    return TrainResult(cfg, model, student, teacher, sources, lines, ckpt)
