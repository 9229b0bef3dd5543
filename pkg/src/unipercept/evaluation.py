"""Inference helpers and desk-scale metrics (11-point AP, identity accuracy, prompted masks)."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .association import Detection, QueryTracker, SelectionState, propagate_vos, select_referred_query
from .datamodel import Box, decode_rle
from .engine import encode_text
from .losses import hungarian_match
from .visual_prompter import PromptSpec, prompt_from_mask

# ------------------------------------------------------------------ basics


def box_iou_xyxy(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _box_iou(a, b) -> float:
    return box_iou_xyxy(Box(*a).to_xyxy(), Box(*b).to_xyxy())


def _mask_iou_dense(a, b) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union else 0.0


def average_precision_11(scores: Sequence[float], matched: Sequence[bool], num_gt: int) -> float:
    """11-point interpolated AP from score-ranked true/false positive flags."""
    if num_gt == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(matched, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    total = 0.0
    for r in np.linspace(0, 1, 11):
        p = precision[recall >= r - 1e-12]
        total += p.max() if len(p) else 0.0
    return float(total / 11)


def match_detections(preds, gts, iou_fn, threshold):
    """Greedy score-ordered matching; returns a true-positive flag per prediction."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i]["score"])
    used = set()
    flags = [False] * len(preds)
    for i in order:
        best, best_j = threshold, None
        for j, g in enumerate(gts):
            if j in used:
                continue
            v = iou_fn(preds[i], g)
            if v >= best:
                best, best_j = v, j
        if best_j is not None:
            used.add(best_j)
            flags[i] = True
    return flags


def detection_ap(predictions, ground_truth, categories, thresholds=(0.5, 0.75), kind="box"):
    """Per-category 11-point AP.

    ``predictions[i]`` / ``ground_truth[i]`` are lists of dicts for image i
    with ``category``, ``box`` (cx, cy, w, h) and, for ``kind="mask"``, a
    boolean ``mask``; predictions also carry ``score``.
    """
    if kind == "box":
        iou_fn = lambda p, g: _box_iou(p["box"], g["box"])  # noqa: E731
    else:
        iou_fn = lambda p, g: _mask_iou_dense(p["mask"], g["mask"])  # noqa: E731
    result = {}
    for thr in thresholds:
        per_cat = {}
        for c in range(len(categories)):
            scores, flags, n_gt = [], [], 0
            for preds, gts in zip(predictions, ground_truth):
                pc = [p for p in preds if p["category"] == c]
                gc = [g for g in gts if g["category"] == c]
                n_gt += len(gc)
                scores += [p["score"] for p in pc]
                flags += match_detections(pc, gc, iou_fn, thr)
            per_cat[categories[c]] = average_precision_11(scores, flags, n_gt)
        result[f"AP{int(round(thr * 100))}"] = per_cat
    return result


def mean_ap(per_cat: dict) -> float:
    vals = [v for v in per_cat.values() if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


# --------------------------------------------------------------- inference


def upsample_logits(mask_logits, size):
    return F.interpolate(mask_logits[:, None], size=size, mode="bilinear", align_corners=False)[:, 0]


@torch.no_grad()
def predict(model, student, images, sentences_per_image, prompts=None, top_k=None):
    """Per-image query predictions: category (argmax over text columns), sigmoid score, box, mask, embedding."""
    text, valid, _, _ = encode_text(sentences_per_image, student, model.cfg.text_dim)
    out = model(images, text, valid, prompts)
    size = images.shape[-2:]
    results = []
    for i in range(images.shape[0]):
        k = int(valid[i].sum()) if valid.numel() else 0
        s = out.s_align[i, :, :k]
        if k:
            logit, cat = s.max(dim=1)
            score = torch.sigmoid(logit)
        else:
            cat = torch.zeros(s.shape[0], dtype=torch.long)
            score = out.confidence[i] if out.confidence is not None else torch.ones(s.shape[0])
        masks = upsample_logits(out.mask_logits[i], size) > 0
        order = torch.argsort(score, descending=True, stable=True)
        if top_k is not None:
            order = order[:top_k]
        preds = []
        for q in order.tolist():
            preds.append(
                {
                    "query": q,
                    "category": int(cat[q]),
                    "score": float(score[q]),
                    "box": out.boxes[i, q].tolist(),
                    "mask": masks[q].numpy(),
                    "embedding": out.q_d[i, q].numpy(),
                    "s_align": s[q].numpy(),
                    "confidence": None if out.confidence is None else float(out.confidence[i, q]),
                }
            )
        results.append(preds)
    return results, out


def _gt_dicts(record):
    out = []
    for a in record.annotations:
        out.append(
            {
                "category": a.category_id if a.category_id is not None else 0,
                "box": a.box.as_list(),
                "mask": None if a.mask is None else decode_rle(a.mask).astype(bool),
                "track_id": a.track_id,
                "expression": a.expression,
            }
        )
    return out


def eval_detection(model, student, records, images, categories, batch_size=8, thresholds=(0.5, 0.75)):
    """Box and mask AP per category at the given IoU thresholds."""
    preds_all, gts_all = [], []
    names = list(categories)
    for s in range(0, len(records), batch_size):
        imgs = torch.from_numpy(np.stack(images[s : s + batch_size]))
        preds, _ = predict(model, student, imgs, [names] * imgs.shape[0])
        preds_all += preds
        gts_all += [_gt_dicts(r) for r in records[s : s + batch_size]]
    out = {"box": detection_ap(preds_all, gts_all, names, thresholds, "box")}
    if all(g["mask"] is not None for gts in gts_all for g in gts):
        out["mask"] = detection_ap(preds_all, gts_all, names, thresholds, "mask")
    return out


# ---------------------------------------------------------------- grounding


def eval_grounding(model, student, records, images, iou_threshold=0.5, batch_size=8):
    """Fraction of expressions whose top-scoring query box overlaps the referent at ``iou_threshold``."""
    hits = total = 0
    for s in range(0, len(records), batch_size):
        recs = records[s : s + batch_size]
        imgs = torch.from_numpy(np.stack(images[s : s + batch_size]))
        sents = [[a.expression for a in r.annotations] for r in recs]
        text, valid, _, _ = encode_text(sents, student, model.cfg.text_dim)
        with torch.no_grad():
            out = model(imgs, text, valid)
        for i, r in enumerate(recs):
            for k, a in enumerate(r.annotations):
                q = select_referred_query(out.s_align[i, :, k].numpy(), SelectionState(), out.q_d[i].numpy())
                hits += _box_iou(out.boxes[i, q].tolist(), a.box.as_list()) >= iou_threshold
                total += 1
    return hits / total if total else float("nan")


# ----------------------------------------------------------------- tracking


def identity_accuracy(gt_ids_per_frame, assigned_per_frame) -> float:
    """Fraction of ground-truth detections carrying their identity's majority track id.

    ``gt_ids_per_frame[t]`` lists ground-truth identities present in frame t;
    ``assigned_per_frame[t]`` the predicted track id for each (``None`` when
    missed, which always counts as wrong).
    """
    votes = defaultdict(Counter)
    for gts, ids in zip(gt_ids_per_frame, assigned_per_frame):
        for g, tid in zip(gts, ids):
            if tid is not None:
                votes[g][tid] += 1
    majority = {g: c.most_common(1)[0][0] for g, c in votes.items()}
    total = correct = 0
    for gts, ids in zip(gt_ids_per_frame, assigned_per_frame):
        for g, tid in zip(gts, ids):
            total += 1
            correct += tid is not None and majority.get(g) == tid
    return correct / total if total else float("nan")


@dataclass
class TrackingReport:
    identity_accuracy: float
    association_precision: float
    association_recall: float
    frames: list  # per clip, per frame: list of (track_id, box, mask, category, score)


def _associate_gt(gts, dets, threshold=0.5):
    """Assign each ground-truth object a detection index by maximum IoU (>= threshold).

    Mask IoU when both sides carry masks, box IoU otherwise.
    """
    if not gts or not dets:
        return [None] * len(gts)
    use_mask = all(g["mask"] is not None for g in gts) and all(d.get("mask") is not None for d in dets)
    iou_fn = (lambda d, g: _mask_iou_dense(d["mask"], g["mask"])) if use_mask else (lambda d, g: _box_iou(d["box"], g["box"]))
    iou = np.array([[iou_fn(d, g) for d in dets] for g in gts])
    if len(dets) >= len(gts):
        pairs = hungarian_match(-iou.T).pairs  # rows = dets, cols = gts
        assign = {g: d for d, g in pairs}
    else:
        pairs = hungarian_match(-iou).pairs
        assign = {g: d for g, d in pairs}
    return [assign.get(j) if assign.get(j) is not None and iou[j, assign[j]] >= threshold else None for j in range(len(gts))]


def track_clip(frames_preds, score_threshold=0.3, tracker: Optional[QueryTracker] = None):
    """Run association over one clip's per-frame predictions; returns per-frame (detections, ids)."""
    tracker = tracker or QueryTracker()
    out = []
    for preds in frames_preds:
        dets = [p for p in preds if p["score"] >= score_threshold]
        ids = tracker.step([Detection(p["embedding"], p["score"], p["box"], p["mask"], p["category"]) for p in dets])
        out.append((dets, ids))
    return out


def _pairwise_association(gt_ids_per_frame, assigned_per_frame):
    """Pairwise precision/recall of "same identity" decisions over all detection pairs in a clip."""
    flat = [(g, t) for gts, ids in zip(gt_ids_per_frame, assigned_per_frame) for g, t in zip(gts, ids) if t is not None]
    tp = fp = fn = 0
    for i in range(len(flat)):
        for j in range(i + 1, len(flat)):
            same_gt = flat[i][0] == flat[j][0]
            same_pred = flat[i][1] == flat[j][1]
            tp += same_gt and same_pred
            fp += same_pred and not same_gt
            fn += same_gt and not same_pred
    return tp, fp, fn


def eval_tracking(model, student, clips, clip_images, categories, score_threshold=0.3, tracker_kwargs=None):
    """Detect per frame, associate by query embeddings, score identities against ground truth."""
    names = list(categories)
    all_gt, all_assigned, frames_out = [], [], []
    tp = fp = fn = 0
    for clip, pix in zip(clips, clip_images):
        preds, _ = predict(model, student, torch.from_numpy(np.asarray(pix)), [names] * len(clip.frames))
        tracked = track_clip(preds, score_threshold, QueryTracker(**(tracker_kwargs or {})))
        gt_ids, assigned, per_frame = [], [], []
        for rec, (dets, ids) in zip(clip.frames, tracked):
            gts = _gt_dicts(rec)
            match = _associate_gt(gts, dets)
            gt_ids.append([g["track_id"] for g in gts])
            assigned.append([None if m is None else ids[m] for m in match])
            per_frame.append([(ids[k], d["box"], d["mask"], d["category"], d["score"]) for k, d in enumerate(dets) if ids[k] is not None])
        a, b, c = _pairwise_association(gt_ids, assigned)
        tp, fp, fn = tp + a, fp + b, fn + c
        # identities are scoped per clip
        all_gt += [[(clip.clip_id, g) for g in frame] for frame in gt_ids]
        all_assigned += [[None if t is None else (clip.clip_id, t) for t in frame] for frame in assigned]
        frames_out.append(per_frame)
    return TrackingReport(
        identity_accuracy(all_gt, all_assigned),
        tp / (tp + fp) if tp + fp else float("nan"),
        tp / (tp + fn) if tp + fn else float("nan"),
        frames_out,
    )


# ---------------------------------------------------------------- prompting


@dataclass
class PromptResult:
    mask: np.ndarray
    confidence: float
    query: int
    low_confidence: bool


@torch.no_grad()
def prompt_segment(model, image, prompt: PromptSpec, threshold: float = 0.5) -> PromptResult:
    """Segment the prompted object: confidence argmax query, its mask thresholded at sigmoid 0.5."""
    img = torch.as_tensor(np.asarray(image))[None]
    out = model(img, None, None, [prompt], np.random.default_rng(0))
    conf = out.confidence[0]
    q = int(torch.argmax(conf))
    mask = (upsample_logits(out.mask_logits[0, q : q + 1], img.shape[-2:])[0] > 0).numpy()
    c = float(conf[q])
    return PromptResult(mask, c, q, c < threshold)


def vos_segmenter(model):
    """``segment(frame, prompt_mask)`` callable for :func:`propagate_vos`."""

    @torch.no_grad()
    def segment(frame, prompt_mask):
        img = torch.as_tensor(np.asarray(frame))[None]
        out = model(img, None, None, [prompt_from_mask(prompt_mask)], np.random.default_rng(0))
        masks = upsample_logits(out.mask_logits[0], img.shape[-2:]) > 0
        return out.confidence[0].numpy(), out.q_d[0].numpy(), masks.numpy()

    return segment


def run_vos(model, first_frame_mask, frames, lambda_temp: float = 1.0):
    return propagate_vos(first_frame_mask, frames, vos_segmenter(model), lambda_temp)
