"""Training objectives, bipartite matching and per-dataset loss composition."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels
from .datamodel import DatasetDescriptor
from .text_branch import distillation_loss

REPORT_KEYS = (
    "semantic",
    "box_l1",
    "box_giou",
    "mask_dice",
    "mask_focal",
    "confidence",
    "tracking",
    "distillation",
)
# report key -> loss_mask entry that switches it on
_KEY_TO_LOSS = {
    "semantic": "semantic",
    "box_l1": "box",
    "box_giou": "box",
    "mask_dice": "mask",
    "mask_focal": "mask",
    "confidence": "confidence",
    "tracking": "tracking",
    "distillation": "distillation",
}


class MissingAnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    dice: float = 5.0
    mask_focal: float = 5.0
    conf: float = 2.0
    track: float = 2.0
    distill: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_eps: float = 1.0

    def for_key(self, key: str) -> float:
        return {
            "semantic": self.cls,
            "box_l1": self.l1,
            "box_giou": self.giou,
            "mask_dice": self.dice,
            "mask_focal": self.mask_focal,
            "confidence": self.conf,
            "tracking": self.track,
            "distillation": self.distill,
        }[key]


# ------------------------------------------------------------ elementary


def focal_loss(logits, targets, alpha=0.25, gamma=2.0, reduction="mean"):
    """Sigmoid focal loss; ``reduction`` is "mean", "sum" or "none"."""
    targets = targets.to(logits.dtype)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    loss = alpha_t * (1 - p_t) ** gamma * ce
    if reduction == "mean":
        return loss.mean() if loss.numel() else loss.sum()
    if reduction == "sum":
        return loss.sum()
    return loss


def box_cxcywh_to_xyxy(b):
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def giou(box_a, box_b):
    """Generalized IoU of aligned ``(cx, cy, w, h)`` boxes (broadcasting over leading dims)."""
    a = box_cxcywh_to_xyxy(box_a)
    b = box_cxcywh_to_xyxy(box_b)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    union = area_a + area_b - inter
    hull = (torch.maximum(a[..., 2], b[..., 2]) - torch.minimum(a[..., 0], b[..., 0])) * (
        torch.maximum(a[..., 3], b[..., 3]) - torch.minimum(a[..., 1], b[..., 1])
    )
    return inter / union - (hull - union) / hull


def pairwise_giou(boxes_a, boxes_b):
    return giou(boxes_a[:, None, :], boxes_b[None, :, :])


def box_loss(pred, gt):
    """(mean |pred - gt| over coords and pairs, mean 1 - GIoU over pairs)."""
    if pred.numel() == 0:
        zero = pred.sum()
        return zero, zero
    l1 = (pred - gt).abs().mean()
    giou_term = (1 - giou(pred, gt)).mean()
    return l1, giou_term


def dice_loss(probs, gt, eps=1.0):
    """``1 - (2 sum(pg) + eps) / (sum(p) + sum(g) + eps)`` per mask, averaged over a leading batch dim if present."""
    if probs.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(gt.shape)}")
    gt = gt.to(probs.dtype)
    if probs.dim() <= 2:
        return 1 - (2 * (probs * gt).sum() + eps) / (probs.sum() + gt.sum() + eps)
    p = probs.flatten(1)
    g = gt.flatten(1)
    loss = 1 - (2 * (p * g).sum(-1) + eps) / (p.sum(-1) + g.sum(-1) + eps)
    return loss.mean()


def contrastive_tracking_loss(v, positives, negatives):
    """``log(1 + sum_{k+} sum_{k-} exp(v.k- - v.k+))`` with raw dot products."""
    if negatives.shape[0] == 0:
        return v.new_zeros(()) + v.sum() * 0.0  # +0.0, still attached to the graph
    if positives.shape[0] == 0:
        raise ValueError("contrastive loss undefined with negatives but no positives")
    pos = positives @ v
    neg = negatives @ v
    diff = neg[None, :] - pos[:, None]
    lse = torch.logsumexp(diff.reshape(-1), dim=0)
    return torch.logaddexp(torch.zeros_like(lse), lse)


# -------------------------------------------------------------- matching


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple  # ((query, target), ...) sorted by query
    unmatched: tuple

    @property
    def queries(self):
        return [q for q, _ in self.pairs]

    @property
    def targets(self):
        return [t for _, t in self.pairs]


def hungarian_match(cost) -> MatchResult:
    """Minimum-cost assignment of every target (column) to a distinct query (row)."""
    cost = np.asarray(cost.detach().cpu() if torch.is_tensor(cost) else cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be 2-D")
    n, t = cost.shape
    if t > n:
        raise ValueError(f"more targets ({t}) than queries ({n})")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    if t == 0:
        return MatchResult((), tuple(range(n)))
    query_of_target = kernels.linear_assignment(np.ascontiguousarray(cost.T))
    pairs = tuple(sorted((int(q), j) for j, q in enumerate(query_of_target)))
    used = {q for q, _ in pairs}
    return MatchResult(pairs, tuple(i for i in range(n) if i not in used))


def _focal_class_cost(logits, alpha, gamma):
    """Per-cell cost of calling a logit positive: focal(pos) - focal(neg)."""
    p = torch.sigmoid(logits)
    neg = (1 - alpha) * p**gamma * F.softplus(logits)  # -log(1-p) = softplus(x)
    pos = alpha * (1 - p) ** gamma * F.softplus(-logits)  # -log(p) = softplus(-x)
    return pos - neg


def build_match_cost(outputs: dict, targets: dict, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Cost ``[N, T]`` for one image.

    ``outputs`` has ``boxes [N,4]`` and optionally ``s_align [N,K]``,
    ``confidence_logits [N]`` and ``mask_logits [N,h,w]``; ``targets`` has
    ``boxes [T,4]`` and optionally ``labels [T]`` and ``masks [T,h,w]``
    (already at the logits' resolution). The class slot uses alignment
    logits when labels are given, otherwise confidence logits when present.
    """
    pred_boxes = outputs["boxes"]
    gt_boxes = targets["boxes"]
    n, t = pred_boxes.shape[0], gt_boxes.shape[0]
    cost = pred_boxes.new_zeros(n, t)
    a, g = weights.focal_alpha, weights.focal_gamma
    labels = targets.get("labels")
    if weights.cls and labels is not None and t:
        s_align = outputs["s_align"]
        if labels.numel() and (labels.min() < 0 or labels.max() >= s_align.shape[1]):
            raise IndexError("target label column out of range for S_align")
        cost = cost + weights.cls * _focal_class_cost(s_align[:, labels], a, g)
    elif weights.cls and outputs.get("confidence_logits") is not None and t:
        conf = outputs["confidence_logits"]
        cost = cost + weights.cls * _focal_class_cost(conf, a, g)[:, None].expand(n, t)
    if t:
        cost = cost + weights.l1 * (pred_boxes[:, None, :] - gt_boxes[None, :, :]).abs().mean(-1)
        cost = cost + weights.giou * (1 - pairwise_giou(pred_boxes, gt_boxes))
    gt_masks = targets.get("masks")
    if gt_masks is not None and outputs.get("mask_logits") is not None and t:
        logits = outputs["mask_logits"].flatten(1)
        gm = gt_masks.flatten(1).to(logits.dtype)
        p = torch.sigmoid(logits)
        if weights.dice:
            num = 2 * p @ gm.T + weights.dice_eps
            den = p.sum(-1)[:, None] + gm.sum(-1)[None, :] + weights.dice_eps
            cost = cost + weights.dice * (1 - num / den)
        if weights.mask_focal:
            pos = a * (1 - p) ** g * F.softplus(-logits)
            neg = (1 - a) * p**g * F.softplus(logits)
            hw = logits.shape[1]
            cost = cost + weights.mask_focal * (pos @ gm.T + neg @ (1 - gm).T) / hw
    return cost


# ---------------------------------------------------------- composition


@dataclass
class ImageTargets:
    boxes: torch.Tensor  # [T, 4]
    labels: Optional[torch.Tensor] = None  # [T] columns of this image's S_align
    masks: Optional[torch.Tensor] = None  # [T, H, W] full resolution, {0,1}
    track_ids: Optional[Sequence[int]] = None
    num_text: int = 0  # valid S_align columns for this image

    def __len__(self):
        return self.boxes.shape[0]


@dataclass
class LossReport:
    terms: dict  # key -> scalar tensor, active terms only
    total: torch.Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    def scalars(self) -> dict:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


def _downsample_masks(masks, size):
    if masks.shape[-2:] == tuple(size):
        return masks.float()
    return F.adaptive_avg_pool2d(masks.float()[None], size)[0]


def _layer_outputs(out, i):
    return {
        "boxes": out.boxes[i],
        "s_align": out.s_align[i],
        "mask_logits": out.mask_logits[i],
        "confidence_logits": None if out.confidence_logits is None else out.confidence_logits[i],
    }


def match_layer(out, targets: Sequence[ImageTargets], descriptor: DatasetDescriptor, weights: LossWeights):
    """Hungarian matching of every image in the batch for one decoder layer."""
    use_masks = "mask" in descriptor.loss_mask
    use_labels = "semantic" in descriptor.loss_mask
    matches = []
    with torch.no_grad():
        for i, tg in enumerate(targets):
            o = _layer_outputs(out, i)
            k = tg.num_text
            o["s_align"] = o["s_align"][:, :k]
            if "confidence" not in descriptor.loss_mask:
                o["confidence_logits"] = None
            t = {"boxes": tg.boxes}
            if use_labels and tg.labels is not None:
                t["labels"] = tg.labels
            if use_masks and tg.masks is not None and len(tg):
                t["masks"] = _downsample_masks(tg.masks, o["mask_logits"].shape[-2:])
            else:
                o["mask_logits"] = None
            matches.append(hungarian_match(build_match_cost(o, t, weights)))
    return matches


def _check_annotations(descriptor, targets):
    for tg in targets:
        if not len(tg):
            continue
        if "mask" in descriptor.loss_mask and tg.masks is None:
            raise MissingAnnotationError("mask loss requested but targets carry no masks")
        if "semantic" in descriptor.loss_mask and tg.labels is None:
            raise MissingAnnotationError("semantic loss requested but targets carry no labels")
        if "tracking" in descriptor.loss_mask and tg.track_ids is None:
            raise MissingAnnotationError("tracking loss requested but targets carry no track ids")


def _layer_terms(out, targets, matches, descriptor, weights):
    a, g = weights.focal_alpha, weights.focal_gamma
    num_t = max(sum(len(t) for t in targets), 1)
    terms = {}
    dev = out.boxes.device
    if "semantic" in descriptor.loss_mask:
        total = out.boxes.new_zeros(())
        for i, (tg, m) in enumerate(zip(targets, matches)):
            logits = out.s_align[i, :, : tg.num_text]
            tgt = torch.zeros_like(logits)
            if len(m.pairs) and tg.labels is not None:
                q = torch.tensor(m.queries, device=dev)
                tgt[q, tg.labels[torch.tensor(m.targets, device=dev)]] = 1.0
            total = total + focal_loss(logits, tgt, a, g, reduction="sum")
        terms["semantic"] = total / num_t
    if "confidence" in descriptor.loss_mask:
        if out.confidence_logits is None:
            raise MissingAnnotationError("confidence loss requested on an unprompted forward pass")
        total = out.boxes.new_zeros(())
        for i, m in enumerate(matches):
            tgt = torch.zeros_like(out.confidence_logits[i])
            if len(m.pairs):
                tgt[torch.tensor(m.queries, device=dev)] = 1.0
            total = total + focal_loss(out.confidence_logits[i], tgt, a, g, reduction="sum")
        terms["confidence"] = total / num_t
    pred_b, gt_b, pred_m, gt_m = [], [], [], []
    for i, (tg, m) in enumerate(zip(targets, matches)):
        if not len(m.pairs):
            continue
        q = torch.tensor(m.queries, device=dev)
        t = torch.tensor(m.targets, device=dev)
        pred_b.append(out.boxes[i, q])
        gt_b.append(tg.boxes[t])
        if "mask" in descriptor.loss_mask:
            pred_m.append(out.mask_logits[i, q])
            gt_m.append(tg.masks[t].float())
    if "box" in descriptor.loss_mask:
        if pred_b:
            l1, gi = box_loss(torch.cat(pred_b), torch.cat(gt_b))
        else:
            l1 = gi = out.boxes.sum() * 0.0
        terms["box_l1"] = l1
        terms["box_giou"] = gi
    if "mask" in descriptor.loss_mask:
        if pred_m:
            logits = torch.cat(pred_m)
            gt = torch.cat(gt_m)
            logits = F.interpolate(logits[:, None], size=gt.shape[-2:], mode="bilinear", align_corners=False)[:, 0]
            terms["mask_dice"] = dice_loss(torch.sigmoid(logits), gt, weights.dice_eps)
            terms["mask_focal"] = focal_loss(logits, gt, a, g).mean()
        else:
            zero = out.mask_logits.sum() * 0.0
            terms["mask_dice"] = zero
            terms["mask_focal"] = zero
    return terms


def tracking_loss_for_pairs(q_d, targets, matches, frame_pairs):
    """Mean contrastive loss over objects visible in both frames of each pair, both directions."""
    losses = []
    for a, b in frame_pairs:
        ids_a = {tid: q for q, tid in ((q, targets[a].track_ids[t]) for q, t in matches[a].pairs)}
        ids_b = {tid: q for q, tid in ((q, targets[b].track_ids[t]) for q, t in matches[b].pairs)}
        shared = sorted(set(ids_a) & set(ids_b))
        for key_frame, ref_frame, key_ids, ref_ids in ((a, b, ids_a, ids_b), (b, a, ids_b, ids_a)):
            for tid in shared:
                v = q_d[key_frame, key_ids[tid]]
                pos = q_d[ref_frame, [ref_ids[tid]]]
                neg_q = [ref_ids[o] for o in sorted(ref_ids) if o != tid]
                neg = q_d[ref_frame, neg_q] if neg_q else q_d.new_zeros(0, q_d.shape[-1])
                losses.append(contrastive_tracking_loss(v, pos, neg))
    if not losses:
        return q_d.sum() * 0.0
    return torch.stack(losses).mean()


def compose_losses(
    descriptor: DatasetDescriptor,
    outputs,
    targets: Sequence[ImageTargets],
    match=None,
    weights: LossWeights = LossWeights(),
    frame_pairs: Sequence[tuple] = (),
    text_rows: Optional[tuple] = None,
) -> LossReport:
    """Activate the descriptor's losses over the final and auxiliary decoder layers.

    ``match`` is a list (one per layer, final layer last) of per-image
    ``MatchResult`` lists; it is computed when omitted. ``text_rows`` is
    ``(student, teacher)`` when the student text encoder ran this step.
    """
    _check_annotations(descriptor, targets)
    layers = list(outputs.aux) + [outputs]
    if match is None:
        match = [match_layer(o, targets, descriptor, weights) for o in layers]
    if len(match) != len(layers):
        raise ValueError("need one match list per decoder layer")
    terms: dict = {}
    for out, m in zip(layers, match):
        for k, v in _layer_terms(out, targets, m, descriptor, weights).items():
            terms[k] = terms[k] + v if k in terms else v
    if "tracking" in descriptor.loss_mask:
        terms["tracking"] = tracking_loss_for_pairs(outputs.q_d, targets, match[-1], frame_pairs)
    if text_rows is not None:
        terms["distillation"] = distillation_loss(*text_rows)
    ordered = {k: terms[k] for k in REPORT_KEYS if k in terms}
    total = sum(weights.for_key(k) * v for k, v in ordered.items())
    if not torch.is_tensor(total):
        total = outputs.boxes.sum() * 0.0
    return LossReport(ordered, total, weights)
