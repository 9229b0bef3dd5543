"""Source ingestion, joint-sampling plans, frame-pair sampling and part-level mask filtering.

Source formats are JSON lines, one image (or clip) per line, with an
optional first line ``{"categories": [...]}``. Boxes are pixel
``[x, y, w, h]``; masks are uncompressed column-major RLE counts on the
image canvas.

==========================  =================================================
format id                   object fields
==========================  =================================================
``boxes+categories``        ``bbox``, ``category`` (name or index)
``boxes+masks+categories``  ``bbox``, ``category``, ``counts``
``expressions``             ``bbox``, ``expression``, optional ``counts``
``video-tracks``            per clip ``frames: [{objects: [...]}]``; objects
                            carry ``bbox``, ``category``, ``track_id``,
                            optional ``counts``
``class-agnostic-masks``    ``counts``, optional ``bbox``
``synthetic``               a unified file (``schema_version`` header)
==========================  =================================================
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datamodel import (
    Box,
    DatasetDescriptor,
    Granularity,
    ImageRecord,
    MaskRLE,
    ObjectAnnotation,
    VideoClipRecord,
    default_loss_mask,
    mask_iou,
    read_unified,
    validate_record,
)

log = logging.getLogger(__name__)

FORMATS = {
    "boxes+categories": Granularity(has_box=True, has_category=True),
    "boxes+masks+categories": Granularity(has_box=True, has_mask=True, has_category=True),
    "expressions": Granularity(has_box=True, has_expression=True),
    "video-tracks": Granularity(has_box=True, has_category=True, has_track=True),
    "class-agnostic-masks": Granularity(has_box=True, has_mask=True, class_agnostic=True),
    "synthetic": None,
}


class IngestError(ValueError):
    pass


@dataclass
class IngestResult:
    records: list
    categories: list
    descriptor: DatasetDescriptor
    rejections: list = field(default_factory=list)  # (line, object index, reason)
    input_annotations: int = 0

    @property
    def output_annotations(self) -> int:
        return sum(_count_annotations(r) for r in self.records)


def _count_annotations(rec) -> int:
    if isinstance(rec, VideoClipRecord):
        return sum(len(f.annotations) for f in rec.frames)
    return len(rec.annotations)


def _parse_mask(obj, h, w) -> Optional[MaskRLE]:
    counts = obj.get("counts")
    if counts is None:
        return None
    return MaskRLE(h, w, tuple(int(c) for c in counts))


def _parse_object(obj, h, w, fmt, categories):
    g = FORMATS[fmt]
    mask = _parse_mask(obj, h, w)
    if g.has_mask and not g.has_expression and mask is None:
        raise KeyError("counts")
    if "bbox" in obj:
        x, y, bw, bh = (float(v) for v in obj["bbox"])
        box = Box.from_pixel_xywh(x, y, bw, bh, h, w)
    elif mask is not None:
        box = mask.bbox() or Box(0.5, 0.5, 0.0, 0.0)
    else:
        raise KeyError("bbox")
    kw = {}
    if g.has_category:
        cat = obj["category"]
        if isinstance(cat, str):
            if cat not in categories:
                categories.append(cat)
            cat = categories.index(cat)
        kw["category_id"] = int(cat)
    elif g.has_expression:
        kw["expression"] = str(obj["expression"])
    elif g.class_agnostic:
        kw["is_class_agnostic"] = True
    if g.has_track:
        kw["track_id"] = int(obj["track_id"])
    return ObjectAnnotation(box=box, mask=mask, **kw)


def _build_image(d, fmt, categories, lineno, rejections, frame_tag=""):
    h, w = int(d["height"]), int(d["width"])
    anns = []
    objects = d.get("objects", [])
    for i, obj in enumerate(objects):
        ann = _parse_object(obj, h, w, fmt, categories)
        probe = ImageRecord("probe", h, w, 3, (ann,))
        bad = validate_record(probe)
        if bad:
            rejections.append((lineno, f"{frame_tag}{i}", "; ".join(bad)))
            log.warning("line %d object %s rejected: %s", lineno, f"{frame_tag}{i}", bad[0])
            continue
        anns.append(ann)
    return ImageRecord(str(d["image_id"]), h, w, int(d.get("channels", 3)), tuple(anns), d.get("file")), len(objects)


def ingest(fmt: str, path) -> IngestResult:
    """Read a source file into unified records.

    Objects that violate the schema are dropped *and* logged in
    ``rejections``; a line that cannot be parsed at all raises with its line
    number.
    """
    if fmt not in FORMATS:
        raise IngestError(f"unknown format {fmt!r}; expected one of {sorted(FORMATS)}")
    path = Path(path)
    if fmt == "synthetic":
        uf = read_unified(path)
        desc = uf.descriptor or DatasetDescriptor(path.stem)
        n = sum(_count_annotations(r) for r in uf.records)
        return IngestResult(uf.records, uf.categories, desc, [], n)
    granularity = FORMATS[fmt]
    categories: list = []
    records, rejections = [], []
    n_in = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                if lineno == 1 and "categories" in d and "image_id" not in d and "clip_id" not in d:
                    categories.extend(d["categories"])
                    continue
                if fmt == "video-tracks":
                    frames = []
                    for t, fd in enumerate(d["frames"]):
                        fd = {"height": d["height"], "width": d["width"], "image_id": f"{d['clip_id']}_f{t:03d}", **fd}
                        rec, k = _build_image(fd, fmt, categories, lineno, rejections, f"f{t}:")
                        frames.append(rec)
                        n_in += k
                    records.append(VideoClipRecord(str(d["clip_id"]), tuple(frames)))
                else:
                    rec, k = _build_image(d, fmt, categories, lineno, rejections)
                    records.append(rec)
                    n_in += k
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise IngestError(f"{path}:{lineno}: malformed line ({type(exc).__name__}: {exc})") from None
    desc = DatasetDescriptor(
        name=path.stem,
        granularity=granularity,
        sampling_ratio=1.0,
        loss_mask=default_loss_mask(granularity),
    )
    return IngestResult(records, categories, desc, rejections, n_in)


# --------------------------------------------------------------- sampling


@dataclass(frozen=True)
class SamplingPlan:
    names: tuple
    seed: int

    def __len__(self):
        return len(self.names)

    def __getitem__(self, i):
        return self.names[i]


def build_sampling_plan(descriptors: Sequence[DatasetDescriptor], seed: int, steps: int) -> SamplingPlan:
    """i.i.d. dataset draw per step with probability proportional to its ratio."""
    ratios = np.array([d.sampling_ratio for d in descriptors], dtype=np.float64)
    if len(ratios) == 0 or (ratios < 0).any():
        raise ValueError("sampling ratios must be non-negative")
    if ratios.sum() <= 0:
        raise ValueError("all sampling ratios are zero")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(ratios / ratios.sum())
    cdf[-1] = 1.0
    draws = np.searchsorted(cdf, rng.random(steps), side="right")
    names = [d.name for d in descriptors]
    return SamplingPlan(tuple(names[i] for i in draws), seed)


def write_plan(path, plan: SamplingPlan) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"seed": plan.seed, "steps": len(plan)}) + "\n")
        for name in plan.names:
            fh.write(name + "\n")


def read_plan(path) -> SamplingPlan:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    return SamplingPlan(tuple(lines[1:]), int(header["seed"]))


def frame_pair_indices(length: int, rng, max_gap: int = 5) -> tuple[int, int]:
    if length < 2:
        raise ValueError("clip needs at least 2 frames")
    if max_gap < 1:
        raise ValueError("max_gap must be >= 1")
    pairs = [(i, j) for i in range(length) for j in range(i + 1, min(length, i + max_gap + 1))]
    return pairs[int(rng.integers(len(pairs)))]


def sample_frame_pair(clip: VideoClipRecord, rng, max_gap: int = 5):
    """Two distinct frames at most ``max_gap`` apart, uniform over eligible pairs."""
    i, j = frame_pair_indices(len(clip.frames), rng, max_gap)
    return clip.frames[i], clip.frames[j]


def filter_part_level(masks: Sequence[MaskRLE], iou_threshold: float = 0.7) -> list[int]:
    """Greedy mask NMS scored by pixel area; returns kept indices in ascending order."""
    areas = [m.area for m in masks]
    order = sorted(range(len(masks)), key=lambda i: (-areas[i], i))
    kept: list[int] = []
    for i in order:
        if all(mask_iou(masks[i], masks[k]) <= iou_threshold for k in kept):
            kept.append(i)
    return sorted(kept)
