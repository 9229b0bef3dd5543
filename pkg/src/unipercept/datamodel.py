"""Unified annotation schema, box geometry and run-length mask coding.

Every source (detection, grounding, class-agnostic masks, video tracks,
synthetic scenes) is mapped onto these types. Boxes are stored as
normalized ``(cx, cy, w, h)``; corner conversions live in the helpers below.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import kernels

SCHEMA_VERSION = 1

LOSS_NAMES = ("semantic", "box", "mask", "confidence", "tracking", "distillation")
GRANULARITY_FLAGS = (
    "has_box",
    "has_mask",
    "has_category",
    "has_expression",
    "has_track",
    "class_agnostic",
)


class DegenerateMaskError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def to_xyxy(self) -> tuple[float, float, float, float]:
        """Corner form, clamped to the unit square."""
        return (
            _clamp01(self.cx - self.w / 2),
            _clamp01(self.cy - self.h / 2),
            _clamp01(self.cx + self.w / 2),
            _clamp01(self.cy + self.h / 2),
        )

    def to_pixels(self, height: int, width: int) -> tuple[float, float, float, float]:
        x0, y0, x1, y1 = self.to_xyxy()
        return (x0 * width, y0 * height, x1 * width, y1 * height)

    @classmethod
    def from_xyxy(cls, x0, y0, x1, y1) -> "Box":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    @classmethod
    def from_pixel_xywh(cls, x, y, w, h, height, width) -> "Box":
        return cls((x + w / 2) / width, (y + h / 2) / height, w / width, h / height)

    def as_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]


def _clamp01(v: float) -> float:
    return min(1.0, max(0.0, v))


@dataclass(frozen=True)
class MaskRLE:
    """Uncompressed run-length mask: column-major, first run is background."""

    height: int
    width: int
    counts: tuple[int, ...]

    def decode(self) -> np.ndarray:
        return decode_rle(self)

    @property
    def area(self) -> int:
        return kernels.rle_area(self.counts)

    def bbox(self) -> Optional[Box]:
        """Tight normalized box around the foreground, or None when empty."""
        grid = self.decode()
        ys, xs = np.nonzero(grid)
        if len(xs) == 0:
            return None
        x0, y0 = int(xs.min()), int(ys.min())
        return Box.from_pixel_xywh(x0, y0, int(xs.max()) + 1 - x0, int(ys.max()) + 1 - y0, self.height, self.width)


def encode_rle(grid) -> MaskRLE:
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.size == 0:
        raise DegenerateMaskError("degenerate mask")
    if not np.isin(grid, (0, 1)).all():
        raise ValueError("mask entries must be 0 or 1")
    h, w = grid.shape
    return MaskRLE(int(h), int(w), tuple(int(c) for c in kernels.rle_encode(grid.astype(np.uint8))))


def decode_rle(rle: MaskRLE) -> np.ndarray:
    return kernels.rle_decode(list(rle.counts), rle.height, rle.width)


def mask_iou(a: MaskRLE, b: MaskRLE) -> float:
    """Intersection over union of two run-length masks; 0 when both are empty."""
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError(
            f"mask shape mismatch: {(a.height, a.width)} vs {(b.height, b.width)}"
        )
    inter = kernels.rle_intersection(list(a.counts), list(b.counts))
    union = a.area + b.area - inter
    if union == 0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class ObjectAnnotation:
    box: Box
    mask: Optional[MaskRLE] = None
    category_id: Optional[int] = None
    expression: Optional[str] = None
    track_id: Optional[int] = None
    is_class_agnostic: bool = False


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    height: int
    width: int
    channels: int = 3
    annotations: tuple[ObjectAnnotation, ...] = ()
    # optional path to a .npy pixel array, relative to the unified file
    file: Optional[str] = None


@dataclass(frozen=True)
class VideoClipRecord:
    clip_id: str
    frames: tuple[ImageRecord, ...]


Record = Union[ImageRecord, VideoClipRecord]


@dataclass(frozen=True)
class Granularity:
    has_box: bool = True
    has_mask: bool = False
    has_category: bool = False
    has_expression: bool = False
    has_track: bool = False
    class_agnostic: bool = False


# which annotation a loss needs; semantic needs some label source
_LOSS_REQUIREMENTS = {
    "box": ("has_box",),
    "mask": ("has_mask",),
    "tracking": ("has_track",),
}


@dataclass(frozen=True)
class DatasetDescriptor:
    name: str
    granularity: Granularity = field(default_factory=Granularity)
    sampling_ratio: float = 1.0
    loss_mask: frozenset = frozenset({"semantic", "box", "distillation"})

    def loss_mask_violations(self) -> list[str]:
        out = []
        g = self.granularity
        for loss in sorted(self.loss_mask):
            if loss not in LOSS_NAMES:
                out.append(f"loss_mask: unknown loss {loss!r}")
                continue
            for flag in _LOSS_REQUIREMENTS.get(loss, ()):
                if not getattr(g, flag):
                    out.append(f"loss_mask: {loss} requires {flag}")
            if loss == "semantic" and not (
                g.has_category or g.has_expression or g.class_agnostic
            ):
                out.append("loss_mask: semantic requires a label source")
        return out


def default_loss_mask(g: Granularity, prompted: bool = False) -> frozenset:
    """Loss set implied by a granularity; visual-prompt data swaps semantic for confidence."""
    losses = set()
    if prompted:
        losses.add("confidence")
    elif g.has_category or g.has_expression or g.class_agnostic:
        losses.add("semantic")
    if g.has_box:
        losses.add("box")
    if g.has_mask:
        losses.add("mask")
    if g.has_track:
        losses.add("tracking")
    if not prompted and (g.has_category or g.has_expression or g.class_agnostic):
        losses.add("distillation")
    return frozenset(losses)


# ---------------------------------------------------------------- validation


def _box_violations(box: Box, where: str) -> list[str]:
    out = []
    for name in ("cx", "cy", "w", "h"):
        v = getattr(box, name)
        if not isinstance(v, (int, float)) or not math.isfinite(v):
            out.append(f"{where}.box.{name}: not a finite number")
    if out:
        return out
    if not 0 <= box.cx <= 1:
        out.append(f"{where}.box.cx: {box.cx} outside [0, 1]")
    if not 0 <= box.cy <= 1:
        out.append(f"{where}.box.cy: {box.cy} outside [0, 1]")
    if not 0 < box.w <= 1:
        out.append(f"{where}.box.w: {box.w} outside (0, 1]")
    if not 0 < box.h <= 1:
        out.append(f"{where}.box.h: {box.h} outside (0, 1]")
    return out


def _annotation_violations(ann: ObjectAnnotation, where: str, hw) -> list[str]:
    out = _box_violations(ann.box, where)
    has_cat = ann.category_id is not None
    has_expr = ann.expression is not None
    if ann.is_class_agnostic:
        if has_cat or has_expr:
            out.append(f"{where}.label: class-agnostic annotation carries a label")
    elif has_cat and has_expr:
        out.append(f"{where}.label: both category_id and expression set")
    elif not has_cat and not has_expr:
        out.append(f"{where}.label: neither category_id nor expression set")
    if has_cat and (not isinstance(ann.category_id, int) or ann.category_id < 0):
        out.append(f"{where}.category_id: must be a non-negative integer")
    if has_expr and not str(ann.expression).strip():
        out.append(f"{where}.expression: empty")
    if ann.mask is not None:
        m = ann.mask
        if m.height <= 0 or m.width <= 0:
            out.append(f"{where}.mask: non-positive size")
        elif any(c < 0 for c in m.counts):
            out.append(f"{where}.mask.counts: negative run")
        elif sum(m.counts) != m.height * m.width:
            out.append(f"{where}.mask.counts: sum {sum(m.counts)} != {m.height * m.width}")
        if hw is not None and (m.height, m.width) != hw:
            out.append(f"{where}.mask: size {(m.height, m.width)} != image {hw}")
    return out


def _image_violations(rec: ImageRecord, where: str) -> list[str]:
    out = []
    if rec.height <= 0 or rec.width <= 0 or rec.channels <= 0:
        out.append(f"{where}: non-positive image shape")
        hw = None
    else:
        hw = (rec.height, rec.width)
    for i, ann in enumerate(rec.annotations):
        out.extend(_annotation_violations(ann, f"{where}.annotations[{i}]", hw))
    return out


def validate_record(record: Record) -> list[str]:
    """Invariant violations as human-readable strings; empty when the record is well formed."""
    if isinstance(record, ImageRecord):
        return _image_violations(record, "record")
    if isinstance(record, VideoClipRecord):
        out = []
        if not record.frames:
            out.append("clip: no frames")
            return out
        hw = (record.frames[0].height, record.frames[0].width)
        for t, frame in enumerate(record.frames):
            if (frame.height, frame.width) != hw:
                out.append(f"clip.frames[{t}]: size differs from frame 0")
            out.extend(_image_violations(frame, f"clip.frames[{t}]"))
        return out
    return [f"unknown record type {type(record).__name__}"]


# ------------------------------------------------------------- serialization


def annotation_to_dict(ann: ObjectAnnotation) -> dict:
    d = {"box": ann.box.as_list()}
    if ann.mask is not None:
        d["mask"] = {"height": ann.mask.height, "width": ann.mask.width, "counts": list(ann.mask.counts)}
    if ann.category_id is not None:
        d["category_id"] = ann.category_id
    if ann.expression is not None:
        d["expression"] = ann.expression
    if ann.track_id is not None:
        d["track_id"] = ann.track_id
    if ann.is_class_agnostic:
        d["is_class_agnostic"] = True
    return d


def annotation_from_dict(d: dict) -> ObjectAnnotation:
    mask = d.get("mask")
    return ObjectAnnotation(
        box=Box(*[float(v) for v in d["box"]]),
        mask=None if mask is None else MaskRLE(int(mask["height"]), int(mask["width"]), tuple(int(c) for c in mask["counts"])),
        category_id=d.get("category_id"),
        expression=d.get("expression"),
        track_id=d.get("track_id"),
        is_class_agnostic=bool(d.get("is_class_agnostic", False)),
    )


def record_to_dict(record: Record) -> dict:
    if isinstance(record, VideoClipRecord):
        return {"type": "clip", "clip_id": record.clip_id, "frames": [record_to_dict(f) for f in record.frames]}
    d = {
        "type": "image",
        "image_id": record.image_id,
        "height": record.height,
        "width": record.width,
        "channels": record.channels,
        "annotations": [annotation_to_dict(a) for a in record.annotations],
    }
    if record.file is not None:
        d["file"] = record.file
    return d


def record_from_dict(d: dict) -> Record:
    if d.get("type") == "clip":
        return VideoClipRecord(d["clip_id"], tuple(record_from_dict(f) for f in d["frames"]))
    return ImageRecord(
        image_id=str(d["image_id"]),
        height=int(d["height"]),
        width=int(d["width"]),
        channels=int(d.get("channels", 3)),
        annotations=tuple(annotation_from_dict(a) for a in d.get("annotations", ())),
        file=d.get("file"),
    )


def descriptor_to_dict(desc: DatasetDescriptor) -> dict:
    return {
        "name": desc.name,
        "granularity": {f: getattr(desc.granularity, f) for f in GRANULARITY_FLAGS},
        "sampling_ratio": desc.sampling_ratio,
        "loss_mask": sorted(desc.loss_mask),
    }


def descriptor_from_dict(d: dict) -> DatasetDescriptor:
    return DatasetDescriptor(
        name=d["name"],
        granularity=Granularity(**d.get("granularity", {})),
        sampling_ratio=float(d.get("sampling_ratio", 1.0)),
        loss_mask=frozenset(d.get("loss_mask", ())),
    )


@dataclass
class UnifiedFile:
    records: list
    categories: list = field(default_factory=list)
    descriptor: Optional[DatasetDescriptor] = None


def write_unified(path, records: Iterable[Record], categories: Sequence[str] = (), descriptor: Optional[DatasetDescriptor] = None) -> None:
    """One JSON object per line, preceded by a ``schema_version`` header line."""
    header = {"schema_version": SCHEMA_VERSION, "categories": list(categories)}
    if descriptor is not None:
        header["dataset"] = descriptor_to_dict(descriptor)
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec), sort_keys=True) + "\n")


def read_unified(path) -> UnifiedFile:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty unified file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:1: malformed header: {exc}") from None
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}:1: unsupported schema_version {header.get('schema_version')!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append(record_from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed record: {exc}") from None
    desc = header.get("dataset")
    return UnifiedFile(
        records=records,
        categories=list(header.get("categories", [])),
        descriptor=None if desc is None else descriptor_from_dict(desc),
    )
