"""Visual prompts: points, boxes, scribbles and masks.

Each prompt is embedded twice: a coarse vector from the backbone applied to
a square crop around the prompt (goes to early fusion) and a set of fine
embeddings sampled from the pixel embedding map (joins decoder
self-attention alongside text rows).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import Box, MaskRLE, decode_rle, encode_rle

POINT_RADIUS_FRAC = 0.05
S_MAX = 256
KINDS = ("point", "box", "scribble", "mask")


class PromptOutsideMapError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSpec:
    kind: str
    payload: Union[tuple, Box, MaskRLE]

    def violations(self) -> list[str]:
        out = []
        if self.kind not in KINDS:
            return [f"kind: unknown prompt kind {self.kind!r}"]
        if self.kind == "point":
            x, y = self.payload
            if not (0 <= x <= 1 and 0 <= y <= 1):
                out.append("payload: point outside [0, 1]")
        elif self.kind == "box":
            b = self.payload
            if not (0 <= b.cx <= 1 and 0 <= b.cy <= 1 and 0 < b.w <= 1 and 0 < b.h <= 1):
                out.append("payload: box outside the unit square")
        elif self.kind == "scribble":
            if len(self.payload) < 2:
                out.append("payload: scribble needs at least 2 points")
            if any(not (0 <= x <= 1 and 0 <= y <= 1) for x, y in self.payload):
                out.append("payload: scribble point outside [0, 1]")
        elif self.payload.area == 0:
            out.append("payload: empty mask")
        return out


class PixelRect(NamedTuple):
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    def to_box(self, height, width) -> Box:
        return Box.from_xyxy(self.x0 / width, self.y0 / height, self.x1 / width, self.y1 / height)


def parse_prompt(text: str) -> PromptSpec:
    """Parse ``point:x,y``, ``box:cx,cy,w,h``, ``scribble:x1,y1;x2,y2;...`` or ``mask:<file>``.

    Mask files are ``.npy`` 0/1 arrays or a JSON RLE ``{"height", "width", "counts"}``.
    """
    kind, _, body = text.partition(":")
    kind = kind.strip().lower()
    if kind == "point":
        x, y = (float(v) for v in body.split(","))
        spec = PromptSpec("point", (x, y))
    elif kind == "box":
        spec = PromptSpec("box", Box(*(float(v) for v in body.split(","))))
    elif kind == "scribble":
        pts = tuple(tuple(float(v) for v in p.split(",")) for p in body.split(";") if p.strip())
        spec = PromptSpec("scribble", pts)
    elif kind == "mask":
        spec = PromptSpec("mask", _load_mask(body))
    else:
        raise ValueError(f"unknown prompt kind {kind!r}")
    bad = spec.violations()
    if bad:
        raise ValueError("; ".join(bad))
    return spec


def _load_mask(path) -> MaskRLE:
    path = Path(path)
    if path.suffix == ".npy":
        return encode_rle(np.load(path).astype(np.uint8))
    import json

    d = json.loads(path.read_text())
    return MaskRLE(int(d["height"]), int(d["width"]), tuple(int(c) for c in d["counts"]))


def prompt_bbox_pixels(prompt: PromptSpec, image_hw) -> tuple[float, float, float, float]:
    h, w = image_hw
    if prompt.kind == "point":
        x, y = prompt.payload
        return (x * w, y * h, x * w, y * h)
    if prompt.kind == "box":
        return prompt.payload.to_pixels(h, w)
    if prompt.kind == "scribble":
        xs = [p[0] * w for p in prompt.payload]
        ys = [p[1] * h for p in prompt.payload]
        return (min(xs), min(ys), max(xs), max(ys))
    grid = decode_rle(prompt.payload)
    ys, xs = np.nonzero(grid)
    sy, sx = h / grid.shape[0], w / grid.shape[1]
    return (xs.min() * sx, ys.min() * sy, (xs.max() + 1) * sx, (ys.max() + 1) * sy)


def prompt_square(prompt: PromptSpec, image_hw, radius_frac: float = POINT_RADIUS_FRAC) -> PixelRect:
    """Square pixel region around the prompt.

    A square that crosses the border is shifted back inside when it fits;
    along a side where it cannot fit it spans the whole image, which keeps
    the map idempotent.
    """
    h, w = image_hw
    x0, y0, x1, y1 = prompt_bbox_pixels(prompt, image_hw)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    if prompt.kind == "point":
        half = radius_frac * max(h, w)
    else:
        half = max(x1 - x0, y1 - y0) / 2
    ax0, ax1 = _fit_interval(cx - half, cx + half, float(w))
    ay0, ay1 = _fit_interval(cy - half, cy + half, float(h))
    return PixelRect(ax0, ay0, ax1, ay1)


def _fit_interval(lo, hi, limit):
    if hi - lo <= limit:
        if lo < 0:
            lo, hi = 0.0, hi - lo
        elif hi > limit:
            lo, hi = lo - (hi - limit), limit
        return lo, hi
    return 0.0, limit


def crop_and_resize(image: torch.Tensor, rect: PixelRect, size: int) -> torch.Tensor:
    """Integer-aligned crop of ``[3, H, W]`` covering ``rect``, resized to ``size x size``."""
    _, h, w = image.shape
    x0, y0 = max(0, math.floor(rect.x0)), max(0, math.floor(rect.y0))
    x1, y1 = min(w, math.ceil(rect.x1)), min(h, math.ceil(rect.y1))
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"degenerate prompt rectangle {tuple(rect)}")
    crop = image[:, y0:y1, x0:x1]
    if crop.shape[-2:] == (size, size):
        return crop
    return F.interpolate(crop[None], size=(size, size), mode="bilinear", align_corners=False)[0]


def encode_prompt_coarse(image: torch.Tensor, rect: PixelRect, model) -> torch.Tensor:
    """Crop, resize to the backbone input size, encode, mean-pool, project to C."""
    crop = crop_and_resize(image, rect, model.cfg.image_size)
    return model.pooled_prompt_feature(crop[None])[0]


# ------------------------------------------------------------ fine samples


def bilinear_sample(pixel_map: torch.Tensor, x: float, y: float) -> torch.Tensor:
    """Sample ``[C, h, w]`` at normalized image coords; cell centres sit at ``(i + 0.5) / size``."""
    _, h, w = pixel_map.shape
    gx = min(max(x * w - 0.5, 0.0), w - 1.0)
    gy = min(max(y * h - 0.5, 0.0), h - 1.0)
    x0, y0 = int(math.floor(gx)), int(math.floor(gy))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = gx - x0, gy - y0
    top = pixel_map[:, y0, x0] * (1 - fx) + pixel_map[:, y0, x1] * fx
    bot = pixel_map[:, y1, x0] * (1 - fx) + pixel_map[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def prompt_cells(prompt: PromptSpec, grid_hw) -> np.ndarray:
    """Row-major ``(row, col)`` cells covered by a box or mask prompt on an ``h x w`` grid."""
    h, w = grid_hw
    if prompt.kind == "box":
        x0, y0, x1, y1 = prompt.payload.to_xyxy()
        cx = (np.arange(w) + 0.5) / w
        cy = (np.arange(h) + 0.5) / h
        cols = np.nonzero((cx >= x0) & (cx <= x1))[0]
        rows = np.nonzero((cy >= y0) & (cy <= y1))[0]
        if len(cols) and len(rows):
            rr, cc = np.meshgrid(rows, cols, indexing="ij")
            return np.stack([rr.ravel(), cc.ravel()], axis=1)
        b = prompt.payload
        if not (0 <= b.cx <= 1 and 0 <= b.cy <= 1):
            return np.zeros((0, 2), dtype=int)
        return np.array([[min(int(b.cy * h), h - 1), min(int(b.cx * w), w - 1)]])
    if prompt.kind == "mask":
        grid = decode_rle(prompt.payload).astype(np.float32)
        cover = F.adaptive_avg_pool2d(torch.from_numpy(grid)[None, None], (h, w))[0, 0].numpy()
        sel = cover >= 0.5
        if not sel.any() and cover.max() > 0:
            sel = cover == cover.max()
        rr, cc = np.nonzero(sel)
        return np.stack([rr, cc], axis=1)
    raise ValueError(f"no cell rasterization for {prompt.kind} prompts")


def _polyline_points(points, h, w):
    """Points along the polyline spaced about half a cell apart, in path order."""
    out = []
    step = 0.5 / max(h, w)
    for (xa, ya), (xb, yb) in zip(points[:-1], points[1:]):
        n = max(1, int(math.ceil(math.hypot(xb - xa, yb - ya) / step)))
        for i in range(n):
            t = i / n
            out.append((xa + t * (xb - xa), ya + t * (yb - ya)))
    out.append(tuple(points[-1]))
    return out


def sample_fine_embeddings(pixel_map: torch.Tensor, prompt: PromptSpec, s_max: int = S_MAX, rng=0) -> torch.Tensor:
    """Pixel embeddings ``[S, C]`` under the prompt.

    Points give one bilinear sample, scribbles bilinear samples along the
    stroke, boxes and masks the covered cells. More than ``s_max`` rows are
    uniformly subsampled with ``rng`` keeping their original order.
    """
    _, h, w = pixel_map.shape
    if prompt.kind == "point":
        x, y = prompt.payload
        if not (0 <= x <= 1 and 0 <= y <= 1):
            raise PromptOutsideMapError("prompt outside map")
        return bilinear_sample(pixel_map, x, y)[None]
    if prompt.kind == "scribble":
        pts = [(x, y) for x, y in _polyline_points(prompt.payload, h, w) if 0 <= x <= 1 and 0 <= y <= 1]
        if not pts:
            raise PromptOutsideMapError("prompt outside map")
        rows = torch.stack([bilinear_sample(pixel_map, x, y) for x, y in pts])
    else:
        cells = prompt_cells(prompt, (h, w))
        if len(cells) == 0:
            raise PromptOutsideMapError("prompt outside map")
        rows = pixel_map[:, cells[:, 0], cells[:, 1]].T
    if rows.shape[0] > s_max:
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        keep = np.sort(gen.choice(rows.shape[0], size=s_max, replace=False))
        rows = rows[torch.as_tensor(keep)]
    return rows


def point_from_box(box: Box) -> PromptSpec:
    return PromptSpec("point", (box.cx, box.cy))


def prompt_from_mask(mask_grid) -> PromptSpec:
    return PromptSpec("mask", encode_rle(np.asarray(mask_grid, dtype=np.uint8)))
