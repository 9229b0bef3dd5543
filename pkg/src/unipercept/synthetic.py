"""Synthetic scenes: colored shapes on a noisy canvas, with clips and expressions.

Stands in for the real detection, grounding, class-agnostic and video
datasets. Everything is deterministic per seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .datamodel import Box, ImageRecord, ObjectAnnotation, VideoClipRecord, encode_rle

DEFAULT_COLORS = {"red": (0.9, 0.15, 0.15), "green": (0.15, 0.85, 0.2), "blue": (0.2, 0.3, 0.95)}
POSITIONS = ("left", "right", "top", "bottom")


@dataclass(frozen=True)
class SyntheticSceneSpec:
    height: int = 64
    width: int = 64
    shapes: tuple = ("square", "circle", "triangle")
    colors: dict = field(default_factory=lambda: dict(DEFAULT_COLORS))
    size_range: tuple = (12, 22)
    objects_per_image: tuple = (1, 3)
    noise: float = 0.05
    # label carried by each annotation: "category", "expression" or "agnostic"
    label: str = "category"
    with_mask: bool = True
    # clips
    clip_length: int = 0  # 0 -> still images
    speed: float = 1.5  # pixels per frame
    jitter: float = 0.3

    def categories(self) -> list[str]:
        return ["object"] if self.label == "agnostic" else list(self.shapes)


class SyntheticSet(NamedTuple):
    records: list  # ImageRecord or VideoClipRecord
    images: list  # float32 [3, H, W] per image, or [T, 3, H, W] per clip
    categories: list


@dataclass
class _Obj:
    shape: str
    color: str
    cx: float
    cy: float
    size: float
    vx: float = 0.0
    vy: float = 0.0


def shape_mask(shape: str, cx: float, cy: float, size: float, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    r = size / 2
    if shape == "square":
        m = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif shape == "circle":
        m = dx**2 + dy**2 <= r**2
    elif shape == "triangle":
        # apex up; the half-width grows linearly from the apex to the base
        t = (dy + r) / (2 * r)
        m = (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m.astype(np.uint8)


def _overlaps(a: _Obj, b: _Obj, margin=2.0) -> bool:
    return abs(a.cx - b.cx) < (a.size + b.size) / 2 + margin and abs(a.cy - b.cy) < (a.size + b.size) / 2 + margin


def _place(spec: SyntheticSceneSpec, rng, count: int, moving: bool) -> list[_Obj]:
    combos = [(s, c) for s in spec.shapes for c in spec.colors]
    for _ in range(1000):
        picks = rng.choice(len(combos), size=min(count, len(combos)), replace=False)
        objs = []
        ok = True
        for p in picks:
            shape, color = combos[p]
            size = float(rng.uniform(*spec.size_range))
            placed = False
            for _ in range(100):
                r = size / 2 + 1
                o = _Obj(shape, color, float(rng.uniform(r, spec.width - r)), float(rng.uniform(r, spec.height - r)), size)
                if moving:
                    ang = rng.uniform(0, 2 * np.pi)
                    o.vx, o.vy = spec.speed * np.cos(ang), spec.speed * np.sin(ang)
                if all(not _overlaps(o, q) for q in objs):
                    objs.append(o)
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            return objs
    raise RuntimeError("could not place objects without overlap")


def _expression(obj: _Obj, objs: list[_Obj], spec: SyntheticSceneSpec, rng) -> str:
    options = [f"the {obj.color} {obj.shape}"]
    for pos in POSITIONS:
        if _side(obj, pos, spec) and sum(1 for o in objs if o.shape == obj.shape and _side(o, pos, spec)) == 1:
            options.append(f"{pos} {obj.shape}")
    return options[int(rng.integers(len(options)))]


def _side(o: _Obj, pos: str, spec: SyntheticSceneSpec) -> bool:
    return {
        "left": o.cx < spec.width / 2,
        "right": o.cx >= spec.width / 2,
        "top": o.cy < spec.height / 2,
        "bottom": o.cy >= spec.height / 2,
    }[pos]


def referents(expression: str, objects: list[dict], height: int, width: int) -> list[int]:
    """Indices of the objects an expression denotes; objects are dicts with shape/color/cx/cy in pixels."""
    words = expression.split()
    if words[0] == "the":
        color, shape = words[1], words[2]
        return [i for i, o in enumerate(objects) if o["shape"] == shape and o["color"] == color]
    pos, shape = words
    test = {
        "left": lambda o: o["cx"] < width / 2,
        "right": lambda o: o["cx"] >= width / 2,
        "top": lambda o: o["cy"] < height / 2,
        "bottom": lambda o: o["cy"] >= height / 2,
    }[pos]
    return [i for i, o in enumerate(objects) if o["shape"] == shape and test(o)]


def _render(spec: SyntheticSceneSpec, objs: list[_Obj], rng):
    h, w = spec.height, spec.width
    img = 0.15 + spec.noise * rng.standard_normal((3, h, w))
    masks = []
    for o in objs:
        m = shape_mask(o.shape, o.cx, o.cy, o.size, h, w)
        col = np.asarray(spec.colors[o.color])[:, None, None]
        img = np.where(m[None].astype(bool), col + spec.noise * rng.standard_normal((3, h, w)), img)
        masks.append(m)
    return img.astype(np.float32), masks


def _annotations(spec, objs, masks, rng, track_offset=None, expressions=None):
    anns = []
    for i, (o, m) in enumerate(zip(objs, masks)):
        rle = encode_rle(m)
        box = rle.bbox()
        kw = {}
        if spec.label == "category":
            kw["category_id"] = spec.shapes.index(o.shape)
        elif spec.label == "expression":
            kw["expression"] = expressions[i] if expressions else _expression(o, objs, spec, rng)
        elif spec.label == "agnostic":
            kw["is_class_agnostic"] = True
        else:
            raise ValueError(f"unknown label mode {spec.label!r}")
        anns.append(
            ObjectAnnotation(
                box=box,
                mask=rle if spec.with_mask else None,
                track_id=None if track_offset is None else track_offset + i,
                **kw,
            )
        )
    return tuple(anns)


def _step(o: _Obj, spec: SyntheticSceneSpec, rng):
    o.vx += spec.jitter * rng.standard_normal()
    o.vy += spec.jitter * rng.standard_normal()
    speed = np.hypot(o.vx, o.vy)
    if speed > 0:
        o.vx, o.vy = o.vx / speed * spec.speed, o.vy / speed * spec.speed
    r = o.size / 2 + 1
    nx, ny = o.cx + o.vx, o.cy + o.vy
    if nx < r or nx > spec.width - r:
        o.vx = -o.vx
        nx = o.cx + o.vx
    if ny < r or ny > spec.height - r:
        o.vy = -o.vy
        ny = o.cy + o.vy
    o.cx, o.cy = float(nx), float(ny)


def _clip_objects(spec, rng, count):
    """Initial objects whose constant-velocity paths stay disjoint for the whole clip."""
    for _ in range(200):
        objs = _place(spec, rng, count, moving=True)
        state = np.random.default_rng(rng.integers(2**31))
        frames = [[_Obj(**vars(o)) for o in objs]]
        cur = [_Obj(**vars(o)) for o in objs]
        ok = True
        for _t in range(1, spec.clip_length):
            for o in cur:
                _step(o, spec, state)
            if any(_overlaps(a, b, margin=1.0) for i, a in enumerate(cur) for b in cur[i + 1 :]):
                ok = False
                break
            frames.append([_Obj(**vars(o)) for o in cur])
        if ok:
            return frames
    raise RuntimeError("could not build a collision-free clip")


def generate_synthetic(spec: SyntheticSceneSpec, seed: int, count: int) -> SyntheticSet:
    """``count`` images (or clips when ``spec.clip_length > 0``) with pixels and unified records."""
    if not spec.shapes or not spec.colors:
        raise ValueError("shape inventory is empty")
    rng = np.random.default_rng(seed)
    records, images = [], []
    lo, hi = spec.objects_per_image
    for idx in range(count):
        n = int(rng.integers(lo, hi + 1))
        if spec.clip_length:
            frames = _clip_objects(spec, rng, n)
            recs, pix = [], []
            expressions = None
            if spec.label == "expression":
                expressions = [f"the {o.color} {o.shape}" for o in frames[0]]
            for t, objs in enumerate(frames):
                img, masks = _render(spec, objs, rng)
                anns = _annotations(spec, objs, masks, rng, track_offset=0, expressions=expressions)
                recs.append(ImageRecord(f"clip{idx:05d}_f{t:03d}", spec.height, spec.width, 3, anns))
                pix.append(img)
            records.append(VideoClipRecord(f"clip{idx:05d}", tuple(recs)))
            images.append(np.stack(pix))
        else:
            objs = _place(spec, rng, n, moving=False)
            img, masks = _render(spec, objs, rng)
            anns = _annotations(spec, objs, masks, rng)
            records.append(ImageRecord(f"img{idx:05d}", spec.height, spec.width, 3, anns))
            images.append(img)
    return SyntheticSet(records, images, spec.categories())


def scene_objects(spec: SyntheticSceneSpec, seed: int, count: int) -> list[list[dict]]:
    """Ground-truth object attributes of still images, replaying ``generate_synthetic``'s draws."""
    if spec.clip_length:
        raise ValueError("scene_objects covers still images only")
    rng = np.random.default_rng(seed)
    out = []
    lo, hi = spec.objects_per_image
    for _ in range(count):
        n = int(rng.integers(lo, hi + 1))
        objs = _place(spec, rng, n, moving=False)
        _, masks = _render(spec, objs, rng)
        _annotations(spec, objs, masks, rng)
        out.append([{"shape": o.shape, "color": o.color, "cx": o.cx, "cy": o.cy, "size": o.size} for o in objs])
    return out
