"""Inference-time identity propagation over query embeddings.

Tracks are carried by bipartite matching of per-frame object-query
embeddings under cosine similarity; no tracking head and no memory bank.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .losses import hungarian_match

THETA_SIM = 0.3
THETA_NEW = 0.3
T_MAX = 10


@dataclass(frozen=True)
class TrackState:
    track_id: int
    last_embedding: np.ndarray
    last_score: float
    age: int = 0


@dataclass
class Detection:
    embedding: np.ndarray
    score: float
    box: Optional[Sequence[float]] = None
    mask: Optional[object] = None
    category: Optional[int] = None


def _normalize(x):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def cosine_matrix(a, b):
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    return _normalize(np.stack(a)) @ _normalize(np.stack(b)).T


def associate_frame(
    detections: Sequence[Detection],
    tracks: Sequence[TrackState],
    theta_new: float = THETA_NEW,
    theta_sim: float = THETA_SIM,
    t_max: int = T_MAX,
    next_id: int = 0,
):
    """Match one frame's detections to live tracks.

    Returns ``(tracks, ids, next_id)``: the updated live tracks, the track id
    per detection (``None`` when unmatched and below ``theta_new``) and the
    next unused id. Ids are never reused because ``next_id`` only grows.
    """
    sim = cosine_matrix([d.embedding for d in detections], [t.last_embedding for t in tracks])
    ids: list = [None] * len(detections)
    matched_tracks = set()
    if len(detections) and len(tracks):
        # the assignment wants rows >= columns; put the larger side on rows
        if len(detections) >= len(tracks):
            m = hungarian_match(-sim)
            pairs = m.pairs
        else:
            m = hungarian_match(-sim.T)
            pairs = tuple((d, t) for t, d in m.pairs)
        for d, t in pairs:
            if sim[d, t] >= theta_sim:
                ids[d] = tracks[t].track_id
                matched_tracks.add(t)
    updated = []
    for d, tid in enumerate(ids):
        if tid is not None:
            updated.append(TrackState(tid, np.asarray(detections[d].embedding), float(detections[d].score), 0))
    for t, tr in enumerate(tracks):
        if t not in matched_tracks and tr.age + 1 <= t_max:
            updated.append(replace(tr, age=tr.age + 1))
    for d, det in enumerate(detections):
        if ids[d] is None and det.score >= theta_new:
            ids[d] = next_id
            updated.append(TrackState(next_id, np.asarray(det.embedding), float(det.score), 0))
            next_id += 1
    updated.sort(key=lambda tr: tr.track_id)
    return updated, ids, next_id


@dataclass
class QueryTracker:
    """Per-video tracker state; one instance per video."""

    theta_new: float = THETA_NEW
    theta_sim: float = THETA_SIM
    t_max: int = T_MAX
    tracks: list = field(default_factory=list)
    next_id: int = 0

    def step(self, detections: Sequence[Detection]) -> list:
        self.tracks, ids, self.next_id = associate_frame(
            detections, self.tracks, self.theta_new, self.theta_sim, self.t_max, self.next_id
        )
        return ids


@dataclass
class SelectionState:
    prev_query_embedding: Optional[np.ndarray] = None


def select_referred_query(s_expr, state: SelectionState, current_embeddings, lambda_temp: float = 1.0) -> int:
    """Index of the referred query; later frames add a cosine bonus toward the previous winner."""
    s = np.asarray(s_expr, dtype=np.float64)
    emb = np.asarray(current_embeddings, dtype=np.float64)
    if state.prev_query_embedding is None or lambda_temp == 0:
        score = s
    else:
        score = s + lambda_temp * (_normalize(emb) @ _normalize(state.prev_query_embedding))
    idx = int(np.argmax(score))
    state.prev_query_embedding = emb[idx].copy()
    return idx


@dataclass
class VOSFrame:
    mask: np.ndarray
    query: int
    confidence: float
    lost: bool = False


def propagate_vos(first_frame_mask, video: Sequence, segment: Callable, lambda_temp: float = 1.0) -> list[VOSFrame]:
    """Propagate a first-frame mask by re-prompting every frame with the previous prediction.

    ``segment(frame, prompt_mask)`` returns ``(confidences [N], embeddings
    [N, C], masks [N, H, W] bool)`` for the prompted forward pass. A frame
    whose selected mask is empty keeps the previous prompt and is flagged
    ``lost``.
    """
    prompt = np.asarray(first_frame_mask, dtype=bool)
    if not prompt.any():
        raise ValueError("first-frame mask is empty")
    state = SelectionState()
    out = []
    for frame in video:
        conf, emb, masks = segment(frame, prompt)
        idx = select_referred_query(conf, state, emb, lambda_temp)
        mask = np.asarray(masks[idx], dtype=bool)
        lost = not mask.any()
        out.append(VOSFrame(mask=mask if not lost else prompt.copy(), query=idx, confidence=float(np.asarray(conf)[idx]), lost=lost))
        if not lost:
            prompt = mask
    return out
