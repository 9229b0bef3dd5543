"""Text embeddings for category names and referring expressions.

The frozen teacher is a seeded random-projection bag-of-tokens encoder
standing in for a pretrained vision-language text tower; the student is a
small trainable transformer distilled toward it with an L1 objective.
"""
from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np
import torch
from torch import nn


class EmptyTextError(ValueError):
    pass


class NegativePoolExhausted(ValueError):
    pass


def tokenize(sentence: str, vocab_size: int = 4096) -> list[int]:
    """Lowercase, whitespace split, crc32 mod ``vocab_size``."""
    return [zlib.crc32(tok.encode("utf-8")) % vocab_size for tok in sentence.lower().split()]


class TeacherEncoder:
    """Frozen deterministic text encoder.

    token -> fixed Gaussian vector (seeded by ``(seed, token_id)``), mean over
    tokens, fixed linear map, L2 normalization. Nothing here depends on
    process state, so outputs are bit-identical across restarts.
    """

    def __init__(self, dim: int = 64, vocab_size: int = 4096, token_dim: int = 64, seed: int = 0):
        self.dim = dim
        self.vocab_size = vocab_size
        self.token_dim = token_dim
        self.seed = seed
        rng = np.random.default_rng([seed, 0x7E4C])
        self._proj = rng.standard_normal((token_dim, dim)) / np.sqrt(token_dim)

    def _token_vector(self, token_id: int) -> np.ndarray:
        return np.random.default_rng([self.seed, 1, token_id]).standard_normal(self.token_dim)

    def encode(self, sentence: str) -> np.ndarray:
        ids = tokenize(sentence, self.vocab_size)
        if not ids:
            raise EmptyTextError("empty sentence")
        bag = np.mean([self._token_vector(i) for i in ids], axis=0)
        out = bag @ self._proj
        return out / np.linalg.norm(out)

    def encode_batch(self, sentences: Sequence[str]) -> torch.Tensor:
        return torch.as_tensor(np.stack([self.encode(s) for s in sentences]), dtype=torch.float32)


class StudentEncoder(nn.Module):
    """Token embeddings + learned positions + a small transformer stack."""

    def __init__(self, dim: int = 64, vocab_size: int = 4096, layers: int = 1, heads: int = 4, max_len: int = 16):
        super().__init__()
        self.dim = dim
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.token_embed = nn.Embedding(vocab_size, dim)
        self.pos_embed = nn.Parameter(torch.zeros(max_len, dim))
        nn.init.normal_(self.token_embed.weight, std=0.1)
        nn.init.normal_(self.pos_embed, std=0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, dim_feedforward=2 * dim, dropout=0.0, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)

    def tokenize(self, sentence: str) -> list[int]:
        ids = tokenize(sentence, self.vocab_size)
        if not ids:
            raise EmptyTextError("empty sentence")
        return ids[: self.max_len]

    def encode_tokens(self, sentences: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-token outputs ``[K, L, D]`` and a validity mask ``[K, L]``."""
        ids = [self.tokenize(s) for s in sentences]
        length = max(len(t) for t in ids)
        tok = torch.zeros(len(ids), length, dtype=torch.long)
        valid = torch.zeros(len(ids), length, dtype=torch.bool)
        for i, t in enumerate(ids):
            tok[i, : len(t)] = torch.tensor(t)
            valid[i, : len(t)] = True
        x = self.token_embed(tok) + self.pos_embed[:length]
        x = self.encoder(x, src_key_padding_mask=~valid)
        return x, valid

    def forward(self, sentences: Sequence[str]) -> torch.Tensor:
        """Sentence embeddings ``[K, D]``: mean over each sentence's tokens."""
        x, valid = self.encode_tokens(sentences)
        w = valid.unsqueeze(-1).to(x.dtype)
        return (x * w).sum(1) / w.sum(1)


def encode_categories(names: Sequence[str], student) -> torch.Tensor:
    if len(names) == 0:
        raise ValueError("at least one category name is required")
    for n in names:
        if not isinstance(n, str) or not n.strip():
            raise EmptyTextError("empty category name")
    return student(list(names))


def encode_expression(expr: str, student) -> torch.Tensor:
    if not isinstance(expr, str) or not expr.strip():
        raise EmptyTextError("empty expression")
    return student([expr])[0]


def pad_category_list(positives: Sequence[int], negative_pool: Sequence[int], target_size: int = 100, rng=None) -> list[int]:
    """Keep every positive and fill up to ``target_size`` with distinct random negatives.

    Positives come first in their given order; sampled negatives follow in
    draw order. When there are already ``target_size`` positives or more the
    list is returned unchanged.
    """
    positives = list(positives)
    if len(positives) >= target_size:
        return positives
    pos_set = set(positives)
    pool = [c for c in negative_pool if c not in pos_set]
    need = target_size - len(positives)
    if len(pool) < need:
        raise NegativePoolExhausted("negative pool exhausted")
    rng = np.random.default_rng(rng)
    picks = rng.choice(len(pool), size=need, replace=False)
    return positives + [pool[i] for i in picks]


def distillation_loss(student_rows: torch.Tensor, teacher_rows: torch.Tensor) -> torch.Tensor:
    """Sum of absolute differences over the embedding width, averaged over sentences."""
    if student_rows.shape != teacher_rows.shape:
        raise ValueError(f"shape mismatch: {tuple(student_rows.shape)} vs {tuple(teacher_rows.shape)}")
    if student_rows.numel() == 0:
        return student_rows.sum()
    return (student_rows - teacher_rows).abs().sum(-1).mean()


def distill(student: StudentEncoder, teacher: TeacherEncoder, sentences: Sequence[str], steps: int = 1000, lr: float = 1e-3, seed: int = 0):
    """Fit the student to the frozen teacher on a fixed corpus, full batch; returns the loss history."""
    torch.manual_seed(seed)
    target = teacher.encode_batch(sentences)
    opt = torch.optim.AdamW(student.parameters(), lr=lr, weight_decay=0.0)
    history = []
    student.train()
    for _ in range(steps):
        loss = distillation_loss(student(sentences), target)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    student.eval()
    return history
