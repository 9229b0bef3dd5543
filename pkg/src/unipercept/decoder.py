"""Backbone, early fusion, query decoder and the prediction heads.

A desk-scale MaskDINO-style object decoder: standard multi-head attention
stands in for deformable attention, and boxes are refined layer by layer
from learned reference boxes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64  # C
    text_dim: int = 64  # D
    num_queries: int = 60  # N
    enc_layers: int = 2
    dec_layers: int = 3
    heads: int = 4
    ffn_dim: int = 128
    backbone_widths: tuple = (32, 64, 64)
    image_size: int = 64  # side of the square crop fed to the backbone for coarse prompts
    vocab_size: int = 4096
    text_layers: int = 1


class UnbuiltModelError(RuntimeError):
    pass


# ------------------------------------------------------------------ blocks


class MLP(nn.Module):
    def __init__(self, in_dim, hidden, out_dim, layers, bias=True):
        super().__init__()
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b, bias=bias) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class Attention(nn.Module):
    """Multi-head attention with a key validity mask.

    Queries whose keys are all masked receive a zero update instead of NaN.
    """

    def __init__(self, dim, heads, kdim=None):
        super().__init__()
        kdim = kdim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kdim, dim)
        self.v = nn.Linear(kdim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, query, key, value, key_valid=None):
        b, lq, c = query.shape
        lk = key.shape[1]
        h = self.heads
        q = self.q(query).view(b, lq, h, c // h).transpose(1, 2)
        k = self.k(key).view(b, lk, h, c // h).transpose(1, 2)
        v = self.v(value).view(b, lk, h, c // h).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(c // h)
        if key_valid is not None:
            logits = logits.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        if key_valid is not None:
            attn = torch.nan_to_num(attn, nan=0.0)
        out = (attn @ v).transpose(1, 2).reshape(b, lq, c)
        return self.out(out)


def sine_embed_2d(h, w, dim, device=None):
    """Fixed sine/cosine positions for an ``h x w`` grid, shape ``[h*w, dim]``."""
    ys = (torch.arange(h, dtype=torch.float32, device=device) + 0.5) / h
    xs = (torch.arange(w, dtype=torch.float32, device=device) + 0.5) / w
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.cat([_sine(xx.reshape(-1), dim // 2), _sine(yy.reshape(-1), dim // 2)], dim=-1)


def _sine(x, dim):
    freqs = 2.0 ** torch.arange(dim // 2, dtype=torch.float32, device=x.device) * math.pi
    ang = x[:, None] * freqs
    return torch.cat([ang.sin(), ang.cos()], dim=-1)


def box_sine_embed(boxes, dim):
    """Sine features of normalized ``(cx, cy, w, h)`` boxes, ``[..., dim]``."""
    shape = boxes.shape[:-1]
    flat = boxes.reshape(-1, 4)
    parts = [_sine(flat[:, i], dim // 4) for i in range(4)]
    return torch.cat(parts, dim=-1).reshape(*shape, dim)


def inverse_sigmoid(x, eps=1e-5):
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


# ---------------------------------------------------------------- backbone


class TinyBackbone(nn.Module):
    """Strided conv pyramid at strides 4, 8, 16 (one more level per extra width)."""

    def __init__(self, in_channels=3, widths=(32, 64, 64), bias=False):
        super().__init__()
        self.widths = tuple(widths)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 3, stride=2, padding=1, bias=bias),
            nn.ReLU(),
            nn.Conv2d(widths[0], widths[0], 3, stride=2, padding=1, bias=bias),
            nn.ReLU(),
            nn.Conv2d(widths[0], widths[0], 3, padding=1, bias=bias),
            nn.ReLU(),
        )
        self.stages = nn.ModuleList()
        for cin, cout in zip(widths[:-1], widths[1:]):
            self.stages.append(
                nn.Sequential(
                    nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=bias),
                    nn.ReLU(),
                    nn.Conv2d(cout, cout, 3, padding=1, bias=bias),
                    nn.ReLU(),
                )
            )

    def forward(self, image):
        feats = [self.stem(image)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats


def extract_features(image: torch.Tensor, backbone: TinyBackbone) -> list[torch.Tensor]:
    """Multi-scale features; level ``l`` has spatial size ``ceil(H / 2**(l+2))``."""
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    h, w = image.shape[-2:]
    if h <= 0 or w <= 0:
        raise ValueError(f"non-positive image size {h}x{w}")
    feats = backbone(image)
    return [f[0] for f in feats] if squeeze else feats


class PixelDecoder(nn.Module):
    """Per-level 1x1 projection to C, bilinear upsampling to stride 4, sum."""

    def __init__(self, in_dims: Sequence[int], dim: int):
        super().__init__()
        self.proj = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in in_dims)

    def forward(self, feats):
        target = feats[0].shape[-2:]
        out = None
        for proj, f in zip(self.proj, feats):
            x = proj(f)
            if x.shape[-2:] != target:
                x = F.interpolate(x, size=target, mode="bilinear", align_corners=False)
            out = x if out is None else out + x
        return out


def build_pixel_map(feats, pixel_decoder: PixelDecoder) -> torch.Tensor:
    return pixel_decoder(feats)


# ------------------------------------------------------------ early fusion


class EarlyFusion(nn.Module):
    """One round of bi-directional cross-attention between image tokens and external embeddings.

    Embeddings first read from the image, then image tokens read from the
    updated embeddings; both with residual connections.
    """

    def __init__(self, dim, heads):
        super().__init__()
        self.emb_from_img = Attention(dim, heads)
        self.img_from_emb = Attention(dim, heads)
        self.norm_img = nn.LayerNorm(dim)
        self.norm_emb = nn.LayerNorm(dim)

    def forward(self, tokens, emb, emb_valid=None):
        if emb is None or emb.shape[1] == 0:
            return tokens
        if emb_valid is None:
            emb_valid = torch.ones(emb.shape[:2], dtype=torch.bool, device=emb.device)
        e = emb + self.emb_from_img(self.norm_emb(emb), tokens, tokens)
        return tokens + self.img_from_emb(self.norm_img(tokens), e, e, emb_valid)


def early_fusion(tokens, embeddings, fusion: EarlyFusion, valid=None):
    return fusion(tokens, embeddings, valid)


# ----------------------------------------------------------------- layers


class EncoderLayer(nn.Module):
    def __init__(self, dim, heads, ffn_dim):
        super().__init__()
        self.attn = Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = MLP(dim, ffn_dim, dim, 2)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, pos):
        qk = x + pos
        x = self.norm1(x + self.attn(qk, qk, x))
        return self.norm2(x + self.ffn(x))


class DecoderLayer(nn.Module):
    def __init__(self, dim, heads, ffn_dim):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = MLP(dim, ffn_dim, dim, 2)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, q, qpos, extra, extra_valid, memory, memory_pos):
        # queries attend to themselves plus any text / fine-prompt tokens
        q_in = q + qpos
        if extra is not None and extra.shape[1]:
            keys = torch.cat([q_in, extra], dim=1)
            values = torch.cat([q, extra], dim=1)
            valid = torch.cat(
                [torch.ones(q.shape[:2], dtype=torch.bool, device=q.device), extra_valid], dim=1
            )
        else:
            keys, values, valid = q_in, q, None
        q = self.norm1(q + self.self_attn(q_in, keys, values, valid))
        q = self.norm2(q + self.cross_attn(q + qpos, memory + memory_pos, memory))
        return self.norm3(q + self.ffn(q))


# ------------------------------------------------------------------ heads


def alignment_scores(q_d: torch.Tensor, w_i2t: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
    """``(q_d @ W_i2t) @ e_t^T``; batched over a leading dim when ``q_d`` is 3-D."""
    if q_d.shape[-1] != w_i2t.shape[0] or w_i2t.shape[1] != e_t.shape[-1]:
        raise ValueError(
            f"shape mismatch: q_d {tuple(q_d.shape)}, W {tuple(w_i2t.shape)}, e_t {tuple(e_t.shape)}"
        )
    return (q_d @ w_i2t) @ e_t.transpose(-1, -2)


def mask_logits(mask_embed: torch.Tensor, pixel_map: torch.Tensor) -> torch.Tensor:
    """Dot product of each mask embedding with every pixel embedding."""
    if mask_embed.shape[-1] != pixel_map.shape[-3]:
        raise ValueError(
            f"channel mismatch: embeddings {mask_embed.shape[-1]} vs pixel map {pixel_map.shape[-3]}"
        )
    if mask_embed.dim() == 2:
        return torch.einsum("nc,chw->nhw", mask_embed, pixel_map)
    return torch.einsum("bnc,bchw->bnhw", mask_embed, pixel_map)


def predict_masks(q_d: torch.Tensor, pixel_map: torch.Tensor, mask_ffn: nn.Module) -> torch.Tensor:
    """Raw mask logits at the pixel-map resolution."""
    return mask_logits(mask_ffn(q_d), pixel_map)


def predict_confidence(q_d: torch.Tensor, conf_head: nn.Module) -> torch.Tensor:
    return torch.sigmoid(conf_head(q_d).squeeze(-1))


@dataclass
class DecoderOutput:
    q_d: torch.Tensor  # [B, N, C]
    boxes: torch.Tensor  # [B, N, 4] normalized cx, cy, w, h
    mask_embeddings: torch.Tensor  # [B, N, C]
    mask_logits: torch.Tensor  # [B, N, H/4, W/4]
    s_align: torch.Tensor  # [B, N, K]
    confidence_logits: Optional[torch.Tensor] = None  # [B, N], prompted tasks only
    aux: list = field(default_factory=list)

    @property
    def confidence(self):
        return None if self.confidence_logits is None else torch.sigmoid(self.confidence_logits)


def _canonical_order(rows: torch.Tensor, valid: torch.Tensor):
    """Per-batch permutation sorting valid rows lexicographically, padding last.

    Running attention over a canonical order makes the result an exact
    function of the row multiset, independent of caller order.
    """
    b, k, _ = rows.shape
    perms = []
    data = rows.detach().cpu().numpy()
    vmask = valid.cpu().numpy()
    for i in range(b):
        idx = np.nonzero(vmask[i])[0]
        sub = data[i, idx]
        order = idx[np.lexsort(sub.T[::-1])] if len(idx) else idx
        pad = np.nonzero(~vmask[i])[0]
        perms.append(np.concatenate([order, pad]))
    return torch.as_tensor(np.stack(perms), dtype=torch.long, device=rows.device)


class UnifiedModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        c, d = cfg.dim, cfg.text_dim
        self.backbone = TinyBackbone(3, cfg.backbone_widths)
        self.input_proj = nn.ModuleList(nn.Conv2d(w, c, 1) for w in cfg.backbone_widths)
        self.level_embed = nn.Parameter(torch.zeros(len(cfg.backbone_widths), c))
        nn.init.normal_(self.level_embed, std=0.02)
        self.text_proj = nn.Linear(d, c)
        self.prompt_proj = nn.Linear(sum(cfg.backbone_widths), c)
        self.type_embed = nn.Parameter(torch.zeros(3, c))  # text, coarse prompt, fine prompt
        nn.init.normal_(self.type_embed, std=0.02)
        self.fusion = EarlyFusion(c, cfg.heads)
        self.encoder = nn.ModuleList(EncoderLayer(c, cfg.heads, cfg.ffn_dim) for _ in range(cfg.enc_layers))
        self.pixel_decoder = PixelDecoder([c] * len(cfg.backbone_widths), c)
        self.query_feat = nn.Parameter(torch.zeros(cfg.num_queries, c))
        nn.init.normal_(self.query_feat, std=0.02)
        self.query_ref = nn.Parameter(self._init_reference_boxes(cfg.num_queries))
        self.query_pos = MLP(c, c, c, 2)
        self.decoder = nn.ModuleList(DecoderLayer(c, cfg.heads, cfg.ffn_dim) for _ in range(cfg.dec_layers))
        self.decoder_norm = nn.LayerNorm(c)
        self.box_head = MLP(c, c, 4, 3)
        nn.init.zeros_(self.box_head.layers[-1].weight)
        nn.init.zeros_(self.box_head.layers[-1].bias)
        self.mask_head = MLP(c, c, c, 3)
        self.conf_head = MLP(c, c, 1, 2)
        nn.init.constant_(self.conf_head.layers[-1].bias, -2.0)
        self.w_i2t = nn.Parameter(torch.randn(c, d) * (0.1 / math.sqrt(c)))
        self.built = True

    @staticmethod
    def _init_reference_boxes(n):
        side = int(math.ceil(math.sqrt(n)))
        idx = torch.arange(n)
        cx = ((idx % side).float() + 0.5) / side
        cy = ((idx // side).float() + 0.5) / side
        wh = torch.full((n,), 0.25)
        return inverse_sigmoid(torch.stack([cx, cy, wh, wh], dim=-1))

    # -------------------------------------------------------------- pieces

    def pooled_prompt_feature(self, crops: torch.Tensor) -> torch.Tensor:
        """Coarse prompt vector for already-cropped, resized image patches ``[B, 3, S, S]``."""
        feats = extract_features(crops, self.backbone)
        pooled = torch.cat([f.mean(dim=(-2, -1)) for f in feats], dim=-1)
        return self.prompt_proj(pooled)

    def _coarse_prompts(self, images, prompts):
        from .visual_prompter import crop_and_resize, prompt_square

        size = self.cfg.image_size
        h, w = images.shape[-2:]
        crops, valid = [], []
        for img, pr in zip(images, prompts):
            if pr is None:
                crops.append(img.new_zeros(3, size, size))
                valid.append(False)
            else:
                crops.append(crop_and_resize(img, prompt_square(pr, (h, w)), size))
                valid.append(True)
        vec = self.pooled_prompt_feature(torch.stack(crops))
        return vec, torch.tensor(valid, dtype=torch.bool, device=images.device)

    def _fine_prompts(self, pixel_map, prompts, rng, s_max):
        from .visual_prompter import sample_fine_embeddings

        rows = []
        for pm, pr in zip(pixel_map, prompts):
            rows.append(pm.new_zeros(0, pm.shape[0]) if pr is None else sample_fine_embeddings(pm, pr, s_max, rng))
        s = max(1, max(r.shape[0] for r in rows))
        fine = pixel_map.new_zeros(len(rows), s, pixel_map.shape[1])
        valid = torch.zeros(len(rows), s, dtype=torch.bool, device=pixel_map.device)
        for i, r in enumerate(rows):
            fine[i, : r.shape[0]] = r
            valid[i, : r.shape[0]] = True
        return fine, valid

    def _flatten(self, feats):
        tokens, pos, shapes = [], [], []
        for lvl, (proj, f) in enumerate(zip(self.input_proj, feats)):
            x = proj(f)
            b, c, h, w = x.shape
            shapes.append((h, w))
            tokens.append(x.flatten(2).transpose(1, 2))
            pos.append(sine_embed_2d(h, w, c, x.device)[None] + self.level_embed[lvl])
        return torch.cat(tokens, 1), torch.cat(pos, 1).expand(b, -1, -1), shapes

    @staticmethod
    def _unflatten(tokens, shapes):
        out, start = [], 0
        b, _, c = tokens.shape
        for h, w in shapes:
            out.append(tokens[:, start : start + h * w].transpose(1, 2).reshape(b, c, h, w))
            start += h * w
        return out

    def forward(
        self,
        images: torch.Tensor,
        text: Optional[torch.Tensor] = None,
        text_valid: Optional[torch.Tensor] = None,
        prompts: Optional[Sequence] = None,
        rng=None,
        s_max: int = 256,
    ) -> DecoderOutput:
        """Full forward pass.

        ``text`` is ``[B, K, D]`` with validity mask ``text_valid``;
        ``prompts`` is a per-image list of ``PromptSpec`` (or ``None`` for
        images without a prompt). A prompted pass also returns confidence
        logits.
        """
        if not getattr(self, "built", False):
            raise UnbuiltModelError("model is not built")
        b = images.shape[0]
        prompt_coarse, prompt_valid = None, None
        if prompts is not None:
            prompt_coarse, prompt_valid = self._coarse_prompts(images, prompts)
        dev = images.device
        c = self.cfg.dim
        if text is None:
            text = images.new_zeros(b, 0, self.cfg.text_dim)
        if text_valid is None:
            text_valid = torch.ones(text.shape[:2], dtype=torch.bool, device=dev)
        k = text.shape[1]
        if k:
            perm = _canonical_order(text, text_valid)
            text_sorted = torch.gather(text, 1, perm[..., None].expand(-1, -1, text.shape[-1]))
            valid_sorted = torch.gather(text_valid, 1, perm)
        else:
            perm, text_sorted, valid_sorted = None, text, text_valid

        feats = extract_features(images, self.backbone)
        tokens, pos, shapes = self._flatten(feats)

        ext, ext_valid = [], []
        text_tok = self.text_proj(text_sorted) + self.type_embed[0]
        if k:
            ext.append(text_tok)
            ext_valid.append(valid_sorted)
        if prompt_coarse is not None:
            ext.append((prompt_coarse + self.type_embed[1])[:, None])
            ext_valid.append(prompt_valid[:, None])
        if ext:
            tokens = self.fusion(tokens, torch.cat(ext, 1), torch.cat(ext_valid, 1))

        for layer in self.encoder:
            tokens = layer(tokens, pos)
        pixel_map = build_pixel_map(self._unflatten(tokens, shapes), self.pixel_decoder)

        extra, extra_valid = [], []
        if k:
            extra.append(text_tok)
            extra_valid.append(valid_sorted)
        if prompts is not None:
            prompt_fine, fine_valid = self._fine_prompts(pixel_map, prompts, rng, s_max)
            extra.append(prompt_fine + self.type_embed[2])
            extra_valid.append(fine_valid)
        extra_t = torch.cat(extra, 1) if extra else None
        extra_v = torch.cat(extra_valid, 1) if extra_valid else None

        q = self.query_feat[None].expand(b, -1, -1)
        ref = torch.sigmoid(self.query_ref)[None].expand(b, -1, -1)
        outputs = []
        for layer in self.decoder:
            qpos = self.query_pos(box_sine_embed(ref, c))
            q = layer(q, qpos, extra_t, extra_v, tokens, pos)
            out = self._heads(q, ref, pixel_map, text_sorted, prompts is not None)
            outputs.append(out)
            ref = out.boxes.detach()

        if perm is not None:
            inv = torch.argsort(perm, dim=1)
            for out in outputs:
                out.s_align = torch.gather(out.s_align, 2, inv[:, None, :].expand(-1, out.s_align.shape[1], -1))
        final = outputs[-1]
        final.aux = outputs[:-1]
        return final

    def _heads(self, q, ref, pixel_map, text, prompted):
        q_d = self.decoder_norm(q)
        boxes = torch.sigmoid(inverse_sigmoid(ref) + self.box_head(q_d))
        mask_embed = self.mask_head(q_d)
        return DecoderOutput(
            q_d=q_d,
            boxes=boxes,
            mask_embeddings=mask_embed,
            mask_logits=mask_logits(mask_embed, pixel_map),
            s_align=alignment_scores(q_d, self.w_i2t, text),
            confidence_logits=self.conf_head(q_d).squeeze(-1) if prompted else None,
        )


def decode(model: UnifiedModel, images, text=None, text_valid=None, prompts=None, rng=None) -> DecoderOutput:
    if model is None or not getattr(model, "built", False):
        raise UnbuiltModelError("model is not built")
    return model(images, text, text_valid, prompts, rng)
