"""Object detector transformer: conv backbone, encoder, query decoder, box/class heads."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .attention import MultiHeadAttention
from .scene import BBox, ObjectPrediction


@dataclass
class DetectorConfig:
    in_channels: int = 3
    stage_channels: Tuple[int, ...] = (16, 32, 64, 64)
    dim: int = 32  # projected channel dim of the backbone output
    enc_layers: int = 2
    enc_heads: int = 4
    dec_layers: int = 2
    dec_heads: int = 4
    ffn_dim: int = 64
    num_queries: int = 20
    num_classes: int = 6  # head + object classes + no-object
    mlp_hidden: int = 64
    image_size: int = 64

    @property
    def stride(self) -> int:
        return 2 ** len(self.stage_channels)

    @property
    def backbone_channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def no_object(self) -> int:
        return self.num_classes - 1

    def check(self) -> None:
        if self.dim % self.enc_heads or self.dim % self.dec_heads:
            raise ValueError("dim must be divisible by the attention head counts")
        if self.image_size % self.stride:
            raise ValueError(f"image size {self.image_size} not divisible by stride {self.stride}")


@dataclass
class FeatureMap:
    tokens: torch.Tensor  # (B, L, dim)
    pos: torch.Tensor  # (L, dim)
    hw: Tuple[int, int]


def sine_position_encoding(h: int, w: int, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """Fixed 2D sinusoidal encoding, half the channels for y and half for x."""
    if dim % 4:
        raise ValueError("positional encoding dim must be divisible by 4")
    npf = dim // 2
    y = torch.arange(1, h + 1, dtype=torch.float64)[:, None].expand(h, w) / h * 2 * math.pi
    x = torch.arange(1, w + 1, dtype=torch.float64)[None, :].expand(h, w) / w * 2 * math.pi
    dim_t = temperature ** (2 * (torch.arange(npf, dtype=torch.float64) // 2) / npf)
    px = x[..., None] / dim_t
    py = y[..., None] / dim_t
    px = torch.stack([px[..., 0::2].sin(), px[..., 1::2].cos()], dim=-1).flatten(-2)
    py = torch.stack([py[..., 0::2].sin(), py[..., 1::2].cos()], dim=-1).flatten(-2)
    return torch.cat([py, px], dim=-1).reshape(h * w, dim)


def sine_query_encoding(n: int, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    dim_t = temperature ** (2 * (torch.arange(dim, dtype=torch.float64) // 2) / dim)
    enc = pos / dim_t
    enc[:, 0::2] = enc[:, 0::2].sin()
    enc[:, 1::2] = enc[:, 1::2].cos()
    return enc


class FFN(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, dim, heads, ffn_dim):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = FFN(dim, ffn_dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, pos=None):
        qk = x if pos is None else x + pos
        x = self.norm1(x + self.attn(qk, qk, x)[0])
        return self.norm2(x + self.ffn(x))


class DecoderLayer(nn.Module):
    def __init__(self, dim, heads, ffn_dim):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FFN(dim, ffn_dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, tgt, memory, query_pos=None, pos=None):
        qk = tgt if query_pos is None else tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(qk, qk, tgt)[0])
        q = tgt if query_pos is None else tgt + query_pos
        k = memory if pos is None else memory + pos
        tgt = self.norm2(tgt + self.cross_attn(q, k, memory)[0])
        return self.norm3(tgt + self.ffn(tgt))


class MLP(nn.Module):
    def __init__(self, dims: List[int]):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = F.relu(x)
        return x


class ObjectDetector(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        cfg.check()
        self.cfg = cfg
        convs = []
        c_in = cfg.in_channels
        for c_out in cfg.stage_channels:
            convs.append(nn.Conv2d(c_in, c_out, 3, stride=2, padding=1))
            c_in = c_out
        self.backbone = nn.ModuleList(convs)
        self.input_proj = nn.Conv2d(cfg.backbone_channels, cfg.dim, 1)
        self.encoder = nn.ModuleList(EncoderLayer(cfg.dim, cfg.enc_heads, cfg.ffn_dim) for _ in range(cfg.enc_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg.dim, cfg.dec_heads, cfg.ffn_dim) for _ in range(cfg.dec_layers))
        self.query_embed = nn.Parameter(torch.randn(cfg.num_queries, cfg.dim) * 0.1)
        self.register_buffer("query_pos", sine_query_encoding(cfg.num_queries, cfg.dim).float(), persistent=False)
        self.class_head = MLP([cfg.dim, cfg.mlp_hidden, cfg.num_classes])
        self.box_head = MLP([cfg.dim, cfg.mlp_hidden, cfg.mlp_hidden, 4])

    def extract_features(self, images: torch.Tensor) -> FeatureMap:
        if images.shape[-1] % self.cfg.stride or images.shape[-2] % self.cfg.stride:
            raise ValueError(f"image {tuple(images.shape[-2:])} not divisible by stride {self.cfg.stride}")
        x = images
        for conv in self.backbone:
            x = F.relu(conv(x))
        x = self.input_proj(x)
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        pos = sine_position_encoding(h, w, c).to(tokens.dtype)
        return FeatureMap(tokens=tokens, pos=pos, hw=(h, w))

    def encode(self, fmap: FeatureMap, use_pos: bool = True) -> torch.Tensor:
        x = fmap.tokens
        pos = fmap.pos if use_pos else None
        for layer in self.encoder:
            x = layer(x, pos)
        return x

    def decode(self, memory: torch.Tensor, pos: Optional[torch.Tensor] = None, use_pos: bool = True) -> torch.Tensor:
        b = memory.shape[0]
        tgt = self.query_embed.unsqueeze(0).expand(b, -1, -1)
        query_pos = self.query_pos.to(tgt.dtype) if use_pos else None
        for layer in self.decoder:
            tgt = layer(tgt, memory, query_pos, pos if use_pos else None)
        return tgt

    def heads(self, f_d: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Class logits and sigmoid-squashed ``(cx, cy, w, h)`` boxes."""
        return self.class_head(f_d), torch.sigmoid(self.box_head(f_d))

    def forward(self, images: torch.Tensor):
        fmap = self.extract_features(images)
        f_e = self.encode(fmap)
        f_d = self.decode(f_e, fmap.pos)
        logits, boxes = self.heads(f_d)
        return {"logits": logits, "boxes": boxes, "features": f_d}


def to_predictions(logits: torch.Tensor, boxes: torch.Tensor) -> List[ObjectPrediction]:
    """Convert one image's ``(N, CLS)`` logits and ``(N, 4)`` boxes.

    Confidence is the largest class probability excluding the no-object class.
    """
    probs = torch.softmax(logits.detach().double(), dim=-1).cpu().numpy()
    b = boxes.detach().double().cpu().numpy()
    out = []
    for p, box in zip(probs, b):
        out.append(
            ObjectPrediction(
                bbox=BBox(*(float(v) for v in box)),
                label=int(np.argmax(p)),
                confidence=float(p[:-1].max()),
            )
        )
    return out
