"""Gaze object transformer: score-biased attention from heads to objects."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import torch
from torch import nn

from .attention import MultiHeadAttention
from .detector import FFN, MLP
from .scene import Heatmap


@dataclass
class GotConfig:
    layers: int = 2
    heads: int = 4
    dim: int = 32
    ffn_dim: int = 64
    tau: float = 0.5
    resolution: int = 32
    heatmap_hidden: int = 64
    scale_bias: bool = True  # bias inside the 1/sqrt(d_k) scaling
    use_cone: bool = True  # False zeroes the score matrix (every head takes the skip)

    def check(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau={self.tau} must lie in (0, 1)")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")


@dataclass
class GazeOutput:
    index: int  # query index of the head
    heatmap: Heatmap
    p_out: float
    used_skip: bool

    @property
    def gaze_point(self) -> Tuple[float, float]:
        return self.heatmap.argmax_point()


class GotLayer(nn.Module):
    def __init__(self, cfg: GotConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.dim, cfg.heads, cfg.scale_bias)
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.cross_attn = MultiHeadAttention(cfg.dim, cfg.heads, cfg.scale_bias)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.ffn = FFN(cfg.dim, cfg.ffn_dim)
        self.norm3 = nn.LayerNorm(cfg.dim)

    def forward(self, x, memory, sigma, self_mask, cross_mask):
        x = self.norm1(x + self.self_attn(x, x, x, sigma, self_mask, allow_empty=True)[0])
        x = self.norm2(x + self.cross_attn(x, memory, memory, sigma, cross_mask, allow_empty=True)[0])
        return self.norm3(x + self.ffn(x))


def got_masks(is_head: torch.Tensor, keep: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Boolean exclusion masks ``(B, N, N)`` for self- and cross-attention.

    Self-attention runs among heads only. Cross-attention lets head ``i`` see
    every kept object except itself.
    """
    n = is_head.shape[-1]
    eye = torch.eye(n, dtype=torch.bool, device=is_head.device)
    self_mask = ~(is_head.unsqueeze(-1) & is_head.unsqueeze(-2))
    cross_mask = ~(is_head.unsqueeze(-1) & keep.unsqueeze(-2)) | eye
    return self_mask, cross_mask


class GazeObjectTransformer(nn.Module):
    def __init__(self, cfg: GotConfig, num_queries: int):
        super().__init__()
        cfg.check()
        self.cfg = cfg
        self.embed = nn.Parameter(torch.randn(num_queries, cfg.dim) * 0.1)
        self.layers = nn.ModuleList(GotLayer(cfg) for _ in range(cfg.layers))
        r2 = cfg.resolution ** 2
        self.heatmap_head = MLP([cfg.dim, cfg.heatmap_hidden, r2])
        self.heatmap_no_object = MLP([cfg.dim, cfg.heatmap_hidden, r2])
        self.watch_outside = MLP([cfg.dim, cfg.heatmap_hidden, 1])

    def attend(self, f_d, sigma, is_head, keep):
        """Cross-attended features for every row; only head rows are meaningful."""
        self_mask, cross_mask = got_masks(is_head, keep)
        x = f_d + self.embed
        for layer in self.layers:
            x = layer(x, f_d, sigma, self_mask, cross_mask)
        return x

    def gated_heatmap(self, head_feats, cross_feats, skip):
        """Pick the no-object heatmap where ``skip`` is set, the object-path one elsewhere."""
        r = self.cfg.resolution
        shape = skip.shape + (r, r)
        obj = torch.sigmoid(self.heatmap_head(cross_feats)).reshape(shape)
        no_obj = torch.sigmoid(self.heatmap_no_object(head_feats)).reshape(shape)
        return torch.where(skip[..., None, None], no_obj, obj)

    def p_out(self, head_feats):
        return torch.sigmoid(self.watch_outside(head_feats)).squeeze(-1)

    def forward(self, f_d, sigma, is_head, keep):
        """Run on a batch.

        ``f_d`` is ``(B, N, C)``, ``sigma`` the ``(B, N, N)`` score matrix,
        ``is_head``/``keep`` boolean ``(B, N)`` query and key selections.
        Returns per-row heatmaps ``(B, N, R, R)``, ``p_out`` ``(B, N)`` and
        the skip flags ``(B, N)``.
        """
        if not self.cfg.use_cone:
            sigma = torch.zeros_like(sigma)
        x = self.attend(f_d, sigma, is_head, keep)
        n = is_head.shape[-1]
        eye = torch.eye(n, dtype=torch.bool, device=f_d.device)
        cols = keep.unsqueeze(-2) & ~eye
        skip = ~((sigma != 0) & cols).any(dim=-1)
        return {"heatmaps": self.gated_heatmap(f_d, x, skip), "p_out": self.p_out(f_d), "skip": skip}


def gaze_outputs(out: dict, is_head: torch.Tensor, b: int = 0) -> List[GazeOutput]:
    """Per-head outputs of batch element ``b``, in query order."""
    rows = torch.nonzero(is_head[b]).flatten().tolist()
    heat = out["heatmaps"][b].detach().float().cpu().numpy()
    p = out["p_out"][b].detach().double().cpu().numpy()
    skip = out["skip"][b].cpu().numpy()
    return [GazeOutput(i, Heatmap(heat[i]), float(p[i]), bool(skip[i])) for i in rows]
