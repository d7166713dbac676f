"""Scaled dot-product attention with an additive score bias and key masking."""

from __future__ import annotations

import math
from typing import Optional, Tuple

import torch
from torch import nn


def _logits(q, k, bias, scale_bias):
    d_k = q.shape[-1]
    scores = q @ k.transpose(-2, -1)
    if bias is None:
        return scores / math.sqrt(d_k)
    if scale_bias:
        return (scores + bias) / math.sqrt(d_k)
    return scores / math.sqrt(d_k) + bias


def biased_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    mask: Optional[torch.Tensor] = None,
    scale_bias: bool = True,
    allow_empty: bool = False,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """``softmax((Q K^T + bias) / sqrt(d_k)) V`` with masked keys removed.

    ``mask`` is True for excluded (query, key) pairs and broadcasts against the
    logits. With ``scale_bias=False`` the bias is added after scaling instead.
    A query row whose keys are all masked raises unless ``allow_empty``, in
    which case its weights and output are zero.

    Returns the attended values and the attention weights.
    """
    logits = _logits(q, k, bias, scale_bias)
    if mask is None:
        weights = torch.softmax(logits, dim=-1)
        return weights @ v, weights
    mask = torch.broadcast_to(mask, logits.shape)
    empty = mask.all(dim=-1, keepdim=True)
    if bool(empty.any()) and not allow_empty:
        raise ValueError("attention query row has every key masked")
    logits = logits.masked_fill(mask, float("-inf"))
    # fully masked rows would softmax to NaN; give them finite logits and zero them after
    logits = logits.masked_fill(empty, 0.0)
    weights = torch.softmax(logits, dim=-1).masked_fill(mask | empty, 0.0)
    return weights @ v, weights


class MultiHeadAttention(nn.Module):
    """Multi-head attention whose bias is shared by every head."""

    def __init__(self, dim: int, heads: int, scale_bias: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.scale_bias = dim, heads, scale_bias
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x):
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.dim // self.heads).transpose(-3, -2)

    def forward(self, query, key, value, bias=None, mask=None, allow_empty=False):
        """Inputs are ``(..., L, dim)``; ``bias``/``mask`` are ``(..., Lq, Lk)``."""
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        if bias is not None:
            bias = bias.unsqueeze(-3)
        if mask is not None:
            mask = mask.unsqueeze(-3)
        out, weights = biased_attention(q, k, v, bias, mask, self.scale_bias, allow_empty)
        out = out.transpose(-3, -2).reshape(*query.shape[:-1], self.dim)
        return self.out_proj(out), weights
