"""Post-LN transformer blocks shared by the generator (causal) and the
downstream predictor (bidirectional with key padding)."""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F


def masked_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    causal: bool = True,
    key_padding_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """``softmax(Q K^T / sqrt(d_k) + M) V`` with ``M[i, j] = -inf`` for ``j > i``.

    ``key_padding_mask`` is boolean ``(..., T)`` with True marking valid keys.
    """
    if q.shape[-2:] != k.shape[-2:] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"shape mismatch: Q {tuple(q.shape)}, K {tuple(k.shape)}, V {tuple(v.shape)}")
    d_k = q.shape[-1]
    scores = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    T = q.shape[-2]
    if causal:
        future = torch.triu(torch.ones(T, T, dtype=torch.bool, device=q.device), diagonal=1)
        scores = scores.masked_fill(future, float("-inf"))
    if key_padding_mask is not None:
        invalid = ~key_padding_mask.bool()
        while invalid.dim() < scores.dim():
            invalid = invalid.unsqueeze(-2)
        scores = scores.masked_fill(invalid, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, embed_dim: int, n_heads: int, causal: bool = True):
        super().__init__()
        if embed_dim % n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_k = embed_dim // n_heads
        self.causal = causal
        self.w_q = nn.Linear(embed_dim, embed_dim)
        self.w_k = nn.Linear(embed_dim, embed_dim)
        self.w_v = nn.Linear(embed_dim, embed_dim)
        self.w_o = nn.Linear(embed_dim, embed_dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, T, _ = x.shape
        return x.reshape(*lead, T, self.n_heads, self.d_k).transpose(-3, -2)

    def forward(self, h: torch.Tensor, key_padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        q, k, v = self._split(self.w_q(h)), self._split(self.w_k(h)), self._split(self.w_v(h))
        if key_padding_mask is not None:
            key_padding_mask = key_padding_mask.unsqueeze(-2)  # broadcast over heads
        heads = masked_attention(q, k, v, causal=self.causal, key_padding_mask=key_padding_mask)
        *lead, _, T, _ = heads.shape
        return self.w_o(heads.transpose(-3, -2).reshape(*lead, T, self.n_heads * self.d_k))


class TransformerBlock(nn.Module):
    """Residual attention -> LayerNorm -> residual ReLU feed-forward -> LayerNorm."""

    def __init__(
        self,
        embed_dim: int,
        n_heads: int,
        ff_dim: int | None = None,
        dropout: float = 0.0,
        causal: bool = True,
        eps: float = 1e-6,
    ):
        super().__init__()
        self.attn = MultiHeadSelfAttention(embed_dim, n_heads, causal=causal)
        self.ln1 = nn.LayerNorm(embed_dim, eps=eps)
        self.ff1 = nn.Linear(embed_dim, ff_dim or 4 * embed_dim)
        self.ff2 = nn.Linear(ff_dim or 4 * embed_dim, embed_dim)
        self.ln2 = nn.LayerNorm(embed_dim, eps=eps)
        self.dropout = nn.Dropout(dropout)

    def forward(self, h: torch.Tensor, key_padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        h = self.ln1(h + self.dropout(self.attn(h, key_padding_mask)))
        h = self.ln2(h + self.dropout(self.ff2(F.relu(self.ff1(h)))))
        return h


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """Scaled-normal init for projections and embeddings, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, 0.0, std)
            if getattr(m, "bias", None) is not None:
                nn.init.zeros_(m.bias)
