"""Style embedding, visual projection and the style-aware self-attention encoder."""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class FusedRepresentation(NamedTuple):
    V_s: Tensor  # (..., m, d) style-aware visual features
    s_v: Tensor  # (..., d) vision-aware style feature


def encode_style(style_id: int | Tensor, table: Tensor) -> Tensor:
    """Embed style ids by row selection (one-hot times ``table``)."""
    ids = torch.as_tensor(style_id, dtype=torch.long, device=table.device)
    if ids.numel() and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"style id out of range [0, {table.shape[0]})")
    return table[ids]


def pool(V_s: Tensor) -> Tensor:
    """Mean over the region axis."""
    return V_s.mean(dim=-2)


class StyleEmbedding(nn.Module):
    def __init__(self, n_styles: int, d: int):
        super().__init__()
        self.table = nn.Parameter(torch.randn(n_styles, d) * 0.02)

    def forward(self, style_id: int | Tensor) -> Tensor:
        return encode_style(style_id, self.table)


class VisualProjection(nn.Module):
    """Position-wise two-layer MLP mapping d'-dim regions to d dims."""

    def __init__(self, d_raw: int, d: int):
        super().__init__()
        if d_raw < d:
            raise ValueError(f"raw feature dim {d_raw} smaller than model dim {d}")
        self.d_raw = d_raw
        self.fc1 = nn.Linear(d_raw, d)
        self.fc2 = nn.Linear(d, d)

    def forward(self, raw: Tensor) -> Tensor:
        if raw.shape[-1] != self.d_raw:
            raise ValueError(f"expected last dim {self.d_raw}, got {tuple(raw.shape)}")
        return self.fc2(F.gelu(self.fc1(raw)))


def project_visual(raw: Tensor, mlp: VisualProjection) -> Tensor:
    return mlp(raw)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x: Tensor, allowed: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """``allowed`` is a (S, S) bool matrix; row i lists the keys query i may see.

        Returns the attended output and the (..., H, S, S) attention weights.
        """
        *lead, S, d = x.shape
        h = self.n_heads

        def split(t: Tensor) -> Tensor:
            return t.reshape(*lead, S, h, d // h).transpose(-3, -2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        if allowed is not None:
            scores = scores.masked_fill(~allowed, float("-inf"))
        weights = scores.softmax(dim=-1)
        out = (weights @ v).transpose(-3, -2).reshape(*lead, S, d)
        return self.o(out), weights


class SelfAttentionLayer(nn.Module):
    """Pre-norm transformer block: attention then feed-forward, both residual."""

    def __init__(self, d: int, n_heads: int, d_ff: int | None = None, norm: bool = True, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadSelfAttention(d, n_heads)
        self.ln1 = nn.LayerNorm(d) if norm else nn.Identity()
        self.ln2 = nn.LayerNorm(d) if norm else nn.Identity()
        self.ff = nn.Sequential(nn.Linear(d, d_ff or 4 * d), nn.GELU(), nn.Linear(d_ff or 4 * d, d))
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor, allowed: Tensor | None = None) -> tuple[Tensor, Tensor]:
        a, weights = self.attn(self.ln1(x), allowed)
        x = x + self.drop(a)
        x = x + self.drop(self.ff(self.ln2(x)))
        return x, weights


class StyleAwareEncoder(nn.Module):
    """Self-attention over the m visual slots with the style vector appended as slot m+1.

    Learned positional embeddings cover the visual slots in row-first order and a
    separate embedding marks the style slot.
    """

    def __init__(self, d: int, n_regions: int, n_layers: int = 3, n_heads: int = 4, norm: bool = True,
                 dropout: float = 0.0):
        super().__init__()
        self.n_regions = n_regions
        self.region_pos = nn.Parameter(torch.randn(n_regions, d) * 0.02)
        self.style_pos = nn.Parameter(torch.randn(d) * 0.02)
        self.layers = nn.ModuleList(
            SelfAttentionLayer(d, n_heads, norm=norm, dropout=dropout) for _ in range(n_layers)
        )
        self.final_norm = nn.LayerNorm(d) if norm else nn.Identity()

    def forward(self, V: Tensor, s: Tensor, allowed: Tensor | None = None,
                return_weights: bool = False):
        m = V.shape[-2]
        if m > self.n_regions:
            raise ValueError(f"{m} regions but encoder was built for {self.n_regions}")
        if V.shape[:-2] != s.shape[:-1] or V.shape[-1] != s.shape[-1]:
            raise ValueError(f"shape mismatch: V {tuple(V.shape)} vs s {tuple(s.shape)}")
        if not (torch.isfinite(V).all() and torch.isfinite(s).all()):
            raise ValueError("non-finite input to style-aware encoder")
        x = torch.cat([V + self.region_pos[:m], (s + self.style_pos).unsqueeze(-2)], dim=-2)
        all_weights = []
        for layer in self.layers:
            x, w = layer(x, allowed)
            all_weights.append(w)
        x = self.final_norm(x)
        fused = FusedRepresentation(x[..., :m, :], x[..., m, :])
        return (fused, all_weights) if return_weights else fused


def style_aware_encode(V: Tensor, s: Tensor, encoder: StyleAwareEncoder) -> FusedRepresentation:
    return encoder(V, s)
