"""Cosine similarity and the InfoNCE objectives used for visual (SVC) and triplet (STC) contrast."""

from __future__ import annotations

import torch
from torch import Tensor

from .encoders import FusedRepresentation, pool

DEFAULT_TAU = 0.08


def _unit(x: Tensor) -> Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if (norm == 0).any():
        raise ValueError("zero-norm vector in cosine similarity (collapsed representation?)")
    return x / norm


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Dot product of l2-normalized vectors, broadcasting over leading axes."""
    return (_unit(a) * _unit(b)).sum(dim=-1)


def info_nce(anchor: Tensor, positive: Tensor, negatives: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """-log softmax of the positive logit among [positive; negatives].

    Shapes: anchor/positive (..., d), negatives (..., M, d). Batched inputs return
    the mean over the leading axes.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if negatives.shape[-2] < 1:
        raise ValueError("need at least one negative")
    pos = cosine_sim(anchor, positive).unsqueeze(-1)
    neg = cosine_sim(anchor.unsqueeze(-2), negatives)
    logits = torch.cat([pos, neg], dim=-1) / tau
    # logsumexp subtracts the row max internally
    loss = torch.logsumexp(logits, dim=-1) - logits[..., 0]
    return loss.mean()


def svc_loss(fused: FusedRepresentation, fused_pos: FusedRepresentation,
             fused_negs: FusedRepresentation, tau: float = DEFAULT_TAU) -> Tensor:
    """Pooled-visual term plus vision-aware-style term.

    ``fused_negs`` stacks the M negatives along an extra axis before the region
    axis: V_s (..., M, m, d), s_v (..., M, d).
    """
    if fused_negs.s_v.shape[-2] < 1:
        raise ValueError("need at least one negative")
    visual = info_nce(pool(fused.V_s), pool(fused_pos.V_s), pool(fused_negs.V_s), tau)
    style = info_nce(fused.s_v, fused_pos.s_v, fused_negs.s_v, tau)
    return visual + style


def stc_loss(h: Tensor, h_pos: Tensor, h_negs: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    return info_nce(h, h_pos, h_negs, tau)
