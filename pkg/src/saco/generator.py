"""Transformer decoder conditioned on (V^s, s^v) memory tokens, plus decoding routines."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import EOS_ID, PAD_ID, SOS_ID
from .encoders import SelfAttentionLayer

MAX_LEN = 30


class DecoderState(NamedTuple):
    hidden: Tensor  # (..., N, d_h)
    logits: Tensor  # (..., N, |V|)


def prefix_lm_mask(n_memory: int, n_tokens: int, device=None) -> Tensor:
    """Memory slots see each other; caption slots see all memory plus their own causal prefix."""
    S = n_memory + n_tokens
    allowed = torch.ones(S, S, dtype=torch.bool, device=device).tril()
    allowed[:, :n_memory] = True
    return allowed


class CaptionDecoder(nn.Module):
    def __init__(self, vocab_size: int, d: int, d_h: int, n_layers: int = 2, n_heads: int = 4,
                 n_regions: int = 49, max_len: int = MAX_LEN, use_style_token: bool = True,
                 dropout: float = 0.0):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.use_style_token = use_style_token
        self.tok_emb = nn.Embedding(vocab_size, d_h)
        self.pos_emb = nn.Parameter(torch.randn(max_len, d_h) * 0.02)
        self.mem_proj = nn.Linear(d, d_h)
        self.mem_pos = nn.Parameter(torch.randn(n_regions + 1, d_h) * 0.02)
        self.blocks = nn.ModuleList(
            SelfAttentionLayer(d_h, n_heads, dropout=dropout) for _ in range(n_layers)
        )
        self.ln_f = nn.LayerNorm(d_h)
        self.lm_head = nn.Linear(d_h, vocab_size)
        self.mlp_tri = nn.Sequential(nn.Linear(d_h, d), nn.Tanh(), nn.Linear(d, d))

    def memory(self, V_s: Tensor, s_v: Tensor) -> Tensor:
        mem = torch.cat([V_s, s_v.unsqueeze(-2)], dim=-2) if self.use_style_token else V_s
        return self.mem_proj(mem) + self.mem_pos[: mem.shape[-2]]

    def forward(self, V_s: Tensor, s_v: Tensor, tokens: Tensor) -> DecoderState:
        T = tokens.shape[-1]
        if T == 0:
            raise ValueError("empty prefix")
        if T > self.max_len:
            raise ValueError(f"prefix length {T} exceeds maximum {self.max_len}")
        mem = self.memory(V_s, s_v)
        n_mem = mem.shape[-2]
        x = torch.cat([mem, self.tok_emb(tokens) + self.pos_emb[:T]], dim=-2)
        allowed = prefix_lm_mask(n_mem, T, device=x.device)
        for block in self.blocks:
            x, _ = block(x, allowed)
        hidden = self.ln_f(x[..., n_mem:, :])
        return DecoderState(hidden, self.lm_head(hidden))


def decode_forward(decoder: CaptionDecoder, V_s: Tensor, s_v: Tensor, prefix: Tensor) -> DecoderState:
    prefix = torch.as_tensor(prefix, dtype=torch.long)
    if prefix.numel() == 0:
        raise ValueError("empty prefix")
    if (prefix[..., 0] != SOS_ID).any():
        raise ValueError("prefix must begin with <SOS>")
    return decoder(V_s, s_v, prefix)


def teacher_inputs(captions: Tensor) -> Tensor:
    """Shift gold captions right behind <SOS>; (B, N) -> (B, N)."""
    sos = torch.full_like(captions[..., :1], SOS_ID)
    return torch.cat([sos, captions[..., :-1]], dim=-1)


def caption_loss(logits: Tensor, gold: Tensor) -> Tensor:
    """Mean negative log-likelihood of the gold tokens; <PAD> positions are skipped."""
    gold = torch.as_tensor(gold, dtype=torch.long, device=logits.device)
    if logits.shape[:-1] != gold.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match gold {tuple(gold.shape)}")
    if int((gold != PAD_ID).sum()) == 0:
        raise ValueError("no scored positions")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), gold.reshape(-1), ignore_index=PAD_ID)


def triplet_repr(hidden: Tensor, mlp_tri: nn.Module, mask: Tensor | None = None) -> Tensor:
    """Mean of ``mlp_tri`` over the (unpadded) decoding steps."""
    if hidden.shape[-2] < 1:
        raise ValueError("need at least one step")
    z = mlp_tri(hidden)
    if mask is None:
        return z.mean(dim=-2)
    mask = mask.to(z.dtype).unsqueeze(-1)
    return (z * mask).sum(dim=-2) / mask.sum(dim=-2).clamp_min(1.0)


def _next_log_probs(decoder: CaptionDecoder, V_s: Tensor, s_v: Tensor, seqs: Tensor) -> Tensor:
    return F.log_softmax(decoder(V_s, s_v, seqs).logits[..., -1, :], dim=-1)


def _single(V_s: Tensor, s_v: Tensor) -> tuple[Tensor, Tensor]:
    """Give one item's memory a batch axis of size 1."""
    if V_s.dim() == 2:
        V_s, s_v = V_s.unsqueeze(0), s_v.unsqueeze(0)
    if V_s.shape[0] != 1:
        raise ValueError("single-item decoding expects a batch of one")
    return V_s, s_v


@torch.no_grad()
def greedy_decode(decoder: CaptionDecoder, V_s: Tensor, s_v: Tensor, max_len: int = MAX_LEN) -> list[int]:
    """Argmax decoding for one item; returned ids exclude <SOS> and include <EOS> if emitted."""
    V_s, s_v = _single(V_s, s_v)
    seq = torch.tensor([[SOS_ID]], device=V_s.device)
    out: list[int] = []
    for _ in range(max_len):
        logp = _next_log_probs(decoder, V_s, s_v, seq)[0]
        tok = int(torch.argmax(logp))  # first maximum, i.e. lowest id on ties
        out.append(tok)
        if tok == EOS_ID:
            break
        seq = torch.cat([seq, seq.new_tensor([[tok]])], dim=-1)
    return out


@torch.no_grad()
def greedy_decode_batch(decoder: CaptionDecoder, V_s: Tensor, s_v: Tensor,
                        max_len: int = MAX_LEN) -> list[list[int]]:
    B = V_s.shape[0]
    seqs = torch.full((B, 1), SOS_ID, dtype=torch.long, device=V_s.device)
    done = torch.zeros(B, dtype=torch.bool, device=V_s.device)
    for _ in range(max_len):
        tok = torch.argmax(_next_log_probs(decoder, V_s, s_v, seqs), dim=-1)
        tok = tok.masked_fill(done, PAD_ID)
        seqs = torch.cat([seqs, tok.unsqueeze(-1)], dim=-1)
        done |= tok == EOS_ID
        if done.all():
            break
    return [_strip(row) for row in seqs[:, 1:].tolist()]


def _strip(row: list[int]) -> list[int]:
    out = []
    for t in row:
        if t == PAD_ID:
            break
        out.append(t)
        if t == EOS_ID:
            break
    return out


def sample_tokens(probs: Tensor, generator: torch.Generator) -> Tensor:
    """One multinomial draw per row of ``probs``."""
    return torch.multinomial(probs, 1, generator=generator).squeeze(-1)


@torch.no_grad()
def sample_decode(decoder: CaptionDecoder, V_s: Tensor, s_v: Tensor, max_len: int = MAX_LEN,
                  rng_seed: int | torch.Generator = 0, temperature: float = 1.0) -> tuple[list[int], list[float]]:
    """Multinomial decoding; per-step log-probs are under the untempered model distribution.

    ``temperature=0`` is the argmax limit.
    """
    gen = rng_seed if isinstance(rng_seed, torch.Generator) else torch.Generator().manual_seed(int(rng_seed))
    V_s, s_v = _single(V_s, s_v)
    seq = torch.tensor([[SOS_ID]], device=V_s.device)
    ids: list[int] = []
    logps: list[float] = []
    for _ in range(max_len):
        logits = decoder(V_s, s_v, seq).logits[0, -1]
        logp = F.log_softmax(logits, dim=-1)
        if temperature == 0:
            tok = int(torch.argmax(logp))
        else:
            tok = int(sample_tokens(F.softmax(logits / temperature, dim=-1), gen))
        ids.append(tok)
        logps.append(float(logp[tok]))
        if tok == EOS_ID:
            break
        seq = torch.cat([seq, seq.new_tensor([[tok]])], dim=-1)
    return ids, logps


def sequence_log_prob(decoder: CaptionDecoder, V_s: Tensor, s_v: Tensor, ids: list[int]) -> Tensor:
    """Sum of log p_i(ids_i) by teacher forcing ``ids``; differentiable."""
    V_s, s_v = _single(V_s, s_v)
    gold = torch.tensor([ids], dtype=torch.long, device=V_s.device)
    logits = decoder(V_s, s_v, teacher_inputs(gold)).logits
    return F.log_softmax(logits, dim=-1).gather(-1, gold.unsqueeze(-1)).sum()


@torch.no_grad()
def beam_search(decoder: CaptionDecoder, V_s: Tensor, s_v: Tensor, beam: int = 3,
                max_len: int = MAX_LEN) -> list[int]:
    """Beam search ranked by length-normalized log-probability.

    Hypotheses that emit <EOS> are retired; the search stops once ``beam`` are
    retired or ``max_len`` steps have run. Ties go to the lower beam index, then
    the lower token id.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    V_s, s_v = _single(V_s, s_v)
    alive: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for step in range(max_len):
        seqs = torch.tensor([[SOS_ID] + toks for toks, _ in alive], device=V_s.device)
        n = len(alive)
        logp = _next_log_probs(decoder, V_s.expand(n, *V_s.shape[-2:]), s_v.expand(n, s_v.shape[-1]), seqs)
        cum = np.array([c for _, c in alive])[:, None] + logp.double().cpu().numpy()
        flat = cum.ravel()
        V = cum.shape[1]
        rows, cols = np.divmod(np.arange(flat.size), V)
        order = np.lexsort((cols, rows, -flat))
        nxt = []
        for idx in order:
            toks = alive[rows[idx]][0] + [int(cols[idx])]
            if cols[idx] == EOS_ID:
                finished.append((toks, flat[idx]))
                if len(finished) >= beam:
                    break
            else:
                nxt.append((toks, flat[idx]))
            if len(nxt) == beam:
                break
        if len(finished) >= beam:
            break
        alive = nxt
    else:
        finished.extend(alive)
    best = max(enumerate(finished), key=lambda t: (t[1][1] / len(t[1][0]), -t[0]))
    return best[1][0]


def normalized_log_prob(decoder: CaptionDecoder, V_s: Tensor, s_v: Tensor, ids: list[int]) -> float:
    with torch.no_grad():
        return float(sequence_log_prob(decoder, V_s, s_v, ids)) / len(ids)


@torch.no_grad()
def sample_decode_batch(decoder: CaptionDecoder, V_s: Tensor, s_v: Tensor, generator: torch.Generator,
                        max_len: int = MAX_LEN) -> list[list[int]]:
    """Batched multinomial decoding; rows stop independently at <EOS>."""
    B = V_s.shape[0]
    seqs = torch.full((B, 1), SOS_ID, dtype=torch.long, device=V_s.device)
    done = torch.zeros(B, dtype=torch.bool, device=V_s.device)
    for _ in range(max_len):
        probs = _next_log_probs(decoder, V_s, s_v, seqs).exp()
        tok = sample_tokens(probs, generator).masked_fill(done, PAD_ID)
        seqs = torch.cat([seqs, tok.unsqueeze(-1)], dim=-1)
        done |= tok == EOS_ID
        if done.all():
            break
    return [_strip(row) for row in seqs[:, 1:].tolist()]
