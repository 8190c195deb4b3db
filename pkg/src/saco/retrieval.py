"""Positive/negative mining from object overlap, RoI similarity and triplet similarity."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .core import DatasetItem
from .encoders import pool

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    theta: float = 0.9
    phi: float = 0.5
    omega: float = 0.8
    top_k_pos: int = 10
    num_negatives: int = 8

    def __post_init__(self):
        for name in ("theta", "phi", "omega"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.top_k_pos < 1 or self.num_negatives < 1:
            raise ValueError("top_k_pos and num_negatives must be >= 1")


@dataclass(frozen=True)
class RetrievalScores:
    p_obj: float
    p_roi: float
    p_tri: float
    p: float


@dataclass(frozen=True)
class Candidate:
    index: int  # position in the candidate pool
    item: DatasetItem
    scores: RetrievalScores

    @property
    def p(self) -> float:
        return self.scores.p


def triplet_key(item: DatasetItem) -> tuple:
    return (item.image_id, item.style_id, tuple(item.caption))


def object_overlap_score(objs_anchor, objs_cand) -> float:
    """Fraction of the anchor's objects also present in the candidate."""
    objs_anchor = set(objs_anchor)
    if not objs_anchor:
        raise ValueError("anchor has no objects")
    return len(objs_anchor & set(objs_cand)) / len(objs_anchor)


def _cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("zero-norm representation in retrieval score")
    return (a * b).sum(-1) / (na * nb)


def roi_score(V_s_anchor, V_s_cand) -> float:
    """Cosine similarity of pooled style-aware visual features (both under the anchor style)."""
    a = np.asarray(V_s_anchor, dtype=np.float64).mean(axis=-2)
    b = np.asarray(V_s_cand, dtype=np.float64).mean(axis=-2)
    return float(_cos(a, b))


def triplet_score(h_anchor, h_cand) -> float:
    return float(_cos(np.asarray(h_anchor, dtype=np.float64), np.asarray(h_cand, dtype=np.float64)))


def combined_score(p_obj, p_roi, p_tri, theta: float, phi: float, mu: int):
    """theta^mu * p_obj + (1 - theta^mu) * (phi * p_roi + (1 - phi) * p_tri); broadcasts over arrays."""
    if mu < 0:
        raise ValueError("epoch index must be >= 0")
    w = theta**mu
    return w * p_obj + (1 - w) * (phi * p_roi + (1 - phi) * p_tri)


def negative_threshold(p_max: float, omega: float, mu: int) -> float:
    return max(0.1, p_max - omega**mu)


@dataclass
class RetrievalCache:
    """Per-epoch snapshot: pooled V^s for every (image, style) and h for every triplet."""

    pooled: dict[str, np.ndarray]  # image_id -> (n_styles, d)
    triplets: dict[tuple, np.ndarray]  # triplet_key -> (d,)


@torch.no_grad()
def build_cache(model, items: Sequence[DatasetItem], n_styles: int, batch_size: int = 64) -> RetrievalCache:
    from .training import collate  # local import: training depends on this module

    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    images: dict[str, np.ndarray] = {}
    for it in items:
        images.setdefault(it.image_id, it.features)
    ids = sorted(images)
    pooled = {}
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        raw = torch.as_tensor(np.stack([images[i] for i in chunk]), dtype=dtype)
        per_style = []
        for s in range(n_styles):
            fused = model.encode(raw, torch.full((len(chunk),), s))
            per_style.append(pool(fused.V_s).double().numpy())
        stacked = np.stack(per_style, axis=1)
        pooled.update({i: stacked[j] for j, i in enumerate(chunk)})
    triplets = {}
    for start in range(0, len(items), batch_size):
        chunk = list(items[start : start + batch_size])
        raw, styles, caps = collate(chunk, dtype)
        fused = model.encode(raw, styles)
        h = model.triplet(model.decode(fused, caps), caps).double().numpy()
        triplets.update({triplet_key(it): h[j] for j, it in enumerate(chunk)})
    model.train(was_training)
    return RetrievalCache(pooled, triplets)


def score_candidates(anchor: DatasetItem, pool_items: Sequence[DatasetItem], cache: RetrievalCache | None,
                     config: SamplerConfig, mu: int) -> np.ndarray:
    """(len(pool), 4) array of p_obj, p_roi, p_tri, p for each candidate."""
    p_obj = np.array([object_overlap_score(anchor.objects, c.objects) for c in pool_items])
    if cache is None:
        if config.theta**mu != 1:
            raise ValueError("a representation cache is required once epoch > 0")
        p_roi = p_tri = np.zeros_like(p_obj)
    else:
        s = anchor.style_id
        r_a = cache.pooled[anchor.image_id][s]
        r_c = np.stack([cache.pooled[c.image_id][s] for c in pool_items])
        p_roi = _cos(r_a[None], r_c)
        h_a = cache.triplets[triplet_key(anchor)]
        h_c = np.stack([cache.triplets[triplet_key(c)] for c in pool_items])
        p_tri = _cos(h_a[None], h_c)
    p = combined_score(p_obj, p_roi, p_tri, config.theta, config.phi, mu)
    return np.stack([p_obj, p_roi, p_tri, p], axis=1)


def rank_candidates(anchor: DatasetItem, pool_items: Sequence[DatasetItem], cache: RetrievalCache | None,
                    config: SamplerConfig, mu: int) -> list[Candidate]:
    """Candidates sorted by descending P, ties broken by (image_id, style, caption).

    Every pool entry showing the anchor's own image is skipped: those are the
    same picture and would make trivial positives.
    """
    kept = [(i, c) for i, c in enumerate(pool_items) if c.image_id != anchor.image_id]
    if len(kept) < config.top_k_pos + config.num_negatives:
        raise ValueError(
            f"candidate pool of {len(kept)} is smaller than top_k_pos + num_negatives "
            f"= {config.top_k_pos + config.num_negatives}"
        )
    table = score_candidates(anchor, [c for _, c in kept], cache, config, mu)
    order = sorted(range(len(kept)), key=lambda j: (-table[j, 3], kept[j][1].image_id,
                                                    kept[j][1].style_id, tuple(kept[j][1].caption)))
    return [Candidate(kept[j][0], kept[j][1], RetrievalScores(*map(float, table[j]))) for j in order]


def sample_positive(ranked: Sequence[Candidate], rng: np.random.Generator, top_k: int = 10) -> Candidate:
    """Uniform draw among the ``top_k`` highest-scoring candidates."""
    if not ranked:
        raise ValueError("no candidates")
    if len(ranked) < top_k:
        log.warning("only %d candidates for top-%d positive sampling", len(ranked), top_k)
    return ranked[int(rng.integers(min(top_k, len(ranked))))]


def sample_negatives(ranked: Sequence[Candidate], M: int, omega: float, mu: int, rng: np.random.Generator,
                     exclude: Candidate | None = None) -> list[Candidate]:
    """M draws without replacement from candidates with P < max(0.1, P_max - omega^mu).

    When fewer than M qualify, all of them are taken and the rest is padded with
    the lowest-P remaining candidates.
    """
    threshold = negative_threshold(max(c.p for c in ranked), omega, mu)
    pool_ = [c for c in ranked if c is not exclude]
    admissible = [c for c in pool_ if c.p < threshold]
    if len(admissible) >= M:
        picks = rng.choice(len(admissible), size=M, replace=False)
        return [admissible[i] for i in sorted(picks)]
    log.info("only %d candidates below negative threshold %.4f; padding to %d", len(admissible), threshold, M)
    rest = [c for c in pool_ if c.p >= threshold]
    return admissible + rest[::-1][: M - len(admissible)]
