"""Joint-loss training, self-critical CIDEr fine-tuning and evaluation."""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .contrastive import DEFAULT_TAU, cosine_sim, stc_loss, svc_loss
from .core import PAD_ID, DatasetItem, Vocabulary, detokenize
from .encoders import FusedRepresentation, pool
from .generator import beam_search, caption_loss, greedy_decode_batch, sample_decode_batch
from .metrics import CiderD, score_all
from .model import SACOModel
from .retrieval import (
    RetrievalCache,
    SamplerConfig,
    build_cache,
    negative_threshold,
    rank_candidates,
    sample_negatives,
    sample_positive,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.5
    beta: float = 0.7
    tau: float = DEFAULT_TAU
    lr_train: float = 1e-4
    lr_finetune: float = 1e-5
    batch_size: int = 16
    epochs_train: int = 10
    epochs_finetune: int = 3
    warmup: float = 0.1
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    retrieval: bool = True
    keep_contrastive: bool = False
    eval_every: int = 1
    eval_beam: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.lr_train <= 0 or self.lr_finetune <= 0:
            raise ValueError("learning rates must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def total_loss(l_cap, l_svc, l_stc, alpha: float, beta: float):
    return l_cap + alpha * l_svc + beta * l_stc


def collate(items: Sequence[DatasetItem], dtype=torch.float32, style_ids: Sequence[int] | None = None):
    """Stack features, style ids and right-padded captions."""
    raw = torch.as_tensor(np.stack([it.features for it in items]), dtype=dtype)
    styles = torch.tensor([it.style_id for it in items] if style_ids is None else list(style_ids))
    width = max(len(it.caption) for it in items)
    caps = torch.full((len(items), width), PAD_ID, dtype=torch.long)
    for i, it in enumerate(items):
        caps[i, : len(it.caption)] = torch.tensor(it.caption)
    return raw, styles, caps


def make_optimizer(model: SACOModel, lr: float, weight_decay: float, total_steps: int, warmup: float):
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    warm = max(1, int(round(warmup * total_steps)))
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda step: min(1.0, (step + 1) / warm))
    return opt, sched


@dataclass
class Selection:
    positive: DatasetItem
    negatives: list[DatasetItem]
    corrupted_style: int
    p_pos: float
    p_negs: list[float]
    threshold: float


def select_samples(anchor: DatasetItem, items: Sequence[DatasetItem], cache: RetrievalCache | None,
                   sampler: SamplerConfig, mu: int, rng: np.random.Generator, n_styles: int,
                   use_retrieval: bool = True) -> Selection:
    """Draw one positive and M negatives for ``anchor``; selection is non-differentiable."""
    if use_retrieval:
        ranked = rank_candidates(anchor, items, cache, sampler, mu)
        pos = sample_positive(ranked, rng, sampler.top_k_pos)
        negs = sample_negatives(ranked, sampler.num_negatives, sampler.omega, mu, rng, exclude=pos)
        threshold = negative_threshold(ranked[0].p, sampler.omega, mu)
        sel_pos, sel_negs = pos.item, [n.item for n in negs]
        p_pos, p_negs = pos.p, [n.p for n in negs]
    else:
        others = [it for it in items if it.image_id != anchor.image_id]
        idx = rng.choice(len(others), size=sampler.num_negatives + 1, replace=False)
        sel_pos, sel_negs = others[idx[0]], [others[i] for i in idx[1:]]
        p_pos, p_negs, threshold = math.nan, [], math.nan
    shift = int(rng.integers(1, n_styles)) if n_styles > 1 else 0
    return Selection(sel_pos, sel_negs, (anchor.style_id + shift) % n_styles, p_pos, p_negs, threshold)


def batch_losses(model: SACOModel, anchors: Sequence[DatasetItem], selections: Sequence[Selection] | None,
                 tau: float) -> dict[str, Tensor]:
    """Caption loss for the anchors and, when ``selections`` is given, both contrastive losses."""
    dtype = next(model.parameters()).dtype
    B = len(anchors)
    if selections is None:
        raw, styles, caps = collate(anchors, dtype)
        fused = model.encode(raw, styles)
        state = model.decode(fused, caps)
        zero = state.logits.new_zeros(())
        return {"cap": caption_loss(state.logits, caps), "svc": zero, "stc": zero}

    M = len(selections[0].negatives)
    # SVC candidates are seen through the anchor's style
    svc_items = [s.positive for s in selections] + [n for s in selections for n in s.negatives]
    svc_styles = [a.style_id for a in anchors] + [a.style_id for a in anchors for _ in range(M)]
    # STC candidates keep their own (image, style, caption) triplet
    stc_items = (list(anchors) + [s.positive for s in selections]
                 + [n for s in selections for n in s.negatives] + list(anchors))
    stc_styles = ([it.style_id for it in stc_items[: B * (M + 2)]] + [s.corrupted_style for s in selections])

    raw_svc, st_svc, _ = collate(svc_items, dtype, svc_styles)
    raw_stc, st_stc, caps = collate(stc_items, dtype, stc_styles)
    fused_all = model.encode(torch.cat([raw_stc, raw_svc]), torch.cat([st_stc, st_svc]))
    n_stc = len(stc_items)
    fused_stc = FusedRepresentation(fused_all.V_s[:n_stc], fused_all.s_v[:n_stc])
    state = model.decode(fused_stc, caps)
    l_cap = caption_loss(state.logits[:B], caps[:B])

    V_svc, s_svc = fused_all.V_s[n_stc:], fused_all.s_v[n_stc:]
    anchor_fused = FusedRepresentation(fused_all.V_s[:B], fused_all.s_v[:B])
    pos_fused = FusedRepresentation(V_svc[:B], s_svc[:B])
    neg_fused = FusedRepresentation(V_svc[B:].reshape(B, M, *V_svc.shape[-2:]), s_svc[B:].reshape(B, M, -1))
    l_svc = svc_loss(anchor_fused, pos_fused, neg_fused, tau)

    h = model.triplet(state, caps)
    h_anchor, h_pos = h[:B], h[B : 2 * B]
    h_negs = torch.cat([h[2 * B : 2 * B + B * M].reshape(B, M, -1), h[2 * B + B * M :].unsqueeze(1)], dim=1)
    l_stc = stc_loss(h_anchor, h_pos, h_negs, tau)
    return {"cap": l_cap, "svc": l_svc, "stc": l_stc}


def _check_finite(losses: dict[str, Tensor], epoch: int, step: int, dump_dir: Path | None) -> None:
    values = {k: float(v.detach()) for k, v in losses.items()}
    if all(math.isfinite(v) for v in values.values()):
        return
    diag = {"epoch": epoch, "step": step, "losses": values}
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
        (dump_dir / "nonfinite_dump.json").write_text(json.dumps(diag, indent=2))
    raise TrainingError(f"non-finite loss: {diag}")


def train_epoch(model: SACOModel, items: Sequence[DatasetItem], optimizer, scheduler, config: TrainConfig,
                sampler: SamplerConfig, mu: int, rng: np.random.Generator, n_styles: int,
                cache: RetrievalCache | None = None, dump_dir: Path | None = None) -> dict:
    """One pass over ``items`` in a seeded random order; returns the report row."""
    model.train()
    contrastive = config.alpha > 0 or config.beta > 0
    order = rng.permutation(len(items))
    sums: dict[str, float] = defaultdict(float)
    p_pos, p_neg, thresholds = [], [], []
    n_steps = 0
    for step, start in enumerate(range(0, len(items), config.batch_size)):
        anchors = [items[i] for i in order[start : start + config.batch_size]]
        selections = None
        if contrastive:
            selections = [select_samples(a, items, cache, sampler, mu, rng, n_styles, config.retrieval)
                          for a in anchors]
            for s in selections:
                p_pos.append(s.p_pos)
                p_neg.extend(s.p_negs)
                thresholds.append(s.threshold)
        losses = batch_losses(model, anchors, selections, config.tau)
        loss = total_loss(losses["cap"], losses["svc"], losses["stc"], config.alpha, config.beta)
        losses["total"] = loss
        _check_finite(losses, mu, step, dump_dir)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()
        scheduler.step()
        for k, v in losses.items():
            sums[k] += float(v.detach()) * len(anchors)
        n_steps += 1
    n = len(items)

    def mean(xs):
        xs = [x for x in xs if not math.isnan(x)]
        return float(np.mean(xs)) if xs else math.nan

    return {
        "stage": "train", "epoch": mu,
        "L_cap": sums["cap"] / n, "L_svc": sums["svc"] / n, "L_stc": sums["stc"] / n, "L": sums["total"] / n,
        "pos_P_mean": mean(p_pos), "neg_P_mean": mean(p_neg), "neg_threshold_mean": mean(thresholds),
        "steps": n_steps,
    }


def reference_sets(items: Sequence[DatasetItem], vocab: Vocabulary) -> dict[tuple[str, int], list[str]]:
    """All gold captions of each (image, style) pair."""
    refs: dict[tuple[str, int], list[str]] = defaultdict(list)
    for it in items:
        refs[it.key].append(detokenize(it.caption, vocab))
    return dict(refs)


def scst_reward(sampled: str, greedy: str, references: Sequence[str], scorer: CiderD) -> float:
    """CIDEr(sampled) - CIDEr(greedy baseline)."""
    return scorer.score(sampled, references) - scorer.score(greedy, references)


def finetune_epoch(model: SACOModel, items: Sequence[DatasetItem], optimizer, scheduler, config: TrainConfig,
                   vocab: Vocabulary, scorer: CiderD, epoch: int, rng: np.random.Generator,
                   generator: torch.Generator, sampler: SamplerConfig | None = None, n_styles: int = 1,
                   cache: RetrievalCache | None = None, dump_dir: Path | None = None) -> dict:
    """Self-critical policy-gradient pass with CIDEr-D reward and greedy baseline.

    A batch whose rewards are all zero skips the optimizer step, so parameters
    stay bit-identical.
    """
    model.train()
    dtype = next(model.parameters()).dtype
    refs = reference_sets(items, vocab)
    order = rng.permutation(len(items))
    rewards_all: list[float] = []
    sums: dict[str, float] = defaultdict(float)
    skipped = 0
    for step, start in enumerate(range(0, len(items), config.batch_size)):
        anchors = [items[i] for i in order[start : start + config.batch_size]]
        raw, styles, _ = collate(anchors, dtype)
        with torch.no_grad():
            fused = model.encode(raw, styles)
            greedy = greedy_decode_batch(model.decoder, fused.V_s, fused.s_v, model.config.max_len)
            sampled = sample_decode_batch(model.decoder, fused.V_s, fused.s_v, generator, model.config.max_len)
        rewards = [
            scst_reward(detokenize(s, vocab), detokenize(g, vocab), refs[a.key], scorer)
            for s, g, a in zip(sampled, greedy, anchors)
        ]
        rewards_all.extend(rewards)
        keep_contrastive = config.keep_contrastive and sampler is not None and (config.alpha or config.beta)
        if not any(rewards) and not keep_contrastive:
            skipped += 1
            continue
        fused = model.encode(raw, styles)
        width = max(len(s) for s in sampled)
        seqs = torch.full((len(anchors), width), PAD_ID, dtype=torch.long)
        for i, s in enumerate(sampled):
            seqs[i, : len(s)] = torch.tensor(s)
        state = model.decode(fused, seqs)
        logp = torch.log_softmax(state.logits, -1).gather(-1, seqs.unsqueeze(-1)).squeeze(-1)
        logp = logp.masked_fill(seqs == PAD_ID, 0.0).sum(-1)
        loss = -(torch.tensor(rewards, dtype=logp.dtype) * logp).mean()
        losses = {"rl": loss}
        if keep_contrastive:
            sels = [select_samples(a, items, cache, sampler, epoch, rng, n_styles, config.retrieval) for a in anchors]
            extra = batch_losses(model, anchors, sels, config.tau)
            loss = loss + config.alpha * extra["svc"] + config.beta * extra["stc"]
            losses.update(svc=extra["svc"], stc=extra["stc"])
        _check_finite(losses, epoch, step, dump_dir)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()
        scheduler.step()
        for k, v in losses.items():
            sums[k] += float(v.detach())
    r = np.array(rewards_all)
    return {
        "stage": "finetune", "epoch": epoch,
        "L_rl": sums["rl"], "reward_mean": float(r.mean()), "reward_pos_frac": float((r > 0).mean()),
        "skipped_batches": skipped,
    }


def generate_captions(model: SACOModel, items: Sequence[DatasetItem], vocab: Vocabulary, beam: int = 3,
                      ) -> dict[tuple[str, int], str]:
    """Beam-search caption for every distinct (image, style) pair."""
    model.eval()
    dtype = next(model.parameters()).dtype
    firsts: dict[tuple[str, int], DatasetItem] = {}
    for it in items:
        firsts.setdefault(it.key, it)
    out = {}
    with torch.no_grad():
        for key, it in firsts.items():
            raw = torch.as_tensor(it.features, dtype=dtype).unsqueeze(0)
            fused = model.encode(raw, torch.tensor([it.style_id]))
            ids = beam_search(model.decoder, fused.V_s, fused.s_v, beam, model.config.max_len)
            out[key] = detokenize(ids, vocab)
    return out


def item_id(key: tuple[str, int]) -> str:
    return f"{key[0]}#{key[1]}"


def score_predictions(predictions: dict[tuple[str, int], str],
                      references: dict[tuple[str, int], list[str]]) -> dict[str, float]:
    cands = {item_id(k): v for k, v in predictions.items()}
    refs = {item_id(k): references[k] for k in predictions}
    return score_all(cands, refs)


def evaluate(model: SACOModel, items: Sequence[DatasetItem], vocab: Vocabulary, beam: int = 3):
    """Returns (metric map, caption dump keyed ``image_id#style``)."""
    preds = generate_captions(model, items, vocab, beam)
    scores = score_predictions(preds, reference_sets(items, vocab))
    metrics = {k: scores[k] for k in ("bleu1", "bleu4", "rougeL", "cider")}
    return metrics, {item_id(k): v for k, v in preds.items()}


def teacher_forced_accuracy(model: SACOModel, items: Sequence[DatasetItem]) -> float:
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        raw, styles, caps = collate(items, dtype)
        logits = model.decode(model.encode(raw, styles), caps).logits
    mask = caps != PAD_ID
    return float(((logits.argmax(-1) == caps) & mask).sum() / mask.sum())


def exact_match_rate(model: SACOModel, items: Sequence[DatasetItem]) -> float:
    """Fraction of items whose greedy decode equals the gold caption token for token."""
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        raw, styles, _ = collate(items, dtype)
        fused = model.encode(raw, styles)
        outs = greedy_decode_batch(model.decoder, fused.V_s, fused.s_v, model.config.max_len)
    return float(np.mean([o == it.caption for o, it in zip(outs, items)]))


def pair_margin(model: SACOModel, items: Sequence[DatasetItem], sampler: SamplerConfig, seed: int = 0) -> dict:
    """Mean cosine of pooled V^s for anchor-positive pairs minus anchor-negative pairs.

    Pairs come from epoch-0 (object-overlap only) retrieval so that they do not
    depend on the model being measured; all images are encoded under the anchor style.
    """
    rng = np.random.default_rng(seed)
    model.eval()
    dtype = next(model.parameters()).dtype
    pos_sims, neg_sims = [], []
    with torch.no_grad():
        for anchor in items:
            ranked = rank_candidates(anchor, items, None, sampler, 0)
            pos = sample_positive(ranked, rng, sampler.top_k_pos)
            negs = sample_negatives(ranked, sampler.num_negatives, sampler.omega, 0, rng, exclude=pos)
            group = [anchor, pos.item] + [n.item for n in negs]
            raw, _, _ = collate(group, dtype)
            r = pool(model.encode(raw, torch.full((len(group),), anchor.style_id)).V_s)
            sims = cosine_sim(r[:1], r[1:])
            pos_sims.append(float(sims[0]))
            neg_sims.extend(sims[1:].tolist())
    return {"pos": float(np.mean(pos_sims)), "neg": float(np.mean(neg_sims)),
            "margin": float(np.mean(pos_sims) - np.mean(neg_sims))}


def fit(model: SACOModel, items: Sequence[DatasetItem], vocab: Vocabulary, config: TrainConfig,
        sampler: SamplerConfig, n_styles: int, eval_items: Sequence[DatasetItem] | None = None,
        dump_dir: Path | None = None, on_epoch: Callable[[dict], bool | None] | None = None) -> list[dict]:
    """Training stage: ``config.epochs_train`` epochs of the joint loss.

    ``on_epoch`` receives each report row; returning True stops training early.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    rng = np.random.default_rng(seeds[0])
    steps_per_epoch = math.ceil(len(items) / config.batch_size)
    opt, sched = make_optimizer(model, config.lr_train, config.weight_decay,
                                steps_per_epoch * config.epochs_train, config.warmup)
    contrastive = config.alpha > 0 or config.beta > 0
    rows = []
    for mu in range(config.epochs_train):
        cache = build_cache(model, items, n_styles) if contrastive and config.retrieval and mu > 0 else None
        row = train_epoch(model, items, opt, sched, config, sampler, mu, rng, n_styles, cache, dump_dir)
        if config.eval_every and ((mu + 1) % config.eval_every == 0 or mu == config.epochs_train - 1):
            row.update(evaluate(model, eval_items or items, vocab, config.eval_beam)[0])
        rows.append(row)
        log.info("epoch %d: %s", mu, {k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()})
        if on_epoch and on_epoch(row):
            break
    return rows


def finetune(model: SACOModel, items: Sequence[DatasetItem], vocab: Vocabulary, config: TrainConfig,
             sampler: SamplerConfig | None = None, n_styles: int = 1,
             eval_items: Sequence[DatasetItem] | None = None, dump_dir: Path | None = None,
             on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Fine-tuning stage; the CIDEr-D df table is frozen over the training references."""
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    rng = np.random.default_rng(seeds[2])
    generator = torch.Generator().manual_seed(int(seeds[2].generate_state(1)[0]))
    scorer = CiderD(list(reference_sets(items, vocab).values()))
    steps_per_epoch = math.ceil(len(items) / config.batch_size)
    opt, sched = make_optimizer(model, config.lr_finetune, config.weight_decay,
                                steps_per_epoch * config.epochs_finetune, config.warmup)
    rows = []
    for epoch in range(config.epochs_finetune):
        cache = None
        if config.keep_contrastive and sampler is not None and config.retrieval:
            cache = build_cache(model, items, n_styles)
        row = finetune_epoch(model, items, opt, sched, config, vocab, scorer, epoch, rng, generator,
                             sampler, n_styles, cache, dump_dir)
        if config.eval_every and ((epoch + 1) % config.eval_every == 0 or epoch == config.epochs_finetune - 1):
            row.update(evaluate(model, eval_items or items, vocab, config.eval_beam)[0])
        rows.append(row)
        log.info("finetune epoch %d: %s", epoch, row)
        if on_epoch:
            on_epoch(row)
    return rows


def train_config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
