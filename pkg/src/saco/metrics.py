"""BLEU, ROUGE-L and CIDEr-D, following the coco-caption conventions.

Captions are compared as lowercase whitespace tokens. Corpus inputs are two
mappings keyed by item id: ``candidates[id] -> str`` and
``references[id] -> list[str]``.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Mapping, Sequence

from .core import split_words

Ngram = tuple[str, ...]


def ngram_counts(words: Sequence[str], n: int) -> Counter:
    """Counts of all k-grams for k = 1..n."""
    counts: Counter = Counter()
    for k in range(1, n + 1):
        for i in range(len(words) - k + 1):
            counts[tuple(words[i : i + k])] += 1
    return counts


def _check(candidates: Mapping[str, str], references: Mapping[str, Sequence[str]]) -> list:
    if not candidates:
        raise ValueError("empty scoring corpus")
    for key in candidates:
        if not references.get(key):
            raise KeyError(f"no references for item {key!r}")
    return sorted(candidates)


def bleu(candidates: Mapping[str, str], references: Mapping[str, Sequence[str]], max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..max_n: clipped n-gram precision, closest-reference brevity penalty."""
    keys = _check(candidates, references)
    correct = [0] * max_n
    guess = [0] * max_n
    test_len = ref_len = 0
    for key in keys:
        hyp = split_words(candidates[key])
        refs = [split_words(r) for r in references[key]]
        max_ref: Counter = Counter()
        for r in refs:
            max_ref |= ngram_counts(r, max_n)
        for gram, count in ngram_counts(hyp, max_n).items():
            correct[len(gram) - 1] += min(count, max_ref[gram])
        for k in range(max_n):
            guess[k] += max(0, len(hyp) - k)
        test_len += len(hyp)
        # closest reference length, shorter one on ties
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]

    scores = []
    log_sum = 0.0
    for k in range(max_n):
        if correct[k] == 0:
            scores.extend([0.0] * (max_n - k))
            break
        log_sum += math.log(correct[k] / guess[k])
        scores.append(math.exp(log_sum / (k + 1)))
    if 0 < test_len < ref_len:
        bp = math.exp(1 - ref_len / test_len)
        scores = [s * bp for s in scores]
    return scores


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_single(candidate: str, refs: Sequence[str], beta: float = 1.2) -> float:
    """LCS F-measure; precision and recall are each maximized over references."""
    hyp = split_words(candidate)
    if not hyp:
        return 0.0
    prec, rec = [], []
    for ref in refs:
        r = split_words(ref)
        lcs = lcs_length(r, hyp)
        prec.append(lcs / len(hyp))
        rec.append(lcs / len(r) if r else 0.0)
    p, r = max(prec), max(rec)
    if p == 0 or r == 0:
        return 0.0
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l(candidates: Mapping[str, str], references: Mapping[str, Sequence[str]]) -> float:
    keys = _check(candidates, references)
    return sum(rouge_l_single(candidates[k], references[k]) for k in keys) / len(keys)


class CiderD:
    """CIDEr-D scorer with a document-frequency table fixed at construction.

    ``reference_sets`` is one list of reference captions per image; the df table
    counts, for each n-gram, how many of those sets contain it.
    """

    def __init__(self, reference_sets: Sequence[Sequence[str]], n: int = 4, sigma: float = 6.0):
        self.n = n
        self.sigma = sigma
        self.df: Counter = Counter()
        for refs in reference_sets:
            self.df.update({g for r in refs for g in ngram_counts(split_words(r), n)})
        self.log_n_docs = math.log(float(len(reference_sets))) if reference_sets else 0.0

    def _vector(self, words: list[str]):
        vec: list[dict[Ngram, float]] = [{} for _ in range(self.n)]
        norm = [0.0] * self.n
        for gram, tf in ngram_counts(words, self.n).items():
            w = tf * (self.log_n_docs - math.log(max(1.0, self.df[gram])))
            vec[len(gram) - 1][gram] = w
            norm[len(gram) - 1] += w * w
        # length is measured in bigrams, as in the reference implementation
        return vec, [math.sqrt(x) for x in norm], max(0, len(words) - 1)

    def _sim(self, hyp, ref) -> float:
        (vh, nh, lh), (vr, nr, lr) = hyp, ref
        penalty = math.exp(-((lh - lr) ** 2) / (2 * self.sigma**2))
        total = 0.0
        for k in range(self.n):
            val = sum(min(w, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, w in vh[k].items())
            if nh[k] != 0 and nr[k] != 0:
                val /= nh[k] * nr[k]
            total += val * penalty
        return total / self.n

    def score(self, candidate: str, refs: Sequence[str]) -> float:
        """Per-item CIDEr-D on the 0-10 scale."""
        if not refs:
            raise ValueError("no references")
        hyp = self._vector(split_words(candidate))
        return 10.0 * sum(self._sim(hyp, self._vector(split_words(r))) for r in refs) / len(refs)


def cider_scores(candidates: Mapping[str, str], references: Mapping[str, Sequence[str]],
                 scorer: CiderD | None = None) -> dict[str, float]:
    keys = _check(candidates, references)
    scorer = scorer or CiderD([references[k] for k in keys])
    return {k: scorer.score(candidates[k], references[k]) for k in keys}


def cider(candidates: Mapping[str, str], references: Mapping[str, Sequence[str]],
          scorer: CiderD | None = None) -> float:
    scores = cider_scores(candidates, references, scorer)
    return sum(scores.values()) / len(scores)


def score_all(candidates: Mapping[str, str], references: Mapping[str, Sequence[str]]) -> dict[str, float]:
    b = bleu(candidates, references)
    return {
        "bleu1": b[0],
        "bleu2": b[1],
        "bleu3": b[2],
        "bleu4": b[3],
        "rougeL": rouge_l(candidates, references),
        "cider": cider(candidates, references),
    }
