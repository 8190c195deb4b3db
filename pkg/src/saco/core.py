"""Vocabulary, whitespace tokenization and the shared dataset item model."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, SOS, EOS, UNK = "<PAD>", "<SOS>", "<EOS>", "<UNK>"
SPECIALS = (PAD, SOS, EOS, UNK)
PAD_ID, SOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


class Vocabulary:
    """Bijective token/id map with the four special tokens pinned to ids 0-3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if len(tokens) < 5:
            raise ValueError("vocabulary needs at least one non-special token")
        self.id_to_token = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    @property
    def specials(self) -> dict[str, int]:
        return {t: self.token_to_id[t] for t in SPECIALS}

    def to_json(self) -> str:
        return json.dumps(
            {"tokens": self.id_to_token, "specials": self.specials},
            ensure_ascii=False,
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        payload = json.loads(text)
        vocab = cls(payload["tokens"])
        if payload.get("specials", vocab.specials) != vocab.specials:
            raise ValueError("special token ids do not match the pinned layout")
        return vocab

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def split_words(text: str) -> list[str]:
    return text.lower().split()


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocabulary:
    """Build a vocabulary from caption strings.

    Tokens are ordered by descending frequency, ties broken lexicographically,
    so the result depends only on the corpus multiset and ``min_freq``.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    counts = Counter(w for text in corpus for w in split_words(text))
    for special in SPECIALS:
        counts.pop(special.lower(), None)
        counts.pop(special, None)
    kept = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
    if not kept:
        raise ValueError("no token reaches min_freq; vocabulary would be specials only")
    return Vocabulary(list(SPECIALS) + kept)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.token_to_id.get(w, UNK_ID) for w in split_words(text)]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise IndexError(f"token id {i} outside vocabulary of size {len(vocab)}")
        if i in (PAD_ID, SOS_ID, EOS_ID):
            continue
        words.append(vocab.id_to_token[i])
    return " ".join(words)


def encode_caption(text: str, vocab: Vocabulary) -> list[int]:
    """Token ids of ``text`` terminated by <EOS>; the gold sequence C."""
    return tokenize(text, vocab) + [EOS_ID]


@dataclass
class DatasetItem:
    """One (image, style, caption) triplet with its pre-extracted features."""

    image_id: str
    features: np.ndarray
    objects: frozenset[str]
    style_id: int
    caption: list[int]
    n_styles: int | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float32)
        self.objects = frozenset(self.objects)
        if self.features.ndim != 2 or min(self.features.shape) < 1:
            raise ValueError(f"{self.image_id}: features must be a non-empty m x d' matrix")
        if not self.caption or self.caption[-1] != EOS_ID:
            raise ValueError(f"{self.image_id}: caption must end with <EOS>")
        if self.style_id < 0 or (self.n_styles is not None and self.style_id >= self.n_styles):
            raise ValueError(f"{self.image_id}: style id {self.style_id} out of range")

    @property
    def key(self) -> tuple[str, int]:
        return (self.image_id, self.style_id)
