"""Manifest + float32 blob ingestion and the synthetic style-conditioned dataset."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DatasetItem, Vocabulary, build_vocab, encode_caption

OBJECT_CLASSES = (
    "dog", "cat", "ball", "tree", "car", "bird", "horse", "boat", "chair", "cake",
    "kite", "bench", "flower", "clock", "bicycle", "umbrella", "bottle", "train", "sheep", "pizza",
)
STYLE_NAMES = ("happy", "gloomy", "humorous", "romantic", "angry", "calm", "dramatic", "sarcastic")
_WORD_BANK = (
    "bright sunny cheerful lovely joyful merry playful sparkling golden warm "
    "dreary lonely gray somber broken cold faded weary bleak dismal "
    "silly goofy wacky clumsy quirky zany funky cheeky loopy dizzy "
    "tender dreamy sweet gentle radiant charming darling precious soft blushing "
    "furious grumpy nasty awful rotten cranky bitter harsh fierce rude "
    "serene quiet peaceful still mellow placid tranquil easy restful smooth "
    "epic mighty stormy roaring towering wild majestic grand thundering vast "
    "fancy brilliant thrilling riveting stunning genius amazing perfect flawless classic"
).split()
_OPENERS = ("yay", "sigh", "lol", "aww", "ugh", "hmm", "behold", "wow")
_CLOSERS = ("hooray", "alas", "haha", "sweetheart", "grr", "indeed", "forever", "obviously")
FUNCTION_WORDS = ("a", "and", "with")


@dataclass
class ManifestItem:
    image_id: str
    feature_file: str
    m: int
    d_raw: int
    objects: list[str]
    captions: list[dict]


@dataclass
class Manifest:
    styles: list[str]
    items: list[ManifestItem]
    root: Path = field(default_factory=Path)

    def features(self, item: ManifestItem) -> np.ndarray:
        return read_blob(self.root / item.feature_file, item.m, item.d_raw)

    def item(self, image_id: str) -> ManifestItem:
        for it in self.items:
            if it.image_id == image_id:
                return it
        raise KeyError(f"unknown image id {image_id!r}")

    def to_json(self) -> dict:
        return {
            "styles": list(self.styles),
            "items": [
                {"image_id": it.image_id, "feature_file": it.feature_file, "m": it.m, "d_raw": it.d_raw,
                 "objects": list(it.objects), "captions": list(it.captions)}
                for it in self.items
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")


def write_blob(path: str | Path, features: np.ndarray) -> None:
    """Row-major little-endian float32, no header."""
    np.ascontiguousarray(features, dtype="<f4").tofile(path)


def read_blob(path: str | Path, m: int, d_raw: int) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").reshape(m, d_raw).astype(np.float32)


def load_manifest(path: str | Path) -> Manifest:
    """Parse and validate a manifest; feature blobs are size-checked but read lazily."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    payload = json.loads(path.read_text())
    styles = list(payload["styles"])
    items, seen = [], set()
    for raw in payload["items"]:
        it = ManifestItem(raw["image_id"], raw["feature_file"], int(raw["m"]), int(raw["d_raw"]),
                          list(raw.get("objects", [])), list(raw.get("captions", [])))
        if it.image_id in seen:
            raise ValueError(f"duplicate image id {it.image_id!r}")
        seen.add(it.image_id)
        if it.m < 1 or it.d_raw < 1:
            raise ValueError(f"{it.image_id}: m and d_raw must be >= 1")
        blob = path.parent / it.feature_file
        expected = it.m * it.d_raw * 4
        actual = os.path.getsize(blob) if blob.exists() else None
        if actual != expected:
            raise ValueError(f"{it.image_id}: feature blob {blob} has {actual} bytes, expected {expected}")
        for cap in it.captions:
            if not 0 <= int(cap["style"]) < len(styles):
                raise ValueError(f"{it.image_id}: unknown style index {cap['style']}")
        items.append(it)
    return Manifest(styles, items, path.parent)


def manifest_corpus(manifest: Manifest) -> list[str]:
    return [c["text"] for it in manifest.items for c in it.captions]


def dataset_items(manifest: Manifest, vocab: Vocabulary) -> list[DatasetItem]:
    """One DatasetItem per (image, caption) pair, in manifest order."""
    out = []
    for it in manifest.items:
        feats = manifest.features(it)
        for cap in it.captions:
            out.append(DatasetItem(it.image_id, feats, frozenset(it.objects), int(cap["style"]),
                                   encode_caption(cap["text"], vocab), n_styles=len(manifest.styles)))
    return out


def load_dataset(path: str | Path, vocab: Vocabulary | None = None, min_freq: int = 1):
    manifest = load_manifest(path)
    vocab = vocab or build_vocab(manifest_corpus(manifest), min_freq)
    return manifest, vocab, dataset_items(manifest, vocab)


@dataclass
class SyntheticSpec:
    n_items: int = 32
    n_styles: int = 3
    m: int = 9
    d_raw: int = 64
    vocab_size: int = 60
    seed: int = 0
    noise: float = 0.1
    n_classes: int = 20
    min_objects: int = 2
    max_objects: int = 5

    def __post_init__(self):
        for name in ("n_items", "n_styles", "m", "d_raw", "vocab_size", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_styles > len(STYLE_NAMES):
            raise ValueError(f"at most {len(STYLE_NAMES)} synthetic styles")
        if not 1 <= self.min_objects <= self.max_objects <= self.n_classes <= len(OBJECT_CLASSES):
            raise ValueError("object count bounds out of range")


class StyleGrammar:
    """Caption template per style.

    Each style owns an opener, a closer, a set of focus objects and a bank of
    modifiers. Focus objects are described with that style's modifier and
    listed first; the remaining objects follow plainly after "with".
    """

    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        classes = list(OBJECT_CLASSES[: spec.n_classes])
        fixed = 4 + len(classes) + len(FUNCTION_WORDS) + 2 * spec.n_styles
        n_mod = max(1, (spec.vocab_size - fixed) // spec.n_styles)
        bank = [w for w in _WORD_BANK]
        while len(bank) < n_mod * spec.n_styles:
            bank.append(f"mod{len(bank)}")
        bank = [bank[i] for i in rng.permutation(len(bank))]
        self.classes = classes
        self.openers = list(_OPENERS[: spec.n_styles])
        self.closers = list(_CLOSERS[: spec.n_styles])
        self.modifiers = [bank[s * n_mod : (s + 1) * n_mod] for s in range(spec.n_styles)]
        # each class is a focus of one style, assigned round-robin over a shuffled order
        order = rng.permutation(len(classes))
        self.focus: list[dict[str, str]] = [{} for _ in range(spec.n_styles)]
        for rank, c in enumerate(order):
            style = rank % spec.n_styles
            mods = self.modifiers[style]
            self.focus[style][classes[c]] = mods[len(self.focus[style]) % len(mods)]

    def caption(self, objects: list[str], style: int) -> str:
        ordered = sorted(objects, key=self.classes.index)
        focus = [o for o in ordered if o in self.focus[style]]
        rest = [o for o in ordered if o not in self.focus[style]]
        parts = [self.openers[style]]
        described = [f"a {self.focus[style][o]} {o}" for o in focus]
        if described:
            parts.append(" and ".join(described))
        if rest:
            parts.append(("with " if described else "") + " and ".join(f"a {o}" for o in rest))
        parts.append(self.closers[style])
        return " ".join(parts)


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Manifest:
    """Write ``manifest.json`` and ``features/*.f32`` under ``out_dir``; deterministic in ``spec.seed``."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    grammar = StyleGrammar(spec, rng)
    signatures = rng.standard_normal((spec.n_classes, spec.m, spec.d_raw)).astype(np.float32)
    items = []
    width = len(str(spec.n_items - 1))
    for i in range(spec.n_items):
        k = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        picked = sorted(rng.choice(spec.n_classes, size=k, replace=False).tolist())
        objects = [grammar.classes[c] for c in picked]
        feats = signatures[picked].sum(axis=0)
        feats = feats + spec.noise * rng.standard_normal(feats.shape).astype(np.float32)
        image_id = f"syn{i:0{width}d}"
        rel = f"features/{image_id}.f32"
        write_blob(out_dir / rel, feats)
        captions = [{"style": s, "text": grammar.caption(objects, s)} for s in range(spec.n_styles)]
        items.append(ManifestItem(image_id, rel, spec.m, spec.d_raw, objects, captions))
    manifest = Manifest(list(STYLE_NAMES[: spec.n_styles]), items, out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest
