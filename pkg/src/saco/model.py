"""The full captioner: visual projection, style table, style-aware encoder and decoder."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from safetensors.torch import load_file, save_file
from torch import Tensor, nn

from .encoders import FusedRepresentation, StyleAwareEncoder, StyleEmbedding, VisualProjection
from .generator import MAX_LEN, CaptionDecoder, DecoderState, teacher_inputs, triplet_repr
from .core import PAD_ID


@dataclass
class ModelConfig:
    vocab_size: int
    n_styles: int
    n_regions: int = 9
    d_raw: int = 64
    d: int = 32
    d_h: int = 64
    enc_layers: int = 3
    enc_heads: int = 4
    dec_layers: int = 2
    dec_heads: int = 4
    max_len: int = MAX_LEN
    decoder_uses_style_token: bool = True
    dropout: float = 0.0
    seed: int = 0


class SACOModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.project = VisualProjection(c.d_raw, c.d)
        self.style = StyleEmbedding(c.n_styles, c.d)
        self.encoder = StyleAwareEncoder(c.d, c.n_regions, c.enc_layers, c.enc_heads, dropout=c.dropout)
        self.decoder = CaptionDecoder(c.vocab_size, c.d, c.d_h, c.dec_layers, c.dec_heads, c.n_regions,
                                      c.max_len, c.decoder_uses_style_token, dropout=c.dropout)

    def encode(self, raw: Tensor, style_ids: Tensor | int) -> FusedRepresentation:
        """(B, m, d') raw features and (B,) style ids -> fused (V^s, s^v)."""
        return self.encoder(self.project(raw), self.style(style_ids))

    def decode(self, fused: FusedRepresentation, captions: Tensor) -> DecoderState:
        """Teacher-forced pass over gold captions (B, N), right-padded with <PAD>."""
        return self.decoder(fused.V_s, fused.s_v, teacher_inputs(captions))

    def triplet(self, state: DecoderState, captions: Tensor) -> Tensor:
        return triplet_repr(state.hidden, self.decoder.mlp_tri, captions != PAD_ID)


def build_model(config: ModelConfig) -> SACOModel:
    torch.manual_seed(config.seed)
    return SACOModel(config)


def save_checkpoint(model: SACOModel, path: str | Path, extra: dict | None = None) -> None:
    """Write ``path`` (safetensors, parameters keyed by module path) and ``path.json`` (config)."""
    path = Path(path)
    tensors = {k: v.detach().contiguous().cpu() for k, v in model.state_dict().items()}
    save_file(tensors, str(path))
    meta = {"model": asdict(model.config), **(extra or {})}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[SACOModel, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    model = SACOModel(ModelConfig(**meta["model"]))
    state = load_file(str(path))
    dtype = next(iter(state.values())).dtype
    model.to(dtype)
    model.load_state_dict(state)
    return model, meta
