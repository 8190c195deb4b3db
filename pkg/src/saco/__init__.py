"""Style-aware contrastive learning for multi-style image captioning."""

__version__ = "0.1.0"
