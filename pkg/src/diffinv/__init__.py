"""Difference Inversion: learn the A -> A' difference as tokens and apply it to any B."""

from .core import Delta, Provenance, cosine_alignment_loss, image_delta, slerp, text_delta
from .inversion import DiffTokens, InversionConfig, init_diff_tokens, negate, optimize
from .pipeline import GenerationConfig, assemble_full_prompt, generate_bprime

__version__ = "0.1.0"

__all__ = [
    "Delta", "DiffTokens", "GenerationConfig", "InversionConfig", "Provenance",
    "assemble_full_prompt", "cosine_alignment_loss", "generate_bprime", "image_delta",
    "init_diff_tokens", "negate", "optimize", "slerp", "text_delta",
]
