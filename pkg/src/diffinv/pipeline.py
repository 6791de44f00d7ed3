"""Generate B' from a query image B and learned Difference Tokens."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .anchoring import AnchorPrompt
from .backends import BackendBundle
from .inversion import DiffTokens, resolve_anchor
from .prompts import FullPrompt, assemble_full_prompt

__all__ = ["GenerationConfig", "Generation", "assemble_full_prompt", "full_prompt_for", "generate_bprime", "FullPrompt"]


@dataclass
class GenerationConfig:
    strength: float = 0.7
    steps: int = 50
    guidance: float = 7.5
    seed: int = 0
    reverse: bool = False

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("strength must lie in [0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class Generation:
    image: np.ndarray
    prompt_B: AnchorPrompt
    full_prompt: FullPrompt
    timesteps: list[int]
    fallback: bool = False


def full_prompt_for(prompt_B: AnchorPrompt, d: DiffTokens, backend: BackendBundle, reverse: bool = False) -> FullPrompt:
    rows = d.signed(backend.vocab).detach()
    return assemble_full_prompt(prompt_B.embeddings, rows, sign=-1 if reverse else 1, max_length=backend.max_length, prompt_name="prompt_B")


def generate_bprime(
    B,
    d: DiffTokens,
    backend: BackendBundle,
    gen_cfg: GenerationConfig = GenerationConfig(),
    prompt_B: Optional[AnchorPrompt] = None,
    anchor_mode: str = "caption",
    caption: Optional[str] = None,
    anchor_options: Optional[dict] = None,
) -> Generation:
    """DDIM-invert B under its own prompt, then denoise under ``{prompt_B, D}``.

    Only ``strength * steps`` of the schedule is traversed; strength 0 returns
    ``decode(encode(B))``. Backends without inversion get seeded noise injection
    at the same depth instead (``fallback`` is set).
    """
    if prompt_B is None:
        prompt_B = resolve_anchor(B, anchor_mode, backend, caption, **(anchor_options or {}))
    full = full_prompt_for(prompt_B, d, backend, gen_cfg.reverse)

    schedule_ts = backend.schedule.ddim_timesteps(gen_cfg.steps)
    k = int(gen_cfg.strength * len(schedule_ts))
    timesteps = schedule_ts[:k]
    z0 = backend.encode_latent(B)
    if not timesteps:
        return Generation(backend.decode_latent(z0), prompt_B, full, [], False)

    fallback = not backend.supports_inversion
    if fallback:
        gen = torch.Generator().manual_seed(int(gen_cfg.seed))
        eps = backend.latent_noise(z0.shape, gen).to(z0.dtype)
        z_t = backend.add_noise(z0, timesteps[-1], eps)
    else:
        z_t = backend.invert(z0, prompt_B.embeddings.to(z0.dtype), timesteps)
    z = backend.denoise(z_t, full.embeddings.to(z0.dtype), timesteps, gen_cfg.guidance)
    return Generation(backend.decode_latent(z), prompt_B, full, timesteps, fallback)
