from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import torch

from .schedule import NoiseSchedule, ddim_denoise, ddim_invert


class BackendError(RuntimeError):
    """A backend could not be constructed or a model role is unavailable."""


class CaptionerUnavailable(BackendError):
    pass


@dataclass
class VocabTable:
    embeddings: torch.Tensor
    token_strings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] == 0:
            raise ValueError("vocab embeddings must be a non-empty V x d_tok matrix")
        if not bool(torch.isfinite(self.embeddings).all()):
            raise ValueError("vocab embeddings must be finite")
        if self.token_strings and len(self.token_strings) != self.embeddings.shape[0]:
            raise ValueError("one token string per vocab row")

    @property
    def size(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def d_tok(self) -> int:
        return int(self.embeddings.shape[1])

    def lookup(self, token_ids: Sequence[int]) -> torch.Tensor:
        return self.embeddings[torch.as_tensor(list(token_ids), dtype=torch.long)]

    def decode(self, token_ids: Sequence[int]) -> str:
        if not self.token_strings:
            return " ".join(f"<{i}>" for i in token_ids)
        return " ".join(self.token_strings[i] for i in token_ids)


TextInput = Union[Sequence[int], torch.Tensor]


class BackendBundle:
    """Every pretrained-model role the pipeline needs, behind one interface.

    Subclasses fill in the model roles; latent noising and DDIM sampling are
    shared. Conditions are always token-embedding matrices of width ``d_tok`` so
    that Difference Tokens can be spliced in without a tokenizer round trip.
    """

    name: str = "abstract"
    d_joint: int
    d_tok: int
    max_length: int
    supports_inversion: bool = True
    vocab: VocabTable
    schedule: NoiseSchedule
    dtype: torch.dtype = torch.float64

    # -- joint image/text space -------------------------------------------------
    def encode_image(self, image) -> torch.Tensor:
        raise NotImplementedError

    def encode_text(self, tokens: TextInput) -> torch.Tensor:
        """Encode token ids, or a raw m x d_tok embedding matrix, to one d_joint vector."""
        if isinstance(tokens, torch.Tensor) and torch.is_floating_point(tokens):
            emb = tokens
        else:
            ids = [int(i) for i in tokens]
            if not ids:
                raise ValueError("cannot encode an empty token sequence")
            emb = self.vocab.lookup(ids)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise ValueError("text input must be a non-empty m x d_tok matrix")
        if emb.shape[1] != self.d_tok:
            raise ValueError(f"embedding width {emb.shape[1]} != d_tok {self.d_tok}")
        return self._encode_embeddings(emb)

    def _encode_embeddings(self, emb: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def tokenize(self, text: str) -> list[int]:
        raise NotImplementedError

    def encode_caption(self, text: str) -> torch.Tensor:
        return self.encode_text(self.tokenize(text))

    def caption(self, image) -> str:
        raise CaptionerUnavailable(
            f"backend {self.name!r} has no captioner; supply captions in the triplet manifest "
            "(caption_A / caption_Aprime / caption_B) and set anchor.mode = 'user'"
        )

    # -- latent diffusion --------------------------------------------------------
    def encode_latent(self, image) -> torch.Tensor:
        raise NotImplementedError

    def decode_latent(self, z0: torch.Tensor) -> np.ndarray:
        raise NotImplementedError

    def add_noise(self, z0: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
        return self.schedule.add_noise(z0, t, eps)

    def predict_noise(self, z_t: torch.Tensor, t: int, condition: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def null_condition(self) -> torch.Tensor:
        """Condition used for the unconditional branch of classifier-free guidance."""
        return torch.zeros(1, self.d_tok, dtype=self.dtype)

    def check_condition(self, condition: torch.Tensor) -> None:
        if condition.ndim != 2 or condition.shape[1] != self.d_tok:
            raise ValueError(f"condition must be m x {self.d_tok}, got {tuple(condition.shape)}")

    def guided_noise(self, z_t: torch.Tensor, t: int, condition: torch.Tensor, guidance: float) -> torch.Tensor:
        eps_c = self.predict_noise(z_t, t, condition)
        if guidance == 1.0:
            return eps_c
        eps_u = self.predict_noise(z_t, t, self.null_condition())
        return eps_u + guidance * (eps_c - eps_u)

    def latent_noise(self, shape, generator: torch.Generator) -> torch.Tensor:
        return torch.randn(tuple(shape), generator=generator, dtype=self.dtype)

    def invert(self, z0: torch.Tensor, condition: torch.Tensor, timesteps: Sequence[int]) -> torch.Tensor:
        self.check_condition(condition)
        with torch.no_grad():
            return ddim_invert(self.schedule, z0, timesteps, lambda x, t: self.predict_noise(x, t, condition))

    def denoise(self, z_t: torch.Tensor, condition: torch.Tensor, timesteps: Sequence[int], guidance: float) -> torch.Tensor:
        self.check_condition(condition)
        with torch.no_grad():
            return ddim_denoise(self.schedule, z_t, timesteps, lambda x, t: self.guided_noise(x, t, condition, guidance))

    def sample(self, condition: torch.Tensor, init_latent=None, steps: int = 50, guidance: float = 7.5, seed: int = 0) -> np.ndarray:
        """Reverse diffusion to an image; ``init_latent`` (if given) is taken as the latent at the top timestep."""
        timesteps = self.schedule.ddim_timesteps(steps)
        if init_latent is None:
            gen = torch.Generator().manual_seed(int(seed))
            init_latent = self.latent_noise(self.latent_shape, gen)
        z0 = self.denoise(init_latent, condition, timesteps, guidance)
        return self.decode_latent(z0)

    @property
    def latent_shape(self) -> tuple[int, ...]:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"name": self.name, "d_joint": self.d_joint, "d_tok": self.d_tok, "vocab": self.vocab.size, "T": self.schedule.T}

