"""Seeded, fully linear stand-in for the pretrained models.

Every role is an affine map with weights drawn from ``numpy.random.default_rng(seed)``,
so downstream oracles can be written in closed form:

* image encoder: ``b_img + W_img @ pix(image)`` on an 8x8 RGB thumbnail;
* text encoder: ``b_txt + sum_i W_txt @ R_i @ e_i`` where ``R_i`` is a per-position
  rotation (``R_0 = I``). ``W_txt`` has orthonormal columns and ``b_txt`` is orthogonal
  to its range, and vocab rows have unit norm;
* latent codec: pixel-unshuffle to (12, 4, 4) followed by a fixed orthogonal channel mix;
* denoiser: ``A z + B temb(t) + C mean(condition rows) + c0``.
"""

from __future__ import annotations

import hashlib
import math
import re
import zlib

import numpy as np
import torch

from ..images import as_image, resize
from .base import BackendBundle, VocabTable
from .schedule import NoiseSchedule

WORDS = [
    "cabin", "castle", "mountain", "rainbow", "dog", "cat", "snow", "beach",
    "forest", "city", "night", "sunset", "river", "bridge", "car", "boat",
    "red", "blue", "green", "golden", "old", "new", "painting", "photo",
    "winter", "summer", "flowers", "tower", "lake", "desert", "sketch", "glass",
]


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


SHARED_OFFSET = 2.0


class MockBackend(BackendBundle):
    name = "mock"
    supports_inversion = True

    def __init__(
        self,
        seed: int = 0,
        d_joint: int = 16,
        d_tok: int = 8,
        vocab_size: int = 32,
        T: int = 100,
        image_size: int = 8,
        max_length: int = 16,
        temb_dim: int = 8,
    ):
        if image_size % 2:
            raise ValueError("image_size must be even")
        if d_tok > d_joint - 1:
            raise ValueError("mock needs d_joint > d_tok")
        self.seed = int(seed)
        self.d_joint = d_joint
        self.d_tok = d_tok
        self.max_length = max_length
        self.image_size = image_size
        self.temb_dim = temb_dim
        rng = np.random.default_rng(self.seed)
        t = lambda a: torch.as_tensor(a, dtype=torch.float64)

        n_pix = image_size * image_size * 3
        self.W_img = t(2.0 * rng.standard_normal((d_joint, n_pix)) / math.sqrt(n_pix))
        self.b_img = t(0.1 * rng.standard_normal(d_joint))

        self.W_txt = t(_orthonormal(rng, d_joint, d_tok))
        rot = [np.eye(d_tok)] + [_orthonormal(rng, d_tok, d_tok) for _ in range(max_length - 1)]
        self.R_pos = t(np.stack(rot))
        b = rng.standard_normal(d_joint)
        w = self.W_txt.numpy()
        b = b - w @ (w.T @ b)
        self.b_txt = t(0.5 * b / np.linalg.norm(b))
        # both towers share an offset direction so image-text cosines sit above zero, as with CLIP
        self.b_img = self.b_img + SHARED_OFFSET * self.b_txt / 0.5

        vocab = rng.standard_normal((vocab_size, d_tok))
        vocab /= np.linalg.norm(vocab, axis=1, keepdims=True)
        words = WORDS[:vocab_size] + [f"tok{i}" for i in range(len(WORDS), vocab_size)]
        self.vocab = VocabTable(t(vocab), words)

        self.schedule = NoiseSchedule.linear(T, 0.0, 0.08)

        self.latent_channels = 12
        self.latent_side = image_size // 2
        self.K_mix = t(_orthonormal(rng, 12, 12))

        n_lat = 12 * self.latent_side**2
        self.A_den = t(0.1 * np.eye(n_lat) + 0.05 * rng.standard_normal((n_lat, n_lat)) / math.sqrt(n_lat))
        self.B_den = t(0.3 * rng.standard_normal((n_lat, temb_dim)))
        self.C_den = t(0.5 * rng.standard_normal((n_lat, d_tok)))
        self.c0_den = t(0.1 * rng.standard_normal(n_lat))

    # -- joint space -------------------------------------------------------------
    def pixels(self, image) -> torch.Tensor:
        img = resize(as_image(image), self.image_size)
        return torch.as_tensor(img.reshape(-1), dtype=torch.float64)

    def encode_image(self, image) -> torch.Tensor:
        return self.b_img + self.W_img @ self.pixels(image)

    def position_maps(self, m: int) -> torch.Tensor:
        """(m, d_joint, d_tok) linear map applied to each row position."""
        if m > self.max_length:
            raise ValueError(f"sequence of {m} rows exceeds max_length {self.max_length}")
        return torch.einsum("jk,mkl->mjl", self.W_txt, self.R_pos[:m])

    def _encode_embeddings(self, emb: torch.Tensor) -> torch.Tensor:
        maps = self.position_maps(emb.shape[0])
        return self.b_txt + torch.einsum("mjl,ml->j", maps, emb.to(torch.float64))

    def tokenize(self, text: str) -> list[int]:
        index = {w: i for i, w in enumerate(self.vocab.token_strings)}
        ids = []
        for word in re.findall(r"[a-z0-9]+", text.lower()):
            ids.append(index.get(word, zlib.crc32(word.encode()) % self.vocab.size))
        return ids[: self.max_length]

    def caption(self, image) -> str:
        img = resize(as_image(image), self.image_size)
        digest = hashlib.sha256(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8).tobytes()).digest()
        words = [self.vocab.token_strings[b % self.vocab.size] for b in digest[:4]]
        return "a " + " ".join(words)

    # -- latent diffusion ------------------------------------------------------------
    @property
    def latent_shape(self) -> tuple[int, ...]:
        return (self.latent_channels, self.latent_side, self.latent_side)

    def encode_latent(self, image) -> torch.Tensor:
        img = torch.as_tensor(resize(as_image(image), self.image_size), dtype=torch.float64)
        s = self.latent_side
        # (H, W, 3) -> (3, s, 2, s, 2) -> (3, 2, 2, s, s) -> (12, s, s)
        x = img.permute(2, 0, 1).reshape(3, s, 2, s, 2).permute(0, 2, 4, 1, 3).reshape(12, s, s)
        return torch.einsum("ck,kij->cij", self.K_mix, x)

    def decode_latent(self, z0: torch.Tensor) -> np.ndarray:
        if tuple(z0.shape) != self.latent_shape:
            raise ValueError(f"latent shape {tuple(z0.shape)} != {self.latent_shape}")
        s = self.latent_side
        x = torch.einsum("kc,kij->cij", self.K_mix, z0.detach().to(torch.float64))
        img = x.reshape(3, 2, 2, s, s).permute(0, 3, 1, 4, 2).reshape(3, 2 * s, 2 * s).permute(1, 2, 0)
        return img.numpy().copy()

    def timestep_embedding(self, t: int) -> torch.Tensor:
        half = self.temb_dim // 2
        freqs = torch.exp(-math.log(10.0) * torch.arange(half, dtype=torch.float64) / half)
        angle = (float(t) / self.schedule.T) * math.pi * freqs
        return torch.cat([torch.sin(angle), torch.cos(angle)])

    def predict_noise(self, z_t: torch.Tensor, t: int, condition: torch.Tensor) -> torch.Tensor:
        self.check_condition(condition)
        if tuple(z_t.shape) != self.latent_shape:
            raise ValueError(f"latent shape {tuple(z_t.shape)} != {self.latent_shape}")
        pooled = condition.to(torch.float64).mean(dim=0)
        out = self.A_den @ z_t.reshape(-1) + self.B_den @ self.timestep_embedding(t) + self.C_den @ pooled + self.c0_den
        return out.reshape(self.latent_shape)


class MockDinoEncoder:
    """Second affine image encoder standing in for the DINO-role column of reports."""

    name = "mock-dino"

    def __init__(self, seed: int = 0, dim: int = 24, image_size: int = 8):
        rng = np.random.default_rng([int(seed), 7])
        n_pix = image_size * image_size * 3
        self.image_size = image_size
        self.W = torch.as_tensor(rng.standard_normal((dim, n_pix)) / math.sqrt(n_pix))
        self.b = torch.as_tensor(0.1 * rng.standard_normal(dim))

    def __call__(self, image) -> torch.Tensor:
        img = resize(as_image(image), self.image_size)
        return self.b + self.W @ torch.as_tensor(img.reshape(-1), dtype=torch.float64)
