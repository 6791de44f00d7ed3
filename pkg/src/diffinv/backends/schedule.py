"""Noise schedule and DDIM stepping shared by all backends."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch


@dataclass(frozen=True)
class NoiseSchedule:
    alphas_cumprod: torch.Tensor

    def __post_init__(self):
        a = self.alphas_cumprod
        if a.ndim != 1 or a.shape[0] < 1:
            raise ValueError("alphas_cumprod must be a non-empty vector")
        if not (bool((a > 0).all()) and bool((a <= 1).all())):
            raise ValueError("alphas_cumprod must lie in (0, 1]")
        if a.shape[0] > 1 and not bool((a[1:] < a[:-1]).all()):
            raise ValueError("alphas_cumprod must be strictly decreasing")

    @property
    def T(self) -> int:
        return int(self.alphas_cumprod.shape[0])

    @classmethod
    def linear(cls, T: int, beta_start: float, beta_end: float, dtype=torch.float64) -> "NoiseSchedule":
        betas = torch.linspace(beta_start, beta_end, T, dtype=dtype)
        return cls(torch.cumprod(1.0 - betas, dim=0))

    @classmethod
    def scaled_linear(cls, T: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012) -> "NoiseSchedule":
        betas = torch.linspace(beta_start**0.5, beta_end**0.5, T, dtype=torch.float64) ** 2
        return cls(torch.cumprod(1.0 - betas, dim=0))

    def check_timestep(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T})")
        return t

    def add_noise(self, z0: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
        t = self.check_timestep(t)
        if eps.shape != z0.shape:
            raise ValueError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
        a = self.alphas_cumprod[t].to(z0.dtype)
        return torch.sqrt(a) * z0 + torch.sqrt(1.0 - a) * eps

    def ddim_timesteps(self, steps: int) -> list[int]:
        """Ascending timesteps with uniform stride, ``steps`` of them (capped at T)."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        steps = min(steps, self.T)
        stride = self.T // steps
        return [i * stride for i in range(steps)]


EpsFn = Callable[[torch.Tensor, int], torch.Tensor]


def ddim_invert(schedule: NoiseSchedule, z0: torch.Tensor, timesteps: Sequence[int], eps_fn: EpsFn) -> torch.Tensor:
    """Deterministic DDIM inversion of a clean latent up through ``timesteps`` (ascending)."""
    x = z0
    a_prev = torch.ones((), dtype=z0.dtype)
    for t in timesteps:
        eps = eps_fn(x, t)
        a = schedule.alphas_cumprod[t].to(z0.dtype)
        x0 = (x - torch.sqrt(1.0 - a_prev) * eps) / torch.sqrt(a_prev)
        x = torch.sqrt(a) * x0 + torch.sqrt(1.0 - a) * eps
        a_prev = a
    return x


def ddim_denoise(schedule: NoiseSchedule, x: torch.Tensor, timesteps: Sequence[int], eps_fn: EpsFn) -> torch.Tensor:
    """Deterministic DDIM sampling from the top of ``timesteps`` (ascending) down to a clean latent."""
    ts = list(timesteps)
    for i in range(len(ts) - 1, -1, -1):
        t = ts[i]
        eps = eps_fn(x, t)
        a = schedule.alphas_cumprod[t].to(x.dtype)
        a_prev = schedule.alphas_cumprod[ts[i - 1]].to(x.dtype) if i > 0 else torch.ones((), dtype=x.dtype)
        x0 = (x - torch.sqrt(1.0 - a) * eps) / torch.sqrt(a)
        x = torch.sqrt(a_prev) * x0 + torch.sqrt(1.0 - a_prev) * eps
    return x
