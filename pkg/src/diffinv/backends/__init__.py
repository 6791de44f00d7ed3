"""Backend adapters: a seeded mock plus Stable Diffusion adapters loaded on demand."""

from __future__ import annotations

from .base import BackendBundle, BackendError, CaptionerUnavailable, VocabTable
from .mock import MockBackend, MockDinoEncoder
from .schedule import NoiseSchedule, ddim_denoise, ddim_invert
from .tracing import TracingBackend

BACKEND_NAMES = ("mock", "sd21", "sdxl")


def load_backend(name: str = "mock", mock_seed: int = 0, checkpoints: dict | None = None, device: str = "cpu") -> BackendBundle:
    if name == "mock":
        return MockBackend(seed=mock_seed)
    if name in ("sd21", "sdxl"):
        from .stable_diffusion import StableDiffusionBackend

        return StableDiffusionBackend(variant=name, checkpoints=checkpoints or {}, device=device)
    raise BackendError(f"unknown backend {name!r}; expected one of {BACKEND_NAMES}")


__all__ = [
    "BACKEND_NAMES", "BackendBundle", "BackendError", "CaptionerUnavailable", "MockBackend",
    "MockDinoEncoder", "NoiseSchedule", "TracingBackend", "VocabTable", "ddim_denoise", "ddim_invert", "load_backend",
]
