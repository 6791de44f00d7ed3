"""Embedding-space arithmetic: deltas, spherical interpolation and the alignment loss.

Vectors are 1-D torch tensors so the alignment loss stays differentiable when it
is fed a representation that carries gradients.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Optional

import torch

DEGENERATE_EPS = 1e-8
SLERP_SIN_EPS = 1e-6


class Provenance(str, enum.Enum):
    IMAGE = "image"
    TEXT = "text"
    INTERPOLATED = "interpolated"


class DimensionMismatch(ValueError):
    pass


class DegenerateDelta(ValueError):
    pass


@dataclass(frozen=True)
class Delta:
    direction: torch.Tensor
    provenance: Provenance
    alpha: Optional[float] = None
    degenerate: bool = False
    # set when slerp fell back to linear interpolation
    fallback: bool = False
    antiparallel: bool = False

    @property
    def d_joint(self) -> int:
        return int(self.direction.shape[-1])

    def norm(self) -> float:
        return float(torch.linalg.vector_norm(self.direction))


def as_embedding(values) -> torch.Tensor:
    v = torch.as_tensor(values)
    if not torch.is_floating_point(v):
        v = v.to(torch.float64)
    if v.ndim != 1 or v.shape[0] == 0:
        raise DimensionMismatch(f"expected a non-empty 1-D embedding, got shape {tuple(v.shape)}")
    if not bool(torch.isfinite(v).all()):
        raise ValueError("embedding has non-finite entries")
    return v


def _check_same_dim(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"embedding widths differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def _delta(after, before, provenance: Provenance) -> Delta:
    after, before = as_embedding(after), as_embedding(before)
    _check_same_dim(after, before)
    direction = after - before
    degenerate = float(torch.linalg.vector_norm(direction)) < DEGENERATE_EPS
    return Delta(direction=direction, provenance=provenance, degenerate=degenerate)


def image_delta(emb_after, emb_before) -> Delta:
    """Difference of image embeddings, edited minus original."""
    return _delta(emb_after, emb_before, Provenance.IMAGE)


def text_delta(emb_cap_after, emb_cap_before) -> Delta:
    """Difference of caption embeddings, edited minus original."""
    return _delta(emb_cap_after, emb_cap_before, Provenance.TEXT)


def normalized(delta: Delta) -> Delta:
    if delta.degenerate:
        raise DegenerateDelta("cannot normalize a zero delta")
    unit = delta.direction / torch.linalg.vector_norm(delta.direction)
    return Delta(unit, delta.provenance, delta.alpha, False, delta.fallback, delta.antiparallel)


def slerp(d_img: Delta, d_txt: Delta, alpha: float) -> Delta:
    """Spherical interpolation from ``d_img`` (alpha=0) to ``d_txt`` (alpha=1).

    Falls back to linear interpolation when the two directions are (anti)parallel,
    i.e. when ``sin(theta) < 1e-6``; the returned delta then has ``fallback`` set,
    and ``antiparallel`` as well (with a warning) when they point opposite ways.
    """
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    v0, v1 = d_img.direction, d_txt.direction
    _check_same_dim(v0, v1)
    n0 = torch.linalg.vector_norm(v0)
    n1 = torch.linalg.vector_norm(v1)
    if float(n0) < DEGENERATE_EPS or float(n1) < DEGENERATE_EPS:
        raise DegenerateDelta("slerp needs two nonzero deltas")

    cos_theta = torch.clamp(torch.dot(v0, v1) / (n0 * n1), -1.0, 1.0)
    theta = torch.arccos(cos_theta)
    sin_theta = torch.sin(theta)
    if float(sin_theta) < SLERP_SIN_EPS:
        antiparallel = float(cos_theta) < 0
        if antiparallel:
            warnings.warn("slerp inputs are antiparallel; interpolated direction is ill-defined", RuntimeWarning)
        out = (1.0 - alpha) * v0 + alpha * v1
        return Delta(out, Provenance.INTERPOLATED, alpha, fallback=True, antiparallel=antiparallel)

    w0 = torch.sin((1.0 - alpha) * theta) / sin_theta
    w1 = torch.sin(alpha * theta) / sin_theta
    out = w0 * v0 + w1 * v1
    return Delta(out, Provenance.INTERPOLATED, alpha, degenerate=float(torch.linalg.vector_norm(out)) < DEGENERATE_EPS)


def cosine_alignment_loss(diff_repr: torch.Tensor, d_inter: Delta) -> torch.Tensor:
    """``1 - cos(diff_repr, d_inter)``, with a zero ``diff_repr`` scoring exactly 1.

    The zero case returns a constant tied to the graph of ``diff_repr`` so the
    gradient there is the zero vector instead of NaN.
    """
    target = d_inter.direction
    if diff_repr.shape != target.shape:
        raise DimensionMismatch(f"embedding widths differ: {tuple(diff_repr.shape)} vs {tuple(target.shape)}")
    t_norm = torch.linalg.vector_norm(target)
    if float(t_norm.detach()) < DEGENERATE_EPS:
        raise DegenerateDelta("alignment target is a zero delta")
    target = target.to(diff_repr.dtype)
    r_norm = torch.linalg.vector_norm(diff_repr)
    if float(r_norm.detach()) < DEGENERATE_EPS:
        return 1.0 + 0.0 * diff_repr.sum()
    cos = torch.dot(diff_repr, target) / (r_norm * t_norm)
    return 1.0 - torch.clamp(cos, -1.0, 1.0)


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.dot(a, b) / (torch.linalg.vector_norm(a) * torch.linalg.vector_norm(b))
