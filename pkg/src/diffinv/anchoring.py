"""Anchor prompts for A, A' and B: hard-prompt inversion, captions, or user text."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .backends import BackendBundle, VocabTable
from .core import cosine
from .images import content_hash

log = logging.getLogger(__name__)


class AnchorSource(str, enum.Enum):
    PEZ = "pez"
    CAPTION = "caption"
    USER = "user"


@dataclass
class AnchorPrompt:
    embeddings: torch.Tensor
    source: AnchorSource
    target_image_id: str = ""
    token_ids: Optional[list[int]] = None
    text: str = ""
    similarity: Optional[float] = None
    history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ValueError("anchor prompt needs at least one embedding row")
        if self.token_ids is not None and len(self.token_ids) != self.embeddings.shape[0]:
            raise ValueError("token_ids and embeddings disagree in length")

    @property
    def length(self) -> int:
        return int(self.embeddings.shape[0])

    def is_consistent(self, vocab: VocabTable) -> bool:
        if self.token_ids is None:
            return True
        return bool(torch.equal(self.embeddings, vocab.lookup(self.token_ids).to(self.embeddings.dtype)))


def project_to_vocab(embeddings: torch.Tensor, vocab: VocabTable) -> tuple[list[int], torch.Tensor]:
    """Nearest vocab row per input row under cosine similarity.

    A zero row has similarity 0 to everything; ties go to the lowest token id.
    """
    table = vocab.embeddings.to(embeddings.device)
    if embeddings.ndim != 2 or embeddings.shape[1] != table.shape[1]:
        raise ValueError(f"expected m x {table.shape[1]} embeddings, got {tuple(embeddings.shape)}")
    e = embeddings.detach().to(table.dtype)
    e_unit = e / torch.linalg.vector_norm(e, dim=1, keepdim=True).clamp_min(1e-12)
    v_unit = table / torch.linalg.vector_norm(table, dim=1, keepdim=True).clamp_min(1e-12)
    sims = e_unit @ v_unit.T
    # torch.argmax returns the first maximal index
    ids = torch.argmax(sims, dim=1)
    return [int(i) for i in ids], table[ids]


class _PassThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, continuous, projected):
        return projected.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(continuous: torch.Tensor, vocab: VocabTable) -> tuple[list[int], torch.Tensor]:
    """Forward value is exactly the projected matrix; the gradient flows to ``continuous`` unchanged."""
    ids, projected = project_to_vocab(continuous, vocab)
    return ids, _PassThrough.apply(continuous, projected.to(continuous.dtype))


def prompt_similarity(backend: BackendBundle, token_ids: Sequence[int], image_embedding: torch.Tensor) -> float:
    return float(cosine(backend.encode_text(list(token_ids)), image_embedding))


def hard_prompt_invert(
    image,
    length: int,
    iters: int,
    backend: BackendBundle,
    lr: float = 1.0,
    seed: int = 0,
) -> AnchorPrompt:
    """Optimize a discrete prompt whose text embedding points at the image embedding.

    Keeps a continuous matrix, projects it onto the vocabulary on every forward
    pass, and updates it with the straight-through gradient of the cosine
    similarity. The best projected prompt seen (initialization included) wins.
    """
    if length < 1 or iters < 1:
        raise ValueError("length and iters must be >= 1")
    vocab = backend.vocab
    if length > vocab.size:
        raise ValueError("prompt length exceeds vocabulary size")
    target = backend.encode_image(image).detach()

    gen = torch.Generator().manual_seed(int(seed))
    init_ids = torch.randperm(vocab.size, generator=gen)[:length].tolist()
    prompt = vocab.lookup(init_ids).clone().to(backend.dtype).requires_grad_(True)

    best_ids: list[int] = list(init_ids)
    best_sim = -float("inf")
    history = []
    for _ in range(iters):
        ids, forward = straight_through(prompt, vocab)
        sim = cosine(backend.encode_text(forward), target.to(forward.dtype))
        value = float(sim.detach())
        history.append(value)
        if value > best_sim:
            best_sim, best_ids = value, ids
        (grad,) = torch.autograd.grad(sim, prompt)
        with torch.no_grad():
            prompt += lr * grad

    return AnchorPrompt(
        embeddings=vocab.lookup(best_ids).clone(),
        source=AnchorSource.PEZ,
        target_image_id=content_hash(image),
        token_ids=best_ids,
        text=vocab.decode(best_ids),
        similarity=best_sim,
        history=history,
    )


def text_prompt(text: str, backend: BackendBundle, source: AnchorSource = AnchorSource.USER, image_id: str = "") -> AnchorPrompt:
    if not text or not text.strip():
        raise ValueError("empty caption")
    ids = backend.tokenize(text)
    if not ids:
        raise ValueError(f"caption {text!r} produced no tokens")
    return AnchorPrompt(
        embeddings=backend.vocab.lookup(ids).clone(),
        source=source,
        target_image_id=image_id,
        token_ids=ids,
        text=text.strip(),
    )


def caption_prompt(image, backend: BackendBundle, caption: Optional[str] = None) -> AnchorPrompt:
    """Anchor from the backend captioner (or a supplied caption string)."""
    if caption is None:
        caption = backend.caption(image)
    return text_prompt(caption, backend, AnchorSource.CAPTION, content_hash(image))


# -- sidecar files -------------------------------------------------------------------


def write_sidecar(anchor: AnchorPrompt, stem) -> list[Path]:
    """``<stem>.txt`` holds the source and prompt string, ``<stem>.npy`` the embeddings,
    ``<stem>.json`` the token ids. All three are byte-deterministic."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    txt, npy, ids = stem.with_suffix(".txt"), stem.with_suffix(".npy"), stem.with_suffix(".json")
    txt.write_text(f"{anchor.source.value}\n{anchor.text}\n", encoding="utf-8")
    with open(npy, "wb") as fh:
        np.save(fh, anchor.embeddings.detach().cpu().numpy())
    ids.write_text(json.dumps({"token_ids": anchor.token_ids, "similarity": anchor.similarity}) + "\n", encoding="utf-8")
    return [txt, npy, ids]


def read_sidecar(stem, dtype=torch.float64) -> AnchorPrompt:
    stem = Path(stem)
    source, text = stem.with_suffix(".txt").read_text(encoding="utf-8").split("\n")[:2]
    emb = torch.as_tensor(np.load(stem.with_suffix(".npy")), dtype=dtype)
    meta = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    return AnchorPrompt(embeddings=emb, source=AnchorSource(source), token_ids=meta["token_ids"], text=text, similarity=meta["similarity"])


def with_image_id(anchor: AnchorPrompt, image_id: str) -> AnchorPrompt:
    return replace(anchor, target_image_id=image_id)
