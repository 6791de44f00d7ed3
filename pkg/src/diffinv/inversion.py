"""Difference Token optimization from a single before/after image pair."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import torch

from .anchoring import AnchorPrompt, AnchorSource, caption_prompt, hard_prompt_invert, project_to_vocab, straight_through, text_prompt
from .backends import BackendBundle
from .core import Delta, DegenerateDelta, cosine_alignment_loss, image_delta, normalized, slerp, text_delta
from .images import content_hash
from .prompts import assemble_full_prompt

log = logging.getLogger(__name__)


class TokenMode(str, enum.Enum):
    SOFT = "soft"
    HARD = "hard"


CLIP_BRIDGES = ("encode", "meanpool_project")


@dataclass
class InversionConfig:
    alpha: float = 0.8
    lambda_tc: float = 0.01
    lambda_clip: float = 6.0
    n_tokens: int = 5
    # None picks the backend default: 1e-2 for the mock, 1e-3 otherwise
    learning_rate: Optional[float] = None
    iterations: int = 500
    timestep_min: int = 0
    timestep_max: Optional[int] = None
    seed: int = 0
    anchor_mode: str = "caption"
    mode: str = "soft"
    adaptive: bool = False
    clip_bridge: str = "encode"
    normalize_deltas: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lambda_tc < 0 or self.lambda_clip < 0:
            raise ValueError("loss weights must be non-negative")
        if self.n_tokens < 1:
            raise ValueError("n_tokens must be >= 1")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.mode not in ("soft", "hard"):
            raise ValueError(f"mode must be soft or hard, got {self.mode!r}")
        if self.clip_bridge not in CLIP_BRIDGES:
            raise ValueError(f"clip_bridge must be one of {CLIP_BRIDGES}")
        if self.anchor_mode not in ("pez", "caption", "user"):
            raise ValueError(f"anchor_mode must be pez, caption or user, got {self.anchor_mode!r}")

    def lr_for(self, backend: BackendBundle) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 1e-2 if backend.name == "mock" else 1e-3

    def timestep_range(self, backend: BackendBundle) -> tuple[int, int]:
        hi = backend.schedule.T if self.timestep_max is None else self.timestep_max
        if not 0 <= self.timestep_min < hi <= backend.schedule.T:
            raise ValueError(f"timestep range [{self.timestep_min}, {hi}) not inside [0, {backend.schedule.T})")
        return self.timestep_min, hi


@dataclass
class DiffTokens:
    """The trainable n x d_tok matrix plus a sign; ``negate`` shares the same tensor."""

    embeddings: torch.Tensor
    mode: TokenMode = TokenMode.SOFT
    step_count: int = 0
    sign: int = 1

    @property
    def n(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def d_tok(self) -> int:
        return int(self.embeddings.shape[1])

    def signed(self, vocab=None) -> torch.Tensor:
        """Rows fed to the model: hard mode projects (straight-through) before the sign is applied."""
        rows = self.embeddings
        if self.mode == TokenMode.HARD:
            if vocab is None:
                raise ValueError("hard mode needs the vocab table")
            _, rows = straight_through(rows, vocab)
        return rows if self.sign == 1 else -rows


def init_diff_tokens(n: int, d_tok: int, mode: str | TokenMode = TokenMode.SOFT, dtype=torch.float64) -> DiffTokens:
    if n < 1:
        raise ValueError("n must be >= 1")
    emb = torch.zeros(n, d_tok, dtype=dtype, requires_grad=True)
    return DiffTokens(emb, TokenMode(mode), 0, 1)


def negate(d: DiffTokens) -> DiffTokens:
    return DiffTokens(d.embeddings, d.mode, d.step_count, -d.sign)


class Draws(NamedTuple):
    t_before: int
    eps_before: torch.Tensor
    t_after: int
    eps_after: torch.Tensor

    def mirrored(self) -> "Draws":
        return Draws(self.t_after, self.eps_after, self.t_before, self.eps_before)


def sample_draws(generator: torch.Generator, t_range: tuple[int, int], shape, dtype=torch.float64) -> Draws:
    lo, hi = t_range
    t_before = int(torch.randint(lo, hi, (1,), generator=generator))
    eps_before = torch.randn(tuple(shape), generator=generator, dtype=dtype)
    t_after = int(torch.randint(lo, hi, (1,), generator=generator))
    eps_after = torch.randn(tuple(shape), generator=generator, dtype=dtype)
    return Draws(t_before, eps_before, t_after, eps_after)


def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.mean((a - b.to(a.dtype)) ** 2)


def consistency_terms(
    z_A: torch.Tensor,
    z_Aprime: torch.Tensor,
    prompt_A: torch.Tensor,
    prompt_Aprime: torch.Tensor,
    d: DiffTokens,
    backend: BackendBundle,
    draws: Draws,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(before, after) reconstruction errors.

    before: noisy A under ``{prompt_A', -D}``; after: noisy A' under ``{prompt_A, +D}``.
    """
    T = backend.schedule.T
    for t in (draws.t_before, draws.t_after):
        if not 0 <= t < T:
            raise ValueError(f"timestep {t} outside [0, {T})")
    vocab = backend.vocab
    cond_before = assemble_full_prompt(prompt_Aprime, negate(d).signed(vocab), max_length=backend.max_length).embeddings
    cond_after = assemble_full_prompt(prompt_A, d.signed(vocab), max_length=backend.max_length).embeddings

    z_before = backend.add_noise(z_A, draws.t_before, draws.eps_before.to(z_A.dtype))
    z_after = backend.add_noise(z_Aprime, draws.t_after, draws.eps_after.to(z_Aprime.dtype))
    before = _mse(draws.eps_before, backend.predict_noise(z_before, draws.t_before, cond_before))
    after = _mse(draws.eps_after, backend.predict_noise(z_after, draws.t_after, cond_after))
    return before, after


def token_consistency_loss(z_A, z_Aprime, prompt_A, prompt_Aprime, d: DiffTokens, backend: BackendBundle, draws: Draws) -> torch.Tensor:
    """Sum of the two reconstruction errors. Latents come from ``backend.encode_latent``."""
    before, after = consistency_terms(z_A, z_Aprime, prompt_A, prompt_Aprime, d, backend, draws)
    return before + after


def diff_repr(d: DiffTokens, backend: BackendBundle) -> torch.Tensor:
    """Difference Tokens pushed alone through the text encoder's embedding path."""
    return backend.encode_text(d.signed(backend.vocab))


def clip_representation(d: DiffTokens, backend: BackendBundle, bridge: str = "encode") -> torch.Tensor:
    """Joint-space vector compared against the interpolated delta.

    ``encode`` is :func:`diff_repr`. ``meanpool_project`` encodes the mean row as a
    single token and subtracts the encoding of a zero token, so an all-zero matrix
    maps to the zero vector.
    """
    if bridge == "encode":
        return diff_repr(d, backend)
    if bridge == "meanpool_project":
        rows = d.signed(backend.vocab)
        pooled = rows.mean(dim=0, keepdim=True)
        with torch.no_grad():
            offset = backend.encode_text(torch.zeros_like(pooled))
        return backend.encode_text(pooled) - offset
    raise ValueError(f"unknown clip bridge {bridge!r}")


@dataclass
class TraceRow:
    iteration: int
    l_tc: float
    l_clip: float
    l_total: float


@dataclass
class InversionContext:
    """Everything the loss needs besides the tokens and the random draws."""

    backend: BackendBundle
    z_A: torch.Tensor
    z_Aprime: torch.Tensor
    anchor_A: AnchorPrompt
    anchor_Aprime: AnchorPrompt
    d_inter: Delta
    config: InversionConfig

    def loss(self, d: DiffTokens, draws: Draws) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(total, token consistency, clip alignment), combined in float64."""
        cfg = self.config
        l_tc = token_consistency_loss(
            self.z_A, self.z_Aprime, self.anchor_A.embeddings, self.anchor_Aprime.embeddings, d, self.backend, draws
        ).to(torch.float64)
        rep = clip_representation(d, self.backend, cfg.clip_bridge)
        l_clip = cosine_alignment_loss(rep, self.d_inter).to(torch.float64)
        total = cfg.lambda_tc * l_tc + cfg.lambda_clip * l_clip
        return total, l_tc, l_clip


@dataclass
class InversionResult:
    tokens: DiffTokens
    trace: list[TraceRow]
    captions: tuple[str, str]
    anchors: tuple[AnchorPrompt, AnchorPrompt]
    deltas: dict[str, Delta]
    projected_ids: list[int]
    projected_tokens: str
    notes: list[str] = field(default_factory=list)
    diverged: bool = False


class DivergenceError(RuntimeError):
    def __init__(self, message: str, result: InversionResult):
        super().__init__(message)
        self.result = result


def interpolated_delta(d_img: Delta, d_txt: Delta, alpha: float, normalize: bool = False, notes: Optional[list] = None) -> Delta:
    """Slerp of the two deltas; a degenerate side is replaced by the other one."""
    if d_img.degenerate and d_txt.degenerate:
        raise DegenerateDelta("image and text deltas are both zero; A and A' look identical")
    if d_img.degenerate or d_txt.degenerate:
        keep = d_txt if d_img.degenerate else d_img
        if notes is not None:
            notes.append(f"{'image' if d_img.degenerate else 'text'} delta is zero; using the {keep.provenance.value} delta alone")
        d_img = d_txt = keep
    if normalize:
        d_img, d_txt = normalized(d_img), normalized(d_txt)
    return slerp(d_img, d_txt, alpha)


def resolve_anchor(image, mode: str, backend: BackendBundle, caption: Optional[str], length: int = 8, iters: int = 200, lr: float = 1.0, seed: int = 0) -> AnchorPrompt:
    if mode == "pez":
        return hard_prompt_invert(image, length, iters, backend, lr=lr, seed=seed)
    if mode == "user":
        if not caption:
            raise ValueError("anchor mode 'user' needs a caption for every image")
        return text_prompt(caption, backend, AnchorSource.USER, content_hash(image))
    return caption_prompt(image, backend, caption)


def optimize(
    A,
    Aprime,
    config: InversionConfig,
    backend: BackendBundle,
    captions: Optional[tuple[str, str]] = None,
    anchors: Optional[tuple[AnchorPrompt, AnchorPrompt]] = None,
    anchor_options: Optional[dict] = None,
    callback: Optional[Callable[[int, DiffTokens, TraceRow], None]] = None,
) -> InversionResult:
    """Learn Difference Tokens that turn A into A' (and back, when negated).

    Captions and anchors may be passed in to skip the captioner / prompt inversion;
    otherwise they are computed here. Raises :class:`DivergenceError` carrying the
    last finite iterate if the loss stops being finite.
    """
    notes: list[str] = []
    # captions and deltas
    if captions is None:
        captions = (backend.caption(A), backend.caption(Aprime))
    d_img = image_delta(backend.encode_image(Aprime), backend.encode_image(A))
    d_txt = text_delta(backend.encode_caption(captions[1]), backend.encode_caption(captions[0]))
    d_inter = interpolated_delta(d_img, d_txt, config.alpha, config.normalize_deltas, notes)
    if d_inter.fallback:
        notes.append("image and text deltas are parallel; slerp fell back to linear interpolation")

    # anchors
    if anchors is None:
        opts = anchor_options or {}
        anchors = (
            resolve_anchor(A, config.anchor_mode, backend, captions[0], **opts),
            resolve_anchor(Aprime, config.anchor_mode, backend, captions[1], **opts),
        )
    ctx = InversionContext(
        backend=backend,
        z_A=backend.encode_latent(A).detach(),
        z_Aprime=backend.encode_latent(Aprime).detach(),
        anchor_A=anchors[0],
        anchor_Aprime=anchors[1],
        d_inter=d_inter,
        config=config,
    )

    tokens = init_diff_tokens(config.n_tokens, backend.d_tok, config.mode, dtype=backend.dtype)
    lr = config.lr_for(backend)
    t_range = config.timestep_range(backend)
    gen = torch.Generator().manual_seed(int(config.seed))
    adam = torch.optim.Adam([tokens.embeddings], lr=lr) if config.adaptive else None
    trace: list[TraceRow] = []
    diverged = False
    last_finite = tokens.embeddings.detach().clone()

    for i in range(config.iterations):
        draws = sample_draws(gen, t_range, ctx.z_A.shape, dtype=backend.dtype)
        total, l_tc, l_clip = ctx.loss(tokens, draws)
        row = TraceRow(i, float(l_tc.detach()), float(l_clip.detach()), float(total.detach()))
        if not (math.isfinite(row.l_total) and bool(torch.isfinite(tokens.embeddings).all())):
            diverged = True
            notes.append(f"non-finite loss at iteration {i}; stopped with the last finite tokens")
            break
        (grad,) = torch.autograd.grad(total, tokens.embeddings)
        if not bool(torch.isfinite(grad).all()):
            diverged = True
            notes.append(f"non-finite gradient at iteration {i}; stopped with the last finite tokens")
            break
        trace.append(row)
        last_finite = tokens.embeddings.detach().clone()
        with torch.no_grad():
            if adam is None:
                tokens.embeddings -= lr * grad
            else:
                tokens.embeddings.grad = grad
                adam.step()
                tokens.embeddings.grad = None
        tokens.step_count += 1
        if callback is not None:
            callback(i, tokens, row)

    if diverged:
        with torch.no_grad():
            tokens.embeddings.copy_(last_finite)
    ids, _ = project_to_vocab(tokens.embeddings.detach(), backend.vocab)
    result = InversionResult(
        tokens=tokens,
        trace=trace,
        captions=tuple(captions),
        anchors=tuple(anchors),
        deltas={"image": d_img, "text": d_txt, "interpolated": d_inter},
        projected_ids=ids,
        projected_tokens=backend.vocab.decode(ids),
        notes=notes,
        diverged=diverged,
    )
    if diverged:
        raise DivergenceError(notes[-1], result)
    return result
