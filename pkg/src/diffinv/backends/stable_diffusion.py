"""Stable Diffusion 2.1 / SDXL adapters built on ``diffusers`` and ``transformers``.

Weights are fetched by checkpoint identifier; nothing is vendored. Custom token
embeddings are spliced into the text towers with a forward hook on the token
embedding layer, so Difference Tokens never need a tokenizer entry.
"""

from __future__ import annotations

import contextlib
from typing import Optional

import numpy as np
import torch

from ..images import as_image, to_uint8
from .base import BackendBundle, BackendError, CaptionerUnavailable, VocabTable
from .schedule import NoiseSchedule

DEFAULT_CHECKPOINTS = {
    "sd21": "stabilityai/stable-diffusion-2-1-base",
    "sdxl": "stabilityai/stable-diffusion-xl-base-1.0",
    "clip_sd21": "laion/CLIP-ViT-H-14-laion2B-s32B-b79K",
    "clip_sdxl": "laion/CLIP-ViT-bigG-14-laion2B-39B-b160k",
    "blip2": "Salesforce/blip2-opt-2.7b",
    "dino": "facebook/dinov2-base",
}


@contextlib.contextmanager
def spliced_embeddings(embedding_layer: torch.nn.Module, rows: torch.Tensor, offset: int = 1):
    """Overwrite token-embedding outputs at positions ``offset .. offset+m`` with ``rows``."""

    def hook(module, inputs, output):
        out = output.clone()
        out[:, offset : offset + rows.shape[0]] = rows.to(out.dtype).unsqueeze(0)
        return out

    handle = embedding_layer.register_forward_hook(hook)
    try:
        yield
    finally:
        handle.remove()


class StableDiffusionBackend(BackendBundle):
    def __init__(self, variant: str = "sd21", checkpoints: Optional[dict] = None, device: str = "cpu"):
        try:
            import diffusers
            import transformers
        except ImportError as exc:  # pragma: no cover - depends on the environment
            raise BackendError(f"backend {variant!r} needs diffusers and transformers installed: {exc}") from exc
        self.name = variant
        self.variant = variant
        self.device = torch.device(device)
        self.dtype = torch.float32
        self.ckpt = {**DEFAULT_CHECKPOINTS, **(checkpoints or {})}
        self._captioner = None
        try:
            if variant == "sdxl":
                self.pipe = diffusers.StableDiffusionXLPipeline.from_pretrained(self.ckpt["sdxl"], torch_dtype=self.dtype)
                clip_id = self.ckpt["clip_sdxl"]
            else:
                self.pipe = diffusers.StableDiffusionPipeline.from_pretrained(self.ckpt["sd21"], torch_dtype=self.dtype)
                clip_id = self.ckpt["clip_sd21"]
            self.pipe.to(self.device)
            self.clip = transformers.CLIPModel.from_pretrained(clip_id).to(self.device).eval()
            self.clip_processor = transformers.CLIPImageProcessor.from_pretrained(clip_id)
        except Exception as exc:  # pragma: no cover - network / weights
            raise BackendError(f"failed to load {variant} checkpoints: {exc}") from exc
        for module in (self.pipe.unet, self.pipe.vae, self.pipe.text_encoder, self.clip):
            module.requires_grad_(False)

        self.tokenizer = self.pipe.tokenizer_2 if variant == "sdxl" else self.pipe.tokenizer
        self.cond_encoder = self.pipe.text_encoder_2 if variant == "sdxl" else self.pipe.text_encoder
        if variant == "sdxl":
            self.pipe.text_encoder_2.requires_grad_(False)
        table = self.cond_encoder.get_input_embeddings().weight.detach()
        self.vocab = VocabTable(table, [self.tokenizer.convert_ids_to_tokens(i) for i in range(table.shape[0])])
        self.d_tok = int(table.shape[1])
        self.d_joint = int(self.clip.config.projection_dim)
        self.max_length = self.tokenizer.model_max_length - 2
        self.schedule = NoiseSchedule(self.pipe.scheduler.alphas_cumprod.to(torch.float64))
        self.resolution = self.pipe.unet.config.sample_size * self.pipe.vae_scale_factor
        self.supports_inversion = True

    # -- helpers -----------------------------------------------------------------------
    def _placeholder_ids(self, m: int) -> torch.Tensor:
        tok = self.tokenizer
        pad = tok.pad_token_id if tok.pad_token_id is not None else tok.eos_token_id
        ids = [tok.bos_token_id] + [pad] * m + [tok.eos_token_id]
        ids += [pad] * (tok.model_max_length - len(ids))
        return torch.tensor([ids], device=self.device)

    def _pil(self, image):
        from PIL import Image

        return Image.fromarray(to_uint8(as_image(image)), mode="RGB")

    # -- joint space ------------------------------------------------------------------
    def encode_image(self, image) -> torch.Tensor:
        pixels = self.clip_processor(images=self._pil(image), return_tensors="pt").pixel_values.to(self.device)
        with torch.no_grad():
            return self.clip.get_image_features(pixel_values=pixels)[0]

    def _encode_embeddings(self, emb: torch.Tensor) -> torch.Tensor:
        emb = emb[: self.max_length].to(self.device)
        text = self.clip.text_model
        ids = self._placeholder_ids(emb.shape[0])
        with spliced_embeddings(text.embeddings.token_embedding, emb):
            out = text(input_ids=ids)
        eos = emb.shape[0] + 1
        return self.clip.text_projection(out.last_hidden_state[0, eos])

    def tokenize(self, text: str) -> list[int]:
        ids = self.tokenizer(text, add_special_tokens=False).input_ids
        return ids[: self.max_length]

    def caption(self, image) -> str:
        if self._captioner is None:
            try:
                import transformers

                proc = transformers.Blip2Processor.from_pretrained(self.ckpt["blip2"])
                model = transformers.Blip2ForConditionalGeneration.from_pretrained(self.ckpt["blip2"]).to(self.device)
            except Exception as exc:  # pragma: no cover - network / weights
                raise CaptionerUnavailable(
                    f"captioner {self.ckpt['blip2']!r} unavailable ({exc}); supply user captions and set anchor.mode = 'user'"
                ) from exc
            self._captioner = (proc, model)
        proc, model = self._captioner
        inputs = proc(images=self._pil(image), return_tensors="pt").to(self.device)
        with torch.no_grad():
            out = model.generate(**inputs, max_new_tokens=30)
        return proc.batch_decode(out, skip_special_tokens=True)[0].strip()

    # -- latent diffusion -----------------------------------------------------------------
    @property
    def latent_shape(self) -> tuple[int, ...]:
        side = self.resolution // self.pipe.vae_scale_factor
        return (self.pipe.unet.config.in_channels, side, side)

    def encode_latent(self, image) -> torch.Tensor:
        pil = self._pil(image).resize((self.resolution, self.resolution))
        x = torch.as_tensor(np.asarray(pil), dtype=self.dtype, device=self.device).permute(2, 0, 1)[None] / 127.5 - 1.0
        with torch.no_grad():
            z = self.pipe.vae.encode(x).latent_dist.mean
        return z[0] * self.pipe.vae.config.scaling_factor

    def decode_latent(self, z0: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            x = self.pipe.vae.decode(z0[None].to(self.dtype) / self.pipe.vae.config.scaling_factor).sample
        return ((x[0].permute(1, 2, 0).float().cpu().numpy() + 1.0) / 2.0).clip(0.0, 1.0)

    def null_condition(self) -> torch.Tensor:
        return torch.zeros(0, self.d_tok, dtype=self.dtype, device=self.device)

    def check_condition(self, condition: torch.Tensor) -> None:
        if condition.ndim != 2 or condition.shape[1] != self.d_tok:
            raise ValueError(f"condition must be m x {self.d_tok}, got {tuple(condition.shape)}")

    def _hidden_states(self, condition: torch.Tensor):
        cond = condition[: self.max_length].to(self.device)
        ids = self._placeholder_ids(cond.shape[0])
        enc = self.cond_encoder
        with spliced_embeddings(enc.get_input_embeddings(), cond):
            out = enc(input_ids=ids, output_hidden_states=True)
        if self.variant != "sdxl":
            return out[0], None
        # SDXL: the first tower sees the nearest-vocab ids of the same rows (shared BPE vocabulary)
        from ..anchoring import project_to_vocab

        proj_ids, _ = project_to_vocab(cond.detach(), self.vocab)
        ids1 = ids.clone()
        ids1[0, 1 : 1 + len(proj_ids)] = torch.tensor(proj_ids, device=self.device)
        out1 = self.pipe.text_encoder(input_ids=ids1, output_hidden_states=True)
        hidden = torch.cat([out1.hidden_states[-2], out.hidden_states[-2]], dim=-1)
        return hidden, out.text_embeds

    def predict_noise(self, z_t: torch.Tensor, t: int, condition: torch.Tensor) -> torch.Tensor:
        self.check_condition(condition)
        hidden, pooled = self._hidden_states(condition)
        kwargs = {}
        if pooled is not None:
            r = self.resolution
            time_ids = torch.tensor([[r, r, 0, 0, r, r]], dtype=self.dtype, device=self.device)
            kwargs["added_cond_kwargs"] = {"text_embeds": pooled, "time_ids": time_ids}
        out = self.pipe.unet(z_t[None].to(self.dtype), int(t), encoder_hidden_states=hidden, **kwargs).sample
        return out[0]

    def latent_noise(self, shape, generator: torch.Generator) -> torch.Tensor:
        return torch.randn(tuple(shape), generator=generator, dtype=self.dtype).to(self.device)


class DinoEncoder:
    """DINOv2 CLS-token image embedding for the directional-score report."""

    def __init__(self, checkpoint: str = DEFAULT_CHECKPOINTS["dino"], device: str = "cpu"):
        try:
            import transformers

            self.processor = transformers.AutoImageProcessor.from_pretrained(checkpoint)
            self.model = transformers.AutoModel.from_pretrained(checkpoint).to(device).eval()
        except Exception as exc:  # pragma: no cover - network / weights
            raise BackendError(f"cannot load DINO encoder {checkpoint!r}: {exc}") from exc
        self.device = device
        self.name = checkpoint

    def __call__(self, image) -> torch.Tensor:
        from PIL import Image

        pil = Image.fromarray(to_uint8(as_image(image)), mode="RGB")
        inputs = self.processor(images=pil, return_tensors="pt").to(self.device)
        with torch.no_grad():
            return self.model(**inputs).last_hidden_state[0, 0]
