"""Image I/O helpers. Images travel through the package as float arrays in [0, 1], shape (H, W, 3)."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image


class ImageDecodeError(ValueError):
    pass


def as_image(image) -> np.ndarray:
    if isinstance(image, (str, Path)):
        return load_image(image)
    if isinstance(image, Image.Image):
        return np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    if arr.ndim != 3 or arr.shape[-1] != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ImageDecodeError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    return arr


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc


def to_uint8(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def save_png(image, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")
    return path


def resize(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[0] == size and image.shape[1] == size:
        return image
    im = Image.fromarray(to_uint8(image), mode="RGB").resize((size, size), Image.BICUBIC)
    return np.asarray(im, dtype=np.float64) / 255.0


def content_hash(image) -> str:
    arr = to_uint8(as_image(image))
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()
