"""Image representation, PNG I/O and arithmetic primitives.

Images are plain numpy arrays: ``uint8`` in [0, 255] or float64 in the unit
interval, shaped ``(H, W)`` for single-channel data and ``(H, W, 3)`` for
RGB. Functions never mutate their inputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageIOError

__all__ = [
    "PairedSample",
    "check_image",
    "channels",
    "to_grayscale",
    "u8_to_f32",
    "f32_to_u8",
    "clip",
    "load_png",
    "save_png",
    "load_pair",
]


def channels(img: np.ndarray) -> int:
    return 1 if img.ndim == 2 else img.shape[2]


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"{name} must be HxW or HxWx3, got shape {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"{name} is empty")
    return img


@dataclass(frozen=True)
class PairedSample:
    """A clean image and its perturbed counterpart, both unit-interval floats."""

    clean: np.ndarray
    perturbed: np.ndarray
    label: str = "synthetic"
    sample_id: str = ""

    def __post_init__(self):
        clean = check_image(self.clean, "clean")
        perturbed = check_image(self.perturbed, "perturbed")
        if clean.shape != perturbed.shape:
            raise ValueError(
                f"pair dimensions differ: clean {clean.shape} vs perturbed {perturbed.shape}"
            )
        object.__setattr__(self, "clean", clean)
        object.__setattr__(self, "perturbed", perturbed)

    @property
    def shape(self):
        return self.clean.shape


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Unweighted channel mean; single-channel input passes through."""
    img = check_image(img)
    if img.ndim == 2:
        return img
    # summing in sorted order keeps the result independent of channel order
    s = np.sort(img.astype(np.float64), axis=2)
    return (s[..., 0] + s[..., 1] + s[..., 2]) / 3.0


def u8_to_f32(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.uint8).astype(np.float64) / 255.0


def f32_to_u8(img: np.ndarray) -> np.ndarray:
    """Map unit floats to bytes with clamping and round-half-up."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def clip(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if not lo < hi:
        raise ValueError(f"clip bounds must satisfy lo < hi, got lo={lo}, hi={hi}")
    return np.clip(img, lo, hi)


def _composite_over_white(im: Image.Image) -> Image.Image:
    rgba = im.convert("RGBA")
    white = Image.new("RGBA", rgba.size, (255, 255, 255, 255))
    return Image.alpha_composite(white, rgba).convert("RGB")


def _normalize_mode(im: Image.Image) -> np.ndarray:
    mode = im.mode
    if mode in ("I;16", "I;16B", "I;16L", "I;16N", "I"):
        wide = np.asarray(im, dtype=np.int64)
        scale = 65535 if mode.startswith("I;16") or wide.max(initial=0) > 255 else 255
        gray = np.floor(np.clip(wide, 0, scale) * (255.0 / scale) + 0.5).astype(np.uint8)
        return np.repeat(gray[..., None], 3, axis=2)
    if mode == "P":
        if "transparency" in im.info:
            return np.asarray(_composite_over_white(im))
        return np.asarray(im.convert("RGB"))
    if mode in ("RGBA", "LA", "PA", "RGBa", "La"):
        out = _composite_over_white(im)
        if mode in ("LA", "La"):
            return np.asarray(out.convert("L"))
        return np.asarray(out)
    if mode in ("L", "RGB"):
        return np.asarray(im)
    if mode == "1":
        return np.asarray(im.convert("L"))
    return np.asarray(im.convert("RGB"))


def load_png(path) -> np.ndarray:
    """Load a raster as ``uint8``; alpha is composited over white.

    16-bit and palette inputs come back as 8-bit RGB. Any failure raises
    :class:`ImageIOError` naming the file, and no partial image is returned.
    """
    path = os.fspath(path)
    try:
        with Image.open(path) as im:
            im.load()
            arr = _normalize_mode(im)
    except FileNotFoundError as exc:
        raise ImageIOError(f"{path}: no such file") from exc
    except Image.DecompressionBombError as exc:
        raise ImageIOError(f"{path}: image dimensions too large ({exc})") from exc
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageIOError(f"{path}: cannot decode image ({exc})") from exc
    return np.ascontiguousarray(arr, dtype=np.uint8)


def save_png(img: np.ndarray, path) -> None:
    path = os.fspath(path)
    img = check_image(img)
    if img.dtype != np.uint8:
        raise ValueError(f"save_png expects uint8 data, got {img.dtype}")
    parent = os.path.dirname(path)
    try:
        if parent:
            os.makedirs(parent, exist_ok=True)
        Image.fromarray(img).save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot write image ({exc})") from exc


def load_pair(clean_path, perturbed_path, label="pair", sample_id="") -> PairedSample:
    clean = u8_to_f32(load_png(clean_path))
    perturbed = u8_to_f32(load_png(perturbed_path))
    if clean.ndim != perturbed.ndim:
        clean = np.repeat(clean[..., None], 3, axis=2) if clean.ndim == 2 else clean
        perturbed = np.repeat(perturbed[..., None], 3, axis=2) if perturbed.ndim == 2 else perturbed
    return PairedSample(clean, perturbed, label=label, sample_id=sample_id)
