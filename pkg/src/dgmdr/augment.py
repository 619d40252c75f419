"""Image loading and the fundus augmentation pipeline.

All pixel operations work on HxWx3 uint8 arrays: histogram equalization,
flips and colour jitter run on 8-bit intensities, then the image is
resized (bilinear) to the target size and normalized with per-channel mean/std constants (ImageNet statistics by
default, since the target network starts from the oracle's weights).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch
from PIL import Image, ImageEnhance, UnidentifiedImageError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ImageLoadError(RuntimeError):
    def __init__(self, image_ref: str, reason: str):
        self.image_ref = image_ref
        super().__init__(f"cannot load image {image_ref!r}: {reason}")


@dataclass(frozen=True)
class AugmentConfig:
    target_size: int = 224
    hist_eq_prob: float = 0.5
    hflip_prob: float = 0.5
    jitter_strength: float = 0.3
    jitter_prob: float = 0.3
    rng_seed: int = 0
    train_mode: bool = True
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        for name in ("hist_eq_prob", "hflip_prob", "jitter_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.target_size < 1:
            raise ValueError("target_size must be positive")

    @classmethod
    def from_train_config(cls, cfg, train_mode: bool = True) -> "AugmentConfig":
        return cls(
            target_size=cfg.image_size,
            hist_eq_prob=cfg.hist_eq_prob,
            hflip_prob=cfg.hflip_prob,
            jitter_strength=cfg.jitter_strength,
            jitter_prob=cfg.jitter_prob,
            rng_seed=cfg.seed,
            train_mode=train_mode,
            mean=cfg.norm_mean,
            std=cfg.norm_std,
        )

    def eval(self) -> "AugmentConfig":
        return replace(self, train_mode=False)


def load_image(image_ref: str) -> np.ndarray:
    """Decode a PNG/JPEG (or a ``synthetic://`` locator) into an HxWx3 uint8 array."""
    if str(image_ref).startswith("synthetic://"):
        from .synthetic import load_synthetic

        return load_synthetic(str(image_ref))
    try:
        with Image.open(image_ref) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (FileNotFoundError, IsADirectoryError, UnidentifiedImageError, OSError) as exc:
        raise ImageLoadError(str(image_ref), str(exc)) from exc
    if arr.shape[0] < 8 or arr.shape[1] < 8:
        raise ImageLoadError(str(image_ref), f"image {arr.shape[1]}x{arr.shape[0]} smaller than 8x8")
    return arr


def resize(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a uint8 image to size x size x 3."""
    image = _as_rgb_uint8(image)
    if image.shape[:2] == (size, size):
        return image
    return np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR))


def working_image(image: np.ndarray, size: int) -> np.ndarray:
    """Downscale to size x size when both sides are larger; never upscale.

    Augmentation runs at this resolution and the final resize to the target
    size happens afterwards, so small inputs are not augmented at 224 px.
    """
    image = _as_rgb_uint8(image)
    if image.shape[0] >= size and image.shape[1] >= size:
        return resize(image, size)
    return image


def _as_rgb_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    if image.shape[0] < 8 or image.shape[1] < 8:
        raise ValueError("image must be at least 8x8")
    if image.dtype != np.uint8:
        image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return image


def equalize_hist(image: np.ndarray) -> np.ndarray:
    """Per-channel histogram equalization of a uint8 image.

    Each channel is remapped through its cumulative histogram,
    ``round_half_up((cdf(v) - cdf_min) / (N - cdf_min) * 255)``. Constant channels
    are returned unchanged.
    """
    out = np.empty_like(image)
    n = image.shape[0] * image.shape[1]
    for c in range(image.shape[2]):
        chan = image[..., c]
        hist = np.bincount(chan.ravel(), minlength=256)
        cdf = np.cumsum(hist)
        cdf_min = cdf[np.flatnonzero(hist)[0]]
        if cdf_min == n:
            out[..., c] = chan
            continue
        # exact integer round-half-up of (cdf - cdf_min) * 255 / (n - cdf_min)
        span = n - cdf_min
        lut = (2 * 255 * np.maximum(cdf - cdf_min, 0) + span) // (2 * span)
        out[..., c] = lut.astype(np.uint8)[chan]
    return out


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, ::-1])


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """Float RGB in [0, 1] to HSV, hue in [0, 1)."""
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def adjust_hue(image: np.ndarray, shift: float) -> np.ndarray:
    """Rotate hue of a uint8 image by ``shift`` turns (8-bit HSV, 1/256-turn steps)."""
    h, s, v = Image.fromarray(image).convert("HSV").split()
    step = np.uint8(int(round(shift * 256)) % 256)
    h = Image.fromarray(np.asarray(h, dtype=np.uint8) + step, "L")
    return np.asarray(Image.merge("HSV", (h, s, v)).convert("RGB"))


def color_jitter(image: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast and saturation factors drawn from [1-s, 1+s]; hue shift from [-s, s] turns.

    Brightness blends with black, contrast with the mean gray level,
    saturation with the grayscale image; applied in that order, then hue.
    """
    b, c, s = rng.uniform(1.0 - strength, 1.0 + strength, size=3)
    h = rng.uniform(-strength, strength)
    im = Image.fromarray(image)
    im = ImageEnhance.Brightness(im).enhance(b)
    im = ImageEnhance.Contrast(im).enhance(c)
    im = ImageEnhance.Color(im).enhance(s)
    return adjust_hue(np.asarray(im), h)


def augment_uint8(image: np.ndarray, cfg: AugmentConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Train-mode 8-bit augmentation (identity in eval mode)."""
    if not cfg.train_mode:
        return image
    if rng is None:
        raise ValueError("train-mode transform needs an rng")
    # draw every coin up front so the stream advances identically per sample
    do_eq, do_flip, do_jitter = rng.random(3) < (cfg.hist_eq_prob, cfg.hflip_prob, cfg.jitter_prob)
    if do_eq:
        image = equalize_hist(image)
    if do_flip:
        image = hflip(image)
    if do_jitter:
        image = color_jitter(image, cfg.jitter_strength, rng)
    return image


def normalize_batch(images: np.ndarray | torch.Tensor, mean, std) -> torch.Tensor:
    """uint8 (B, H, W, 3) -> float32 (B, 3, H, W) with ``(x / 255 - mean) / std``."""
    x = torch.tensor(np.asarray(images)).permute(0, 3, 1, 2).float().div_(255.0)
    m = torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1)
    sd = torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1)
    return x.sub_(m).div_(sd).contiguous()


def augment_to_size(image: np.ndarray, cfg: AugmentConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Working-resolution uint8 image -> augmented uint8 image at target size."""
    return resize(augment_uint8(image, cfg, rng), cfg.target_size)


def transform(image: np.ndarray, cfg: AugmentConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Full pipeline for one image: float32 array of shape (224, 224, 3) by default.

    Values are ``(x / 255 - mean) / std`` per channel. Eval mode is a pure
    function of ``image`` (bilinear resize + normalization).
    """
    out = augment_to_size(working_image(image, cfg.target_size), cfg, rng)
    return normalize_batch(out[None], cfg.mean, cfg.std)[0].permute(1, 2, 0).numpy()


class ImageStore:
    """Caches decoded working-resolution uint8 images keyed by image_ref."""

    def __init__(self, size: int):
        self.size = size
        self._cache: dict[str, np.ndarray] = {}

    def get(self, image_ref: str) -> np.ndarray:
        arr = self._cache.get(image_ref)
        if arr is None:
            arr = working_image(load_image(image_ref), self.size)
            arr.setflags(write=False)
            self._cache[image_ref] = arr
        return arr

    def __len__(self) -> int:
        return len(self._cache)
