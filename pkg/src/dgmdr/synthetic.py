"""Synthetic multi-domain shape datasets with a controlled style shift.

Class identity is carried by shape geometry only; domain identity by hue
and background texture only, so the class signal is domain-invariant by
construction.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw

from .augment import hsv_to_rgb, rgb_to_hsv
from .core import DomainDataset, Sample, write_manifest

SHAPES = ("circle", "square", "triangle", "cross", "ring")


@dataclass(frozen=True)
class SyntheticDomainSpec:
    num_classes: int = 3
    samples_per_class: int = 50
    domain_color_shift: float = 0.25  # hue offset between consecutive domains, in turns
    background_texture_seed: int = 0
    image_size: int = 64
    base_hue: float = 0.0
    name_prefix: str = "synth"

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in 2..{len(SHAPES)}")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")


def _shape_mask(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    radius = rng.uniform(0.22, 0.34) * size
    cx, cy = rng.uniform(radius + 2, size - radius - 2, size=2)
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    box = [cx - radius, cy - radius, cx + radius, cy + radius]
    if shape == "circle":
        draw.ellipse(box, fill=255)
    elif shape == "square":
        draw.rectangle(box, fill=255)
    elif shape == "triangle":
        draw.polygon([(cx, cy - radius), (cx - radius, cy + radius), (cx + radius, cy + radius)], fill=255)
    elif shape == "cross":
        w = radius / 3
        draw.rectangle([cx - w, cy - radius, cx + w, cy + radius], fill=255)
        draw.rectangle([cx - radius, cy - w, cx + radius, cy + w], fill=255)
    elif shape == "ring":
        draw.ellipse(box, fill=255)
        r2 = radius * 0.55
        draw.ellipse([cx - r2, cy - r2, cx + r2, cy + r2], fill=0)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return np.asarray(canvas, dtype=np.float64) / 255.0


def domain_hue(spec: SyntheticDomainSpec, domain_index: int) -> float:
    return (spec.base_hue + domain_index * spec.domain_color_shift) % 1.0


def render_image(spec: SyntheticDomainSpec, domain_index: int, class_index: int, sample_index: int) -> np.ndarray:
    """Render one HxWx3 uint8 image; a pure function of its arguments."""
    size = spec.image_size
    shape_rng = np.random.default_rng([spec.background_texture_seed, 7, class_index, sample_index, domain_index])
    mask = _shape_mask(SHAPES[class_index], size, shape_rng)
    tex_rng = np.random.default_rng([spec.background_texture_seed, 11, domain_index, class_index, sample_index])
    # domain texture: a fixed sinusoidal grating per domain plus per-image noise
    phase = np.random.default_rng([spec.background_texture_seed, 13, domain_index]).uniform(0, 2 * np.pi, size=2)
    yy, xx = np.mgrid[0:size, 0:size] / size
    freq = 3 + domain_index % 4
    grating = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx + 0.5 * yy) + phase[0])
    noise = tex_rng.uniform(-0.06, 0.06, size=(size, size))
    bg_value = 0.25 + 0.15 * grating + noise
    fg_value = 0.85 + noise
    value = np.clip(mask * fg_value + (1 - mask) * bg_value, 0.0, 1.0)
    saturation = mask * 0.8 + (1 - mask) * 0.5
    hue = np.full((size, size), domain_hue(spec, domain_index))
    rgb = hsv_to_rgb(np.stack([hue, saturation, value], axis=-1))
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def generate_synthetic_domains(
    spec: SyntheticDomainSpec,
    num_domains: int,
    out_dir: Optional[Path] = None,
) -> list[DomainDataset]:
    """Render ``num_domains`` domains and write PNGs plus ``<name>.csv`` manifests.

    When ``out_dir`` is None the images are only described (image_ref uses a
    ``synthetic://`` locator that :func:`load_synthetic` can render).
    """
    if num_domains < 2:
        raise ValueError("num_domains must be >= 2")
    datasets = []
    for d in range(num_domains):
        name = f"{spec.name_prefix}_{d}"
        samples = []
        for c in range(spec.num_classes):
            for i in range(spec.samples_per_class):
                if out_dir is None:
                    ref = _synthetic_ref(spec, d, c, i)
                else:
                    path = Path(out_dir) / name / f"c{c}_{i:05d}.png"
                    path.parent.mkdir(parents=True, exist_ok=True)
                    Image.fromarray(render_image(spec, d, c, i)).save(path, format="PNG")
                    ref = str(path)
                samples.append(Sample(ref, c, name))
        ds = DomainDataset(name, samples)
        if out_dir is not None:
            write_manifest(ds, Path(out_dir) / f"{name}.csv", Path(out_dir))
        datasets.append(ds)
    return datasets


def _synthetic_ref(spec: SyntheticDomainSpec, d: int, c: int, i: int) -> str:
    return (
        f"synthetic://{spec.base_hue!r}/{spec.domain_color_shift!r}/{spec.background_texture_seed}"
        f"/{spec.image_size}/{spec.num_classes}/{d}/{c}/{i}"
    )


def load_synthetic(ref: str) -> np.ndarray:
    parts = ref[len("synthetic://"):].split("/")
    base, shift, seed, size, ncls, d, c, i = parts
    spec = SyntheticDomainSpec(
        num_classes=int(ncls),
        domain_color_shift=float(shift),
        background_texture_seed=int(seed),
        image_size=int(size),
        base_hue=float(base),
    )
    return render_image(spec, int(d), int(c), int(i))


def mean_hue(images: list[np.ndarray]) -> float:
    """Circular mean hue (in turns) over all pixels of all images."""
    angles = []
    for img in images:
        h = rgb_to_hsv(img.astype(np.float64) / 255.0)[..., 0]
        angles.append(h.ravel())
    theta = 2 * np.pi * np.concatenate(angles)
    return float((np.arctan2(np.sin(theta).mean(), np.cos(theta).mean()) / (2 * np.pi)) % 1.0)


def hue_distance(a: float, b: float) -> float:
    d = abs(a - b) % 1.0
    return min(d, 1.0 - d)
