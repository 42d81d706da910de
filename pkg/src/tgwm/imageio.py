"""Image tensors, quality metrics and captioned-corpus ingestion.

Images are ``torch.float32`` tensors of shape ``(3, H, W)`` with values in
``[0, 1]``. Batches add a leading dimension.
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

logger = logging.getLogger(__name__)

DEFAULT_SIZE = 224
CAPTIONS_PER_IMAGE = 5

ImageTensor = torch.Tensor


class ImageLoadError(OSError):
    """Raised when an image file cannot be read or decoded."""

    def __init__(self, path, reason):
        super().__init__(f"cannot load image {os.fspath(path)!r}: {reason}")
        self.path = os.fspath(path)


class MissingImageWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CaptionedSample:
    image: ImageTensor
    caption: str
    sample_id: str
    image_id: str


@dataclass(frozen=True)
class PerturbationBudget:
    target_psnr_db: float = 40.0

    def __post_init__(self):
        if not self.target_psnr_db > 0:
            raise ValueError(f"target_psnr_db must be positive, got {self.target_psnr_db}")

    @property
    def max_mse(self) -> float:
        return 10.0 ** (-self.target_psnr_db / 10.0)


def from_pil(img: Image.Image) -> ImageTensor:
    arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def to_pil(img: ImageTensor) -> Image.Image:
    arr = to_uint8(img)
    return Image.fromarray(arr, mode="RGB")


def to_uint8(img: ImageTensor) -> np.ndarray:
    """HWC uint8 array, round-half-to-even after clamping."""
    arr = img.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def load_image(path, size: int = DEFAULT_SIZE) -> ImageTensor:
    """Read a raster file as an RGB tensor bilinearly resized to ``size x size``."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            return from_pil(im)
    except (OSError, ValueError) as exc:
        raise ImageLoadError(path, exc) from exc


def save_image(img: ImageTensor, path) -> None:
    to_pil(img).save(path)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with peak value 1.0; ``inf`` for identical inputs."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = torch.mean((a.detach().double() - b.detach().double()) ** 2).item()
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def parse_captions(captions_file) -> "OrderedDict[str, list[tuple[int, str]]]":
    """Parse ``name#idx<TAB>caption`` lines, grouped by image name in file order."""
    groups: OrderedDict[str, list[tuple[int, str]]] = OrderedDict()
    with open(captions_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            try:
                key, caption = line.split("\t", 1)
                name, idx = key.rsplit("#", 1)
                idx = int(idx)
            except ValueError:
                raise ValueError(f"{captions_file}:{lineno}: malformed caption line {line!r}") from None
            groups.setdefault(name, []).append((idx, caption.strip()))
    return groups


def load_captioned_corpus(image_dir, captions_file, size: int = DEFAULT_SIZE) -> list[CaptionedSample]:
    image_dir = Path(image_dir)
    samples = []
    missing = 0
    for name, captions in parse_captions(captions_file).items():
        path = image_dir / name
        if not path.is_file():
            missing += len(captions)
            warnings.warn(f"captions reference missing image {path}", MissingImageWarning, stacklevel=2)
            continue
        img = load_image(path, size)
        for idx, caption in captions:
            samples.append(CaptionedSample(img, caption, f"{name}#{idx}", name))
    if missing:
        logger.warning("skipped %d captions referencing missing images", missing)
    return samples


# -- synthetic corpus ---------------------------------------------------------

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring")
COLORS = {
    "red": (220, 30, 30),
    "green": (30, 180, 50),
    "blue": (40, 60, 220),
    "yellow": (240, 220, 40),
    "purple": (140, 40, 170),
    "orange": (245, 140, 20),
    "cyan": (40, 210, 220),
    "white": (245, 245, 245),
}
BACKGROUNDS = {
    "black": (15, 15, 15),
    "gray": (128, 128, 128),
    "white": (235, 235, 235),
    "brown": (110, 70, 40),
    "navy": (20, 30, 90),
    "pink": (240, 170, 190),
}
POSITIONS = {
    "center": (0.5, 0.5),
    "left": (0.3, 0.5),
    "right": (0.7, 0.5),
    "top": (0.5, 0.3),
    "bottom": (0.5, 0.7),
}
TEMPLATES = (
    "a {color} {shape} on a {bg} background",
    "a {size} {color} {shape}",
    "a picture of a {shape} colored {color}",
    "a {color} {shape} near the {pos} of the image",
    "a simple drawing of a {size} {shape} against {bg}",
)


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, cx: float, cy: float, r: float, fill) -> None:
    box = (cx - r, cy - r, cx + r, cy + r)
    if shape == "circle":
        draw.ellipse(box, fill=fill)
    elif shape == "square":
        draw.rectangle(box, fill=fill)
    elif shape == "triangle":
        draw.polygon([(cx, cy - r), (cx + r, cy + r), (cx - r, cy + r)], fill=fill)
    elif shape == "diamond":
        draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], fill=fill)
    elif shape == "cross":
        w = r / 3
        draw.rectangle((cx - w, cy - r, cx + w, cy + r), fill=fill)
        draw.rectangle((cx - r, cy - w, cx + r, cy + w), fill=fill)
    elif shape == "ring":
        draw.ellipse(box, outline=fill, width=max(2, int(r / 3)))
    else:
        raise ValueError(f"unknown shape {shape!r}")


def _combinations() -> list[tuple[str, str, str]]:
    return [
        (shape, color, bg)
        for shape in SHAPES
        for color in COLORS
        for bg in BACKGROUNDS
        if color != bg
    ]


def render_synthetic_image(shape, color, bg, size_word, pos, rng: np.random.Generator, size=DEFAULT_SIZE):
    base = np.array(BACKGROUNDS[bg], dtype=np.float64)
    # smooth illumination gradient plus mild sensor noise so images are not flat
    yy, xx = np.mgrid[0:size, 0:size] / size
    direction = rng.uniform(-1, 1, size=2)
    ramp = 25.0 * (direction[0] * (xx - 0.5) + direction[1] * (yy - 0.5))
    arr = base[None, None, :] + ramp[..., None] + rng.normal(0.0, 3.0, size=(size, size, 3))
    canvas = Image.fromarray(np.clip(np.round(arr), 0, 255).astype(np.uint8), mode="RGB")

    fx, fy = POSITIONS[pos]
    jitter = rng.uniform(-0.05, 0.05, size=2)
    radius = size * (0.3 if size_word == "large" else 0.15) * rng.uniform(0.9, 1.1)
    _draw_shape(ImageDraw.Draw(canvas), shape, (fx + jitter[0]) * size, (fy + jitter[1]) * size, radius, COLORS[color])
    return canvas


def generate_synthetic_corpus(n_images: int, seed: int, size: int = DEFAULT_SIZE) -> list[CaptionedSample]:
    """Procedural shape images, each with five template captions.

    Shape/color/background combinations are drawn without replacement while
    they last, so caption sets of distinct images differ.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    rng = np.random.default_rng(seed)
    combos = _combinations()
    order = []
    while len(order) < n_images:
        order.extend(rng.permutation(len(combos)).tolist())
    samples = []
    for i in range(n_images):
        shape, color, bg = combos[order[i]]
        size_word = ("small", "large")[int(rng.integers(2))]
        pos = list(POSITIONS)[int(rng.integers(len(POSITIONS)))]
        img = from_pil(render_synthetic_image(shape, color, bg, size_word, pos, rng, size))
        name = f"synth_{i:05d}.png"
        fields = dict(shape=shape, color=color, bg=bg, size=size_word, pos=pos)
        for idx, template in enumerate(TEMPLATES):
            samples.append(CaptionedSample(img, template.format(**fields), f"{name}#{idx}", name))
    return samples


def export_corpus(samples: Sequence[CaptionedSample], out_dir, captions_name: str = "captions.txt") -> Path:
    """Write images as PNG plus a Flickr8k-style captions file; returns the captions path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = set()
    lines = []
    for s in samples:
        if s.image_id not in written:
            save_image(s.image, out_dir / s.image_id)
            written.add(s.image_id)
        caption = " ".join(s.caption.split())
        lines.append(f"{s.sample_id}\t{caption}\n")
    captions_path = out_dir / captions_name
    captions_path.write_text("".join(lines), encoding="utf-8")
    return captions_path


def unique_images(samples: Sequence[CaptionedSample]) -> list[tuple[str, ImageTensor]]:
    seen = OrderedDict()
    for s in samples:
        seen.setdefault(s.image_id, s.image)
    return list(seen.items())


def synthetic_label(caption: str) -> int:
    """Class index of the shape named in a synthetic caption."""
    words = caption.lower().split()
    for i, shape in enumerate(SHAPES):
        if shape in words:
            return i
    raise ValueError(f"caption names no known shape: {caption!r}")
