"""Parameterized image distortions.

A :class:`DistortionSpec` names a kind, its parameters and a firing
probability. Any scalar parameter may instead be given as a ``(low, high)``
pair, in which case it is drawn uniformly per application. All randomness
comes from an explicit ``numpy.random.Generator`` so results depend only on
seeds.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image
from torchvision.transforms import InterpolationMode

KINDS = (
    "identity",
    "rotation",
    "hflip",
    "color_jitter",
    "resized_crop",
    "add_noise",
    "gaussian_blur",
    "jpeg_compression",
    "solarization",
    "saturation",
    "brightness",
    "contrast",
    "hue",
    "crop_fraction",
    "salt_pepper",
    "perspective",
)

DIFFERENTIABLE_KINDS = frozenset(
    {"identity", "rotation", "crop_fraction", "gaussian_blur", "brightness", "contrast"}
)

# parameter swept by ``with_strength`` for each kind
STRENGTH_PARAM = {
    "rotation": "degrees",
    "color_jitter": "magnitude",
    "resized_crop": "scale",
    "add_noise": "std",
    "gaussian_blur": "kernel",
    "jpeg_compression": "quality",
    "solarization": "threshold",
    "saturation": "factor",
    "brightness": "factor",
    "contrast": "factor",
    "hue": "factor",
    "crop_fraction": "fraction",
    "salt_pepper": "p",
    "perspective": "distortion_scale",
}

_DEFAULTS: dict[str, dict[str, Any]] = {
    "identity": {},
    "rotation": {"degrees": 0.0},
    "hflip": {},
    "color_jitter": {"brightness": 0.0, "contrast": 0.0, "saturation": 0.0, "hue": 0.0},
    "resized_crop": {"scale": (0.08, 1.0), "ratio": (3 / 4, 4 / 3)},
    "add_noise": {"std": 0.0},
    "gaussian_blur": {"kernel": 3, "sigma": None},
    "jpeg_compression": {"quality": 75},
    "solarization": {"threshold": 0.5},
    "saturation": {"factor": 1.0},
    "brightness": {"factor": 1.0},
    "contrast": {"factor": 1.0},
    "hue": {"factor": 0.0},
    "crop_fraction": {"fraction": 0.0},
    "salt_pepper": {"p": 0.0},
    "perspective": {"distortion_scale": 0.5, "p": 1.0},
}


def _ends(value) -> tuple:
    if isinstance(value, (tuple, list)):
        return tuple(value)
    return (value,)


def _draw(value, rng: np.random.Generator) -> float:
    if isinstance(value, (tuple, list)):
        lo, hi = value
        return float(rng.uniform(lo, hi))
    return value


def default_blur_sigma(kernel: int) -> float:
    return 0.3 * ((kernel - 1) * 0.5 - 1) + 0.8


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    probability: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}")
        merged = dict(_DEFAULTS[self.kind])
        unknown = set(self.params) - set(merged) - ({"magnitude"} if self.kind == "color_jitter" else set())
        if unknown:
            raise ValueError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        merged.update({k: tuple(v) if isinstance(v, list) else v for k, v in self.params.items()})
        if self.kind == "color_jitter" and "magnitude" in merged:
            m = merged.pop("magnitude")
            merged.update(brightness=m, contrast=m, saturation=m, hue=min(m / 2, 0.5))
        object.__setattr__(self, "params", merged)
        if not self.name:
            object.__setattr__(self, "name", self.kind)
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.probability}")
        _validate(self.kind, merged)

    def to_record(self) -> dict:
        params = {k: list(v) if isinstance(v, tuple) else v for k, v in self.params.items()}
        return {"name": self.name, "kind": self.kind, "params": params, "probability": self.probability}

    @classmethod
    def from_record(cls, rec: Mapping) -> "DistortionSpec":
        return cls(rec["kind"], dict(rec.get("params", {})), float(rec.get("probability", 1.0)), rec.get("name", ""))


def _check(cond: bool, kind: str, msg: str) -> None:
    if not cond:
        raise ValueError(f"{kind}: {msg}")


def _validate(kind: str, p: Mapping[str, Any]) -> None:
    def all_in(key, lo, hi):
        return all(isinstance(v, (int, float)) and math.isfinite(v) and lo <= v <= hi for v in _ends(p[key]))

    if kind == "rotation":
        _check(all_in("degrees", -360, 360), kind, "degrees must be finite")
    elif kind == "color_jitter":
        for key in ("brightness", "contrast", "saturation"):
            _check(all_in(key, 0, math.inf), kind, f"{key} must be >= 0")
        _check(all_in("hue", 0, 0.5), kind, "hue must lie in [0, 0.5]")
    elif kind == "resized_crop":
        _check(all_in("scale", 1e-6, 1.0), kind, "scale must lie in (0, 1]")
        _check(all_in("ratio", 1e-6, math.inf), kind, "ratio must be positive")
    elif kind == "add_noise":
        _check(all_in("std", 0, math.inf), kind, "std must be >= 0")
    elif kind == "gaussian_blur":
        k = p["kernel"]
        _check(isinstance(k, (int, np.integer)) and k >= 1 and k % 2 == 1, kind, f"kernel must be odd positive, got {k!r}")
        if p["sigma"] is not None:
            _check(all_in("sigma", 1e-6, math.inf), kind, "sigma must be positive")
    elif kind == "jpeg_compression":
        _check(all_in("quality", 1, 100), kind, "quality must lie in [1, 100]")
    elif kind == "solarization":
        _check(all_in("threshold", 0, 1), kind, "threshold must lie in [0, 1]")
    elif kind in ("saturation", "brightness", "contrast"):
        _check(all_in("factor", 0, math.inf), kind, "factor must be >= 0")
    elif kind == "hue":
        _check(all_in("factor", -0.5, 0.5), kind, "factor must lie in [-0.5, 0.5]")
    elif kind == "crop_fraction":
        _check(all_in("fraction", 0, 0.999), kind, "fraction must lie in [0, 1)")
    elif kind == "salt_pepper":
        _check(all_in("p", 0, 1), kind, "p must lie in [0, 1]")
    elif kind == "perspective":
        _check(all_in("distortion_scale", 0, 1), kind, "distortion_scale must lie in [0, 1]")
        _check(all_in("p", 0, 1), kind, "p must lie in [0, 1]")


def with_strength(spec: DistortionSpec, value, name: str | None = None) -> DistortionSpec:
    """Copy of ``spec`` with its primary strength parameter set to ``value``."""
    key = STRENGTH_PARAM.get(spec.kind)
    if key is None:
        raise ValueError(f"{spec.kind} has no strength parameter")
    params = dict(spec.params)
    if spec.kind == "color_jitter":
        for k in ("brightness", "contrast", "saturation", "hue"):
            params.pop(k)
    if spec.kind == "gaussian_blur":
        value = int(value)
        params["sigma"] = None
    if spec.kind == "jpeg_compression":
        value = int(value)
    params[key] = value
    return DistortionSpec(spec.kind, params, spec.probability, name or spec.name)


def strength_of(spec: DistortionSpec):
    key = STRENGTH_PARAM.get(spec.kind)
    if key is None:
        return None
    if spec.kind == "color_jitter":
        return spec.params["brightness"]
    return spec.params[key]


# -- kernels ------------------------------------------------------------------


def _center_crop_resize(img: torch.Tensor, keep_h: int, keep_w: int, top: int | None = None, left: int | None = None):
    h, w = img.shape[-2:]
    keep_h = max(1, min(h, keep_h))
    keep_w = max(1, min(w, keep_w))
    if top is None:
        top = (h - keep_h) // 2
    if left is None:
        left = (w - keep_w) // 2
    crop = img[..., top:top + keep_h, left:left + keep_w]
    if (keep_h, keep_w) == (h, w):
        return crop
    batched = crop.dim() == 4
    out = F.interpolate(crop if batched else crop.unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False)
    return out if batched else out.squeeze(0)


def _resized_crop(img, params, rng):
    h, w = img.shape[-2:]
    scale, ratio = params["scale"], params["ratio"]
    if not isinstance(scale, (tuple, list)):
        side = math.sqrt(scale)
        return _center_crop_resize(img, round(h * side), round(w * side))
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return _center_crop_resize(img, ch, cw, top, left)
    side = math.sqrt(scale[0] if scale[0] > 0 else 1.0)
    return _center_crop_resize(img, round(h * side), round(w * side))


def _jpeg(img: torch.Tensor, quality: int) -> torch.Tensor:
    def one(x):
        arr = np.round(x.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr, mode="RGB").save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        out = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
        return torch.from_numpy(out).permute(2, 0, 1).to(x.dtype)

    if img.dim() == 4:
        return torch.stack([one(x) for x in img])
    return one(img)


def _salt_pepper(img, p, rng):
    shape = (*img.shape[:-3], *img.shape[-2:])
    u = torch.from_numpy(rng.random(shape))
    salt = (u < p / 2).unsqueeze(-3)
    pepper = ((u >= p / 2) & (u < p)).unsqueeze(-3)
    out = img.masked_fill(salt, 1.0)
    return out.masked_fill(pepper, 0.0)


def _perspective(img, distortion_scale, p, rng):
    if rng.random() >= p:
        return img
    h, w = img.shape[-2:]
    half_h, half_w = h // 2, w // 2
    dh = int(distortion_scale * half_h) + 1
    dw = int(distortion_scale * half_w) + 1
    r = lambda lo, hi: int(rng.integers(lo, hi))  # noqa: E731
    topleft = [r(0, dw), r(0, dh)]
    topright = [r(w - dw, w), r(0, dh)]
    botright = [r(w - dw, w), r(h - dh, h)]
    botleft = [r(0, dw), r(h - dh, h)]
    start = [[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]]
    return TF.perspective(img, start, [topleft, topright, botright, botleft], InterpolationMode.BILINEAR, fill=0.0)


def _color_jitter(img, params, rng):
    b, c, s, h = (params[k] for k in ("brightness", "contrast", "saturation", "hue"))
    factors = {
        "brightness": rng.uniform(max(0.0, 1 - b), 1 + b) if b else None,
        "contrast": rng.uniform(max(0.0, 1 - c), 1 + c) if c else None,
        "saturation": rng.uniform(max(0.0, 1 - s), 1 + s) if s else None,
        "hue": rng.uniform(-h, h) if h else None,
    }
    for idx in rng.permutation(4):
        key = ("brightness", "contrast", "saturation", "hue")[idx]
        f = factors[key]
        if f is None:
            continue
        if key == "brightness":
            img = TF.adjust_brightness(img, f)
        elif key == "contrast":
            img = TF.adjust_contrast(img, f)
        elif key == "saturation":
            img = TF.adjust_saturation(img, f)
        else:
            img = TF.adjust_hue(img, f)
    return img


def apply(spec: DistortionSpec, img: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Apply one distortion to a ``(3, H, W)`` or ``(B, 3, H, W)`` image.

    The spec fires with its probability; the output is clamped to ``[0, 1]``
    and keeps the input shape.
    """
    if spec.probability < 1.0 and rng.random() >= spec.probability:
        return img
    kind, p = spec.kind, spec.params
    if kind == "identity":
        return img
    if kind == "hflip":
        return img.flip(-1)
    if kind == "rotation":
        angle = _draw(p["degrees"], rng)
        if angle == 0:
            return img
        out = TF.rotate(img, float(angle), InterpolationMode.BILINEAR, fill=0.0)
    elif kind == "color_jitter":
        out = _color_jitter(img, p, rng)
    elif kind == "resized_crop":
        out = _resized_crop(img, p, rng)
    elif kind == "add_noise":
        std = _draw(p["std"], rng) / 255.0
        noise = torch.from_numpy(rng.standard_normal(tuple(img.shape))).to(img.dtype)
        out = img + std * noise
    elif kind == "gaussian_blur":
        k = int(p["kernel"])
        if k == 1:
            return img
        sigma = p["sigma"]
        sigma = default_blur_sigma(k) if sigma is None else _draw(sigma, rng)
        out = TF.gaussian_blur(img, [k, k], [float(sigma), float(sigma)])
    elif kind == "jpeg_compression":
        out = _jpeg(img, int(round(_draw(p["quality"], rng))))
    elif kind == "solarization":
        out = TF.solarize(img, float(_draw(p["threshold"], rng)))
    elif kind == "saturation":
        out = TF.adjust_saturation(img, float(_draw(p["factor"], rng)))
    elif kind == "brightness":
        f = _draw(p["factor"], rng)
        if f == 1:
            return img
        out = img * f
    elif kind == "contrast":
        f = _draw(p["factor"], rng)
        if f == 1:
            return img
        out = TF.adjust_contrast(img, float(f))
    elif kind == "hue":
        f = _draw(p["factor"], rng)
        if f == 0:
            return img
        out = TF.adjust_hue(img, float(f))
    elif kind == "crop_fraction":
        frac = _draw(p["fraction"], rng)
        if frac == 0:
            return img
        h, w = img.shape[-2:]
        side = math.sqrt(1.0 - frac)
        out = _center_crop_resize(img, round(h * side), round(w * side))
    elif kind == "salt_pepper":
        out = _salt_pepper(img, _draw(p["p"], rng), rng)
    elif kind == "perspective":
        out = _perspective(img, _draw(p["distortion_scale"], rng), p["p"], rng)
    else:  # pragma: no cover - guarded by DistortionSpec validation
        raise ValueError(kind)
    return out.clamp(0.0, 1.0)


@dataclass(frozen=True)
class DistortionPipeline:
    specs: tuple[DistortionSpec, ...]
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))

    def __len__(self):
        return len(self.specs)

    def make_rng(self, *keys: int) -> np.random.Generator:
        """Independent stream keyed by the pipeline seed plus ``keys``."""
        return np.random.default_rng([self.rng_seed, *keys])

    def apply(self, img: torch.Tensor, rng: np.random.Generator, trace: list | None = None) -> torch.Tensor:
        for spec in self.specs:
            fired = spec.probability >= 1.0 or rng.random() < spec.probability
            if fired:
                img = apply(DistortionSpec(spec.kind, spec.params, 1.0, spec.name), img, rng)
                if trace is not None:
                    trace.append(spec.name)
        return img


def training_pipeline(seed: int = 0) -> DistortionPipeline:
    return DistortionPipeline(
        (
            DistortionSpec("rotation", {"degrees": (-30.0, 30.0)}, 1.0, "random_rotation"),
            DistortionSpec("hflip", {}, 1.0, "horizontal_flip"),
            DistortionSpec(
                "color_jitter", {"brightness": 0.2, "contrast": 0.2, "saturation": 0.2, "hue": 0.1}, 1.0, "color_jitter"
            ),
            DistortionSpec("resized_crop", {"scale": (0.8, 1.0)}, 1.0, "random_resized_crop"),
            DistortionSpec("add_noise", {"std": 5.0}, 0.5, "minimal_noise"),
            DistortionSpec("gaussian_blur", {"kernel": 5, "sigma": (0.1, 2.0)}, 0.5, "gaussian_blur"),
            DistortionSpec("add_noise", {"std": 25.0}, 0.3, "strong_noise"),
        ),
        seed,
    )


# default sweep points per distortion (first value is the single-strength default)
DEFAULT_TEST_STRENGTHS = {
    "rotation": (10.0, 30.0),
    "color_jitter": (0.1, 0.3),
    "resized_crop": (0.9, 0.8),
    "jpeg_compression": (90, 50),
    "solarization": (0.9, 0.5),
    "saturation": (1.5, 2.0),
}


def test_suite() -> list[tuple[str, DistortionSpec]]:
    """Distortions used at test time, each at its first default strength."""
    base = {
        "rotation": DistortionSpec("rotation"),
        "color_jitter": DistortionSpec("color_jitter"),
        "resized_crop": DistortionSpec("resized_crop", {"scale": 1.0}),
        "jpeg_compression": DistortionSpec("jpeg_compression"),
        "solarization": DistortionSpec("solarization"),
        "saturation": DistortionSpec("saturation"),
    }
    return [(name, with_strength(spec, DEFAULT_TEST_STRENGTHS[name][0], name)) for name, spec in base.items()]


test_suite.__test__ = False  # not a pytest test


def _fmt(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def attack_grid() -> list[tuple[str, DistortionSpec]]:
    grid = []
    for k in (3, 7, 9):
        grid.append(("blur", DistortionSpec("gaussian_blur", {"kernel": k}, name=f"blur_k{k}")))
    for pct in (5, 10, 15):
        grid.append(("crop", DistortionSpec("crop_fraction", {"fraction": pct / 100}, name=f"crop_{pct}pct")))
    for deg in (2.0, 6.0, 10.0):
        grid.append(("rotation", DistortionSpec("rotation", {"degrees": deg}, name=f"rotation_{_fmt(deg)}")))
    for f in (1.0, 1.1, 1.2):
        grid.append(("brightness", DistortionSpec("brightness", {"factor": f}, name=f"brightness_{_fmt(f)}")))
    for f in (1.0, 1.05, 1.1):
        grid.append(("saturation", DistortionSpec("saturation", {"factor": f}, name=f"saturation_{_fmt(f)}")))
    for prob in (0.05, 0.10):
        grid.append(("salt_pepper", DistortionSpec("salt_pepper", {"p": prob}, name=f"salt_pepper_{_fmt(prob)}")))
    for d, prob in ((0.7, 0.7), (1.0, 1.0)):
        grid.append(
            ("perspective", DistortionSpec("perspective", {"distortion_scale": d, "p": prob}, name=f"perspective_D{_fmt(d)}_p{_fmt(prob)}"))
        )
    return [(spec.name, spec) for _, spec in grid]


def differentiable_transform_set() -> list[DistortionSpec]:
    """Transforms sampled inside the watermark embedding loop."""
    return [
        DistortionSpec("identity"),
        DistortionSpec("rotation", {"degrees": (-10.0, 10.0)}),
        DistortionSpec("crop_fraction", {"fraction": (0.0, 0.15)}),
        DistortionSpec("gaussian_blur", {"kernel": 5, "sigma": (0.1, 1.5)}),
        DistortionSpec("brightness", {"factor": (0.8, 1.2)}),
        DistortionSpec("contrast", {"factor": (0.8, 1.2)}),
    ]


# -- serialization ------------------------------------------------------------


def specs_to_records(specs: Iterable[DistortionSpec]) -> list[dict]:
    return [s.to_record() for s in specs]


def records_to_specs(records: Sequence[Mapping]) -> list[DistortionSpec]:
    return [DistortionSpec.from_record(r) for r in records]


def save_grid(specs: Iterable[DistortionSpec], path) -> None:
    path = Path(path)
    records = specs_to_records(specs)
    if path.suffix in (".yaml", ".yml"):
        import yaml

        path.write_text(yaml.safe_dump(records, sort_keys=False), encoding="utf-8")
    else:
        path.write_text(json.dumps(records, indent=2) + "\n", encoding="utf-8")


def load_grid(path) -> list[DistortionSpec]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yaml", ".yml"):
        import yaml

        records = yaml.safe_load(text)
    else:
        records = json.loads(text)
    if isinstance(records, Mapping):
        records = records.get("distortions", [])
    return records_to_specs(records or [])
