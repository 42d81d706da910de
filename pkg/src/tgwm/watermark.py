"""Multi-bit watermarking in a feature space.

A message of ``k`` bits is carried by the signs of ``phi(I) . a_i`` for ``k``
orthonormal secret directions ``a_i``. Embedding runs gradient descent on the
pixels under random differentiable transforms, with the perturbation
projected back onto a PSNR budget after every step.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import distortion
from .imageio import PerturbationBudget, psnr

logger = logging.getLogger(__name__)

KEY_MAGIC = b"TGWMKEY1"

FeatureFn = Callable[[torch.Tensor], torch.Tensor]


class KeyFileError(ValueError):
    pass


class EmbeddingError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SecretKey:
    A: np.ndarray
    seed: int

    @property
    def k(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(np.asarray(self.A)).to(dtype)


@dataclass(frozen=True)
class WatermarkMessage:
    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError("message bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    def __len__(self):
        return len(self.bits)

    @property
    def modulated(self) -> np.ndarray:
        return 2.0 * np.asarray(self.bits, dtype=np.float64) - 1.0

    @classmethod
    def from_bitstring(cls, s: str) -> "WatermarkMessage":
        s = s.strip()
        if not s or set(s) - {"0", "1"}:
            raise ValueError(f"message must be a non-empty string of 0/1, got {s!r}")
        return cls(tuple(int(c) for c in s))

    def to_bitstring(self) -> str:
        return "".join(str(b) for b in self.bits)

    @classmethod
    def random(cls, k: int, rng: np.random.Generator) -> "WatermarkMessage":
        return cls(tuple(int(b) for b in rng.integers(0, 2, size=k)))


@dataclass(frozen=True)
class EmbedConfig:
    lambda_w: float = 1.0
    mu_margin: float = 0.1
    iterations: int = 100
    step_size: float = 1e-2
    budget: PerturbationBudget = field(default_factory=PerturbationBudget)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.mu_margin > 0:
            raise ValueError("mu_margin must be positive")


@dataclass
class EmbedResult:
    image: torch.Tensor
    psnr_db: float
    initial_loss: float
    final_loss: float
    losses: list[float]
    infeasible: bool = False


# -- keys -----------------------------------------------------------------------


def generate_key(seed: int, k: int, d: int) -> SecretKey:
    """Gaussian rows orthonormalized in order (Gram-Schmidt via QR with sign fix)."""
    if not 1 <= k <= d:
        raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((k, d))
    q, r = np.linalg.qr(g.T)
    q = q * np.sign(np.diag(r))
    return SecretKey(np.ascontiguousarray(q.T, dtype=np.float32), seed)


def save_key(key: SecretKey, path) -> None:
    header = json.dumps({"k": key.k, "d": key.d, "seed": key.seed}, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(key.A, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(KEY_MAGIC + struct.pack("<I", len(header)) + header + payload)


def load_key(path) -> SecretKey:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise KeyFileError(f"cannot read key file {os.fspath(path)!r}: {exc}") from exc
    if data[:8] != KEY_MAGIC:
        raise KeyFileError(f"{path}: bad magic, not a watermark key file")
    if len(data) < 12:
        raise KeyFileError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", data, 8)
    hbytes = data[12:12 + hlen]
    if len(hbytes) != hlen:
        raise KeyFileError(f"{path}: truncated header")
    try:
        header = json.loads(hbytes.decode("utf-8"))
        k, d, seed = int(header["k"]), int(header["d"]), int(header["seed"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise KeyFileError(f"{path}: malformed header: {exc}") from exc
    payload = data[12 + hlen:]
    if k < 1 or d < 1 or len(payload) != 4 * k * d:
        raise KeyFileError(f"{path}: header says k={k}, d={d} ({4 * k * d} bytes) but payload has {len(payload)} bytes")
    A = np.frombuffer(payload, dtype="<f4").reshape(k, d).astype(np.float32)
    return SecretKey(A, seed)


# -- codec ----------------------------------------------------------------------


def _check_dims(phi: torch.Tensor, key: SecretKey) -> None:
    if phi.shape[-1] != key.d:
        raise ValueError(f"feature dimension {phi.shape[-1]} does not match key dimension {key.d}")


def message_loss(phi: torch.Tensor, key: SecretKey, msg: WatermarkMessage, mu: float) -> torch.Tensor:
    """Mean hinge ``max(0, mu - (phi . a_i) b_i)`` over the ``k`` bits (per row for batched ``phi``)."""
    _check_dims(phi, key)
    if len(msg) != key.k:
        raise ValueError(f"message has {len(msg)} bits, key carries {key.k}")
    A = key.as_tensor(phi.dtype)
    b = torch.from_numpy(msg.modulated).to(phi.dtype)
    return torch.relu(mu - (phi @ A.T) * b).mean(-1)


def decode_dots(dots) -> WatermarkMessage:
    return WatermarkMessage(tuple(int(v > 0) for v in np.asarray(dots).ravel()))


def extract(img: torch.Tensor, key: SecretKey, feature_fn: FeatureFn) -> WatermarkMessage:
    with torch.no_grad():
        phi = feature_fn(img)
    _check_dims(phi, key)
    dots = phi.double().reshape(-1, key.d) @ key.as_tensor(torch.float64).T
    return decode_dots(dots[0].numpy())


def bit_accuracy(truth: WatermarkMessage, decoded: WatermarkMessage) -> float:
    if len(truth) != len(decoded):
        raise ValueError(f"message lengths differ: {len(truth)} vs {len(decoded)}")
    return sum(a == b for a, b in zip(truth.bits, decoded.bits)) / len(truth)


def project_to_budget(delta: torch.Tensor, original: torch.Tensor, budget: PerturbationBudget) -> torch.Tensor:
    """Shrink ``delta`` so the PSNR floor holds, then clip ``original + delta`` into ``[0, 1]``."""
    mse = delta.pow(2).mean()
    if mse > budget.max_mse:
        delta = delta * torch.sqrt(budget.max_mse / mse)
    return (original + delta).clamp(0.0, 1.0) - original


def embed(
    original: torch.Tensor,
    key: SecretKey,
    msg: WatermarkMessage,
    feature_fn: FeatureFn,
    transforms: Sequence[distortion.DistortionSpec] | None = None,
    cfg: EmbedConfig = EmbedConfig(),
    rng: np.random.Generator | None = None,
) -> EmbedResult:
    """Optimize pixels so the feature carries ``msg`` under ``key``.

    Each iteration draws one transform, minimizes
    ``lambda_w * message_loss(phi(t(x))) + mse(x, original)`` with Adam, then
    projects the perturbation onto the PSNR budget.
    """
    if transforms is None:
        transforms = distortion.differentiable_transform_set()
    bad = [t.kind for t in transforms if t.kind not in distortion.DIFFERENTIABLE_KINDS]
    if bad:
        raise ValueError(f"non-differentiable transforms in embedding set: {bad}")
    if rng is None:
        rng = np.random.default_rng(0)
    original = original.detach().float()
    mu = cfg.mu_margin

    def clean_loss(x):
        with torch.no_grad():
            return float(message_loss(feature_fn(x), key, msg, mu))

    initial = clean_loss(original)
    delta = torch.zeros_like(original, requires_grad=True)
    opt = torch.optim.Adam([delta], lr=cfg.step_size)
    losses = []
    for it in range(cfg.iterations):
        t = transforms[int(rng.integers(len(transforms)))]
        x = original + delta
        phi = feature_fn(distortion.apply(t, x, rng))
        wm = message_loss(phi, key, msg, mu)
        loss = cfg.lambda_w * wm + torch.mean((x - original) ** 2)
        if not torch.isfinite(loss):
            raise EmbeddingError(f"non-finite loss at iteration {it} (transform {t.name}, message loss {wm.item()})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            delta.copy_(project_to_budget(delta, original, cfg.budget))
        losses.append(float(loss.detach()))

    marked = (original + delta).detach().clamp(0.0, 1.0)
    final = clean_loss(marked)
    infeasible = initial > 0 and final >= initial
    if infeasible:
        logger.warning("watermark loss not reduced (%.4g -> %.4g); returning the original image", initial, final)
        marked, final = original.clone(), initial
    return EmbedResult(marked, psnr(marked, original), initial, final, losses, infeasible)
