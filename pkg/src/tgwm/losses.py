"""Training objectives and in-batch hard-negative mining."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossConfig:
    margin_m: float = 0.2
    tau_hard_negative: float = 0.8
    lambda_decorr: float = 0.01

    def __post_init__(self):
        if self.margin_m < 0:
            raise ValueError("margin_m must be >= 0")
        if not -1.0 < self.tau_hard_negative < 1.0:
            raise ValueError("tau_hard_negative must lie in (-1, 1)")
        if self.lambda_decorr < 0:
            raise ValueError("lambda_decorr must be >= 0")


@dataclass
class BatchFeatures:
    """Projected features for one batch; all five are ``(N, d)`` with unit-norm rows."""

    z_img: torch.Tensor
    z_dist: torch.Tensor
    z_text: torch.Tensor
    z_neg_img: torch.Tensor
    z_neg_dist: torch.Tensor
    neg_index: np.ndarray | None = None

    def validate(self, atol: float = 1e-4) -> None:
        shape = self.z_img.shape
        for f in fields(self):
            if f.name == "neg_index":
                continue
            z = getattr(self, f.name)
            if z.dim() != 2 or z.shape != shape:
                raise ValueError(f"{f.name}: expected shape {tuple(shape)}, got {tuple(z.shape)}")
            norms = z.detach().norm(dim=1)
            if not torch.allclose(norms, torch.ones_like(norms), atol=atol):
                raise ValueError(f"{f.name}: rows are not unit-norm")

    def similarities(self):
        """Row-wise ``(img, dist, neg_img, neg_dist)`` cosine similarities to the text anchor."""
        return (
            row_cosine(self.z_img, self.z_text),
            row_cosine(self.z_dist, self.z_text),
            row_cosine(self.z_neg_img, self.z_text),
            row_cosine(self.z_neg_dist, self.z_text),
        )


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return ((a * b).sum() / (na * nb)).clamp(-1.0, 1.0)


def row_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1))


def _pair_log_softmax_loss(pos: torch.Tensor, neg: torch.Tensor) -> torch.Tensor:
    # -log(e^pos / (e^pos + e^neg)) == softplus(neg - pos)
    return F.softplus(neg - pos)


def positive_loss(batch: BatchFeatures) -> torch.Tensor:
    s_img, s_dist, s_neg_img, s_neg_dist = batch.similarities()
    return (_pair_log_softmax_loss(s_img, s_neg_img) + _pair_log_softmax_loss(s_dist, s_neg_dist)).mean()


def negative_loss(batch: BatchFeatures, m: float) -> torch.Tensor:
    s_img, s_dist, s_neg_img, s_neg_dist = batch.similarities()
    return (F.relu(s_neg_img - s_img + m) + F.relu(s_neg_dist - s_dist + m)).mean()


def decorrelation_loss(z: torch.Tensor) -> torch.Tensor:
    """Sum of squared off-diagonal entries of the centered feature covariance.

    For ``d > N`` the Frobenius norm is taken through the ``N x N`` Gram matrix,
    which has the same norm as ``Z^T Z`` but costs ``O(N^2 d)``.
    """
    if z.dim() != 2 or z.shape[0] < 2:
        raise ValueError("decorrelation_loss needs an (N, d) matrix with N >= 2")
    n, d = z.shape
    zc = z - z.mean(dim=0, keepdim=True)
    diag = (zc * zc).sum(0) / n
    if d <= n:
        cov = zc.T @ zc / n
        fro2 = (cov * cov).sum()
    else:
        gram = zc @ zc.T / n
        fro2 = (gram * gram).sum()
    return (fro2 - (diag * diag).sum()).clamp_min(0.0)


def total_loss(batch: BatchFeatures, cfg: LossConfig = LossConfig()) -> tuple[torch.Tensor, dict[str, float]]:
    pos = positive_loss(batch)
    neg = negative_loss(batch, cfg.margin_m)
    decorr = decorrelation_loss(batch.z_img) + decorrelation_loss(batch.z_dist) + decorrelation_loss(batch.z_text)
    weighted = cfg.lambda_decorr * decorr
    total = pos + neg + weighted
    parts = {
        "total": total.item(),
        "pos": pos.item(),
        "neg": neg.item(),
        "decorr": decorr.item(),
        "decorr_weighted": weighted.item(),
    }
    return total, parts


def similarity_matrix(z: torch.Tensor) -> np.ndarray:
    z = torch.as_tensor(z).detach().double()
    zn = z / z.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return (zn @ zn.T).numpy()


def mine_from_similarities(sims: np.ndarray, tau: float, rng: np.random.Generator, exclude: np.ndarray | None = None) -> np.ndarray:
    """Pick one negative per row of a similarity matrix.

    Row ``i`` gets ``argmax_j sims[i, j]`` when that maximum exceeds ``tau``,
    otherwise a uniformly random eligible ``j``. The diagonal is never
    eligible; ``exclude[i, j] = True`` marks further ineligible pairs (e.g.
    two captions of the same image). A row with no eligible column falls
    back to every ``j != i``.
    """
    sims = np.asarray(sims, dtype=np.float64)
    n = sims.shape[0]
    if sims.shape != (n, n) or n < 2:
        raise ValueError("hard-negative mining needs an (N, N) similarity matrix with N >= 2")
    eligible = ~np.eye(n, dtype=bool)
    if exclude is not None:
        eligible &= ~np.asarray(exclude, dtype=bool)
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        row_ok = eligible[i]
        if not row_ok.any():
            row_ok = ~np.eye(n, dtype=bool)[i]
        candidates = np.flatnonzero(row_ok)
        row = sims[i, candidates]
        best = int(np.argmax(row))
        if row[best] > tau:
            out[i] = candidates[best]
        else:
            out[i] = candidates[int(rng.integers(len(candidates)))]
    return out


def mine_hard_negatives(z_img: torch.Tensor, tau: float, rng: np.random.Generator, exclude: np.ndarray | None = None) -> np.ndarray:
    if z_img.shape[0] < 2:
        raise ValueError("hard-negative mining needs N >= 2")
    return mine_from_similarities(similarity_matrix(z_img), tau, rng, exclude)
