"""Independent numpy reference implementations used as test oracles."""

import numpy as np
import torch


def central_fd(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``fn`` at float64 ``x``."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            hi = float(fn(x))
            flat[i] = orig - eps
            lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(a.norm()), float(b.norm()), 1e-12))


def decorr_bruteforce(z) -> float:
    z = np.asarray(z, dtype=np.float64)
    n, d = z.shape
    mu = z.sum(axis=0) / n
    total = 0.0
    for i in range(d):
        for j in range(d):
            if i == j:
                continue
            c = 0.0
            for r in range(n):
                c += (z[r, i] - mu[i]) * (z[r, j] - mu[j])
            total += (c / n) ** 2
    return total


def cos_rows(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def pos_loss_np(img, dist, text, neg_img, neg_dist) -> float:
    s_i, s_d = cos_rows(img, text), cos_rows(dist, text)
    s_ni, s_nd = cos_rows(neg_img, text), cos_rows(neg_dist, text)
    li = -np.log(np.exp(s_i) / (np.exp(s_i) + np.exp(s_ni)))
    ld = -np.log(np.exp(s_d) / (np.exp(s_d) + np.exp(s_nd)))
    return float(np.mean(li + ld))


def neg_loss_np(img, dist, text, neg_img, neg_dist, m) -> float:
    s_i, s_d = cos_rows(img, text), cos_rows(dist, text)
    s_ni, s_nd = cos_rows(neg_img, text), cos_rows(neg_dist, text)
    return float(np.mean(np.maximum(0, s_ni - s_i + m) + np.maximum(0, s_nd - s_d + m)))


def layer_norm_np(h, gain, bias, eps=1e-5):
    mu = h.mean(-1, keepdims=True)
    var = ((h - mu) ** 2).mean(-1, keepdims=True)
    return (h - mu) / np.sqrt(var + eps) * gain + bias


def projector_np(arrays, x):
    a = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    h = np.asarray(x, dtype=np.float64) @ a["layer1.weight"].T + a["layer1.bias"]
    h = np.maximum(layer_norm_np(h, a["norm1.weight"], a["norm1.bias"]), 0)
    h = h @ a["layer2.weight"].T + a["layer2.bias"]
    h = np.maximum(layer_norm_np(h, a["norm2.weight"], a["norm2.bias"]), 0)
    out = h @ a["layer3.weight"].T + a["layer3.bias"]
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def psnr_np(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = np.mean((a - b) ** 2)
    return float("inf") if mse == 0 else float(10 * np.log10(1.0 / mse))


def message_loss_np(phi, A, bits, mu) -> float:
    b = 2.0 * np.asarray(bits, dtype=np.float64) - 1.0
    dots = np.asarray(A, dtype=np.float64) @ np.asarray(phi, dtype=np.float64)
    return float(np.mean(np.maximum(0.0, mu - dots * b)))
