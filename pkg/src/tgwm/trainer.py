"""Projector training against text anchors with in-batch hard negatives.

Every random draw is keyed by ``(seed, epoch, position)`` so a run depends
only on its seeds: not on batch order, worker count, or whether it was
interrupted and resumed from a checkpoint.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import distortion
from .imageio import CaptionedSample
from .losses import BatchFeatures, LossConfig, mine_hard_negatives, row_cosine, total_loss
from .projector import Projector, ProjectorDims, init_params, read_container, save_params

logger = logging.getLogger(__name__)

PROBE_EPOCH = 0
PROBE_DRAWS = 4


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(f"{message}; last good checkpoint: {last_checkpoint}")
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 64
    learning_rate: float = 1e-4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    pipeline_seed: int = 0
    checkpoint_dir: str | None = None
    hidden_dim: int = 2048
    out_dim: int = 4096
    dropout_rate: float = 0.1
    grad_clip: float = 5.0
    probe_fraction: float = 0.1
    max_steps: int | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (mining needs a peer)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainMetrics:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    @property
    def probe_history(self) -> list[float]:
        return [e["probe_cos"] for e in self.epochs]

    def records(self) -> list[dict]:
        return [{"kind": "step", **s} for s in self.steps] + [{"kind": "epoch", **e} for e in self.epochs]

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def split_probe(samples: Sequence[CaptionedSample], fraction: float, seed: int):
    """Hold out ``fraction`` of the images (all their captions) as a probe set."""
    ids = list(dict.fromkeys(s.image_id for s in samples))
    n_probe = int(round(fraction * len(ids))) if len(ids) > 1 else 0
    n_probe = min(n_probe, len(ids) - 1)
    order = np.random.default_rng([seed, 99]).permutation(len(ids))
    probe_ids = {ids[i] for i in order[:n_probe]}
    train = [s for s in samples if s.image_id not in probe_ids]
    probe = []
    seen = set()
    for s in samples:
        if s.image_id in probe_ids and s.image_id not in seen:
            probe.append(s.image)
            seen.add(s.image_id)
    return train, probe


def _dropout_generator(seed: int, epoch: int, step: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.default_rng([seed, epoch, step, 3]).integers(2**62)))
    return g


class _FeatureCache:
    """Backbone outputs of undistorted images and captions (both fixed while the backbone is frozen)."""

    def __init__(self, backbone):
        self.backbone = backbone
        self.images: dict[str, torch.Tensor] = {}
        self.texts: dict[str, torch.Tensor] = {}

    @torch.no_grad()
    def image(self, sample: CaptionedSample) -> torch.Tensor:
        if sample.image_id not in self.images:
            self.images[sample.image_id] = self.backbone.encode_image(sample.image)
        return self.images[sample.image_id]

    @torch.no_grad()
    def text(self, caption: str) -> torch.Tensor:
        if caption not in self.texts:
            self.texts[caption] = self.backbone.encode_text(caption)
        return self.texts[caption]


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(jobs) as pool:
        return list(pool.map(fn, items))


def make_training_batch(
    samples: Sequence[CaptionedSample],
    pipeline: distortion.DistortionPipeline,
    backbone,
    params: Projector,
    cfg: TrainConfig,
    epoch: int = 1,
    step: int = 0,
    positions: Sequence[int] | None = None,
    cache: _FeatureCache | None = None,
    training: bool = True,
) -> BatchFeatures:
    """Encode, distort and project one batch, then attach mined negatives.

    ``positions`` are the samples' indices in the epoch ordering; they key the
    distortion streams. The mined indices are returned as ``batch.neg_index``.
    """
    n = len(samples)
    if n < 2:
        raise ValueError("a training batch needs at least 2 samples")
    if positions is None:
        positions = range(n)
    cache = cache or _FeatureCache(backbone)

    def distort(args):
        sample, pos, variant = args
        return pipeline.apply(sample.image, pipeline.make_rng(epoch, int(pos), variant))

    with torch.no_grad():
        f_img = torch.stack([cache.image(s) for s in samples])
        f_text = torch.stack([cache.text(s.caption) for s in samples])
        distorted = _map(distort, [(s, p, 0) for s, p in zip(samples, positions)], cfg.jobs)
        f_dist = backbone.encode_image(torch.stack(distorted))

    gen = _dropout_generator(cfg.seed, epoch, step)
    params.train(training)
    z = params(torch.cat([f_img, f_dist, f_text]), gen)
    z_img, z_dist, z_text = z[:n], z[n:2 * n], z[2 * n:]

    image_ids = np.array([s.image_id for s in samples])
    same_image = image_ids[:, None] == image_ids[None, :]
    rng = np.random.default_rng([cfg.seed, epoch, step, 2])
    neg = mine_hard_negatives(z_img.detach(), cfg.loss.tau_hard_negative, rng, exclude=same_image)

    with torch.no_grad():
        neg_distorted = _map(distort, [(samples[j], positions[i], 1) for i, j in enumerate(neg)], cfg.jobs)
        f_neg_dist = backbone.encode_image(torch.stack(neg_distorted))
    z_neg_dist = params(f_neg_dist, gen)
    params.eval()

    return BatchFeatures(z_img, z_dist, z_text, z_img[torch.from_numpy(neg)], z_neg_dist, neg)


@torch.no_grad()
def probe_similarity(probe_images: Sequence[torch.Tensor], pipeline, backbone, params: Projector) -> float:
    """Mean clean-vs-distorted cosine of projected features.

    Each probe image gets ``PROBE_DRAWS`` pipeline draws that are the same
    at every call, so successive values are directly comparable.
    """
    if not probe_images:
        return float("nan")
    params.eval()
    z_clean = params(backbone.encode_image(torch.stack(list(probe_images))))
    sims = []
    for v in range(PROBE_DRAWS):
        distorted = torch.stack(
            [pipeline.apply(img, pipeline.make_rng(PROBE_EPOCH, i, 7 + v)) for i, img in enumerate(probe_images)]
        )
        sims.append(row_cosine(z_clean, params(backbone.encode_image(distorted))))
    return float(torch.cat(sims).mean())


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, params: Projector, optimizer: torch.optim.Optimizer, meta: dict) -> None:
    extra = {}
    names = dict(params.named_parameters())
    adam_step = 0
    for name, p in names.items():
        state = optimizer.state.get(p)
        if not state:
            continue
        extra[f"optim.{name}.exp_avg"] = state["exp_avg"].numpy()
        extra[f"optim.{name}.exp_avg_sq"] = state["exp_avg_sq"].numpy()
        adam_step = int(state["step"])
    save_params(params, path, meta={**meta, "adam_step": adam_step}, extra=extra)


def _restore_optimizer(optimizer, params: Projector, arrays, adam_step: int) -> None:
    for name, p in params.named_parameters():
        key = f"optim.{name}.exp_avg"
        if key not in arrays:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(adam_step)),
            "exp_avg": torch.from_numpy(np.array(arrays[key])),
            "exp_avg_sq": torch.from_numpy(np.array(arrays[f"optim.{name}.exp_avg_sq"])),
        }


def _dims(backbone, cfg: TrainConfig) -> ProjectorDims:
    return ProjectorDims(backbone.descriptor.image_dim, cfg.hidden_dim, cfg.out_dim)


def train(
    corpus: Sequence[CaptionedSample],
    backbone,
    cfg: TrainConfig,
    *,
    params: Projector | None = None,
    optimizer_arrays=None,
    adam_step: int = 0,
    start_epoch: int = 0,
    start_step: int = 0,
    metrics_path=None,
) -> tuple[Projector, TrainMetrics]:
    if not corpus:
        raise ValueError("training corpus is empty")
    backbone_hash = backbone.parameter_hash()
    pipeline = distortion.training_pipeline(cfg.pipeline_seed)
    train_samples, probe = split_probe(corpus, cfg.probe_fraction, cfg.seed)
    if len(train_samples) < 2:
        raise ValueError("need at least 2 training samples")
    if params is None:
        params = init_params(cfg.seed, _dims(backbone, cfg), cfg.dropout_rate)
    optimizer = torch.optim.Adam(params.parameters(), lr=cfg.learning_rate, weight_decay=0.0)
    if optimizer_arrays is not None:
        _restore_optimizer(optimizer, params, optimizer_arrays, adam_step)

    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    last_ckpt: Path | None = None

    metrics = TrainMetrics()
    cache = _FeatureCache(backbone)
    if start_epoch == 0:
        metrics.epochs.append({"epoch": 0, "step": start_step, "probe_cos": probe_similarity(probe, pipeline, backbone, params)})

    step = start_step
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_samples))
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            positions = order[start:start + cfg.batch_size]
            if len(positions) < 2:
                continue
            samples = [train_samples[i] for i in positions]
            batch = make_training_batch(samples, pipeline, backbone, params, cfg, epoch, step, range(start, start + len(positions)), cache)
            loss, parts = total_loss(batch, cfg.loss)
            if not math.isfinite(parts["total"]):
                raise TrainingDivergedError(f"non-finite loss at step {step}", last_ckpt)
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params.parameters(), cfg.grad_clip)
            optimizer.step()
            step += 1
            metrics.steps.append({"epoch": epoch, "step": step, **parts})
            logger.debug("epoch %d step %d loss %.5f", epoch, step, parts["total"])
        probe_cos = probe_similarity(probe, pipeline, backbone, params)
        metrics.epochs.append({"epoch": epoch, "step": step, "probe_cos": probe_cos})
        logger.info("epoch %d: step %d, probe cos %.4f", epoch, step, probe_cos)
        if ckpt_dir is not None:
            last_ckpt = ckpt_dir / "last.tgproj"
            save_checkpoint(last_ckpt, params, optimizer, {"epoch": epoch, "step": step, "seed": cfg.seed})

    if backbone.parameter_hash() != backbone_hash:
        raise RuntimeError("backbone parameters changed during training")
    if metrics_path is not None:
        metrics.write_jsonl(metrics_path)
    params.eval()
    return params, metrics


def resume(checkpoint, corpus, backbone, cfg: TrainConfig, metrics_path=None) -> tuple[Projector, TrainMetrics]:
    """Continue training from a checkpoint written by :func:`train`."""
    arrays, meta = read_container(checkpoint)
    params = Projector(_dims(backbone, cfg), cfg.dropout_rate)
    params.load_arrays(arrays)
    return train(
        corpus,
        backbone,
        cfg,
        params=params,
        optimizer_arrays=arrays,
        adam_step=int(meta.get("adam_step", 0)),
        start_epoch=int(meta.get("epoch", 0)),
        start_step=int(meta.get("step", 0)),
        metrics_path=metrics_path,
    )
