import json

import numpy as np
import pytest
import torch

from tgwm import backbone, distortion, imageio, losses, projector, trainer
from tgwm.trainer import TrainConfig


@pytest.fixture(scope="module")
def tiny_corpus():
    return imageio.generate_synthetic_corpus(10, 0)


def _cfg(**kw):
    base = dict(epochs=1, batch_size=8, seed=0, hidden_dim=32, out_dim=32, max_steps=None)
    base.update(kw)
    return TrainConfig(**base)


def _arrays(p):
    return p.named_arrays()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    assert TrainConfig(loss={"margin_m": 0.3}).loss.margin_m == 0.3


def test_split_probe_holds_out_whole_images(tiny_corpus):
    train, probe = trainer.split_probe(tiny_corpus, 0.2, 0)
    assert len(probe) == 2
    assert len(train) == 40
    held = {id(img) for img in probe}
    assert all(id(s.image) not in held for s in train)


def test_training_batch_features_and_negatives(tiny_corpus, stub):
    params = projector.init_params(0, projector.ProjectorDims(768, 32, 32))
    batch = trainer.make_training_batch(tiny_corpus[:12], distortion.training_pipeline(0), stub, params, _cfg())
    batch.validate()
    ids = np.array([s.image_id for s in tiny_corpus[:12]])
    assert (ids[batch.neg_index] != ids).all()
    assert not torch.allclose(batch.z_img, batch.z_dist)
    assert not params.training


def test_training_is_deterministic_and_independent_of_jobs(tiny_corpus, stub):
    a, ma = trainer.train(tiny_corpus, stub, _cfg(max_steps=3))
    b, mb = trainer.train(tiny_corpus, stub, _cfg(max_steps=3, jobs=2))
    for x, y in zip(_arrays(a).values(), _arrays(b).values()):
        np.testing.assert_array_equal(x, y)
    assert ma.steps == mb.steps


def test_resume_matches_uninterrupted_run(tiny_corpus, stub, tmp_path):
    full, full_m = trainer.train(tiny_corpus, stub, _cfg(epochs=2))
    cfg1 = _cfg(epochs=1, checkpoint_dir=str(tmp_path))
    trainer.train(tiny_corpus, stub, cfg1)
    resumed, res_m = trainer.resume(tmp_path / "last.tgproj", tiny_corpus, stub, _cfg(epochs=2, checkpoint_dir=str(tmp_path)))
    for x, y in zip(_arrays(full).values(), _arrays(resumed).values()):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-7)
    assert res_m.steps == [s for s in full_m.steps if s["epoch"] == 2]


def test_metrics_and_backbone_frozen(tiny_corpus, tmp_path):
    bb = backbone.stub_backbone(0)
    before = bb.parameter_hash()
    path = tmp_path / "m.jsonl"
    _, metrics = trainer.train(tiny_corpus, bb, _cfg(epochs=2, max_steps=7), metrics_path=path)
    assert bb.parameter_hash() == before
    records = [json.loads(line) for line in path.read_text().splitlines()]
    steps = [r for r in records if r["kind"] == "step"]
    epochs = [r for r in records if r["kind"] == "epoch"]
    assert len(steps) == 7 and {"total", "pos", "neg", "decorr"} <= set(steps[0])
    assert [e["epoch"] for e in epochs] == [0, 1, 2]
    assert all(-1 <= e["probe_cos"] <= 1 for e in epochs)


def test_diverged_training_raises(tiny_corpus):
    class NaNStub(backbone.StubBackbone):
        def encode_image(self, img):
            return super().encode_image(img) * float("nan")

    with pytest.raises(trainer.TrainingDivergedError, match="non-finite loss at step 0"):
        trainer.train(tiny_corpus, NaNStub(0), _cfg(max_steps=2))


def test_checkpoint_carries_optimizer_state(tiny_corpus, stub, tmp_path):
    trainer.train(tiny_corpus, stub, _cfg(checkpoint_dir=str(tmp_path)))
    arrays, meta = projector.read_container(tmp_path / "last.tgproj")
    assert meta["epoch"] == 1 and meta["adam_step"] == meta["step"] > 0
    assert "optim.layer1.weight.exp_avg" in arrays
    assert projector.load_params(tmp_path / "last.tgproj").dims == projector.ProjectorDims(768, 32, 32)


def test_positive_term_pulls_images_toward_text(stub, tiny_corpus):
    """With m = 0, lambda = 0 and negatives orthogonal to the anchors, SGD raises image-text similarity."""
    torch.manual_seed(0)
    params = projector.init_params(1, projector.ProjectorDims(768, 32, 32))
    params.train(False)
    f_img = stub.encode_image(torch.stack([s.image for s in tiny_corpus[:6]]))
    f_text = stub.encode_text([s.caption for s in tiny_corpus[:6]])
    opt = torch.optim.SGD(params.parameters(), lr=0.002)
    cfg = losses.LossConfig(margin_m=0.0, lambda_decorr=0.0)
    history = []
    for _ in range(10):
        z_img, z_text = params(f_img), params(f_text)
        zt = z_text.detach()
        r = torch.randn(z_text.shape, generator=torch.Generator().manual_seed(0))
        neg = r - (r * zt).sum(1, keepdim=True) * zt
        neg = neg / neg.norm(dim=1, keepdim=True)
        batch = losses.BatchFeatures(z_img, z_img, z_text, neg, neg)
        history.append(losses.row_cosine(z_img, z_text).mean().item())
        loss, _ = losses.total_loss(batch, cfg)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert all(b > a for a, b in zip(history, history[1:]))
