import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import central_fd, decorr_bruteforce, neg_loss_np, pos_loss_np, rel_err
from tgwm import losses
from tgwm.losses import BatchFeatures, LossConfig


def _unit(rng, n, d):
    z = rng.standard_normal((n, d))
    return torch.from_numpy(z / np.linalg.norm(z, axis=1, keepdims=True))


def _batch(rng, n=6, d=8):
    return BatchFeatures(*(_unit(rng, n, d) for _ in range(5)))


def test_loss_config_defaults_and_validation():
    cfg = LossConfig()
    assert (cfg.margin_m, cfg.tau_hard_negative, cfg.lambda_decorr) == (0.2, 0.8, 0.01)
    with pytest.raises(ValueError):
        LossConfig(margin_m=-0.1)
    with pytest.raises(ValueError):
        LossConfig(tau_hard_negative=1.0)
    with pytest.raises(ValueError):
        LossConfig(lambda_decorr=-1)


def test_batch_validation_rejects_bad_shapes_and_norms(rng):
    b = _batch(rng)
    b.validate()
    with pytest.raises(ValueError, match="z_text"):
        BatchFeatures(b.z_img, b.z_dist, b.z_text[:3], b.z_neg_img, b.z_neg_dist).validate()
    with pytest.raises(ValueError, match="unit-norm"):
        BatchFeatures(b.z_img * 2, b.z_dist, b.z_text, b.z_neg_img, b.z_neg_dist).validate()


def test_cosine_sim_examples():
    assert losses.cosine_sim(torch.tensor([1.0, 0.0]), torch.tensor([2.0, 0.0])) == 1.0
    assert losses.cosine_sim(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 3.0])) == 0.0
    assert losses.cosine_sim(torch.tensor([1.0, 1.0]), torch.tensor([-1.0, -1.0])) == pytest.approx(-1.0)
    with pytest.raises(ValueError, match="zero vector"):
        losses.cosine_sim(torch.zeros(3), torch.ones(3))
    with pytest.raises(ValueError, match="mismatch"):
        losses.cosine_sim(torch.ones(3), torch.ones(4))


def test_positive_and_negative_loss_match_numpy_oracle(rng):
    for _ in range(5):
        b = _batch(rng)
        arrs = [t.numpy() for t in (b.z_img, b.z_dist, b.z_text, b.z_neg_img, b.z_neg_dist)]
        assert losses.positive_loss(b).item() == pytest.approx(pos_loss_np(*arrs), rel=1e-12)
        assert losses.negative_loss(b, 0.2).item() == pytest.approx(neg_loss_np(*arrs, 0.2), rel=1e-12, abs=1e-15)


def test_positive_loss_hand_value():
    # s_pos = 1, s_neg = 0 on both branches: 2 * log(1 + e^-1)
    e = torch.eye(2, dtype=torch.float64)
    b = BatchFeatures(e[:1], e[:1], e[:1], e[1:], e[1:])
    assert losses.positive_loss(b).item() == pytest.approx(2 * np.log1p(np.exp(-1.0)), rel=1e-12)


def test_negative_loss_zero_when_margin_satisfied_and_hand_value():
    e = torch.eye(2, dtype=torch.float64)
    b = BatchFeatures(e[:1], e[:1], e[:1], e[1:], e[1:])
    assert losses.negative_loss(b, 0.2).item() == 0.0
    # swap roles: s_pos = 0, s_neg = 1 -> 2 * (1 + m) / 1 averaged over one row
    b = BatchFeatures(e[1:], e[1:], e[:1], e[:1], e[:1])
    assert losses.negative_loss(b, 0.2).item() == pytest.approx(2.4)


def test_decorrelation_hand_cases():
    z = torch.tensor([[1.0, 1.0], [-1.0, -1.0]], dtype=torch.float64)
    assert losses.decorrelation_loss(z).item() == 2.0
    single = torch.tensor([[0.3], [-1.2], [4.0]], dtype=torch.float64)
    assert losses.decorrelation_loss(single).item() == 0.0
    with pytest.raises(ValueError):
        losses.decorrelation_loss(torch.ones(1, 4))


def test_decorrelation_gram_path_equals_covariance_path(rng):
    z = torch.from_numpy(rng.standard_normal((5, 40)))
    assert losses.decorrelation_loss(z).item() == pytest.approx(decorr_bruteforce(z.numpy()), rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_decorrelation_nonnegative_and_matches_bruteforce(n, d, seed):
    z = np.random.default_rng(seed).standard_normal((n, d)) * 3
    val = losses.decorrelation_loss(torch.from_numpy(z)).item()
    assert val >= 0
    assert val == pytest.approx(decorr_bruteforce(z), rel=1e-8, abs=1e-12)


def test_total_loss_composition(rng):
    b = _batch(rng)
    cfg = LossConfig(0.2, 0.8, 0.5)
    total, parts = losses.total_loss(b, cfg)
    decorr = sum(losses.decorrelation_loss(z).item() for z in (b.z_img, b.z_dist, b.z_text))
    assert parts["decorr"] == pytest.approx(decorr)
    assert parts["decorr_weighted"] == pytest.approx(0.5 * decorr)
    assert total.item() == pytest.approx(parts["pos"] + parts["neg"] + 0.5 * decorr)
    assert set(parts) == {"total", "pos", "neg", "decorr", "decorr_weighted"}


@pytest.mark.parametrize("which", ["pos", "neg", "decorr"])
def test_loss_gradients_match_finite_differences(which, rng):
    n, d = 4, 6
    base = [rng.standard_normal((n, d)) for _ in range(5)]

    def fn(x):
        feats = [x if i == 0 else torch.from_numpy(a) for i, a in enumerate(base)]
        feats = [f / f.norm(dim=1, keepdim=True) for f in feats]
        b = BatchFeatures(*feats)
        if which == "pos":
            return losses.positive_loss(b)
        if which == "neg":
            return losses.negative_loss(b, 0.5)
        return losses.decorrelation_loss(feats[0])

    x = torch.from_numpy(base[0]).requires_grad_(True)
    fn(x).backward()
    assert rel_err(x.grad, central_fd(fn, x)) < 1e-3


def test_mining_argmax_above_tau_and_never_self(rng):
    sims = np.array([[1.0, 0.9, 0.1], [0.9, 1.0, 0.2], [0.1, 0.2, 1.0]])
    out = losses.mine_from_similarities(sims, 0.8, rng)
    assert out[0] == 1 and out[1] == 0
    assert out[2] in (0, 1)


def test_mining_exclude_mask_and_fallback(rng):
    sims = np.full((3, 3), 0.95)
    exclude = np.array([[False, True, False], [True, False, True], [False, True, False]])
    out = losses.mine_from_similarities(sims, 0.8, rng, exclude)
    assert out[0] == 2 and out[2] == 0
    assert out[1] in (0, 2)  # every peer excluded -> fall back to any j != i
    with pytest.raises(ValueError):
        losses.mine_from_similarities(np.ones((1, 1)), 0.8, rng)


def test_mine_hard_negatives_from_features(rng):
    z = torch.tensor([[1.0, 0.0], [0.99, 0.141], [0.0, 1.0]])
    out = losses.mine_hard_negatives(z, 0.8, rng)
    assert out[0] == 1 and out[1] == 0
