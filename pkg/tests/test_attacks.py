import itertools

import numpy as np
import pytest
import torch
from torch import nn

from ycbcr_adv.attacks import (
    AttackConfig,
    AttackKind,
    ddn,
    fgsm,
    iterative_attack,
    run_attack,
    y_channel_attack,
)
from ycbcr_adv.colorspace import ImageBatch, rgb_to_ycbcr
from ycbcr_adv.models import ClassifierHandle, build_network


class Linear2(nn.Module):
    """Binary linear classifier with logits (0, w.x + b)."""

    def __init__(self, w, b):
        super().__init__()
        self.w = nn.Parameter(torch.as_tensor(w, dtype=torch.float64).reshape(-1))
        self.b = nn.Parameter(torch.tensor(float(b), dtype=torch.float64))

    def forward(self, x):
        s = x.permute(0, 2, 3, 1).reshape(len(x), -1).to(torch.float64) @ self.w + self.b
        return torch.stack([torch.zeros_like(s), s], dim=1)


class Constant(nn.Module):
    def __init__(self):
        super().__init__()
        self.anchor = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return torch.tensor([[1.0, 0.0, -1.0]], dtype=x.dtype).expand(len(x), 3) + 0 * x.sum() * self.anchor


def linear_handle(seed=0, shape=(2, 2, 3)):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=int(np.prod(shape)))
    return ClassifierHandle.from_module(Linear2(w, rng.normal() * 0.1), 2, shape), w


def ce_loss(handle, x, label):
    logits = handle.logits(torch.from_numpy(x.transpose(0, 3, 1, 2).copy()))
    return torch.nn.functional.cross_entropy(logits, torch.as_tensor(label), reduction="none").numpy()


@pytest.mark.parametrize("seed", range(4))
def test_fgsm_matches_exhaustive_sign_search(seed):
    handle, _ = linear_handle(seed)
    rng = np.random.default_rng(100 + seed)
    x = rng.uniform(0.2, 0.8, size=(1, 2, 2, 3))
    label = np.array([int(rng.integers(0, 2))])
    eps = 0.03
    res = fgsm(handle, x, label, AttackConfig.fgsm(eps))

    signs = np.array(list(itertools.product([-1.0, 1.0], repeat=12))).reshape(-1, 2, 2, 3)
    candidates = np.clip(x + eps * signs, 0, 1)
    losses = ce_loss(handle, candidates, np.repeat(label, len(signs)))
    best = candidates[int(np.argmax(losses))]
    assert np.array_equal(res.adversarial.data[0], best)


def points_at_distance(w, b, dist, rng):
    """Images whose analytic L2 distance to the plane w.x + b = 0 is ``dist``."""
    unit = w / np.linalg.norm(w)
    x0 = rng.uniform(0.45, 0.55, size=(len(dist), w.size))
    on_plane = x0 - ((x0 @ w + b) / np.linalg.norm(w))[:, None] * unit
    side = rng.choice([-1.0, 1.0], size=len(dist))
    x = on_plane + (side * dist)[:, None] * unit
    assert x.min() > 0 and x.max() < 1  # box constraint must not bind
    return x


# DDN shrinks its norm by (1 - gamma) per adversarial step from init_norm, so
# distances below init_norm * 0.95**n_iters are out of reach by construction.
@pytest.mark.parametrize("seed, n_iters", [(0, 40), (1, 40), (2, 40), (3, 100), (4, 100)])
def test_ddn_reaches_analytic_boundary_distance(seed, n_iters):
    w = np.random.default_rng(seed).normal(size=12)
    b = -0.5 * w.sum()  # plane through the center of the box
    handle = ClassifierHandle.from_module(Linear2(w, b), 2, (2, 2, 3))
    rng = np.random.default_rng(200 + seed)
    analytic = rng.uniform(0.2, 0.6, size=16)
    x = points_at_distance(w, b, analytic, rng)
    labels = (x @ w + b > 0).astype(np.int64)
    res = ddn(handle, x.reshape(-1, 2, 2, 3), labels, AttackConfig.ddn(n_iters=n_iters))
    assert res.success.all()
    assert np.all(res.l2_norm >= analytic * (1 - 1e-9))
    np.testing.assert_array_less(np.abs(res.l2_norm - analytic) / analytic, 0.10)


def test_ddn_unfooled_images_are_returned_unperturbed():
    handle = ClassifierHandle.from_module(Constant(), 3, (4, 4, 3))
    x = np.random.default_rng(0).uniform(size=(3, 4, 4, 3)).astype(np.float32)
    res = ddn(handle, x, np.zeros(3, dtype=np.int64), AttackConfig.ddn(n_iters=5))
    assert not res.success.any()
    assert np.array_equal(res.adversarial.data, x)


def test_illc_raises_target_probability_monotonically():
    handle, _ = linear_handle(3)
    rng = np.random.default_rng(3)
    x = rng.uniform(0.3, 0.7, size=(4, 2, 2, 3))
    labels, _ = (np.zeros(4, dtype=np.int64), None)
    targets = np.ones(4, dtype=np.int64) - labels
    scores = []
    for k in range(1, 7):
        cfg = AttackConfig.illc(0.05, alpha=0.005, n_iters=k)
        res = iterative_attack(handle, x, targets, cfg, labels=labels)
        scores.append(-ce_loss(handle, res.adversarial.data, targets))
    scores = np.array(scores)
    assert np.all(np.diff(scores, axis=0) >= -1e-12)
    assert np.all(scores[-1] > scores[0])


class Linear3(nn.Module):
    """3-class linear model; class k only reads pixel k (all three channels)."""

    def __init__(self, w):
        super().__init__()
        self.w = nn.Parameter(torch.as_tensor(w, dtype=torch.float64))  # 3 x 12

    def forward(self, x):
        return x.permute(0, 2, 3, 1).reshape(len(x), -1).to(torch.float64) @ self.w.T


def test_illc_target_logit_increases_each_step_on_linear_3class():
    rng = np.random.default_rng(11)
    w = np.zeros((3, 12))
    for k in range(3):
        w[k, 3 * k : 3 * k + 3] = rng.normal(size=3)
    handle = ClassifierHandle.from_module(Linear3(w), 3, (2, 2, 3))
    x = rng.uniform(0.3, 0.7, size=(5, 2, 2, 3))
    logits0 = x.reshape(5, -1) @ w.T
    targets = logits0.argmin(1)
    labels = logits0.argmax(1)
    alpha, prev = 0.004, logits0[np.arange(5), targets]
    for k in range(1, 6):
        res = iterative_attack(handle, x, None, AttackConfig.illc(0.05, alpha=alpha, n_iters=k), labels=labels)
        assert np.array_equal(res.targets, targets)
        cur = (res.adversarial.data.reshape(5, -1) @ w.T)[np.arange(5), targets]
        # disjoint supports: the target logit grows by exactly alpha * |w_t|_1 per step
        np.testing.assert_allclose(cur - prev, alpha * np.abs(w[targets]).sum(1), rtol=1e-9)
        prev = cur


def test_zero_epsilon_fgsm_is_identity():
    handle, _ = linear_handle(1)
    x = np.random.default_rng(1).uniform(size=(3, 2, 2, 3))
    res = fgsm(handle, x, np.array([0, 1, 0]), AttackConfig.fgsm(0.0))
    assert np.array_equal(res.adversarial.data, x)
    assert np.all(res.linf_norm == 0)


def test_ddn_on_misclassified_input_stops_at_zero_norm():
    handle, w = linear_handle(2)
    x = np.random.default_rng(2).uniform(0.3, 0.7, size=(4, 2, 2, 3))
    wrong = ((x.reshape(4, -1) @ w + handle.module.b.item()) <= 0).astype(np.int64)
    res = ddn(handle, x, wrong, AttackConfig.ddn(n_iters=10))
    assert res.success.all()
    assert np.all(res.l2_norm == 0) and np.all(res.iterations_used == 0)


def test_illc_defaults_to_least_likely_target():
    handle = ClassifierHandle.from_module(build_network("vgg_mini"), 10, (32, 32, 3))
    x = np.random.default_rng(0).uniform(size=(4, 32, 32, 3)).astype(np.float32)
    res = iterative_attack(handle, x, None, AttackConfig.illc(0.01, n_iters=2))
    logits = handle.logits(torch.from_numpy(x.transpose(0, 3, 1, 2).copy()))
    assert np.array_equal(res.targets, logits.argmin(1).numpy())


@pytest.fixture(scope="module")
def tiny_cnn():
    torch.manual_seed(0)
    return ClassifierHandle.from_module(build_network("resnet_mini"), 10, (32, 32, 3))


@pytest.fixture(scope="module")
def tiny_batch():
    rng = np.random.default_rng(1)
    return rng.uniform(0.05, 0.95, size=(6, 32, 32, 3)).astype(np.float32), rng.integers(0, 10, 6)


@pytest.mark.parametrize(
    "cfg",
    [
        AttackConfig.fgsm(0.02),
        AttackConfig.bim(0.02, n_iters=5),
        AttackConfig.pgd(0.02, n_iters=5),
        AttackConfig.illc(0.02, n_iters=5),
    ],
)
def test_linf_budget_and_range(tiny_cnn, tiny_batch, cfg):
    x, y = tiny_batch
    res = run_attack(tiny_cnn, x, y, cfg)
    adv = res.adversarial.data
    assert adv.min() >= 0 and adv.max() <= 1
    assert np.abs(adv - x).max() <= cfg.epsilon + 1e-6
    assert np.all(res.linf_norm <= cfg.epsilon + 1e-6)


def test_fgsm_equals_one_step_iterative_bitwise(tiny_cnn, tiny_batch):
    x, y = tiny_batch
    a = fgsm(tiny_cnn, x, y, AttackConfig.fgsm(0.03)).adversarial.data
    b = iterative_attack(tiny_cnn, x, y, AttackConfig.bim(0.03, alpha=0.03, n_iters=1)).adversarial.data
    assert np.array_equal(a, b)


def test_attacks_are_deterministic(tiny_cnn, tiny_batch):
    x, y = tiny_batch
    for cfg in (AttackConfig.pgd(0.02, n_iters=3, seed=5), AttackConfig.pgd_y(0.003, seed=5), AttackConfig.ddn(n_iters=5)):
        a = run_attack(tiny_cnn, x, y, cfg).adversarial.data
        b = run_attack(tiny_cnn, x, y, cfg).adversarial.data
        assert np.array_equal(a, b)


def test_zero_gradient_leaves_image_unchanged():
    handle = ClassifierHandle.from_module(Constant(), 3, (4, 4, 3))
    x = np.random.default_rng(0).uniform(size=(2, 4, 4, 3)).astype(np.float32)
    res = fgsm(handle, x, np.zeros(2, dtype=np.int64), AttackConfig.fgsm(0.1))
    assert np.array_equal(res.adversarial.data, x)
    assert not res.success.any()


@pytest.mark.parametrize("make", [AttackConfig.fgsm_y, AttackConfig.pgd_y])
def test_y_attack_invariants(tiny_cnn, tiny_batch, make):
    x, y = tiny_batch
    eps = 0.004
    res = y_channel_attack(tiny_cnn, x, y, make(eps))
    adv = res.adversarial.data.astype(np.float64)
    d = adv - x
    np.testing.assert_allclose(d[..., 0], d[..., 1], atol=1e-6)
    np.testing.assert_allclose(d[..., 1], d[..., 2], atol=1e-6)
    assert np.abs(d).max() <= eps + 1e-6
    assert adv.min() >= 0 and adv.max() <= 1
    ycc_adv = rgb_to_ycbcr(ImageBatch(adv)).data
    ycc = rgb_to_ycbcr(ImageBatch(x.astype(np.float64))).data
    np.testing.assert_allclose(ycc_adv[..., 1:], ycc[..., 1:], atol=1e-3)
    assert np.all(res.iterations_used <= res.config.n_iters)


def test_y_attack_iteration_rule():
    assert AttackConfig.fgsm_y(0.004).resolved().n_iters == 40
    assert AttackConfig.fgsm_y(0.05).resolved().n_iters == 200
    assert AttackConfig.fgsm_y(0.004).resolved().alpha == 1e-4


def test_y_attack_rejects_zero_budget(tiny_cnn, tiny_batch):
    with pytest.raises(ValueError):
        y_channel_attack(tiny_cnn, *tiny_batch, AttackConfig.fgsm_y(0.0))


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        AttackConfig.fgsm(-0.1)
    with pytest.raises(ValueError):
        AttackConfig.bim(0.1, alpha=0)
    with pytest.raises(ValueError):
        AttackConfig.pgd(0.1, n_iters=0)
    cfg = AttackConfig.pgd(0.02, seed=3)
    assert AttackConfig.from_dict(cfg.to_dict()) == cfg
    r = cfg.resolved()
    assert r.kind is AttackKind.ITERATIVE and r.n_iters == 40 and r.alpha == pytest.approx(0.002)


def test_wrapper_kind_checks(tiny_cnn, tiny_batch):
    with pytest.raises(ValueError):
        fgsm(tiny_cnn, *tiny_batch, AttackConfig.pgd(0.01))
    with pytest.raises(ValueError):
        ddn(tiny_cnn, *tiny_batch, AttackConfig.fgsm(0.01))
