"""Attack-generation tests: closed-form oracles, projection invariants, mixing."""

import numpy as np
import pytest
import torch
from torch import nn

from freqdefense.attacks import (
    AdversarialSet,
    AttackConfig,
    bim,
    build_mixed_attack_set,
    fgsm,
    filter_fooling,
    pgd,
    run_attack,
)
from freqdefense.errors import ConfigError, DataError
from freqdefense.models import ClassifierHandle, LinearClassifier


@pytest.fixture
def tiny_handle():
    torch.manual_seed(0)
    net = LinearClassifier(in_channels=1, num_classes=2, side=2)
    return ClassifierHandle(net, num_classes=2, input_side=2)


def _set_linear(handle, weight, bias):
    with torch.no_grad():
        handle.module.linear.weight.copy_(torch.tensor(weight, dtype=torch.float32))
        handle.module.linear.bias.copy_(torch.tensor(bias, dtype=torch.float32))


def test_epsilon_zero_is_identity(tiny_handle):
    batch = torch.rand(4, 1, 2, 2)
    out = fgsm(tiny_handle, batch, AttackConfig(kind="fgsm", epsilon=0.0, num_steps=1))
    assert torch.equal(out, batch)
    out = pgd(tiny_handle, batch, AttackConfig(kind="pgd", epsilon=0.0))
    assert torch.equal(out, batch)


def test_fgsm_gradient_sign_matches_closed_form(tiny_handle):
    # Two-class linear model on 4 pixels: logits = W x + b. For CE loss with
    # predicted label y, d(loss)/dx = (softmax - onehot_y)^T W, computable by hand.
    w = [[1.0, -0.5, 0.25, 2.0], [-1.0, 0.5, -0.25, -2.0]]
    _set_linear(tiny_handle, w, [0.0, 0.0])
    x = torch.tensor([[0.6, 0.4, 0.5, 0.3]], dtype=torch.float32).reshape(1, 1, 2, 2)

    logits = (x.reshape(1, 4) @ torch.tensor(w).t()).numpy()[0]
    label = int(np.argmax(logits))
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    grad = (probs - np.eye(2)[label]) @ np.asarray(w)  # d(CE)/dx per pixel

    eps = 0.05
    adv = fgsm(tiny_handle, x, AttackConfig(kind="fgsm", epsilon=eps, num_steps=1))
    delta = (adv - x).reshape(4).numpy()
    assert np.allclose(delta, eps * np.sign(grad), atol=1e-6)


def test_linf_bound_and_clipping_hold(tiny_handle):
    rng = np.random.default_rng(1)
    batch = torch.from_numpy(rng.random((16, 1, 2, 2), dtype=np.float64)).float()
    for cfg in [
        AttackConfig(kind="fgsm", epsilon=0.3, num_steps=1),
        AttackConfig(kind="bim", epsilon=0.1, step_size=0.03, num_steps=5),
        AttackConfig(kind="pgd", epsilon=0.1, step_size=0.03, num_steps=5, seed=3),
    ]:
        adv = run_attack(tiny_handle, batch, cfg)
        assert (adv - batch).abs().max() <= cfg.epsilon + 1e-7
        assert adv.min() >= 0 and adv.max() <= 1


def test_bim_single_step_equals_fgsm(tiny_handle):
    batch = torch.rand(5, 1, 2, 2)
    eps = 0.07
    a = fgsm(tiny_handle, batch, AttackConfig(kind="fgsm", epsilon=eps, num_steps=1))
    b = bim(tiny_handle, batch, AttackConfig(kind="bim", epsilon=eps, step_size=eps, num_steps=1))
    assert torch.equal(a, b)


def test_bim_two_pixel_manual_unroll(tiny_handle):
    # 2-step BIM on a hand-set model, checked against an explicit unroll.
    w = [[1.0, 0.0, 0.0, -1.0], [0.0, 1.0, -1.0, 0.0]]
    _set_linear(tiny_handle, w, [0.0, 0.0])
    x0 = torch.tensor([[0.5, 0.5, 0.5, 0.5]]).reshape(1, 1, 2, 2)
    eps, alpha = 0.08, 0.05
    cfg = AttackConfig(kind="bim", epsilon=eps, step_size=alpha, num_steps=2)

    def grad_at(x_flat):
        logits = x_flat @ np.asarray(w).T
        label = int(np.argmax(logits))
        p = np.exp(logits - logits.max())
        p /= p.sum()
        return (p - np.eye(2)[label]) @ np.asarray(w)

    x_flat = x0.reshape(4).numpy().astype(np.float64)
    label_grad = grad_at(x_flat)
    delta = np.clip(alpha * np.sign(label_grad), -eps, eps)
    # step 2 evaluates the gradient at the perturbed point, same fixed label source
    logits0 = x_flat @ np.asarray(w).T
    label0 = int(np.argmax(logits0))

    def grad_fixed_label(x_flat):
        logits = x_flat @ np.asarray(w).T
        p = np.exp(logits - logits.max())
        p /= p.sum()
        return (p - np.eye(2)[label0]) @ np.asarray(w)

    delta = np.clip(delta + alpha * np.sign(grad_fixed_label(np.clip(x_flat + delta, 0, 1))), -eps, eps)
    expected = np.clip(x_flat + delta, 0.0, 1.0)

    adv = bim(tiny_handle, x0, cfg).reshape(4).numpy()
    assert np.allclose(adv, expected, atol=1e-6)


def test_pgd_without_random_start_is_bim(tiny_handle):
    batch = torch.rand(4, 1, 2, 2)
    cfg_b = AttackConfig(kind="bim", epsilon=0.1, step_size=0.03, num_steps=4)
    cfg_p = AttackConfig(kind="pgd", epsilon=0.1, step_size=0.03, num_steps=4, random_start=False)
    assert torch.equal(bim(tiny_handle, batch, cfg_b), pgd(tiny_handle, batch, cfg_p))


def test_pgd_deterministic_under_seed(tiny_handle):
    batch = torch.rand(4, 1, 2, 2)
    cfg = AttackConfig(kind="pgd", epsilon=0.1, step_size=0.03, num_steps=4, seed=11)
    assert torch.equal(pgd(tiny_handle, batch, cfg), pgd(tiny_handle, batch, cfg))
    other = AttackConfig(kind="pgd", epsilon=0.1, step_size=0.03, num_steps=4, seed=12)
    assert not torch.equal(pgd(tiny_handle, batch, cfg), pgd(tiny_handle, batch, other))


def test_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig(kind="fgsm", epsilon=-0.1, num_steps=1).validate()
    with pytest.raises(ConfigError):
        AttackConfig(kind="fgsm", num_steps=3).validate()
    with pytest.raises(ConfigError):
        AttackConfig(kind="warp").validate()
    with pytest.raises(ConfigError):
        fgsm(None, None, AttackConfig(kind="pgd"))


class _StubModel:
    """Duck-typed handle whose labels are scripted per sample."""

    def __init__(self, labels_clean, labels_adv):
        self.labels_clean = np.asarray(labels_clean)
        self.labels_adv = np.asarray(labels_adv)

    def predict_labels(self, batch):
        # distinguish clean/adv by a marker in the first pixel
        marker = batch.reshape(batch.shape[0], -1)[:, 0]
        out = np.where(marker.numpy() > 0.5, self.labels_adv[: batch.shape[0]], self.labels_clean[: batch.shape[0]])
        return out


def test_filter_fooling_epsilon_zero_all_false(tiny_handle):
    batch = torch.rand(6, 1, 2, 2)
    adv = run_attack(tiny_handle, batch, AttackConfig(kind="pgd", epsilon=0.0))
    aset = AdversarialSet(clean=batch, adversarial=adv, attack_tags=["pgd"] * 6)
    marked = filter_fooling(tiny_handle, aset)
    assert not marked.fooled_mask.any()


def test_filter_fooling_matches_direct_comparison():
    rng = np.random.default_rng(2)
    clean_labels = rng.integers(0, 3, 10)
    adv_labels = rng.integers(0, 3, 10)
    stub = _StubModel(clean_labels, adv_labels)
    clean = torch.zeros(10, 1, 2, 2)
    adv = torch.ones(10, 1, 2, 2)
    aset = AdversarialSet(clean=clean, adversarial=adv, attack_tags=["pgd"] * 10)
    marked = filter_fooling(stub, aset)
    assert np.array_equal(marked.fooled_mask, clean_labels != adv_labels)
    strict = marked.fooled_only()
    assert len(strict) == int((clean_labels != adv_labels).sum())
    assert strict.fooled_mask.all()


def test_mixed_set_single_config_equals_direct_attack(tiny_handle):
    batch = torch.rand(10, 1, 2, 2)
    cfg = AttackConfig(kind="bim", epsilon=0.05, step_size=0.02, num_steps=3)
    mixed = build_mixed_attack_set(tiny_handle, batch, [cfg], [1.0], seed=5)
    assert torch.equal(mixed.adversarial, bim(tiny_handle, batch, cfg))
    assert mixed.attack_tags == ["bim"] * 10


def test_mixed_set_proportions_50_50(tiny_handle):
    batch = torch.rand(100, 1, 2, 2)
    cfgs = [
        AttackConfig(kind="fgsm", epsilon=0.05, num_steps=1),
        AttackConfig(kind="bim", epsilon=0.05, step_size=0.02, num_steps=2),
    ]
    mixed = build_mixed_attack_set(tiny_handle, batch, cfgs, [0.5, 0.5], seed=6)
    counts = {tag: mixed.attack_tags.count(tag) for tag in ("fgsm", "bim")}
    assert counts == {"fgsm": 50, "bim": 50}


def test_mixed_set_proportions_20_40_40(tiny_handle):
    batch = torch.rand(10, 1, 2, 2)
    cfgs = [
        AttackConfig(kind="fgsm", epsilon=0.05, num_steps=1),
        AttackConfig(kind="bim", epsilon=0.05, step_size=0.02, num_steps=2),
        AttackConfig(kind="pgd", epsilon=0.05, step_size=0.02, num_steps=2),
    ]
    mixed = build_mixed_attack_set(tiny_handle, batch, cfgs, [0.2, 0.4, 0.4], seed=7)
    counts = [mixed.attack_tags.count(k) for k in ("fgsm", "bim", "pgd")]
    assert counts == [2, 4, 4]


def test_mixed_set_deterministic_and_validated(tiny_handle):
    batch = torch.rand(10, 1, 2, 2)
    cfgs = [AttackConfig(kind="fgsm", epsilon=0.05, num_steps=1)]
    a = build_mixed_attack_set(tiny_handle, batch, cfgs, [1.0], seed=8)
    b = build_mixed_attack_set(tiny_handle, batch, cfgs, [1.0], seed=8)
    assert torch.equal(a.adversarial, b.adversarial)
    with pytest.raises(ConfigError):
        build_mixed_attack_set(tiny_handle, batch, cfgs, [0.9], seed=8)
    with pytest.raises(ConfigError):
        build_mixed_attack_set(tiny_handle, batch, cfgs * 2, [1.0], seed=8)


def test_adversarial_set_roundtrip(tmp_path, tiny_handle):
    batch = torch.rand(8, 1, 2, 2)
    cfg = AttackConfig(kind="pgd", epsilon=0.05, step_size=0.02, num_steps=2, seed=1)
    aset = build_mixed_attack_set(tiny_handle, batch, [cfg], [1.0], seed=9,
                                  labels=np.arange(8) % 2)
    aset = filter_fooling(tiny_handle, aset)
    aset.save(tmp_path / "set")
    loaded = AdversarialSet.load(tmp_path / "set")
    assert torch.equal(loaded.clean, aset.clean)
    assert torch.equal(loaded.adversarial, aset.adversarial)
    assert loaded.attack_tags == aset.attack_tags
    assert np.array_equal(loaded.fooled_mask, aset.fooled_mask)
    assert np.array_equal(loaded.labels, aset.labels)
    assert loaded.configs[0] == cfg
    with pytest.raises(DataError):
        AdversarialSet.load(tmp_path / "missing")


def test_external_attack_loads_rows(tmp_path, tiny_handle):
    batch = torch.rand(6, 1, 2, 2)
    stored = AdversarialSet(
        clean=batch, adversarial=batch.clamp(0.0, 1.0) * 0.5, attack_tags=["external"] * 6
    )
    stored.save(tmp_path / "ext")
    cfg = AttackConfig(kind="external", source=str(tmp_path / "ext"))
    out = run_attack(tiny_handle, batch, cfg)
    assert torch.equal(out, stored.adversarial)


def test_monotone_attack_strength():
    # More PGD steps never help the model (within statistical slack).
    torch.manual_seed(3)
    net = LinearClassifier(in_channels=1, num_classes=4, side=4)
    handle = ClassifierHandle(net, num_classes=4, input_side=4)
    rng = np.random.default_rng(5)
    batch = torch.from_numpy(rng.random((128, 1, 4, 4))).float()
    labels = handle.predict_labels(batch)

    def accuracy(steps):
        cfg = AttackConfig(kind="pgd", epsilon=0.08, step_size=0.02, num_steps=steps, seed=2)
        return float(np.mean(handle.predict_labels(pgd(handle, batch, cfg)) == labels))

    assert accuracy(8) <= accuracy(2) + 0.02
