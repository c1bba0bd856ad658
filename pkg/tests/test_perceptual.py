"""SSIM tests against a hand-rolled windowed oracle."""

import numpy as np
import pytest
import torch

from freqdefense.errors import InputError
from freqdefense.perceptual import SsimConfig, disc_score, ssim
from freqdefense.spectral import low_pass


def ssim_oracle(a: np.ndarray, b: np.ndarray, cfg: SsimConfig) -> float:
    """Direct windowed SSIM for one-channel images, loop form.

    Mirrors the contract: Gaussian window (uniform fallback when the image
    is smaller than the window), valid placement, biased moments.
    """
    side = a.shape[0]
    if cfg.window_size > side:
        win = np.full((side, side), 1.0 / (side * side))
    else:
        coords = np.arange(cfg.window_size) - (cfg.window_size - 1) / 2
        g = np.exp(-(coords**2) / (2 * cfg.gaussian_sigma**2))
        g /= g.sum()
        win = np.outer(g, g)
    k = win.shape[0]
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    values = []
    for y in range(side - k + 1):
        for x in range(side - k + 1):
            pa = a[y : y + k, x : x + k]
            pb = b[y : y + k, x : x + k]
            mu_a = (win * pa).sum()
            mu_b = (win * pb).sum()
            va = (win * pa * pa).sum() - mu_a**2
            vb = (win * pb * pb).sum() - mu_b**2
            cov = (win * pa * pb).sum() - mu_a * mu_b
            values.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
            )
    return float(np.mean(values))


def test_self_similarity_is_one():
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.random((4, 3, 16, 16))).float()
    assert (ssim(x, x) - 1.0).abs().max() < 1e-6


def test_symmetry():
    rng = np.random.default_rng(1)
    a = torch.from_numpy(rng.random((3, 1, 16, 16))).float()
    b = torch.from_numpy(rng.random((3, 1, 16, 16))).float()
    assert (ssim(a, b) - ssim(b, a)).abs().max() < 1e-9


def test_two_block_toy_matches_oracle():
    # 8x8 pair: window (11) exceeds the image, so the uniform fallback applies
    a = np.zeros((8, 8))
    a[:4, :] = 0.25
    a[4:, :] = 0.75
    b = np.zeros((8, 8))
    b[:4, :] = 0.35
    b[4:, :] = 0.65
    cfg = SsimConfig()
    ours = ssim(torch.tensor(a).float()[None, None], torch.tensor(b).float()[None, None], cfg)
    # float32 inputs: compare the oracle on identical float32-rounded values
    expected = ssim_oracle(
        np.asarray(a, dtype=np.float32).astype(np.float64),
        np.asarray(b, dtype=np.float32).astype(np.float64),
        cfg,
    )
    assert abs(float(ours[0]) - expected) < 1e-6


def test_windowed_case_matches_oracle():
    rng = np.random.default_rng(2)
    a = rng.random((16, 16)).astype(np.float32)
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1).astype(np.float32)
    cfg = SsimConfig(window_size=7, gaussian_sigma=1.5)
    ours = ssim(torch.from_numpy(a)[None, None], torch.from_numpy(b)[None, None], cfg)
    expected = ssim_oracle(a.astype(np.float64), b.astype(np.float64), cfg)
    assert abs(float(ours[0]) - expected) < 1e-6


def test_multichannel_averages_channels():
    rng = np.random.default_rng(3)
    a = rng.random((1, 2, 12, 12)).astype(np.float32)
    b = rng.random((1, 2, 12, 12)).astype(np.float32)
    cfg = SsimConfig(window_size=5)
    joint = ssim(torch.from_numpy(a), torch.from_numpy(b), cfg)
    per_channel = [
        ssim(torch.from_numpy(a[:, c : c + 1]), torch.from_numpy(b[:, c : c + 1]), cfg)
        for c in range(2)
    ]
    assert abs(float(joint[0]) - float((per_channel[0] + per_channel[1]) / 2)) < 1e-9


def test_ranges():
    rng = np.random.default_rng(4)
    a = torch.from_numpy(rng.random((8, 1, 12, 12))).float()
    b = torch.from_numpy(rng.random((8, 1, 12, 12))).float()
    s = ssim(a, b)
    assert bool(((s >= -1) & (s <= 1)).all())
    d = disc_score(a, b)
    assert bool(((d >= 0) & (d <= 1)).all())


def test_disc_score_affine_map():
    rng = np.random.default_rng(5)
    a = torch.from_numpy(rng.random((2, 1, 16, 16))).float()
    b = torch.from_numpy(rng.random((2, 1, 16, 16))).float()
    assert torch.allclose(disc_score(a, b), (ssim(a, b) + 1) / 2, atol=1e-12)
    assert float(disc_score(a[:1], a[:1])[0]) == pytest.approx(1.0, abs=1e-6)


def test_disc_score_mostly_monotone_in_radius():
    # On a natural-ish corpus, more bandwidth retains more structure.
    rng = np.random.default_rng(6)
    base = rng.random((40, 1, 32, 32))
    from scipy.ndimage import gaussian_filter

    smooth = np.stack([gaussian_filter(img[0], 1.5)[None] for img in base]).astype(np.float32)
    corpus = torch.from_numpy(np.clip(smooth, 0, 1))
    at_low = disc_score(corpus, low_pass(corpus, 2))
    at_cap = disc_score(corpus, low_pass(corpus, 16))
    assert float((at_cap >= at_low).float().mean()) >= 0.95


def test_shape_mismatch_rejected():
    with pytest.raises(InputError):
        ssim(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 9, 9))
