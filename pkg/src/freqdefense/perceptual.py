"""Structural similarity and the normalized discriminability score.

Classic single-scale SSIM with a Gaussian window (valid convolution,
biased moment estimates), averaged over channels and window positions to
one scalar per sample. ``disc_score`` affinely maps SSIM's [-1, 1] range
onto [0, 1] so it can be compared directly against the adversarial
contamination score during the correction radius search.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError

__all__ = ["SsimConfig", "ssim", "disc_score"]


@dataclass(frozen=True)
class SsimConfig:
    """Window and stability constants (defaults follow the standard SSIM setup)."""

    window_size: int = 11
    gaussian_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def validate(self) -> None:
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ConfigError(f"window_size must be odd and positive, got {self.window_size}")
        if self.gaussian_sigma <= 0:
            raise ConfigError(f"gaussian_sigma must be > 0, got {self.gaussian_sigma}")
        if self.dynamic_range <= 0:
            raise ConfigError(f"dynamic_range must be > 0, got {self.dynamic_range}")


def _window(side: int, cfg: SsimConfig) -> torch.Tensor:
    # Images smaller than the configured window fall back to a uniform
    # window spanning the whole image.
    if cfg.window_size > side:
        win = torch.full((side, side), 1.0 / (side * side), dtype=torch.float64)
        return win
    coords = torch.arange(cfg.window_size, dtype=torch.float64) - (cfg.window_size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * cfg.gaussian_sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a: torch.Tensor, b: torch.Tensor, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """Per-sample SSIM in [-1, 1] between two equally shaped image batches."""
    cfg.validate()
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim != 4:
        raise InputError(f"expected (N, C, H, W) batches, got shape {tuple(a.shape)}")

    x = a.to(torch.float64)
    y = b.to(torch.float64)
    channels = x.shape[1]
    win = _window(min(x.shape[-2], x.shape[-1]), cfg)
    kernel = win.expand(channels, 1, *win.shape)

    def smooth(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, kernel, groups=channels)

    mu_x = smooth(x)
    mu_y = smooth(y)
    var_x = smooth(x * x) - mu_x * mu_x
    var_y = smooth(y * y) - mu_y * mu_y
    cov = smooth(x * y) - mu_x * mu_y

    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return ssim_map.mean(dim=(1, 2, 3)).clamp_(-1.0, 1.0)


def disc_score(original: torch.Tensor, low_passed: torch.Tensor, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """Discriminability retained after low-pass filtering, as (ssim + 1) / 2 in [0, 1]."""
    return ((ssim(original, low_passed, cfg) + 1.0) / 2.0).clamp_(0.0, 1.0)
