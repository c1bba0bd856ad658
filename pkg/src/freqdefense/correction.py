"""Per-sample Fourier low-pass correction with adaptive radius search.

For each input, the best cutoff radius balances two scores measured at
radii 2, 4, ... up to half the image side:

* discriminability: normalized SSIM between the input and its low-pass
  reconstruction (how much semantic structure survives), and
* contamination: ``(count - lcr) / count`` where ``lcr`` counts how many
  of ``count`` dropout-perturbed forwards on the low-passed image change
  the model's original prediction. A prediction that never moves under
  dropout indicates the adversarial perturbation still dominates.

The sweep records the last radius where discriminability exceeds
contamination and stops at the first radius where it does not. The
detector's clean-probability p_cd additionally imposes the radius floor
``floor(side * p_cd)``; the chosen radius is the max of floor and sweep
result. A floor at or beyond the full-coverage radius makes the
correction an exact pass-through.

Model calls run one sample at a time with per-sample seeded dropout
streams, so batched and single-sample execution agree bit-for-bit (the
FFT/SSIM math is vectorized across the batch; those ops are verified
batch-size invariant).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, InputError
from .models import ClassifierHandle, validate_image_batch
from .perceptual import SsimConfig, disc_score
from .seeding import mix_seeds, per_sample_seeds
from .spectral import fft2, identity_radius, ifft2, radial_mask

__all__ = [
    "CorrectionConfig",
    "RadiusScore",
    "CorrectionResult",
    "label_change_rate",
    "contamination_score",
    "best_radius",
    "correct",
    "correct_batch",
]


@dataclass(frozen=True)
class CorrectionConfig:
    """Radius-search knobs: dropout trials per radius, sweep step, SSIM setup."""

    count: int = 10
    radius_step: int = 2
    ssim: SsimConfig = field(default_factory=SsimConfig)
    seed: int = 0
    # With a floor above the sweep cap the swept radius cannot win the max,
    # so the sweep is skipped; outputs are identical either way.
    skip_redundant_sweep: bool = True

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if self.radius_step < 2 or self.radius_step % 2 != 0:
            raise ConfigError(f"radius_step must be a positive even integer, got {self.radius_step}")


@dataclass(frozen=True)
class RadiusScore:
    """Scores measured at one sweep radius."""

    radius: int
    discriminability: float
    contamination: float
    label_changes: int


@dataclass
class CorrectionResult:
    """Trace of the radius search for one sample."""

    floor_radius: int
    swept_radius: int
    chosen_radius: int
    per_radius: list[RadiusScore] = field(default_factory=list)
    corrected: torch.Tensor | None = None

    def to_dict(self) -> dict:
        return {
            "floor_radius": self.floor_radius,
            "swept_radius": self.swept_radius,
            "chosen_radius": self.chosen_radius,
            "per_radius": [
                {
                    "radius": s.radius,
                    "discriminability": s.discriminability,
                    "contamination": s.contamination,
                    "label_changes": s.label_changes,
                }
                for s in self.per_radius
            ],
        }


def contamination_score(label_changes: int, count: int) -> float:
    """(count - lcr) / count: 1 means the prediction never moved under dropout."""
    if not 0 <= label_changes <= count:
        raise InputError(f"label_changes {label_changes} outside [0, {count}]")
    return (count - label_changes) / count


def _trial_seeds(sample_seed: int, radius: int, count: int) -> np.ndarray:
    return np.asarray(mix_seeds(sample_seed, radius, np.arange(count, dtype=np.uint64)))


def label_change_rate(
    model: ClassifierHandle,
    low_passed: torch.Tensor,
    original_pred: int,
    count: int,
    sample_seed: int = 0,
    radius_key: int = 0,
) -> int:
    """How many of ``count`` dropout forwards on the low-passed image disagree
    with the model's deterministic prediction on the original image."""
    if low_passed.ndim == 3:
        low_passed = low_passed[None]
    if low_passed.shape[0] != 1:
        raise InputError("label_change_rate scores one sample at a time")
    seeds = _trial_seeds(sample_seed, radius_key, count)
    was_enabled = model.stochastic_enabled
    if not was_enabled:
        model.set_stochastic_mode(True)
    try:
        changes = 0
        for k in range(count):
            pred = model.stochastic_predict(low_passed, seeds[k : k + 1])[0]
            if pred != original_pred:
                changes += 1
        return changes
    finally:
        if not was_enabled:
            model.set_stochastic_mode(False)


def _sweep_radii(side: int, step: int) -> list[int]:
    return list(range(2, side // 2 + 1, step))


def best_radius(
    model: ClassifierHandle,
    image: torch.Tensor,
    p_cd: float,
    cfg: CorrectionConfig = CorrectionConfig(),
    sample_seed: int | None = None,
) -> CorrectionResult:
    """Radius search for a single sample (no corrected image attached)."""
    if image.ndim == 3:
        image = image[None]
    seeds = None if sample_seed is None else np.asarray([sample_seed], dtype=np.uint64)
    return _search_batch(model, image, np.asarray([p_cd], dtype=np.float64), cfg, seeds)[0]


def _search_batch(
    model: ClassifierHandle,
    batch: torch.Tensor,
    p_cd: np.ndarray,
    cfg: CorrectionConfig,
    sample_seeds: np.ndarray | None,
) -> list[CorrectionResult]:
    cfg.validate()
    validate_image_batch(batch)
    if np.any((p_cd < 0) | (p_cd > 1)):
        raise InputError("p_cd values must lie in [0, 1]")
    n = batch.shape[0]
    if len(p_cd) != n:
        raise InputError(f"{len(p_cd)} clean-probabilities for batch of {n}")
    if sample_seeds is None:
        sample_seeds = per_sample_seeds(cfg.seed, n)
    if len(sample_seeds) != n:
        raise InputError(f"{len(sample_seeds)} sample seeds for batch of {n}")

    side = batch.shape[-1]
    cap = side // 2
    floors = np.floor(side * p_cd).astype(np.int64)
    results = [CorrectionResult(floor_radius=int(f), swept_radius=0, chosen_radius=0) for f in floors]

    # Samples whose floor exceeds the sweep cap keep chosen = floor regardless
    # of the sweep outcome, so their sweep can be skipped entirely.
    if cfg.skip_redundant_sweep:
        active = [i for i in range(n) if floors[i] <= cap]
    else:
        active = list(range(n))

    if active:
        active_t = torch.tensor(active, dtype=torch.long)
        spectra = fft2(batch[active_t])
        # Deterministic prediction on the unfiltered input, taken before
        # dropout is enabled; the sweep compares against this label.
        preds = {i: int(model.predict_labels(batch[i : i + 1])[0]) for i in active}
        with model.stochastic_mode():
            for radius in _sweep_radii(side, cfg.radius_step):
                if not active:
                    break
                low = ifft2(spectra * radial_mask(side, radius)).clamp_(0.0, 1.0).to(batch.dtype)
                disc = disc_score(batch[active_t], low, cfg.ssim).cpu().numpy()
                keep_rows = []
                for row, i in enumerate(active):
                    seeds = _trial_seeds(int(sample_seeds[i]), radius, cfg.count)
                    changes = 0
                    for k in range(cfg.count):
                        pred = model.stochastic_predict(low[row : row + 1], seeds[k : k + 1])[0]
                        if pred != preds[i]:
                            changes += 1
                    contamination = contamination_score(changes, cfg.count)
                    results[i].per_radius.append(
                        RadiusScore(radius, float(disc[row]), contamination, changes)
                    )
                    if disc[row] - contamination > 0:
                        results[i].swept_radius = radius
                        keep_rows.append(row)
                    # else: the sweep stops for this sample (ties stop too)
                if len(keep_rows) < len(active):
                    rows_t = torch.tensor(keep_rows, dtype=torch.long)
                    active = [active[r] for r in keep_rows]
                    active_t = active_t[rows_t]
                    spectra = spectra[rows_t]

    for res in results:
        res.chosen_radius = max(res.floor_radius, res.swept_radius)
    return results


def correct(
    model: ClassifierHandle,
    image: torch.Tensor,
    p_cd: float,
    cfg: CorrectionConfig = CorrectionConfig(),
    sample_seed: int | None = None,
) -> tuple[torch.Tensor, CorrectionResult]:
    """Search the radius for one sample and return its corrected image."""
    squeeze = image.ndim == 3
    batch = image[None] if squeeze else image
    seeds = None if sample_seed is None else np.asarray([sample_seed], dtype=np.uint64)
    corrected, results = correct_batch(model, batch, np.asarray([p_cd], dtype=np.float64), cfg, seeds)
    return (corrected[0] if squeeze else corrected), results[0]


def correct_batch(
    model: ClassifierHandle,
    batch: torch.Tensor,
    p_cd: np.ndarray,
    cfg: CorrectionConfig = CorrectionConfig(),
    sample_seeds: np.ndarray | None = None,
    stage_times: dict | None = None,
) -> tuple[torch.Tensor, list[CorrectionResult]]:
    """Vectorized correction of a batch; per-sample semantics identical to ``correct``.

    Each sample's radius search is independent (its own seeds, its own
    early exit), so outputs are invariant to batch composition and order.
    """
    p_cd = np.asarray(p_cd, dtype=np.float64)
    t0 = time.perf_counter()
    results = _search_batch(model, batch, p_cd, cfg, sample_seeds)
    t1 = time.perf_counter()

    side = batch.shape[-1]
    full_cover = identity_radius(side)
    corrected = torch.empty_like(batch)
    by_radius: dict[int, list[int]] = {}
    for i, res in enumerate(results):
        if res.chosen_radius >= full_cover:
            # Explicit pass-through: no FFT roundtrip noise on confident-clean samples.
            corrected[i] = batch[i]
        else:
            by_radius.setdefault(res.chosen_radius, []).append(i)
    for radius, idx in by_radius.items():
        idx_t = torch.tensor(idx, dtype=torch.long)
        low = ifft2(fft2(batch[idx_t]) * radial_mask(side, radius)).clamp_(0.0, 1.0).to(batch.dtype)
        corrected[idx_t] = low
    for i, res in enumerate(results):
        res.corrected = corrected[i]
    t2 = time.perf_counter()

    if stage_times is not None:
        stage_times["sweep"] = stage_times.get("sweep", 0.0) + (t1 - t0)
        stage_times["correct"] = stage_times.get("correct", 0.0) + (t2 - t1)
    return corrected, results
