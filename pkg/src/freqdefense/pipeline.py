"""End-to-end defense orchestration, evaluation metrics, and reporting.

``defend`` runs the full inference path: detector scores each sample,
the clean-probability (soft mode) or its 0/1 threshold (hard mode)
floors the correction radius, the corrected image goes to the unmodified
target model. ``evaluate`` produces the standard report:

* TD.A  — detector accuracy on clean samples (p_clean >= 0.5) and on
  adversarial samples (p_clean < 0.5),
* Co.A  — target accuracy when every adversarial sample is corrected
  with a zero floor and clean samples bypass,
* Cb.A  — target accuracy under the full defense, per mode,
* baseline — undefended target accuracy.

Evaluation labels exist only in this harness; the defense path itself
never sees them. Accuracies are reported as percentages.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .correction import CorrectionConfig, CorrectionResult, correct_batch
from .detector import TargetDetector
from .errors import ConfigError, DataError, InputError
from .models import ClassifierHandle, validate_image_batch
from .seeding import mix_seeds, per_sample_seeds
from .spectral import low_pass

logger = logging.getLogger(__name__)

__all__ = [
    "DefenseReport",
    "EvalSet",
    "BenchRecord",
    "defend",
    "evaluate",
    "build_eval_set",
    "random_radius_baseline",
    "random_radius_accuracy",
    "bench_runtime",
    "emit_report",
]

MODES = ("soft", "hard")


@dataclass
class DefenseReport:
    """Evaluation metrics for one defense run (accuracies in percent)."""

    mode: str
    baseline_clean: float
    baseline_adv: float
    detection_clean: float
    detection_adv: float
    correction_adv: float
    combined_clean: float
    combined_adv: float
    combined_adv_fooled: float | None = None  # Cb.A over fooled-only adversarials
    runtime_seconds: float = 0.0
    stage_seconds: dict = field(default_factory=dict)
    n_clean: int = 0
    n_adv: int = 0
    identities: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    CSV_COLUMNS = (
        "TD.A-clean",
        "TD.A-adv",
        "Co.A",
        "Cb.A-clean",
        "Cb.A-adv",
        "baseline-clean",
        "baseline-adv",
    )

    def csv_row(self) -> list[float]:
        return [
            self.detection_clean,
            self.detection_adv,
            self.correction_adv,
            self.combined_clean,
            self.combined_adv,
            self.baseline_clean,
            self.baseline_adv,
        ]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DefenseReport":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class EvalSet:
    """Clean/adversarial evaluation split at a requested clean:adv ratio."""

    clean_images: torch.Tensor
    clean_labels: np.ndarray
    adv_images: torch.Tensor
    adv_labels: np.ndarray
    fooled_mask: np.ndarray | None = None
    manifest: dict = field(default_factory=dict)


@dataclass
class BenchRecord:
    """Wall-clock timing of one defend() run with its per-stage split."""

    n_samples: int
    total_seconds: float
    stage_seconds: dict = field(default_factory=dict)

    @property
    def per_sample_ms(self) -> float:
        return 1000.0 * self.total_seconds / self.n_samples if self.n_samples else 0.0


def _accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    return 100.0 * float(np.mean(predictions == labels)) if len(labels) else 0.0


def _detect_per_sample(detector: TargetDetector, batch: torch.Tensor) -> np.ndarray:
    # One sample per call: keeps results identical between batch-of-1 and
    # batched defend() runs (GEMM kernels are not batch-size invariant).
    return np.array([float(detector.detect(batch[i : i + 1])[0, 0]) for i in range(batch.shape[0])])


def _classify_per_sample(model: ClassifierHandle, batch: torch.Tensor) -> np.ndarray:
    return np.array([int(model.predict_labels(batch[i : i + 1])[0]) for i in range(batch.shape[0])])


def defend(
    target_model: ClassifierHandle,
    detector: TargetDetector,
    batch: torch.Tensor,
    cfg: CorrectionConfig = CorrectionConfig(),
    mode: str = "soft",
    sample_seeds: np.ndarray | None = None,
    stage_times: dict | None = None,
    return_trace: bool = False,
) -> np.ndarray | tuple[np.ndarray, list[CorrectionResult]]:
    """Detect, correct, classify. Returns predicted labels (and traces if asked).

    Soft mode floors each sample's radius with its own clean-probability;
    hard mode clamps that probability to {0, 1}, so confidently-clean
    samples bypass correction entirely.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    validate_image_batch(batch)
    times = stage_times if stage_times is not None else {}

    t0 = time.perf_counter()
    p_clean = _detect_per_sample(detector, batch)
    times["detect"] = times.get("detect", 0.0) + time.perf_counter() - t0

    p_cd = p_clean if mode == "soft" else (p_clean >= 0.5).astype(np.float64)
    corrected, results = correct_batch(target_model, batch, p_cd, cfg, sample_seeds, stage_times=times)

    t0 = time.perf_counter()
    predictions = _classify_per_sample(target_model, corrected)
    times["classify"] = times.get("classify", 0.0) + time.perf_counter() - t0

    return (predictions, results) if return_trace else predictions


def _split_labels(labels, n_clean: int, n_adv: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(labels, tuple):
        clean_labels, adv_labels = labels
    else:
        clean_labels = adv_labels = np.asarray(labels)
    clean_labels = np.asarray(clean_labels)
    adv_labels = np.asarray(adv_labels)
    if len(clean_labels) != n_clean or len(adv_labels) != n_adv:
        raise InputError(
            f"label counts ({len(clean_labels)}, {len(adv_labels)}) do not match "
            f"sample counts ({n_clean}, {n_adv})"
        )
    return clean_labels, adv_labels


def evaluate(
    target_model: ClassifierHandle,
    detector: TargetDetector,
    clean_set: torch.Tensor,
    adv_set: torch.Tensor,
    labels,
    cfg: CorrectionConfig = CorrectionConfig(),
    mode: str = "soft",
    seed: int = 0,
    fooled_mask: np.ndarray | None = None,
    config_snapshot: dict | None = None,
) -> DefenseReport:
    """Compute TD.A, Co.A, Cb.A, and baseline accuracies for one evaluation.

    ``labels`` is either a single array (shared by aligned clean/adv sets)
    or a (clean_labels, adv_labels) tuple. Correction seeds for the Cb.A
    pass reuse the Co.A per-sample seeds, so in hard mode the accounting
    identities Cb.A-clean <= baseline-clean and Cb.A-adv <= Co.A hold by
    construction on fooled adversarial sets.
    """
    validate_image_batch(clean_set)
    validate_image_batch(adv_set)
    clean_labels, adv_labels = _split_labels(labels, len(clean_set), len(adv_set))

    t_start = time.perf_counter()
    baseline_clean = _accuracy(target_model.predict_labels(clean_set), clean_labels)
    baseline_adv = _accuracy(target_model.predict_labels(adv_set), adv_labels)

    p_clean_on_clean = detector.detect(clean_set).numpy()[:, 0]
    p_clean_on_adv = detector.detect(adv_set).numpy()[:, 0]
    detection_clean = 100.0 * float(np.mean(p_clean_on_clean >= 0.5))
    detection_adv = 100.0 * float(np.mean(p_clean_on_adv < 0.5))

    clean_seeds = per_sample_seeds(seed, len(clean_set), 0xC1)
    adv_seeds = per_sample_seeds(seed, len(adv_set), 0xAD)

    corrected_adv, _ = correct_batch(target_model, adv_set, np.zeros(len(adv_set)), cfg, adv_seeds)
    correction_adv = _accuracy(_classify_per_sample(target_model, corrected_adv), adv_labels)

    stage_times: dict = {}
    pred_clean = defend(target_model, detector, clean_set, cfg, mode, clean_seeds, stage_times)
    pred_adv = defend(target_model, detector, adv_set, cfg, mode, adv_seeds, stage_times)
    combined_clean = _accuracy(pred_clean, clean_labels)
    combined_adv = _accuracy(pred_adv, adv_labels)

    combined_adv_fooled = None
    if fooled_mask is not None:
        fooled_mask = np.asarray(fooled_mask, dtype=bool)
        if fooled_mask.shape[0] != len(adv_set):
            raise InputError("fooled_mask length does not match the adversarial set")
        if fooled_mask.any():
            combined_adv_fooled = _accuracy(pred_adv[fooled_mask], adv_labels[fooled_mask])

    identities = {
        "combined_clean_le_baseline": bool(combined_clean <= baseline_clean),
        "combined_adv_le_correction": bool(combined_adv <= correction_adv),
    }
    if mode == "hard" and not all(identities.values()):
        logger.warning("hard-mode accounting identities violated: %s", identities)

    report = DefenseReport(
        mode=mode,
        baseline_clean=baseline_clean,
        baseline_adv=baseline_adv,
        detection_clean=detection_clean,
        detection_adv=detection_adv,
        correction_adv=correction_adv,
        combined_clean=combined_clean,
        combined_adv=combined_adv,
        combined_adv_fooled=combined_adv_fooled,
        runtime_seconds=time.perf_counter() - t_start,
        stage_seconds=stage_times,
        n_clean=len(clean_set),
        n_adv=len(adv_set),
        identities=identities,
        config=config_snapshot or {},
    )
    logger.info(
        "%s mode: baseline %.2f/%.2f TD.A %.2f/%.2f Co.A %.2f Cb.A %.2f/%.2f",
        mode, baseline_clean, baseline_adv, detection_clean, detection_adv,
        correction_adv, combined_clean, combined_adv,
    )
    return report


def _parse_ratio(ratio) -> tuple[int, int]:
    if isinstance(ratio, str):
        parts = ratio.split(":")
        if len(parts) != 2:
            raise ConfigError(f"ratio must look like '2:1', got {ratio!r}")
        ratio = (int(parts[0]), int(parts[1]))
    rc, ra = ratio
    if rc <= 0 or ra <= 0:
        raise ConfigError(f"ratio parts must be positive, got {rc}:{ra}")
    return rc, ra


def build_eval_set(
    clean: tuple[torch.Tensor, np.ndarray],
    adv: tuple[torch.Tensor, np.ndarray],
    ratio="1:1",
    seed: int = 0,
    fooled_mask: np.ndarray | None = None,
) -> EvalSet:
    """Deterministically subsample clean/adv pools to the requested ratio.

    The largest subset satisfying the exact ratio is kept; sampling order
    comes from a seeded permutation recorded in the manifest.
    """
    rc, ra = _parse_ratio(ratio)
    clean_images, clean_labels = clean
    adv_images, adv_labels = adv
    scale = min(len(clean_images) // rc, len(adv_images) // ra)
    if scale < 1:
        raise DataError(
            f"not enough samples for ratio {rc}:{ra} "
            f"(have {len(clean_images)} clean, {len(adv_images)} adversarial)"
        )
    n_clean, n_adv = scale * rc, scale * ra
    rng = np.random.default_rng(seed)
    clean_idx = np.sort(rng.permutation(len(clean_images))[:n_clean])
    adv_idx = np.sort(rng.permutation(len(adv_images))[:n_adv])
    return EvalSet(
        clean_images=clean_images[torch.from_numpy(clean_idx)],
        clean_labels=np.asarray(clean_labels)[clean_idx],
        adv_images=adv_images[torch.from_numpy(adv_idx)],
        adv_labels=np.asarray(adv_labels)[adv_idx],
        fooled_mask=None if fooled_mask is None else np.asarray(fooled_mask, dtype=bool)[adv_idx],
        manifest={
            "ratio": f"{rc}:{ra}",
            "seed": seed,
            "clean_indices": clean_idx.tolist(),
            "adv_indices": adv_idx.tolist(),
        },
    )


def random_radius_baseline(model: ClassifierHandle, batch: torch.Tensor, seed: int = 0) -> np.ndarray:
    """Low-pass each sample at a radius drawn uniformly from the sweep grid."""
    validate_image_batch(batch)
    side = batch.shape[-1]
    choices = np.arange(2, side // 2 + 1, 2)
    radii = np.random.default_rng(seed).choice(choices, size=batch.shape[0])
    predictions = np.empty(batch.shape[0], dtype=np.int64)
    for radius in np.unique(radii):
        idx = np.flatnonzero(radii == radius)
        filtered = low_pass(batch[torch.from_numpy(idx)], int(radius))
        predictions[idx] = model.predict_labels(filtered)
    return predictions


def random_radius_accuracy(
    model: ClassifierHandle,
    batch: torch.Tensor,
    labels: np.ndarray,
    trials: int = 5,
    seed: int = 0,
) -> float:
    """Mean accuracy (percent) of the random-radius comparator over ``trials`` draws."""
    accs = [
        _accuracy(random_radius_baseline(model, batch, seed=mix_seeds(seed, t) % 2**32), labels)
        for t in range(trials)
    ]
    return float(np.mean(accs))


def bench_runtime(
    target_model: ClassifierHandle,
    detector: TargetDetector,
    batch: torch.Tensor,
    cfg: CorrectionConfig = CorrectionConfig(),
    mode: str = "soft",
    n_samples: int | None = None,
) -> BenchRecord:
    """Wall-clock one defend() pass over the first ``n_samples`` of ``batch``."""
    n = batch.shape[0] if n_samples is None else n_samples
    if n == 0:
        return BenchRecord(n_samples=0, total_seconds=0.0)
    subset = batch[:n]
    stage_times: dict = {}
    t0 = time.perf_counter()
    defend(target_model, detector, subset, cfg, mode,
           per_sample_seeds(cfg.seed, n, 0xBE), stage_times)
    total = time.perf_counter() - t0
    return BenchRecord(n_samples=n, total_seconds=total, stage_seconds=stage_times)


def emit_report(report: DefenseReport, out_dir: str | Path) -> dict[str, Path]:
    """Write ``report.json`` and ``report.csv``; returns the file paths."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / "report.json"
        json_path.write_text(json.dumps(report.to_dict(), indent=2))
        csv_path = out_dir / "report.csv"
        with csv_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(DefenseReport.CSV_COLUMNS)
            writer.writerow(report.csv_row())
    except OSError as exc:
        raise DataError(f"cannot write report to {out_dir}: {exc}") from exc
    return {"json": json_path, "csv": csv_path}


def plot_radius_profile(
    model: ClassifierHandle,
    batch: torch.Tensor,
    labels: np.ndarray,
    out_path: str | Path,
) -> Path:
    """Accuracy-vs-radius curve for a batch, saved as a PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    side = batch.shape[-1]
    radii = list(range(2, side // 2 + 1, 2))
    accs = [_accuracy(model.predict_labels(low_pass(batch, r)), labels) for r in radii]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(radii, accs, marker="o")
    ax.set_xlabel("low-pass radius (bins)")
    ax.set_ylabel("accuracy (%)")
    ax.set_title("accuracy vs low-pass radius")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
