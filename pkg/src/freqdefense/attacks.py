"""l-infinity bounded adversarial example generation (FGSM / BIM / PGD).

All attacks are untargeted and use the model's own predicted label as
the cross-entropy target, since the threat model is test time with no
ground truth available. Every generated sample satisfies
``|adv - clean|_inf <= epsilon`` and lies in [0, 1]; both hold by
construction (delta tracking + projection + clamp).

An ``external`` attack kind loads pre-computed perturbed batches from a
saved adversarial-set directory (e.g. outputs of attack toolboxes whose
internals are out of scope here).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError, InputError
from .models import ClassifierHandle, validate_image_batch
from .seeding import mix_seeds

__all__ = [
    "AttackConfig",
    "AdversarialSet",
    "fgsm",
    "bim",
    "pgd",
    "run_attack",
    "filter_fooling",
    "build_mixed_attack_set",
]

ATTACK_KINDS = ("fgsm", "bim", "pgd", "external")


@dataclass(frozen=True)
class AttackConfig:
    """l-inf attack parameters. Defaults: eps 8/255, step 2/255, 10 steps."""

    kind: str = "pgd"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    num_steps: int = 10
    random_start: bool = True
    seed: int = 0
    source: str | None = None  # adversarial-set directory for kind="external"

    def validate(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.kind == "fgsm" and self.num_steps != 1:
            raise ConfigError("fgsm implies num_steps == 1")
        if self.kind in ("bim", "pgd") and self.num_steps > 0 and self.step_size <= 0:
            raise ConfigError(f"step_size must be > 0 when num_steps > 0, got {self.step_size}")
        if self.kind == "external" and not self.source:
            raise ConfigError("external attacks need a source directory")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AttackConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown attack config fields: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class AdversarialSet:
    """Clean/adversarial image pairs plus per-sample provenance."""

    clean: torch.Tensor
    adversarial: torch.Tensor
    attack_tags: list[str]
    configs: list[AttackConfig] = field(default_factory=list)
    seed: int | None = None
    fooled_mask: np.ndarray | None = None
    labels: np.ndarray | None = None  # evaluation-only ground truth, never used by the defense

    def __len__(self) -> int:
        return self.clean.shape[0]

    def fooled_only(self) -> "AdversarialSet":
        """Strict view: keep only samples whose attack flipped the model's label."""
        if self.fooled_mask is None:
            raise InputError("fooled_mask unset; run filter_fooling first")
        idx = np.flatnonzero(self.fooled_mask)
        return AdversarialSet(
            clean=self.clean[idx],
            adversarial=self.adversarial[idx],
            attack_tags=[self.attack_tags[i] for i in idx],
            configs=self.configs,
            seed=self.seed,
            fooled_mask=self.fooled_mask[idx],
            labels=None if self.labels is None else self.labels[idx],
        )

    def save(self, out_dir: str | Path) -> None:
        """Persist arrays to ``arrays.npz`` plus a JSON manifest."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        arrays = {"clean": self.clean.numpy(), "adversarial": self.adversarial.numpy()}
        if self.labels is not None:
            arrays["labels"] = self.labels
        np.savez(out_dir / "arrays.npz", **arrays)
        manifest = {
            "attack_tags": self.attack_tags,
            "configs": [c.to_dict() for c in self.configs],
            "seed": self.seed,
            "fooled_mask": None if self.fooled_mask is None else self.fooled_mask.astype(bool).tolist(),
        }
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, in_dir: str | Path) -> "AdversarialSet":
        in_dir = Path(in_dir)
        try:
            arrays = np.load(in_dir / "arrays.npz")
            manifest = json.loads((in_dir / "manifest.json").read_text())
        except FileNotFoundError as exc:
            raise DataError(f"not an adversarial-set directory: {in_dir}") from exc
        except (ValueError, json.JSONDecodeError) as exc:
            raise DataError(f"corrupt adversarial set in {in_dir}: {exc}") from exc
        fooled = manifest.get("fooled_mask")
        return cls(
            clean=torch.from_numpy(arrays["clean"]),
            adversarial=torch.from_numpy(arrays["adversarial"]),
            attack_tags=list(manifest["attack_tags"]),
            configs=[AttackConfig.from_dict(c) for c in manifest.get("configs", [])],
            seed=manifest.get("seed"),
            fooled_mask=None if fooled is None else np.asarray(fooled, dtype=bool),
            labels=arrays["labels"] if "labels" in arrays else None,
        )


def _input_gradient(model: ClassifierHandle, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    x = images.clone().requires_grad_(True)
    loss = F.cross_entropy(model.forward_grad(x), labels)
    return torch.autograd.grad(loss, x)[0]


def fgsm(model: ClassifierHandle, batch: torch.Tensor, config: AttackConfig) -> torch.Tensor:
    """Single signed-gradient step of size epsilon, clamped to [0, 1]."""
    config.validate()
    if config.kind != "fgsm":
        raise ConfigError(f"fgsm called with kind={config.kind!r}")
    validate_image_batch(batch)
    labels = torch.from_numpy(model.predict_labels(batch))
    grad = _input_gradient(model, batch, labels)
    return (batch + config.epsilon * grad.sign()).clamp_(0.0, 1.0)


def _iterative_linf(
    model: ClassifierHandle,
    batch: torch.Tensor,
    config: AttackConfig,
    init_delta: torch.Tensor,
) -> torch.Tensor:
    labels = torch.from_numpy(model.predict_labels(batch))
    delta = init_delta
    for _ in range(config.num_steps):
        grad = _input_gradient(model, (batch + delta).clamp(0.0, 1.0), labels)
        delta = (delta + config.step_size * grad.sign()).clamp_(-config.epsilon, config.epsilon)
    return (batch + delta).clamp_(0.0, 1.0)


def bim(model: ClassifierHandle, batch: torch.Tensor, config: AttackConfig) -> torch.Tensor:
    """Iterated FGSM with per-step projection onto the epsilon ball; no random start."""
    config.validate()
    if config.kind != "bim":
        raise ConfigError(f"bim called with kind={config.kind!r}")
    validate_image_batch(batch)
    return _iterative_linf(model, batch, config, torch.zeros_like(batch))


def pgd(model: ClassifierHandle, batch: torch.Tensor, config: AttackConfig) -> torch.Tensor:
    """BIM plus a uniform random start inside the epsilon ball (seeded)."""
    config.validate()
    if config.kind != "pgd":
        raise ConfigError(f"pgd called with kind={config.kind!r}")
    validate_image_batch(batch)
    if config.random_start and config.epsilon > 0:
        gen = torch.Generator().manual_seed(mix_seeds(config.seed, 0x9D) % 2**63)
        noise = torch.empty_like(batch).uniform_(-config.epsilon, config.epsilon, generator=gen)
        # keep the start inside the image box so delta stays feasible
        init = (batch + noise).clamp_(0.0, 1.0) - batch
    else:
        init = torch.zeros_like(batch)
    return _iterative_linf(model, batch, config, init)


def _load_external(batch: torch.Tensor, config: AttackConfig, indices: np.ndarray) -> torch.Tensor:
    stored = AdversarialSet.load(config.source)
    max_idx = int(np.max(indices, initial=-1))
    if len(stored) <= max_idx:
        raise DataError(f"external set in {config.source} has {len(stored)} samples, need index {max_idx}")
    if stored.adversarial.shape[1:] != batch.shape[1:]:
        raise DataError(
            f"external sample shape {tuple(stored.adversarial.shape[1:])} "
            f"!= batch sample shape {tuple(batch.shape[1:])}"
        )
    adv = stored.adversarial[torch.from_numpy(np.asarray(indices, dtype=np.int64))]
    if adv.numel() and (adv.min() < 0 or adv.max() > 1):
        raise DataError(f"external adversarials in {config.source} leave [0, 1]")
    return adv


def run_attack(model: ClassifierHandle, batch: torch.Tensor, config: AttackConfig) -> torch.Tensor:
    """Dispatch on config.kind; external sets must align row-for-row with the batch."""
    config.validate()
    if config.kind == "fgsm":
        return fgsm(model, batch, config)
    if config.kind == "bim":
        return bim(model, batch, config)
    if config.kind == "pgd":
        return pgd(model, batch, config)
    return _load_external(batch, config, np.arange(batch.shape[0]))


def filter_fooling(model: ClassifierHandle, aset: AdversarialSet) -> AdversarialSet:
    """Mark which adversarials flipped the model's prediction vs their clean pair."""
    clean_labels = model.predict_labels(aset.clean)
    adv_labels = model.predict_labels(aset.adversarial)
    return dataclasses.replace(aset, fooled_mask=adv_labels != clean_labels)


def _partition_counts(n: int, proportions: list[float]) -> list[int]:
    # Largest-remainder apportionment: exact when n * p is integral.
    exact = [n * p for p in proportions]
    counts = [int(np.floor(e)) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    for i in sorted(range(len(counts)), key=lambda i: (-remainders[i], i))[: n - sum(counts)]:
        counts[i] += 1
    return counts


def build_mixed_attack_set(
    model: ClassifierHandle,
    batch: torch.Tensor,
    configs: list[AttackConfig],
    proportions: list[float],
    seed: int = 0,
    labels: np.ndarray | None = None,
) -> AdversarialSet:
    """Attack disjoint slices of a seeded shuffle of the batch, one config per slice.

    Outputs stay aligned with the input batch order; ``attack_tags`` record
    which attack produced each sample.
    """
    if len(configs) != len(proportions):
        raise ConfigError(f"{len(configs)} configs vs {len(proportions)} proportions")
    if abs(sum(proportions) - 1.0) > 1e-9:
        raise ConfigError(f"proportions must sum to 1, got {sum(proportions)}")
    validate_image_batch(batch)

    n = batch.shape[0]
    counts = _partition_counts(n, proportions)
    perm = np.random.default_rng(seed).permutation(n)
    adversarial = torch.empty_like(batch)
    tags = [""] * n
    start = 0
    for config, count in zip(configs, counts):
        idx = perm[start : start + count]
        start += count
        if count == 0:
            continue
        idx_t = torch.from_numpy(np.ascontiguousarray(idx))
        if config.kind == "external":
            adversarial[idx_t] = _load_external(batch, config, idx)
        else:
            adversarial[idx_t] = run_attack(model, batch[idx_t], config)
        for i in idx:
            tags[i] = config.kind
    return AdversarialSet(
        clean=batch.clone(),
        adversarial=adversarial,
        attack_tags=tags,
        configs=list(configs),
        seed=seed,
        labels=labels,
    )
