"""Adversarial-input detection: source training and source-free adaptation.

The detector is a small fully connected head over canonicalized logit
descriptors (sorted softmax probabilities, truncated/zero-padded to a
fixed length K). It is first trained on descriptors of an *arbitrary*
classifier — clean samples vs their attacked counterparts — and then
adapted, without any source data, to the unlabeled clean/adversarial mix
seen by the *target* classifier. Adaptation minimizes

    entropy - delta * diversity + lambda * pseudo_label_ce

over the head parameters with the final classification layer frozen,
refreshing weighted-centroid cosine pseudo-labels each epoch.

Detector label convention: index 0 = clean, index 1 = adversarial.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from .attacks import AttackConfig, filter_fooling, run_attack, AdversarialSet
from .errors import ConfigError, DataError, StateError, TrainingError
from .models import ClassifierHandle, SmallConvNet, validate_image_batch
from .seeding import seed_everything

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "AdaptationConfig",
    "DetectionHead",
    "TargetDetector",
    "canonicalize_logits",
    "entropy_loss",
    "diversity_loss",
    "assign_pseudo_labels",
    "train_arbitrary_classifier",
    "generate_detector_dataset",
    "train_source_head",
    "adapt_target_detector",
    "detect",
    "save_head",
    "load_head",
]

CLEAN, ADVERSARIAL = 0, 1


@dataclass(frozen=True)
class TrainConfig:
    """Supervised training knobs for the arbitrary classifier / source head.

    Label smoothing keeps classifier confidences calibrated below 1, which
    makes the logit-descriptor gap between clean and attacked inputs far
    more visible to the detector.
    """

    epochs: int = 8
    batch_size: int = 128
    learning_rate: float = 1e-3
    label_smoothing: float = 0.2
    seed: int = 0
    val_fraction: float = 0.1
    min_val_accuracy: float = 0.5


@dataclass(frozen=True)
class AdaptationConfig:
    """Source-free adaptation knobs.

    delta weights the diversity term, lambda_pl the pseudo-label term;
    pseudo_refresh counts pseudo-label recomputations per epoch and
    pseudo_rounds the k-means-style refinement rounds per recomputation.
    """

    delta: float = 1.0
    lambda_pl: float = 0.3
    epochs: int = 15
    learning_rate: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 128
    pseudo_refresh: int = 1
    pseudo_rounds: int = 2
    min_mix_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.delta < 0 or self.lambda_pl < 0:
            raise ConfigError("delta and lambda_pl must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.pseudo_refresh < 1 or self.pseudo_rounds < 1:
            raise ConfigError("pseudo_refresh and pseudo_rounds must be >= 1")


class DetectionHead(nn.Module):
    """Three 128-wide fc layers plus a binary classification layer.

    ReLU after layers 1-2 only; dropout(0.25) after layers 1 and 2;
    batch-norm after the second (post-dropout) layer; weight-norm on the
    third layer. ``features`` exposes the penultimate activations used
    for pseudo-labeling; the classification layer is frozen during
    adaptation.
    """

    def __init__(self, input_dim: int = 10, width: int = 128, dropout: float = 0.25):
        super().__init__()
        self.input_dim = input_dim
        self.width = width
        self.fc1 = nn.Linear(input_dim, width)
        self.drop1 = nn.Dropout(dropout)
        self.fc2 = nn.Linear(width, width)
        self.drop2 = nn.Dropout(dropout)
        self.bn = nn.BatchNorm1d(width)
        self.fc3 = weight_norm(nn.Linear(width, width))
        self.classifier = nn.Linear(width, 2)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.drop1(torch.relu(self.fc1(x)))
        h = self.bn(self.drop2(torch.relu(self.fc2(h))))
        return self.fc3(h)

    def forward(self, x: torch.Tensor, return_features: bool = False):
        feats = self.features(x)
        logits = self.classifier(feats)
        return (logits, feats) if return_features else logits

    def architecture_hash(self) -> str:
        spec = json.dumps({k: list(v.shape) for k, v in sorted(self.state_dict().items())})
        return hashlib.sha256(spec.encode()).hexdigest()[:16]


def canonicalize_logits(logits: torch.Tensor, k: int) -> torch.Tensor:
    """Sorted-descending softmax probabilities, truncated/zero-padded to length k.

    Sorting makes the descriptor invariant to class permutation and
    independent of the source model's class count, so one head serves
    models with differing label spaces.
    """
    if k < 1:
        raise ConfigError(f"descriptor length must be >= 1, got {k}")
    probs = torch.softmax(logits.detach().float(), dim=1)
    sorted_probs, _ = torch.sort(probs, dim=1, descending=True)
    n, c = sorted_probs.shape
    if c >= k:
        return sorted_probs[:, :k].contiguous()
    return torch.cat([sorted_probs, torch.zeros(n, k - c)], dim=1)


def entropy_loss(probs: torch.Tensor) -> torch.Tensor:
    """Mean per-sample Shannon entropy (natural log, 0*log0 := 0).

    Computed in float64 so values match direct-formula oracles to 1e-9.
    """
    p = probs.to(torch.float64)
    return -torch.special.xlogy(p, p).sum(dim=1).mean()


def diversity_loss(probs: torch.Tensor) -> torch.Tensor:
    """Entropy of the mean prediction; maximal when classes are used evenly."""
    mean = probs.to(torch.float64).mean(dim=0)
    return -torch.special.xlogy(mean, mean).sum()


def _cosine_assign(features: torch.Tensor, centroids: torch.Tensor) -> np.ndarray:
    f = F.normalize(features, dim=1, eps=1e-12)
    c = F.normalize(centroids, dim=1, eps=1e-12)
    sims = (f @ c.t()).cpu().numpy()
    return np.argmax(sims, axis=1)  # ties break to the lower class index


def assign_pseudo_labels(features: torch.Tensor, probs: torch.Tensor, rounds: int = 2) -> np.ndarray:
    """Weighted-centroid init, cosine assignment, then k-means-style refinement.

    Initial centroids are prediction-weighted feature means; each further
    round recomputes centroids as plain means of the current members and
    reassigns. A class left without members keeps its previous centroid.
    """
    if rounds < 1:
        raise ConfigError(f"rounds must be >= 1, got {rounds}")
    feats = features.detach().to(torch.float64)
    w = probs.detach().to(torch.float64)
    centroids = (w.t() @ feats) / w.sum(dim=0).clamp(min=1e-12)[:, None]
    labels = _cosine_assign(feats, centroids)
    for _ in range(rounds - 1):
        for c in range(centroids.shape[0]):
            members = labels == c
            if members.any():
                centroids[c] = feats[torch.from_numpy(members)].mean(dim=0)
        labels = _cosine_assign(feats, centroids)
    return labels


@dataclass
class TargetDetector:
    """Frozen target backbone + adapted detection head."""

    backbone: ClassifierHandle
    head: DetectionHead
    k: int
    adaptation_log: list[dict] = field(default_factory=list)

    def descriptors(self, batch: torch.Tensor) -> torch.Tensor:
        return canonicalize_logits(self.backbone.forward(batch), self.k)

    def detect(self, batch: torch.Tensor) -> torch.Tensor:
        """(N, 2) probabilities; column 0 is p_clean, column 1 is p_adversarial."""
        return detect_descriptors(self.head, self.descriptors(batch))


def detect_descriptors(head: DetectionHead, descriptors: torch.Tensor) -> torch.Tensor:
    head.eval()
    with torch.no_grad():
        return torch.softmax(head(descriptors), dim=1)


def detect(detector: TargetDetector, batch: torch.Tensor) -> torch.Tensor:
    return detector.detect(batch)


# -- stage 1: arbitrary classifier ------------------------------------------


def train_arbitrary_classifier(
    data: tuple[torch.Tensor, np.ndarray],
    cfg: TrainConfig = TrainConfig(),
    dropout_rate: float = 0.25,
) -> ClassifierHandle:
    """Supervised cross-entropy training of a small conv net on labeled images."""
    images, labels = data
    validate_image_batch(images)
    seed_everything(cfg.seed)
    num_classes = int(labels.max()) + 1
    side = images.shape[-1]
    in_channels = images.shape[1]
    arch_kwargs = {
        "in_channels": in_channels,
        "num_classes": num_classes,
        "side": side,
        "dropout_rate": dropout_rate,
    }
    net = SmallConvNet(**arch_kwargs)

    n_val = max(1, int(len(images) * cfg.val_fraction))
    perm = torch.randperm(len(images), generator=torch.Generator().manual_seed(cfg.seed))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    y = torch.from_numpy(np.asarray(labels, dtype=np.int64))

    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    net.train()
    for epoch in range(cfg.epochs):
        order = train_idx[torch.randperm(len(train_idx))]
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(net(images[idx]), y[idx], label_smoothing=cfg.label_smoothing)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged (non-finite) at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        logger.info("classifier epoch %d: train loss %.4f", epoch, total / len(train_idx))

    handle = ClassifierHandle(
        net, num_classes=num_classes, input_side=side, in_channels=in_channels,
        architecture="small_cnn", arch_kwargs=arch_kwargs,
    )
    val_acc = float(np.mean(handle.predict_labels(images[val_idx]) == labels[val_idx.numpy()]))
    logger.info("classifier validation accuracy: %.4f", val_acc)
    if val_acc < cfg.min_val_accuracy:
        raise TrainingError(f"validation accuracy {val_acc:.3f} below floor {cfg.min_val_accuracy}")
    return handle


# -- stages 2+3: detector dataset and source head ----------------------------


def generate_detector_dataset(
    model: ClassifierHandle,
    images: torch.Tensor,
    attack_cfg: AttackConfig,
    k: int = 10,
    only_fooled: bool = False,
) -> tuple[torch.Tensor, np.ndarray]:
    """Descriptors for each clean sample and its attacked counterpart (1:1 balanced)."""
    validate_image_batch(images)
    adversarial = run_attack(model, images, attack_cfg)
    if only_fooled:
        aset = filter_fooling(
            model,
            AdversarialSet(clean=images, adversarial=adversarial, attack_tags=[attack_cfg.kind] * len(images)),
        )
        keep = torch.from_numpy(np.flatnonzero(aset.fooled_mask))
        images, adversarial = images[keep], adversarial[keep]
    desc_clean = canonicalize_logits(model.forward(images), k)
    desc_adv = canonicalize_logits(model.forward(adversarial), k)
    descriptors = torch.cat([desc_clean, desc_adv])
    labels = np.concatenate([np.full(len(desc_clean), CLEAN), np.full(len(desc_adv), ADVERSARIAL)])
    return descriptors, labels


def train_source_head(
    descriptors: torch.Tensor,
    labels: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
    width: int = 128,
) -> DetectionHead:
    """Train the detection head with binary cross-entropy on its 2-way softmax."""
    if len(descriptors) != len(labels):
        raise DataError(f"{len(descriptors)} descriptors vs {len(labels)} labels")
    seed_everything(cfg.seed)
    head = DetectionHead(input_dim=descriptors.shape[1], width=width)
    y = torch.from_numpy(np.asarray(labels, dtype=np.int64))

    n_val = max(1, int(len(descriptors) * cfg.val_fraction))
    perm = torch.randperm(len(descriptors), generator=torch.Generator().manual_seed(cfg.seed))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    opt = torch.optim.Adam(head.parameters(), lr=cfg.learning_rate)
    for epoch in range(cfg.epochs):
        head.train()
        order = train_idx[torch.randperm(len(train_idx))]
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:  # batch-norm needs more than one row in train mode
                continue
            opt.zero_grad()
            probs = torch.softmax(head(descriptors[idx]), dim=1)
            loss = F.binary_cross_entropy(probs, F.one_hot(y[idx], 2).to(probs.dtype))
            if not torch.isfinite(loss):
                raise TrainingError(f"detector loss diverged at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        logger.info("detector epoch %d: train loss %.4f", epoch, total / len(train_idx))

    probs = detect_descriptors(head, descriptors[val_idx])
    val_acc = float((probs.argmax(dim=1) == y[val_idx]).float().mean())
    logger.info("detector held-out accuracy: %.4f", val_acc)
    return head


# -- stage 4: source-free adaptation -----------------------------------------


def _total_loss(
    head: DetectionHead,
    descriptors: torch.Tensor,
    pseudo: torch.Tensor,
    cfg: AdaptationConfig,
) -> float:
    head.eval()
    with torch.no_grad():
        logits = head(descriptors)
        probs = torch.softmax(logits, dim=1)
        loss = (
            entropy_loss(probs)
            - cfg.delta * diversity_loss(probs)
            + cfg.lambda_pl * F.cross_entropy(logits, pseudo)
        )
    return float(loss)


def adapt_target_detector(
    target_model: ClassifierHandle,
    source_head: DetectionHead,
    unlabeled_mix: torch.Tensor,
    cfg: AdaptationConfig = AdaptationConfig(),
) -> TargetDetector:
    """Transductively adapt the source head to the target model's unlabeled mix.

    The target backbone and the head's final classification layer stay
    frozen; everything else fine-tunes under the information-maximization
    plus pseudo-label objective. Descriptors are computed once up front
    (the backbone is frozen and deterministic).
    """
    cfg.validate()
    validate_image_batch(unlabeled_mix)
    if len(unlabeled_mix) < cfg.min_mix_size:
        raise DataError(f"adaptation mix has {len(unlabeled_mix)} samples, need >= {cfg.min_mix_size}")

    k = source_head.input_dim
    descriptors = canonicalize_logits(target_model.forward(unlabeled_mix), k)

    seed_everything(cfg.seed)
    head = copy.deepcopy(source_head)
    detector = TargetDetector(backbone=target_model, head=head, k=k)
    if cfg.epochs == 0:
        return detector

    for p in head.classifier.parameters():
        p.requires_grad_(False)
    trainable = [p for p in head.parameters() if p.requires_grad]
    opt = torch.optim.SGD(trainable, lr=cfg.learning_rate, momentum=cfg.momentum)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)

    n = len(descriptors)
    shuffler = torch.Generator().manual_seed(cfg.seed)
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=shuffler)
        batch_starts = list(range(0, n, cfg.batch_size))
        refresh_at = {batch_starts[int(i * len(batch_starts) / cfg.pseudo_refresh)] for i in range(cfg.pseudo_refresh)}
        pseudo = None
        pre_loss = None
        for start in batch_starts:
            if start in refresh_at:
                head.eval()
                with torch.no_grad():
                    logits, feats = head(descriptors, return_features=True)
                pseudo = torch.from_numpy(
                    assign_pseudo_labels(feats, torch.softmax(logits, dim=1), cfg.pseudo_rounds)
                ).long()
                if pre_loss is None:
                    pre_loss = _total_loss(head, descriptors, pseudo, cfg)
            head.train()
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:  # batch-norm needs more than one row in train mode
                continue
            opt.zero_grad()
            logits = head(descriptors[idx])
            probs = torch.softmax(logits, dim=1)
            loss = (
                entropy_loss(probs)
                - cfg.delta * diversity_loss(probs)
                + cfg.lambda_pl * F.cross_entropy(logits, pseudo[idx])
            )
            if not torch.isfinite(loss):
                raise TrainingError(f"adaptation loss diverged at epoch {epoch}")
            loss.backward()
            opt.step()
        sched.step()
        post_loss = _total_loss(head, descriptors, pseudo, cfg)
        detector.adaptation_log.append({"epoch": epoch, "pre_loss": pre_loss, "post_loss": post_loss})
        logger.info("adaptation epoch %d: loss %.4f -> %.4f", epoch, pre_loss, post_loss)

    head.eval()
    return detector


# -- head persistence ---------------------------------------------------------


def save_head(head: DetectionHead, path: str | Path, source_dataset: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(head.state_dict(), path)
    sidecar = {
        "k": head.input_dim,
        "width": head.width,
        "architecture_hash": head.architecture_hash(),
        "source_dataset": source_dataset,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_head(path: str | Path) -> DetectionHead:
    path = Path(path)
    if not path.exists():
        raise StateError(f"detector checkpoint not found: {path}")
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
        head = DetectionHead(input_dim=meta["k"], width=meta.get("width", 128))
        head.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    except FileNotFoundError as exc:
        raise StateError(f"metadata sidecar not found for {path}") from exc
    except Exception as exc:
        raise DataError(f"cannot load detector head {path}: {exc}") from exc
    head.eval()
    return head
