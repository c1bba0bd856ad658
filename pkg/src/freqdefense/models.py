"""Uniform handles over pre-trained classifiers.

A :class:`ClassifierHandle` wraps an arbitrary ``nn.Module`` classifier
and provides the inference surface the defense needs: deterministic
logits, argmax labels with a fixed tie rule, and a stochastic mode in
which only dropout layers sample masks (normalization layers stay in
inference mode). Models without any dropout can have a feature-dropout
layer injected in front of their final classification layer.

Stochastic forwards take explicit per-sample seeds. Models whose dropout
layers are all :class:`SeededDropout` draw each sample's masks from its
own counter-based stream, so batched and single-sample stochastic
inference agree bit-for-bit; models with native ``nn.Dropout`` fall back
to a per-sample loop seeded through the global torch RNG.
"""

from __future__ import annotations

import hashlib
import json
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import CapabilityError, DataError, InputError, StateError
from .seeding import mix_seeds

__all__ = [
    "SeededDropout",
    "SmallConvNet",
    "LinearClassifier",
    "ClassifierHandle",
    "register_architecture",
    "build_architecture",
    "parameter_checksum",
    "validate_image_batch",
]


def validate_image_batch(images: torch.Tensor) -> torch.Tensor:
    """Check the (N, C, H, W) square [0, 1] image contract."""
    if not isinstance(images, torch.Tensor):
        raise InputError(f"expected a torch.Tensor, got {type(images).__name__}")
    if images.ndim != 4:
        raise InputError(f"expected (N, C, H, W) batch, got shape {tuple(images.shape)}")
    if images.shape[-1] != images.shape[-2]:
        raise InputError(f"images must be square, got {images.shape[-2]}x{images.shape[-1]}")
    if images.numel() and (images.min() < 0 or images.max() > 1):
        raise InputError("image values must lie in [0, 1]")
    return images


class SeededDropout(nn.Module):
    """Feature dropout with optional per-sample counter-based mask streams.

    In training mode without seeds it behaves like ``nn.Dropout`` (global
    torch RNG). When per-sample seeds are set, sample ``i``'s mask comes
    from a Philox stream keyed by (seed_i, layer_key), making the mask
    independent of batch composition.
    """

    def __init__(self, p: float = 0.25):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise InputError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p
        self.layer_key = 0  # assigned by the owning handle; disambiguates multiple layers
        self._seeds: np.ndarray | None = None

    def set_seeds(self, seeds: np.ndarray | None) -> None:
        self._seeds = None if seeds is None else np.asarray(seeds, dtype=np.uint64)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.p == 0.0:
            return x
        if self._seeds is None:
            mask = (torch.rand_like(x) >= self.p).to(x.dtype)
        else:
            if len(self._seeds) != x.shape[0]:
                raise StateError(f"{len(self._seeds)} seeds set for batch of {x.shape[0]}")
            rows = []
            shape = x.shape[1:]
            for seed in self._seeds:
                rng = np.random.Generator(np.random.Philox(key=mix_seeds(int(seed), self.layer_key)))
                rows.append(rng.random(shape) >= self.p)
            mask = torch.from_numpy(np.stack(rows)).to(x.dtype)
        return x * mask / (1.0 - self.p)

    def extra_repr(self) -> str:
        return f"p={self.p}"


class SmallConvNet(nn.Module):
    """Compact conv classifier for desk-scale experiments.

    Two conv/BN/pool blocks, one hidden fc layer, seeded feature dropout
    before the classification layer (so the net is stochastic-capable).
    """

    def __init__(self, in_channels: int = 1, num_classes: int = 10, side: int = 32, dropout_rate: float = 0.25):
        super().__init__()
        if side % 4 != 0:
            raise InputError(f"side must be divisible by 4, got {side}")
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 16, 3, padding=1),
            nn.BatchNorm2d(16),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.BatchNorm2d(32),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        self.hidden = nn.Linear(32 * (side // 4) ** 2, 128)
        self.dropout = SeededDropout(dropout_rate)
        self.classifier = nn.Linear(128, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x).flatten(1)
        h = torch.relu(self.hidden(h))
        return self.classifier(self.dropout(h))


class MlpClassifier(nn.Module):
    """Flatten + two fc layers; deliberately low-margin under attack."""

    def __init__(self, in_channels: int = 1, num_classes: int = 10, side: int = 32, hidden: int = 256, dropout_rate: float = 0.25):
        super().__init__()
        self.hidden = nn.Linear(in_channels * side * side, hidden)
        self.dropout = SeededDropout(dropout_rate)
        self.classifier = nn.Linear(hidden, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.hidden(x.flatten(1)))
        return self.classifier(self.dropout(h))


class LinearClassifier(nn.Module):
    """Single linear layer over flattened pixels; used for oracle checks."""

    def __init__(self, in_channels: int = 1, num_classes: int = 2, side: int = 4, bias: bool = True):
        super().__init__()
        self.linear = nn.Linear(in_channels * side * side, num_classes, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear(x.flatten(1))


_ARCHITECTURES: dict[str, Callable[..., nn.Module]] = {
    "small_cnn": SmallConvNet,
    "mlp": MlpClassifier,
    "linear": LinearClassifier,
}


def register_architecture(name: str, factory: Callable[..., nn.Module]) -> None:
    _ARCHITECTURES[name] = factory


def build_architecture(name: str, kwargs: dict) -> nn.Module:
    if name not in _ARCHITECTURES:
        raise DataError(f"unknown architecture {name!r}; known: {sorted(_ARCHITECTURES)}")
    return _ARCHITECTURES[name](**kwargs)


def _dropout_modules(module: nn.Module) -> list[nn.Module]:
    kinds = (nn.Dropout, nn.Dropout1d, nn.Dropout2d, nn.Dropout3d, SeededDropout)
    return [m for m in module.modules() if isinstance(m, kinds)]


def _last_linear(module: nn.Module) -> nn.Module:
    linears = [m for m in module.modules() if isinstance(m, nn.Linear)]
    if not linears:
        raise CapabilityError("cannot inject dropout: model has no linear classification layer")
    return linears[-1]


def parameter_checksum(module: nn.Module) -> str:
    """Stable sha256 over all parameters and buffers (detects any mutation)."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


class ClassifierHandle:
    """Inference facade over a classifier network.

    Forwards are serialized through a per-handle lock, so a handle can be
    shared across threads; toggling stochastic mode is exclusive with
    in-flight inference by the same mechanism.
    """

    def __init__(
        self,
        module: nn.Module,
        num_classes: int,
        input_side: int,
        in_channels: int = 1,
        architecture: str = "custom",
        arch_kwargs: dict | None = None,
        inject_dropout: float | None = None,
    ):
        module.eval()
        self.module = module
        self.num_classes = num_classes
        self.input_side = input_side
        self.in_channels = in_channels
        self.architecture = architecture
        self.arch_kwargs = dict(arch_kwargs or {})
        self.injected_dropout_rate = None
        self._lock = threading.RLock()
        self._stochastic = False

        if inject_dropout is not None and not _dropout_modules(module):
            self._injected = SeededDropout(inject_dropout)
            self._injected.eval()
            self.injected_dropout_rate = inject_dropout
            target = _last_linear(module)
            target.register_forward_pre_hook(lambda mod, args: (self._injected(args[0]),))
        else:
            self._injected = None
        self._dropouts = _dropout_modules(module) + ([self._injected] if self._injected else [])
        for key, layer in enumerate(self._dropouts):
            if isinstance(layer, SeededDropout):
                layer.layer_key = key

    # -- capabilities ------------------------------------------------------

    @property
    def stochastic_capable(self) -> bool:
        return bool(self._dropouts)

    @property
    def stochastic_enabled(self) -> bool:
        return self._stochastic

    def _all_seeded(self) -> bool:
        return all(isinstance(m, SeededDropout) for m in self._dropouts)

    # -- mode control ------------------------------------------------------

    def set_stochastic_mode(self, enabled: bool) -> None:
        """Enable/disable dropout sampling; all other layers stay in eval mode."""
        with self._lock:
            if enabled and not self.stochastic_capable:
                raise CapabilityError(
                    "model has no dropout layer; construct the handle with "
                    "inject_dropout=<rate> to enable stochastic inference"
                )
            self.module.eval()
            if self._injected is not None:
                self._injected.eval()
            if enabled:
                for layer in self._dropouts:
                    layer.train()
            self._stochastic = enabled

    @contextmanager
    def stochastic_mode(self):
        """Temporarily enable stochastic inference."""
        previous = self._stochastic
        self.set_stochastic_mode(True)
        try:
            yield self
        finally:
            self.set_stochastic_mode(previous)

    # -- inference ---------------------------------------------------------

    def _check_batch(self, batch: torch.Tensor) -> None:
        validate_image_batch(batch)
        if batch.shape[-1] != self.input_side:
            raise InputError(f"batch side {batch.shape[-1]} != model input side {self.input_side}")
        if batch.shape[1] != self.in_channels:
            raise InputError(f"batch has {batch.shape[1]} channels, model expects {self.in_channels}")

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        """Logits (N, num_classes); deterministic whenever stochastic mode is off."""
        self._check_batch(batch)
        with self._lock, torch.no_grad():
            return self.module(batch)

    def forward_grad(self, batch: torch.Tensor) -> torch.Tensor:
        """Differentiable forward (dropout inactive); used by attack generation."""
        if batch.shape[-1] != self.input_side:
            raise InputError(f"batch side {batch.shape[-1]} != model input side {self.input_side}")
        with self._lock:
            was_stochastic = self._stochastic
            if was_stochastic:
                self.set_stochastic_mode(False)
            try:
                return self.module(batch)
            finally:
                if was_stochastic:
                    self.set_stochastic_mode(True)

    def predict_labels(self, batch: torch.Tensor) -> np.ndarray:
        """Argmax labels; ties always break to the lowest class index."""
        logits = self.forward(batch)
        return np.argmax(logits.detach().cpu().numpy(), axis=1)

    def stochastic_forward(self, batch: torch.Tensor, seeds: np.ndarray) -> torch.Tensor:
        """One dropout-sampling forward; sample i's masks derive from seeds[i]."""
        self._check_batch(batch)
        seeds = np.asarray(seeds, dtype=np.uint64)
        if len(seeds) != batch.shape[0]:
            raise InputError(f"{len(seeds)} seeds for batch of {batch.shape[0]}")
        with self._lock:
            if not self._stochastic:
                raise StateError("stochastic mode is off; call set_stochastic_mode(True) first")
            with torch.no_grad():
                if self._all_seeded():
                    for layer in self._dropouts:
                        layer.set_seeds(seeds)
                    try:
                        return self.module(batch)
                    finally:
                        for layer in self._dropouts:
                            layer.set_seeds(None)
                # Native nn.Dropout: per-sample loop through the global RNG.
                outs = []
                for i, seed in enumerate(seeds):
                    torch.manual_seed(mix_seeds(int(seed)) % 2**63)
                    outs.append(self.module(batch[i : i + 1]))
                return torch.cat(outs)

    def stochastic_predict(self, batch: torch.Tensor, seeds: np.ndarray) -> np.ndarray:
        logits = self.stochastic_forward(batch, seeds)
        return np.argmax(logits.detach().cpu().numpy(), axis=1)

    # -- persistence -------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        """Write weights to ``path`` and a JSON metadata sidecar next to it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.module.state_dict(), path)
        sidecar = {
            "architecture": self.architecture,
            "arch_kwargs": self.arch_kwargs,
            "num_classes": self.num_classes,
            "input_side": self.input_side,
            "in_channels": self.in_channels,
            "stochastic_capable": self.stochastic_capable,
            "injected_dropout": self.injected_dropout_rate,
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load_checkpoint(cls, path: str | Path) -> "ClassifierHandle":
        path = Path(path)
        sidecar_path = path.with_suffix(".json")
        if not path.exists():
            raise StateError(f"checkpoint not found: {path}")
        if not sidecar_path.exists():
            raise StateError(f"metadata sidecar not found: {sidecar_path}")
        try:
            meta = json.loads(sidecar_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"corrupt metadata sidecar {sidecar_path}: {exc}") from exc
        module = build_architecture(meta["architecture"], meta.get("arch_kwargs", {}))
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
            module.load_state_dict(state)
        except Exception as exc:
            raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
        return cls(
            module,
            num_classes=meta["num_classes"],
            input_side=meta["input_side"],
            in_channels=meta.get("in_channels", 1),
            architecture=meta["architecture"],
            arch_kwargs=meta.get("arch_kwargs", {}),
            # Legacy sidecars without the flag load as deterministic-only.
            inject_dropout=meta.get("injected_dropout") if meta.get("stochastic_capable", False) else None,
        )
