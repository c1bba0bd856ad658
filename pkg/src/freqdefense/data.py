"""Dataset ingestion and deterministic synthetic desk-scale datasets.

Two procedurally rendered grayscale datasets support the reference
experiments without any external downloads:

* ``digits`` — ten digit glyphs rendered from a 5x7 bitmap font with
  random placement, affine jitter, blur, contrast, and pixel noise. The
  low rendering contrast is deliberate: it keeps the classification task
  easy while leaving decision margins thin enough for small l-inf
  perturbations to flip predictions, mirroring the fragility of
  full-scale models.
* ``apparel`` — ten clothing-like silhouettes (shirts, trousers, shoes,
  bags, ...) with jittered proportions, used as the *arbitrary* dataset:
  a labeled source unrelated to the protected model's data.

``ingest_dataset`` also reads directories of image files organized as
one subdirectory per class; corrupted files are skipped with a warning.
"""

from __future__ import annotations

import hashlib
import logging
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .errors import DataError

logger = logging.getLogger(__name__)

__all__ = ["make_digits", "make_apparel", "ingest_dataset", "SYNTHETIC_DATASETS"]

_DIGIT_FONT = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}

# Rendering constants shared by both generators. Foreground amplitude is
# kept low relative to full range so the default 8/255 attack budget is a
# meaningful fraction of the signal.
_AMPLITUDE_RANGE = (0.28, 0.40)
_BACKGROUND = 0.35
_NOISE_SIGMA = 0.035
_BLUR_RANGE = (0.5, 1.1)


def _glyph_canvas(glyph: np.ndarray, side: int, rng: np.random.Generator) -> np.ndarray:
    # Upscale the 5x7 bitmap so the glyph fills roughly two thirds of the canvas.
    scale = max(1, (2 * side) // (3 * glyph.shape[0]))
    art = np.kron(glyph, np.ones((scale, scale), dtype=np.float64))
    canvas = np.zeros((side, side), dtype=np.float64)
    max_dy = side - art.shape[0]
    max_dx = side - art.shape[1]
    dy = rng.integers(max_dy // 2 - 2, max_dy // 2 + 3)
    dx = rng.integers(max_dx // 2 - 2, max_dx // 2 + 3)
    canvas[dy : dy + art.shape[0], dx : dx + art.shape[1]] = art
    return canvas


def _jitter(canvas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    side = canvas.shape[0]
    angle = np.deg2rad(rng.uniform(-12, 12))
    scale = rng.uniform(0.88, 1.12)
    cos, sin = np.cos(angle) / scale, np.sin(angle) / scale
    matrix = np.array([[cos, -sin], [sin, cos]])
    center = (side - 1) / 2
    offset = np.array([center, center]) - matrix @ np.array([center, center])
    return ndimage.affine_transform(canvas, matrix, offset=offset, order=1, mode="constant")


def _finish(canvas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    canvas = _jitter(canvas, rng)
    canvas = ndimage.gaussian_filter(canvas, sigma=rng.uniform(*_BLUR_RANGE))
    amplitude = rng.uniform(*_AMPLITUDE_RANGE)
    image = _BACKGROUND + amplitude * canvas
    image = image + rng.normal(0.0, _NOISE_SIGMA, canvas.shape)
    return np.clip(image, 0.0, 1.0)


def make_digits(n: int, seed: int = 0, side: int = 32) -> tuple[torch.Tensor, np.ndarray]:
    """Render ``n`` labeled digit images of shape (n, 1, side, side) in [0, 1]."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    images = np.empty((n, 1, side, side), dtype=np.float32)
    for i, label in enumerate(labels):
        glyph = np.array([[float(c) for c in row] for row in _DIGIT_FONT[int(label)]])
        images[i, 0] = _finish(_glyph_canvas(glyph, side, rng), rng)
    return torch.from_numpy(images), labels.astype(np.int64)


def _apparel_masks(side: int, rng: np.random.Generator) -> list[np.ndarray]:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) / (side - 1)
    j = lambda lo, hi: rng.uniform(lo, hi)  # noqa: E731 - local jitter shorthand

    def box(y0, y1, x0, x1):
        return (yy >= y0) & (yy <= y1) & (xx >= x0) & (xx <= x1)

    def ellipse(cy, cx, ry, rx):
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0

    torso = box(j(0.20, 0.28), j(0.78, 0.88), j(0.30, 0.36), j(0.64, 0.70))
    shapes = [
        # 0 tshirt: torso + short sleeves
        torso | box(0.24, j(0.40, 0.48), 0.10, 0.90),
        # 1 trouser: waist + two legs
        box(0.15, 0.28, 0.30, 0.70) | box(0.28, 0.88, 0.30, j(0.42, 0.47)) | box(0.28, 0.88, j(0.53, 0.58), 0.70),
        # 2 pullover: torso + full-length sleeves
        torso | box(0.24, j(0.78, 0.86), 0.08, 0.24) | box(0.24, j(0.78, 0.86), 0.76, 0.92),
        # 3 dress: narrow top widening downward
        (yy >= 0.15) & (yy <= 0.90) & (np.abs(xx - 0.5) <= 0.08 + j(0.30, 0.40) * (yy - 0.15)),
        # 4 coat: wide torso, sleeves, open-front gap
        (torso | box(0.22, 0.84, 0.10, 0.26) | box(0.22, 0.84, 0.74, 0.90)) & ~box(0.30, 0.88, 0.47, 0.53),
        # 5 sandal: sole + straps
        box(j(0.68, 0.74), 0.85, 0.10, 0.90) | box(0.40, 0.46, 0.15, 0.85) | box(0.54, 0.60, 0.10, 0.90),
        # 6 shirt: torso + sleeves + collar notch
        (torso | box(0.24, j(0.55, 0.65), 0.10, 0.90)) & ~ellipse(0.20, 0.50, 0.10, j(0.09, 0.13)),
        # 7 sneaker: low wedge with toe
        (box(0.55, 0.80, 0.08, 0.92) & (yy >= 0.80 - j(0.28, 0.36) * (1.0 - xx))) | ellipse(0.76, 0.20, 0.10, 0.16),
        # 8 bag: body + handle arc
        box(j(0.38, 0.46), 0.85, 0.18, 0.82)
        | (ellipse(0.42, 0.50, j(0.22, 0.28), 0.24) & ~ellipse(0.42, 0.50, 0.16, 0.17) & (yy <= 0.42)),
        # 9 boot: shaft + foot
        box(0.12, 0.82, j(0.30, 0.38), 0.60) | box(j(0.62, 0.68), 0.82, 0.30, 0.88),
    ]
    return [s.astype(np.float64) for s in shapes]


def make_apparel(n: int, seed: int = 0, side: int = 32) -> tuple[torch.Tensor, np.ndarray]:
    """Render ``n`` labeled clothing-silhouette images, same format as ``make_digits``."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    images = np.empty((n, 1, side, side), dtype=np.float32)
    for i, label in enumerate(labels):
        canvas = _apparel_masks(side, rng)[int(label)]
        images[i, 0] = _finish(canvas, rng)
    return torch.from_numpy(images), labels.astype(np.int64)


SYNTHETIC_DATASETS = {"digits": make_digits, "apparel": make_apparel}


def _load_image_dir(root: Path, side: int, channels: int) -> tuple[torch.Tensor, np.ndarray, dict]:
    from PIL import Image, UnidentifiedImageError

    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"{root} has no class subdirectories")
    images, labels, checksums = [], [], {}
    skipped = 0
    for class_idx, class_dir in enumerate(class_dirs):
        for path in sorted(class_dir.iterdir()):
            if not path.is_file():
                continue
            try:
                with Image.open(path) as img:
                    img = img.convert("L" if channels == 1 else "RGB").resize((side, side))
                    arr = np.asarray(img, dtype=np.float32) / 255.0
            except (OSError, UnidentifiedImageError) as exc:
                logger.warning("skipping unreadable image %s: %s", path, exc)
                skipped += 1
                continue
            if channels == 1:
                arr = arr[None]
            else:
                arr = arr.transpose(2, 0, 1)
            images.append(arr)
            labels.append(class_idx)
            checksums[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
    if not images:
        raise DataError(f"no readable images under {root}")
    manifest = {
        "source": str(root),
        "classes": [d.name for d in class_dirs],
        "skipped": skipped,
        "checksums": checksums,
    }
    return torch.from_numpy(np.stack(images)), np.asarray(labels, dtype=np.int64), manifest


def ingest_dataset(
    source: str | Path,
    n: int = 1000,
    seed: int = 0,
    side: int = 32,
    channels: int = 1,
) -> tuple[torch.Tensor, np.ndarray, dict]:
    """Load a synthetic dataset by id or a directory of class-subfolder images.

    Returns (images in [0, 1] at the requested side, integer labels,
    provenance manifest).
    """
    if isinstance(source, str) and source in SYNTHETIC_DATASETS:
        images, labels = SYNTHETIC_DATASETS[source](n, seed=seed, side=side)
        manifest = {"source": source, "n": n, "seed": seed, "side": side, "synthetic": True}
        return images, labels, manifest
    root = Path(source)
    if not root.is_dir():
        raise DataError(f"unknown dataset id or missing directory: {source}")
    return _load_image_dir(root, side, channels)
