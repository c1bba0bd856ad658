"""Deterministic seed derivation.

All stochastic components draw from explicit integer seeds so that runs
reproduce bit-for-bit. ``mix_seeds`` derives child seeds from a parent
seed plus arbitrary integer keys via a splitmix64 chain; the same keys
always yield the same child, independent of platform or call order.
"""

from __future__ import annotations

import random

import numpy as np
import torch

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = (z + _GAMMA) & _MASK
    z = ((z ^ (z >> np.uint64(30))) * _M1) & _MASK
    z = ((z ^ (z >> np.uint64(27))) * _M2) & _MASK
    return z ^ (z >> np.uint64(31))


def mix_seeds(*keys: int | np.ndarray) -> np.ndarray | int:
    """Hash one or more integer keys into a 64-bit seed.

    Array keys broadcast elementwise, so ``mix_seeds(base, np.arange(n))``
    yields one child seed per index. Returns a python int for all-scalar
    inputs, else a uint64 array.
    """
    with np.errstate(over="ignore"):
        state = np.uint64(0)
        for key in keys:
            arr = np.asarray(key, dtype=np.uint64)
            state = _splitmix64(state ^ arr)
    if isinstance(state, np.uint64) or state.ndim == 0:
        return int(state)
    return state


def per_sample_seeds(base_seed: int, n: int, *keys: int) -> np.ndarray:
    """Derive one uint64 seed per sample index from a base seed."""
    return np.asarray(mix_seeds(base_seed, *keys, np.arange(n, dtype=np.uint64)))


def seed_everything(seed: int) -> None:
    """Seed python, numpy, and torch global RNGs."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
