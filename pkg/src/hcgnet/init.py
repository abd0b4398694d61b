"""Seeded parameter initialization."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def fan_out_normal(shape: tuple[int, int, int, int], rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Zero-mean Gaussian with std ``sqrt(2 / fan_out)``, fan_out = C_out * kh * kw."""
    fan_out = shape[0] * shape[2] * shape[3]
    std = np.sqrt(2.0 / fan_out)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype))


def zeros(channels: int, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros((1, channels, 1, 1), dtype=dtype))
