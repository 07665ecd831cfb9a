"""Block-average resolution reduction of channel-last samples."""

from __future__ import annotations

import math

import numpy as np

from ..errors import DataError, DivisibilityError
from ..nn.layers import window_mean
from .dataset import Dataset


def check_factors(spatial_extents, factors) -> tuple:
    """Validate per-spatial-axis factors; the channel axis is never reduced."""
    factors = tuple(int(k) for k in factors)
    if len(factors) != len(spatial_extents):
        raise DataError(f"need {len(spatial_extents)} factors (one per spatial axis), got {len(factors)}")
    for axis, (n, k) in enumerate(zip(spatial_extents, factors)):
        if k < 1:
            raise DataError(f"spatial axis {axis}: factor must be >= 1, got {k}")
        if n % k:
            raise DivisibilityError(axis, n, k)
    return factors


def reduced_shape(sample_shape, factors) -> tuple:
    factors = check_factors(sample_shape[:-1], factors)
    return tuple(n // k for n, k in zip(sample_shape[:-1], factors)) + (sample_shape[-1],)


def downsample(sample, factors):
    """Replace each ``k_1 x ... x k_D`` block of a ``(L_1..L_D, C)`` sample by its per-channel mean."""
    sample = np.asarray(sample, dtype=np.float64)
    factors = check_factors(sample.shape[:-1], factors)
    if all(k == 1 for k in factors):
        return sample.copy()
    return window_mean(sample, factors, factors, 0)


def downsample_batch(samples, factors):
    samples = np.asarray(samples, dtype=np.float64)
    factors = check_factors(samples.shape[1:-1], factors)
    if all(k == 1 for k in factors):
        return samples.copy()
    return window_mean(samples, factors, factors, 1)


def downsample_dataset(data: Dataset, factors) -> Dataset:
    """Downsample every sample; labels are copied unchanged and the tag composes."""
    factors = check_factors(data.sample_shape[:-1], factors)
    tag = tuple(a * b for a, b in zip(data.resolution_tag, factors))
    return Dataset(downsample_batch(data.samples, factors), data.labels.copy(), tag)


def size_ratio(factors) -> float:
    return 1.0 / math.prod(factors)
