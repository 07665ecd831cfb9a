"""Smooth synthetic regression tasks standing in for continuous scientific data.

Each label entry ``l_k`` in [0, 1] sets the amplitude
``a_k = lo + l_k * (hi - lo)`` of a fixed basis field ``B_k``; a sample is
``sum_k a_k B_k / sqrt(m)``. Every basis field is, per channel, a sum of
low-frequency sinusoids whose integer frequencies, phases and weights are drawn
once from the task seed. Learning the labels from samples is therefore a
parameter-inversion problem, and the labels of any stored sample can be
recovered exactly by least squares against the basis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from .dataset import Dataset

_MAX_CONDITION = 1e6


@dataclass(frozen=True)
class SyntheticTaskSpec:
    extents: tuple
    channels: int
    label_length: int
    components: int = 2
    max_frequency: int = 2
    amplitude: tuple = (-1.0, 1.0)
    seed: int = 0
    samples: int = 256
    split: tuple = (0.8, 0.1, 0.1)

    def validate(self) -> None:
        ext = tuple(self.extents)
        if not 1 <= len(ext) <= 3 or min(ext) < 1:
            raise DataError(f"extents must have 1-3 positive entries, got {ext}")
        if self.channels < 1 or self.label_length < 1 or self.components < 1 or self.samples < 1:
            raise DataError("channels, label_length, components and samples must be >= 1")
        if self.max_frequency < 1:
            raise DataError("max_frequency must be >= 1")
        if self.max_frequency > min(ext) / 8:
            raise DataError(
                f"max_frequency {self.max_frequency} exceeds extent/8 = {min(ext) / 8:g}; "
                "coarse resolutions would lose too much signal"
            )
        if self.label_length > math.prod(ext) * self.channels:
            raise DataError("label_length exceeds the number of sample values; labels would be unrecoverable")
        lo, hi = self.amplitude
        if not hi > lo:
            raise DataError("amplitude range must satisfy lo < hi")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise DataError(f"split fractions must be three non-negative values summing to 1, got {self.split}")

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.extents) + (self.channels,)


def _grid(extents):
    axes = [np.arange(n, dtype=np.float64) / n for n in extents]
    return np.meshgrid(*axes, indexing="ij")


def basis(spec: SyntheticTaskSpec) -> np.ndarray:
    """The ``(m, L_1..L_D, C)`` basis fields, each with unit mean square."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    grid = _grid(spec.extents)
    dims = len(spec.extents)
    # Redraw (deterministically) until the basis is well conditioned.
    for _ in range(100):
        fields = np.zeros((spec.label_length,) + spec.sample_shape)
        for k in range(spec.label_length):
            for c in range(spec.channels):
                for _ in range(spec.components):
                    freq = rng.integers(0, spec.max_frequency + 1, size=dims)
                    if not freq.any():
                        freq[rng.integers(0, dims)] = 1
                    phase = rng.uniform(0.0, 2.0 * np.pi)
                    weight = rng.uniform(0.5, 1.0)
                    arg = sum(f * g for f, g in zip(freq, grid))
                    fields[k, ..., c] += weight * np.sin(2.0 * np.pi * arg + phase)
            fields[k] /= np.sqrt(np.mean(fields[k] ** 2))
        mat = fields.reshape(spec.label_length, -1)
        if np.linalg.cond(mat) < _MAX_CONDITION:
            return fields
    raise DataError("could not draw a well-conditioned basis; increase extents or lower label_length")


def generate_synthetic(spec: SyntheticTaskSpec) -> Dataset:
    fields = basis(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    labels = rng.uniform(0.0, 1.0, size=(spec.samples, spec.label_length))
    lo, hi = spec.amplitude
    amps = lo + labels * (hi - lo)
    mat = fields.reshape(spec.label_length, -1)
    samples = (amps @ mat) / math.sqrt(spec.label_length)
    return Dataset(samples.reshape((spec.samples,) + spec.sample_shape), labels)


def recover_labels(spec: SyntheticTaskSpec, samples) -> np.ndarray:
    """Invert the generating map for samples at original resolution."""
    mat = basis(spec).reshape(spec.label_length, -1)
    flat = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1) * math.sqrt(spec.label_length)
    amps = np.linalg.lstsq(mat.T, flat.T, rcond=None)[0].T
    lo, hi = spec.amplitude
    return (amps - lo) / (hi - lo)


def split_dataset(data: Dataset, spec: SyntheticTaskSpec):
    """Train/validation/test parts in sample order (samples are already i.i.d.)."""
    return data.split(spec.split)
