from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError


@dataclass
class Dataset:
    """``samples`` is ``(N, L_1..L_D, C)`` and ``labels`` is ``(N, m)``, both float64.

    ``resolution_tag`` holds the per-spatial-axis reduction factors relative to
    the original data.
    """

    samples: np.ndarray
    labels: np.ndarray
    resolution_tag: tuple = field(default=None)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.samples.ndim < 3 or self.samples.ndim > 5:
            raise DataError(f"samples must be (N, spatial..., C) with 1-3 spatial axes, got {self.samples.shape}")
        if self.labels.ndim != 2:
            raise DataError(f"labels must be (N, m), got {self.labels.shape}")
        if len(self.samples) < 1 or len(self.samples) != len(self.labels):
            raise DataError(f"need N >= 1 samples with one label each (got {len(self.samples)} / {len(self.labels)})")
        if self.labels.shape[1] < 1 or min(self.samples.shape) < 1:
            raise DataError("label length and all extents must be >= 1")
        if self.resolution_tag is None:
            self.resolution_tag = (1,) * self.spatial_dims
        self.resolution_tag = tuple(int(k) for k in self.resolution_tag)
        if len(self.resolution_tag) != self.spatial_dims:
            raise DataError("resolution tag needs one factor per spatial axis")

    def __len__(self):
        return len(self.samples)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.samples.shape[1:])

    @property
    def spatial_dims(self) -> int:
        return self.samples.ndim - 2

    @property
    def channels(self) -> int:
        return self.samples.shape[-1]

    @property
    def label_length(self) -> int:
        return self.labels.shape[1]

    def subset(self, index) -> "Dataset":
        return Dataset(self.samples[index], self.labels[index], self.resolution_tag)

    def split(self, fractions) -> list["Dataset"]:
        """Contiguous split by fractions (which must sum to 1); empty parts are omitted as None."""
        fractions = [float(f) for f in fractions]
        if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise DataError(f"split fractions must be non-negative and sum to 1, got {fractions}")
        bounds = np.rint(np.cumsum([0.0] + fractions) * len(self)).astype(int)
        bounds[-1] = len(self)
        return [self.subset(slice(a, b)) if b > a else None for a, b in zip(bounds[:-1], bounds[1:])]

    def equals(self, other: "Dataset") -> bool:
        return (
            self.samples.shape == other.samples.shape
            and self.labels.shape == other.labels.shape
            and np.array_equal(self.samples, other.samples)
            and np.array_equal(self.labels, other.labels)
        )
