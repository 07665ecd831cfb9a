"""Datasets, block-average resolution reduction and the ``.mrd`` container."""

from .dataset import Dataset
from .mrd import decode_dataset, encode_dataset, read_dataset, write_dataset
from .resolution import check_factors, downsample, downsample_batch, downsample_dataset, reduced_shape
from .synthetic import SyntheticTaskSpec, basis, generate_synthetic, recover_labels

__all__ = [
    "Dataset", "decode_dataset", "encode_dataset", "read_dataset", "write_dataset",
    "check_factors", "downsample", "downsample_batch", "downsample_dataset", "reduced_shape",
    "SyntheticTaskSpec", "basis", "generate_synthetic", "recover_labels",
]
