import pytest

from mrmf.data import SyntheticTaskSpec, generate_synthetic
from mrmf.nn import build_model
from mrmf.training import PhaseSettings, StopCondition, StagePlan

MINI_LAYERS = [
    {"kind": "conv", "kernel": 3, "stride": 1, "out_channels": 4},
    {"kind": "batchnorm"},
    {"kind": "tanh"},
    {"kind": "flatten"},
    {"kind": "fc", "out_features": 8},
    {"kind": "tanh"},
    {"kind": "fc", "out_features": 3},
]
MINI_SPEC = SyntheticTaskSpec(extents=(16,), channels=2, label_length=3, max_frequency=2, samples=200, seed=4)


def mini_data(samples=200):
    spec = SyntheticTaskSpec(**{**MINI_SPEC.__dict__, "samples": samples})
    train, val, _ = generate_synthetic(spec).split((0.8, 0.1, 0.1))
    return train, val


def mini_model(shape=(16, 2), seed=0):
    return build_model(MINI_LAYERS, shape, seed=seed)


def phase(max_epochs, seed=0, batch_size=16, workers=1, epsilon=1e-9, patience=50, target=None):
    return PhaseSettings(StopCondition(epsilon, patience, max_epochs, target), batch_size=batch_size, seed=seed,
                         workers=workers)


def plan(coarse_factors, dense_factors, coarse_epochs=2, dense_epochs=2, seed=0):
    return StagePlan(coarse_factors, dense_factors, phase(coarse_epochs, seed + 1), phase(dense_epochs, seed + 2))


@pytest.fixture
def mini():
    return mini_data()
