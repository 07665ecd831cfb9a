import numpy as np

from ..errors import ShapeError


def mse_loss(pred, target):
    """Mean squared error over every element; returns ``(loss, dloss/dpred)``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    count = diff.size
    return float(np.sum(diff * diff) / count), (2.0 / count) * diff
