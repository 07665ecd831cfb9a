"""Plateau/epoch-cap stop rule for a training phase."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class StopCondition:
    """Plateau rule on the training loss plus a hard epoch cap.

    Training stops once the epoch-to-epoch loss reduction has stayed below
    ``epsilon`` for ``patience`` consecutive epochs (increases count as below
    threshold), or after ``max_epochs`` epochs. ``target_loss`` additionally
    stops as soon as the validation loss reaches it.
    """

    epsilon: float
    patience: int
    max_epochs: int
    target_loss: float | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.target_loss is not None and not self.target_loss > 0:
            raise ValueError("target_loss must be > 0")


def should_stop(history, cond: StopCondition) -> bool:
    if len(history) >= cond.max_epochs:
        return True
    if len(history) < cond.patience + 1:
        return False
    tail = history[-(cond.patience + 1):]
    return all(prev - cur < cond.epsilon for prev, cur in zip(tail[:-1], tail[1:]))


def reached_target(val_loss: float, cond: StopCondition) -> bool:
    return cond.target_loss is not None and val_loss <= cond.target_loss
