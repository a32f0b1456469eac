"""Patience-based early stopping shared by classifier and generator training."""

from __future__ import annotations

from typing import Sequence

MIN_DELTA = 1e-6


def early_stop_check(history: Sequence[float], patience: int, min_delta: float = MIN_DELTA) -> bool:
    """True once the best validation loss has gone ``patience`` epochs without
    a strict improvement of at least ``min_delta``."""
    if not history:
        raise ValueError("early_stop_check needs a non-empty history")
    if patience < 1:
        raise ValueError("patience must be >= 1")
    best = history[0]
    best_at = 0
    for i, value in enumerate(history[1:], start=1):
        if value <= best - min_delta:
            best, best_at = value, i
    return len(history) - 1 - best_at >= patience
