"""Importance-weight capping rules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

MODES = ("max", "zero")


@dataclass(frozen=True)
class CappingRule:
    """``min(w, c)`` in max mode, ``w * [w < c]`` in zero mode."""

    mode: str
    c: float

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"capping mode must be one of {MODES}, got {self.mode!r}")
        if not self.c > 0:
            raise ValidationError(f"capping value must be positive, got {self.c}")
        object.__setattr__(self, "c", float(self.c))

    def apply(self, w):
        return capped_weights(w, self.mode, self.c)

    def ratio(self, log_w):
        return capped_ratio(log_w, self.mode, self.c)


def capped_weights(w, mode: str, c):
    w = np.asarray(w, dtype=np.float64)
    if mode == "max":
        return np.minimum(w, c)
    return np.where(w < c, w, 0.0)


def capped_ratio(log_w, mode: str, c):
    """``capped(w) / w`` in [0, 1], computed from log-weights."""
    log_w = np.asarray(log_w, dtype=np.float64)
    log_c = np.log(c)
    if mode == "max":
        return np.exp(np.minimum(0.0, log_c - log_w))
    return (log_w < log_c).astype(np.float64)


def is_capped(w, mode: str, c):
    w = np.asarray(w, dtype=np.float64)
    return w > c if mode == "max" else w >= c
