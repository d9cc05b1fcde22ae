"""Occlusion-rate arithmetic and the three-level bucketing rule."""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ResampleSignal

LEVELS = ("low", "mid", "high")


def occlusion_rate(full_mask: np.ndarray, visible_mask: np.ndarray) -> float:
    """Fraction of an instance's full extent hidden by nearer instances.

    Defined as 1 - |visible| / |full|. `visible_mask` must be a subset of
    `full_mask` and `full_mask` must be non-empty.
    """
    full = int(np.count_nonzero(full_mask))
    if full == 0:
        raise DomainError("occlusion_rate: empty full mask")
    visible = int(np.count_nonzero(visible_mask))
    if np.any(np.asarray(visible_mask, bool) & ~np.asarray(full_mask, bool)):
        raise DomainError("occlusion_rate: visible mask not contained in full mask")
    return 1.0 - visible / full


def bucket(rate: float) -> str:
    """Map an occlusion rate to low / mid / high.

    0 is low; (0, 0.5] is mid; (0.5, 1] is high. The 0.5 boundary falls in
    mid, so rates that straddle the threshold land in the softer bucket.
    """
    if not 0.0 <= rate <= 1.0:
        raise DomainError(f"occlusion rate {rate} outside [0, 1]")
    if rate == 0.0:
        return "low"
    if rate <= 0.5:
        return "mid"
    return "high"


def image_occlusion_level(rates) -> tuple[str, float]:
    """Per-image level: the bucket of the highest instance occlusion rate."""
    rates = list(rates)
    if not rates:
        raise ResampleSignal("no retained instances to derive an image level from")
    max_rate = max(rates)
    return bucket(max_rate), max_rate
