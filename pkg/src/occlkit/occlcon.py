"""Occlusion-level contrastive objective with a dual margin.

A batch of unit-norm embeddings with occlusion-level labels is scored by a
cosine-similarity triplet loss: same-level pairs pay 1 - Sim, cross-level
pairs pay a hinge max(0, Sim - tau) where tau depends on which levels the
pair spans (the strict margin for low-high pairs, the softer one for pairs
involving mid). The joint objective adds this, weighted, to the
segmentation loss.

This module is numpy-only and carries hand-derived gradients so the trainer
implementation can be checked against finite differences independently of
any autograd framework.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, TrainingAbort, ValidationError
from .occlevel import LEVELS

NORM_TOL = 1e-6
_EPS = 1e-12


@dataclass(frozen=True)
class MarginConfig:
    tau_lh: float = 0.4
    tau_m: float = 0.6
    lambda_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.tau_lh < 1.0 or not 0.0 < self.tau_m < 1.0:
            raise ConfigurationError("margins must lie in (0, 1)")
        if self.tau_lh > self.tau_m:
            raise ConfigurationError(
                f"tau_lh ({self.tau_lh}) must not exceed tau_m ({self.tau_m})")
        if self.lambda_weight < 0:
            raise ConfigurationError("lambda_weight must be >= 0")


@dataclass
class EmbeddingBatch:
    z: np.ndarray                # B x D, unit rows
    labels: np.ndarray           # B occlusion levels (strings)

    def validate(self) -> None:
        if self.z.ndim != 2 or self.z.shape[0] != len(self.labels):
            raise ValidationError("embedding/label shapes disagree")
        norms = np.linalg.norm(self.z, axis=1)
        if np.any(np.abs(norms - 1.0) > NORM_TOL):
            raise ValidationError(
                f"non-unit embedding rows (max |norm-1| = "
                f"{np.abs(norms - 1.0).max():.2e})")
        unknown = set(np.asarray(self.labels).tolist()) - set(LEVELS)
        if unknown:
            raise ValidationError(f"unknown occlusion labels {sorted(unknown)}")


def embed(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Norm(AvgPool(X)): B x C x H x W features to unit-norm B x C rows.

    Returns (embeddings, degenerate_flags); a row is flagged when the pooled
    vector was (numerically) zero and needed the epsilon guard.
    """
    if features.ndim != 4:
        raise ValidationError(f"expected B x C x H x W features, got shape "
                              f"{features.shape}")
    pooled = features.mean(axis=(2, 3))
    norms = np.linalg.norm(pooled, axis=1)
    flagged = norms < _EPS
    z = pooled / (norms + _EPS)[:, None]
    return z, flagged


def pair_margin(y_i: str, y_j: str, cfg: MarginConfig) -> float:
    """Margin for a negative pair: strict for low-high, softer otherwise."""
    if y_i == y_j:
        raise ValidationError("pair_margin called on a positive pair")
    if {y_i, y_j} == {"low", "high"}:
        return cfg.tau_lh
    return cfg.tau_m


def _margin_matrix(labels: np.ndarray, cfg: MarginConfig) -> np.ndarray:
    labels = np.asarray(labels)
    is_low = labels == "low"
    is_high = labels == "high"
    lh = (is_low[:, None] & is_high[None, :]) | (is_high[:, None] & is_low[None, :])
    return np.where(lh, cfg.tau_lh, cfg.tau_m)


def contrastive_loss(batch: EmbeddingBatch, cfg: MarginConfig) -> float:
    """Dual-margin contrastive loss over one batch.

    L = (1/B^2) sum_i [ sum_{j: y_j = y_i} (1 - Sim(z_i, z_j))
                      + sum_{j: y_j != y_i} max(0, Sim(z_i, z_j) - tau_ij) ]

    The positive sum runs over all j with the same label, including j = i,
    whose term is exactly zero for unit rows.
    """
    batch.validate()
    b = batch.z.shape[0]
    sim = batch.z @ batch.z.T
    same = np.asarray(batch.labels)[:, None] == np.asarray(batch.labels)[None, :]
    tau = _margin_matrix(batch.labels, cfg)
    pos = np.where(same, 1.0 - sim, 0.0)
    neg = np.where(~same, np.maximum(0.0, sim - tau), 0.0)
    return float((pos.sum() + neg.sum()) / b**2)


def contrastive_loss_grad(raw: np.ndarray, labels, cfg: MarginConfig):
    """Loss and analytic gradient w.r.t. the pre-normalization vectors.

    `raw` holds the pooled (not yet normalized) B x D features. The gradient
    accounts for the row normalization; the hinge subgradient at Sim == tau
    is taken as 0 (inactive side).
    """
    raw = np.asarray(raw, dtype=np.float64)
    b = raw.shape[0]
    norms = np.linalg.norm(raw, axis=1) + _EPS
    z = raw / norms[:, None]
    sim = z @ z.T
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    tau = _margin_matrix(labels, cfg)
    pos = np.where(same, 1.0 - sim, 0.0)
    neg = np.where(~same, np.maximum(0.0, sim - tau), 0.0)
    loss = float((pos.sum() + neg.sum()) / b**2)
    # dL/dSim: -1 on positive pairs, +1 on active hinges
    w = np.where(same, -1.0, (sim > tau).astype(np.float64)) / b**2
    g_z = (w + w.T) @ z
    # back through z = raw / |raw|: project out the radial component
    radial = (g_z * z).sum(axis=1, keepdims=True)
    g_raw = (g_z - radial * z) / norms[:, None]
    return loss, g_raw


def total_loss(l_seg: float, l_con: float, cfg: MarginConfig) -> float:
    """Joint objective: segmentation loss plus lambda-weighted contrastive."""
    if not np.isfinite(l_seg) or not np.isfinite(l_con):
        raise TrainingAbort(
            f"non-finite loss (L_seg={l_seg}, L_con={l_con})")
    return float(l_seg + cfg.lambda_weight * l_con)
