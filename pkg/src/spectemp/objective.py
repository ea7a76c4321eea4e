"""Masked cross-entropy losses over spectral and temporal targets.

The single-clip functions (``spectral_loss``, ``temporal_loss``) follow the
per-clip definitions directly. The ``*_and_grad`` functions handle a batch,
average per clip first and then over the batch, and return the gradient with
respect to the logits for the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gridding import GridConfig
from .masking import MaskPlan, masked_patch_indices
from .model import flushed_exp


class LossError(ValueError):
    pass


@dataclass
class LossBreakdown:
    spectral: float
    temporal: float
    total: float
    n_masked_segments: int
    lam: float


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(flushed_exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row cross-entropy ``-log softmax(logits)[label]``."""
    logp = log_softmax(np.asarray(logits))
    labels = np.asarray(labels)
    return -np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]


def spectral_loss(logits: np.ndarray, targets, plan: MaskPlan, grid: GridConfig) -> float:
    """Mean cross-entropy over masked patches; ``logits`` is (N*R_s, K_s)."""
    idx = masked_patch_indices(plan, grid.R_s)
    if len(idx) == 0:
        raise LossError("spectral loss needs at least one masked patch")
    labels = np.asarray(targets.spectral).reshape(-1)
    return float(cross_entropy(logits[idx], labels[idx]).mean())


def temporal_loss(logits: np.ndarray, targets, plan: MaskPlan, grid: GridConfig) -> float:
    """Mean cross-entropy over all frames of masked segments; ``logits`` is (N, R_t, K_t)."""
    if plan.mode != "segment":
        raise LossError("temporal loss is defined only for segment-mode masks")
    segs = plan.masked_segments
    if len(segs) == 0:
        raise LossError("temporal loss needs at least one masked segment")
    labels = np.asarray(targets.temporal)
    return float(cross_entropy(logits[segs], labels[segs]).mean())


def total_loss(spectral: float, temporal: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise LossError(f"lambda={lam} outside [0, 1]")
    return lam * temporal + (1.0 - lam) * spectral


def _masked_ce_and_grad(logits, labels, mask):
    """Per-clip masked-mean CE and d(batch mean)/d(logits).

    ``logits`` is (B, n, K), ``labels`` and ``mask`` are (B, n).
    """
    B = logits.shape[0]
    counts = mask.reshape(B, -1).sum(1)
    if (counts == 0).any():
        raise LossError("every clip needs at least one masked position")
    logp = log_softmax(logits)
    ce = -np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    weights = mask / counts.reshape((B,) + (1,) * (mask.ndim - 1))
    per_clip = (ce * weights).reshape(B, -1).sum(1)
    grad = flushed_exp(logp)
    np.put_along_axis(
        grad, labels[..., None],
        np.take_along_axis(grad, labels[..., None], axis=-1) - 1.0, axis=-1,
    )
    grad *= (weights / B)[..., None]
    return per_clip, grad.astype(logits.dtype, copy=False)


def spectral_loss_and_grad(logits, labels, patch_mask):
    """``logits`` (B, T, K_s); ``labels``/``patch_mask`` (B, T)."""
    return _masked_ce_and_grad(logits, labels, patch_mask)


def temporal_loss_and_grad(logits, labels, segment_mask):
    """``logits`` (B, N, R_t, K_t); ``labels`` (B, N, R_t); ``segment_mask`` (B, N)."""
    R_t = logits.shape[2]
    frame_mask = np.repeat(segment_mask[:, :, None], R_t, axis=2)
    return _masked_ce_and_grad(logits, labels, frame_mask)
