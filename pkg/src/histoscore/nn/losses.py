"""Training losses. Each returns ``(value, d value / d pred)``."""

from __future__ import annotations

import numpy as np

DICE_EPS = 1.0


def score_loss(pred, labels) -> tuple[float, np.ndarray]:
    """Batch mean of the Euclidean norm of per-sample score errors.

    Scores are scalars per sample, so the norm is an absolute value.
    """
    pred = np.asarray(pred)
    labels = np.asarray(labels, dtype=pred.dtype).reshape(pred.shape)
    if pred.shape[0] == 0:
        raise ValueError("empty batch")
    diff = (pred - labels).reshape(pred.shape[0], -1)
    norms = np.sqrt((diff**2).sum(axis=1))
    value = float(norms.mean())
    safe = np.where(norms > 0, norms, 1.0)
    grad = diff / safe[:, None] / pred.shape[0]
    return value, grad.reshape(pred.shape)


def dice_loss(pred, truth, eps: float = DICE_EPS) -> tuple[float, np.ndarray]:
    """Negative log soft-Dice, averaged over the batch.

    ``pred`` and ``truth`` are (n, ...) with values in [0, 1].
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth, dtype=pred.dtype).reshape(pred.shape)
    n = pred.shape[0]
    p = pred.reshape(n, -1).astype(np.float64)
    t = truth.reshape(n, -1).astype(np.float64)
    num = 2.0 * (p * t).sum(axis=1) + eps
    den = (p * p).sum(axis=1) + (t * t).sum(axis=1) + eps
    value = float(np.mean(-np.log(num / den)))
    grad = (-2.0 * t / num[:, None] + 2.0 * p / den[:, None]) / n
    return value, grad.reshape(pred.shape).astype(pred.dtype)


def l2_loss(pred, target) -> tuple[float, np.ndarray]:
    """Half sum of squared errors over the batch mean."""
    pred = np.asarray(pred)
    diff = pred - np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    n = pred.shape[0]
    return float(0.5 * (diff**2).sum() / n), diff / n


LOSSES = {"score": score_loss, "dice": dice_loss, "l2": l2_loss}
