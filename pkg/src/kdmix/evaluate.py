"""Student ensembles and evaluation metrics."""

from __future__ import annotations

from typing import Sequence

import numpy as np

MASK_THRESHOLD = 0.5


def ensemble_classify(preds: Sequence[np.ndarray]) -> np.ndarray:
    """Per-class maximum over students, then argmax (lowest index wins ties).

    Each element of ``preds`` is ``(C,)`` or ``(B, C)`` probabilities.  The
    max-vector is not renormalized.
    """
    stacked = np.stack([np.asarray(p, dtype=np.float64) for p in preds])
    return np.argmax(stacked.max(axis=0), axis=-1)


def ensemble_mask(masks: Sequence[np.ndarray], threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Union of the students' masks after thresholding each at ``threshold``."""
    out = np.asarray(masks[0]) >= threshold
    for m in masks[1:]:
        out = out | (np.asarray(m) >= threshold)
    return out


def accuracy(pred_labels, truth) -> float:
    pred_labels, truth = np.asarray(pred_labels), np.asarray(truth)
    return float(np.mean(pred_labels == truth)) if truth.size else 1.0


def _per_sample(pred: np.ndarray, truth: np.ndarray):
    p = np.asarray(pred).astype(bool)
    t = np.asarray(truth).astype(bool)
    if p.ndim <= 2:
        p, t = p[None], t[None]
    axes = tuple(range(1, p.ndim))
    inter = np.sum(p & t, axis=axes)
    union = np.sum(p | t, axis=axes)
    sizes = np.sum(p, axis=axes) + np.sum(t, axis=axes)
    return inter, union, sizes, np.sum(t, axis=axes)


def iou(pred, truth) -> np.ndarray:
    """Per-sample intersection over union; empty-vs-empty counts as 1."""
    inter, union, _, _ = _per_sample(pred, truth)
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


def f_score(pred, truth) -> np.ndarray:
    inter, _, sizes, _ = _per_sample(pred, truth)
    return np.where(sizes == 0, 1.0, 2 * inter / np.maximum(sizes, 1))


def recall(pred, truth) -> np.ndarray:
    inter, _, _, t = _per_sample(pred, truth)
    return np.where(t == 0, 1.0, inter / np.maximum(t, 1))


def metrics(pred, truth, task: str) -> dict[str, float]:
    """``{"accuracy"}`` for classification; dataset-mean ``{"IoU", "F"}`` for segmentation.

    ``pred`` holds class indices or binary masks (``(B, 1, H, W)``).
    """
    if task == "classification":
        return {"accuracy": accuracy(pred, truth)}
    return {"IoU": float(np.mean(iou(pred, truth))), "F": float(np.mean(f_score(pred, truth)))}
