"""Loss primitives for distillation and mutual learning.

All reductions are batch means.  Class probabilities live on axis 1, so the
same functions serve ``(B, C)`` classification outputs and ``(B, 2, H, W)``
per-pixel binary distributions.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

EPS_DICE = 1.0
DEFAULT_TAU = 2.0


def softmax_t(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Temperature-scaled softmax over the class axis (axis 1)."""
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    return ad.softmax(logits, temperature, axis=1)


def sigmoid_t(logits: Tensor, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    return ad.sigmoid(ad.scale(logits, 1.0 / temperature))


def binary_as_classes(prob: Tensor) -> Tensor:
    """``(B, 1, H, W)`` foreground probability -> ``(B, 2, H, W)`` as (background, foreground)."""
    return ad.concat_channels([ad.add(ad.scale(prob, -1.0), 1.0), prob])


def _one_hot(y, n_classes: int, dtype) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        return y.astype(dtype)
    out = np.zeros((y.shape[0], n_classes), dtype=dtype)
    out[np.arange(y.shape[0]), y] = 1
    return out


def cross_entropy(pred: Tensor, y) -> Tensor:
    """Per-class binary cross-entropy summed over classes, averaged over the batch.

    ``pred`` holds probabilities ``(B, C)``; ``y`` is either integer labels or a
    one-hot array of the same shape.
    """
    onehot = _one_hot(y, pred.shape[1], pred.dtype)
    if onehot.shape != pred.shape:
        raise DimensionError(f"cross_entropy: pred {pred.shape} vs target {onehot.shape}")
    yt = Tensor(onehot, dtype=pred.dtype)
    pos = ad.mul(yt, ad.log(pred))
    neg = ad.mul(ad.add(ad.scale(yt, -1.0), 1.0), ad.log(ad.add(ad.scale(pred, -1.0), 1.0)))
    per_sample = ad.sum(ad.add(pos, neg), axis=1)
    return ad.scale(ad.mean(per_sample), -1.0)


def kl_div(target: Tensor, source: Tensor) -> Tensor:
    """``sum target * log(target / source)`` over axis 1, mean over the rest.

    ``target`` is the distribution the sum is weighted by and is treated as a
    constant; gradients only reach ``source``.
    """
    if target.shape != source.shape:
        raise DimensionError(f"kl_div: {target.shape} vs {source.shape}")
    t = target.detach()
    log_t = np.log(np.maximum(t.data, ad.EPS_LOG)).astype(t.dtype)
    const = Tensor(t.data * log_t, dtype=t.dtype)
    terms = ad.sub(const, ad.mul(t, ad.log(source)))
    return ad.mean(ad.sum(terms, axis=1))


def feature_mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"feature_mse: {a.shape} vs {b.shape} (missing adapter?)")
    return ad.mean(ad.square(ad.sub(a, b)))


def focal_loss(pred: Tensor, gt, tau: float = DEFAULT_TAU) -> Tensor:
    """Binary focal loss averaged over pixels.

    Foreground pixels contribute ``(1 - p)^tau * -log p``; background pixels
    ``p^tau * -log(1 - p)``.
    """
    if tau < 0:
        raise ContractError(f"tau must be >= 0, got {tau}")
    g = np.asarray(gt, dtype=pred.dtype)
    if g.shape != pred.shape:
        raise DimensionError(f"focal_loss: pred {pred.shape} vs mask {g.shape}")
    gt_t = Tensor(g, dtype=pred.dtype)
    bg_t = Tensor(1 - g, dtype=pred.dtype)
    one_minus = ad.add(ad.scale(pred, -1.0), 1.0)
    fg = ad.mul(ad.power(one_minus, tau), ad.log(pred))
    bg = ad.mul(ad.power(pred, tau), ad.log(one_minus))
    return ad.scale(ad.mean(ad.add(ad.mul(gt_t, fg), ad.mul(bg_t, bg))), -1.0)


def dice_loss(pred: Tensor, gt, eps: float = EPS_DICE) -> Tensor:
    """Smoothed soft dice loss per sample, averaged over the batch.

    ``1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)``.
    """
    g = np.asarray(gt, dtype=pred.dtype)
    if g.shape != pred.shape:
        raise DimensionError(f"dice_loss: pred {pred.shape} vs mask {g.shape}")
    axes = tuple(range(1, pred.ndim))
    inter = ad.sum(ad.mul(pred, Tensor(g, dtype=pred.dtype)), axis=axes)
    p_sq = ad.sum(ad.square(pred), axis=axes)
    g_sq = Tensor(np.sum(g.astype(np.float64) ** 2, axis=axes), dtype=pred.dtype)
    num = ad.add(ad.scale(inter, 2.0), eps)
    den = ad.add(ad.add(p_sq, g_sq), eps)
    return ad.add(ad.scale(ad.mean(ad.div(num, den)), -1.0), 1.0)


def fd_loss(pred: Tensor, gt, tau: float = DEFAULT_TAU) -> Tensor:
    return ad.add(focal_loss(pred, gt, tau), dice_loss(pred, gt))
