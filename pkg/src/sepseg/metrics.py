"""Segmentation scores and the weighted cross-entropy training loss.

``overlap_score`` implements the evaluation ratio |A∩B| / (|A| + |B\\A|),
which is algebraically the Jaccard index; the conventional Dice
coefficient and Jaccard index are provided alongside for cross-checking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import ShapeError, Tensor


@dataclass
class ConfusionCounts:
    ntp: int
    nfp: int
    nfn: int
    ntn: int

    @property
    def truth_positives(self):
        return self.ntp + self.nfn


@dataclass
class ClassWeights:
    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if np.any(self.w <= 0):
            raise ValueError("class weights must be positive")


def confusion_counts(pred, truth) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    ntp = int(np.count_nonzero(pred & truth))
    nfp = int(np.count_nonzero(pred & ~truth))
    nfn = int(np.count_nonzero(~pred & truth))
    ntn = int(np.count_nonzero(~pred & ~truth))
    return ConfusionCounts(ntp, nfp, nfn, ntn)


def overlap_score(pred, truth) -> float:
    """|A∩B| / (|A| + |B\\A|) with A = truth, B = pred; empty/empty -> 1."""
    c = confusion_counts(pred, truth)
    denom = c.truth_positives + c.nfp
    if denom == 0:
        return 1.0
    return c.ntp / denom


def jaccard(pred, truth) -> float:
    c = confusion_counts(pred, truth)
    union = c.ntp + c.nfp + c.nfn
    if union == 0:
        return 1.0
    return c.ntp / union


def dice_standard(pred, truth) -> float:
    c = confusion_counts(pred, truth)
    denom = 2 * c.ntp + c.nfp + c.nfn
    if denom == 0:
        return 1.0
    return 2 * c.ntp / denom


def weighted_cross_entropy(probs: Tensor, labels, weights: ClassWeights) -> Tensor:
    """Mean over pixels of -w[label] * ln(prob[label]), ln clamped at 1e-12.

    ``probs`` is (N, C, H, W) with channel sums 1 (e.g. a softmax output,
    through which this loss stays differentiable); ``labels`` is an
    integer (N, H, W) array.
    """
    labels = np.asarray(labels)
    n, c, h, w = probs.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match probs {probs.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, c, h, w), dtype=probs.dtype)
    np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
    pixel_w = weights.w.astype(probs.dtype)[labels][:, None]  # (N,1,H,W)
    picked = (probs * Tensor(onehot)).sum(axis=1, keepdims=True)
    return (-(picked.log()) * Tensor(pixel_w)).mean()


def probs_to_mask(probs, lesion_class: int):
    """Per-pixel argmax == lesion_class; ties break toward the lower index."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    c = data.shape[1]
    if not 0 <= lesion_class < c:
        raise ValueError(f"lesion class {lesion_class} out of range for {c} classes")
    return (data.argmax(axis=1) == lesion_class).astype(np.uint8)


def inverse_frequency_weights(labels_iter, num_classes, clamp=(0.1, 10.0)) -> ClassWeights:
    """Inverse-class-frequency weights, normalized to mean 1 and clamped.

    ``labels_iter`` yields integer label arrays (the training split).
    """
    counts = np.zeros(num_classes, dtype=np.int64)
    for labels in labels_iter:
        counts += np.bincount(np.asarray(labels).ravel(), minlength=num_classes)
    total = counts.sum()
    freq = np.where(counts > 0, counts / max(total, 1), 1.0)
    w = 1.0 / freq
    w = w / w.mean()
    return ClassWeights(np.clip(w, clamp[0], clamp[1]))
