"""Training objectives and the exact rank-violation metric.

Differentiable losses accept a single example (1-D prediction) or a batch
(leading batch axis); batched losses are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tc
from .errors import ContractError, DegenerateTargetError
from .heatmap import SupervisionHeatmap
from .tensor import Tensor

VARIANCE_EPS = 1e-12
N_CLASSES = 4


@dataclass(frozen=True)
class LossWeights:
    w_kp: float = 1.0
    w_C: float = 0.3
    w_RANK: float = 0.1
    rank_margin: float = 0.0

    def __post_init__(self):
        for name in ("w_kp", "w_C", "w_RANK", "rank_margin"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ContractError(f"{name} must be finite and >= 0, got {value}")


@dataclass
class EmotionTarget:
    intensities: np.ndarray  # (17,) in [-1, 1]
    category: int


def _target_array(target) -> np.ndarray:
    return np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)


def nmse(pred, target) -> Tensor:
    """Mean squared error divided by the population variance of the target."""
    t = _target_array(target)
    if pred.shape != t.shape:
        raise ContractError(f"nmse: prediction {pred.shape} vs target {t.shape}")
    var = t.var(axis=-1, keepdims=True)
    if np.any(var <= VARIANCE_EPS):
        raise DegenerateTargetError("target vector has zero variance")
    K = t.shape[-1]
    scale = np.broadcast_to(1.0 / (K * var), t.shape)
    per_example = tc.sum_(tc.square(pred - Tensor(t)) * Tensor(scale), axis=-1)
    return per_example if per_example.ndim == 0 else tc.mean(per_example)


def nmse_value(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-example nMSE as plain floats (evaluation path)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    var = target.var(axis=-1)
    if np.any(var <= VARIANCE_EPS):
        raise DegenerateTargetError("target vector has zero variance")
    return ((pred - target) ** 2).mean(axis=-1) / var


def cross_entropy(logits, category) -> Tensor:
    """-log softmax(logits)[category], averaged over a batch."""
    cats = np.atleast_1d(np.asarray(category))
    n_classes = logits.shape[-1]
    if cats.dtype.kind not in "iu" or np.any(cats < 0) or np.any(cats >= n_classes):
        raise ContractError(f"category {category!r} outside 0..{n_classes - 1}")
    logp = tc.log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        return -logp[int(cats[0])]
    picked = logp[np.arange(logits.shape[0]), cats]
    return -tc.mean(picked)


def target_order(target: np.ndarray) -> np.ndarray:
    """Indices sorting the target descending, ties kept in original order."""
    return np.argsort(-np.asarray(target, dtype=np.float64), kind="stable")


def rank_violations(pred, target) -> int:
    """Number of pairs ordered by the target that the prediction inverts.

    Emotions are relabelled so target intensities descend; a pair (k, l)
    with k < l is a violation when pred_k < pred_l.
    """
    p = _target_array(pred)
    order = target_order(_target_array(target))
    if order.size < 2:
        raise ContractError("ranking needs at least two emotions")
    ranked = p[order]
    return int(np.sum(np.triu(ranked[:, None] < ranked[None, :], k=1)))


def _pair_indices(target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = target_order(target)
    k, l = np.triu_indices(order.size, k=1)
    return order[k], order[l]


def rank_surrogate(pred, target, margin: float = 0.0) -> Tensor:
    """Pairwise hinge sum_{k<l} max(0, margin + pred_l - pred_k) in target order."""
    t = _target_array(target)
    if pred.shape != t.shape:
        raise ContractError(f"rank_surrogate: prediction {pred.shape} vs target {t.shape}")
    if t.shape[-1] < 2:
        raise ContractError("ranking needs at least two emotions")
    if t.ndim == 1:
        hi, lo = _pair_indices(t)
        return tc.sum_(tc.relu(margin + pred[lo] - pred[hi]))
    B, K = t.shape
    flat = pred.reshape(B * K)
    pairs = [_pair_indices(t[b]) for b in range(B)]
    hi = np.concatenate([b * K + p[0] for b, p in enumerate(pairs)])
    lo = np.concatenate([b * K + p[1] for b, p in enumerate(pairs)])
    return tc.sum_(tc.relu(margin + flat[lo] - flat[hi])) / B


def _heatmap_array(h) -> np.ndarray:
    if isinstance(h, SupervisionHeatmap):
        return h.flat
    return np.asarray(h.data if isinstance(h, Tensor) else h, dtype=np.float64)


def keypoint_loss(masks: Sequence, heatmaps: Sequence) -> Tensor:
    """Squared gap between attention masks and heatmaps, summed over frames and cells."""
    if len(masks) != len(heatmaps):
        raise ContractError(f"{len(masks)} masks but {len(heatmaps)} heatmaps")
    if not masks:
        raise ContractError("keypoint_loss needs at least one frame")
    terms = []
    for m, h in zip(masks, heatmaps):
        target = _heatmap_array(h).reshape(m.shape)
        terms.append(tc.sum_(tc.square(m - Tensor(target))))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    if masks[0].ndim == 2:
        total = total / masks[0].shape[0]
    return total


def emotion_loss(pred_int, logits, target, w: LossWeights, parts: dict | None = None) -> Tensor:
    """nMSE + w_C * cross-entropy + w_RANK * ranking hinge.

    ``parts``, when given, receives the unweighted component values.
    """
    intensities, category = _unpack_target(target)
    total = reg = nmse(pred_int, intensities)
    ce = rank = None
    if w.w_C:
        ce = cross_entropy(logits, category)
        total = total + w.w_C * ce
    if w.w_RANK:
        rank = rank_surrogate(pred_int, intensities, w.rank_margin)
        total = total + w.w_RANK * rank
    if parts is not None:
        parts["nmse"] = reg.item()
        parts["ce"] = ce.item() if ce is not None else 0.0
        parts["rank"] = rank.item() if rank is not None else 0.0
    return total


def _unpack_target(target):
    if isinstance(target, EmotionTarget):
        return target.intensities, target.category
    intensities, category = target
    return intensities, category


def total_loss(emotion, kp, w: LossWeights) -> Tensor:
    """Emotion loss plus weighted keypoint supervision."""
    emotion = tc.as_tensor(emotion)
    if not w.w_kp:
        return emotion
    return emotion + w.w_kp * tc.as_tensor(kp)
