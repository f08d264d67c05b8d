#!/usr/bin/env python3
"""
Evaluation Metrics
Answer accuracy (overall and per question type) and clip-level grounding quality.
"""

from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .schema import ConfigurationError, QuestionType

MAX_ENUMERATION_CLIPS = 20

ArrayLike = Union[np.ndarray, torch.Tensor, Sequence]


def _to_numpy(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def accuracy(predictions: ArrayLike, answers: ArrayLike) -> float:
    """Fraction of predictions equal to the answer (0.0 on empty input)"""
    predictions, answers = _to_numpy(predictions), _to_numpy(answers)
    if predictions.size == 0:
        return 0.0
    return float((predictions == answers).mean())


def per_qtype_accuracy(
    predictions: ArrayLike, answers: ArrayLike, qtypes: Sequence[QuestionType]
) -> Dict[str, float]:
    """Accuracy restricted to each question type present"""
    predictions, answers = _to_numpy(predictions), _to_numpy(answers)
    qtypes = np.asarray([str(q) for q in qtypes])
    return {
        str(qtype): accuracy(predictions[qtypes == str(qtype)], answers[qtypes == str(qtype)])
        for qtype in QuestionType
        if (qtypes == str(qtype)).any()
    }


def grounding_scores(pred_mask: ArrayLike, true_mask: ArrayLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Per-instance precision, recall and IoU of predicted causal clips

    Args:
        pred_mask: B x K (or K) boolean predicted causal clips
        true_mask: Same shape, ground-truth causal clips

    Returns:
        Tuple of (precision, recall, iou) arrays of length B. Empty predictions score
        precision 0; an empty union scores IoU 1.
    """
    pred = _to_numpy(pred_mask).astype(bool)
    true = _to_numpy(true_mask).astype(bool)
    if pred.shape != true.shape:
        raise ConfigurationError(f"Mask shapes differ: {pred.shape} vs {true.shape}")
    if pred.ndim == 1:
        pred, true = pred[None], true[None]

    inter = (pred & true).sum(axis=1).astype(float)
    union = (pred | true).sum(axis=1).astype(float)
    n_pred = pred.sum(axis=1).astype(float)
    n_true = true.sum(axis=1).astype(float)

    precision = np.divide(inter, n_pred, out=np.zeros_like(inter), where=n_pred > 0)
    recall = np.divide(inter, n_true, out=np.zeros_like(inter), where=n_true > 0)
    iou = np.divide(inter, union, out=np.ones_like(inter), where=union > 0)
    return precision, recall, iou


def span_distribution(causal_span: Tuple[int, int]) -> Dict[int, float]:
    """Uniform distribution over causal clip counts in [min, max]"""
    lo, hi = causal_span
    return {n: 1.0 / (hi - lo + 1) for n in range(lo, hi + 1)}


def random_mask_iou(
    K: int,
    causal_counts: Mapping[int, float],
    fraction: Optional[float] = None,
) -> float:
    """
    Expected IoU of a random mask against the true causal clips, by enumeration

    Each clip of the random mask is independently causal with probability `fraction`
    (default: the expected true causal fraction). Truth masks hold n causal clips with
    probability causal_counts[n]; by symmetry their positions do not matter.

    Args:
        K: Clips per video
        causal_counts: Distribution over true causal clip counts
        fraction: Per-clip probability of the random mask

    Returns:
        Expected IoU
    """
    if K > MAX_ENUMERATION_CLIPS:
        raise ConfigurationError(f"Enumeration is limited to K <= {MAX_ENUMERATION_CLIPS}")
    total = sum(causal_counts.values())
    if total <= 0:
        raise ConfigurationError("causal_counts must carry positive mass")
    if fraction is None:
        fraction = sum(n * w for n, w in causal_counts.items()) / (total * K)

    masks = ((np.arange(2**K)[:, None] >> np.arange(K)) & 1).astype(bool)
    sizes = masks.sum(axis=1)
    probs = fraction**sizes * (1.0 - fraction) ** (K - sizes)

    expected = 0.0
    for n, weight in causal_counts.items():
        truth = np.arange(K) < n
        inter = (masks & truth).sum(axis=1)
        union = (masks | truth).sum(axis=1)
        iou = np.divide(inter, union, out=np.ones(len(masks)), where=union > 0)
        expected += (weight / total) * float((probs * iou).sum())
    return expected
