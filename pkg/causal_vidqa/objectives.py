#!/usr/bin/env python3
"""
Training Objectives
Cross-entropy, KL-to-uniform and consistency losses of invariant grounding, and the
soft cross-entropy / InfoNCE losses of equivariant-invariant grounding.

All losses average over any leading batch dimensions.
"""

import math
from typing import Sequence, Union

import torch
import torch.nn.functional as F

from .schema import ConfigurationError, LossWeights, PredictionDistribution

Prediction = Union[PredictionDistribution, torch.Tensor]


def _log_probs(pred: Prediction) -> torch.Tensor:
    if isinstance(pred, PredictionDistribution):
        return pred.log_probs
    return torch.log_softmax(pred, dim=-1)


def kl_divergence(p_log: torch.Tensor, q_log: torch.Tensor) -> torch.Tensor:
    """KL(p || q) from log-probabilities, summed over classes and batch-averaged"""
    return (p_log.exp() * (p_log - q_log)).sum(dim=-1).mean()


def causal_loss(pred: Prediction, answer: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the causal-scene prediction against the ground-truth answer"""
    log_probs = _log_probs(pred)
    answer = torch.as_tensor(answer, dtype=torch.long)
    return -log_probs.gather(-1, answer.unsqueeze(-1)).squeeze(-1).mean()


def environment_loss(pred: Prediction) -> torch.Tensor:
    """KL(pred || uniform): pushes environment-only predictions toward no information"""
    log_probs = _log_probs(pred)
    log_uniform = torch.full_like(log_probs, -math.log(log_probs.shape[-1]))
    return kl_divergence(log_probs, log_uniform)


def consistency_loss(pred_vstar: Prediction, pred_causal: Prediction) -> torch.Tensor:
    """KL(pred on intervened video || pred on causal scene)"""
    return kl_divergence(_log_probs(pred_vstar), _log_probs(pred_causal))


def igv_objective(
    l_causal: torch.Tensor,
    l_environment: torch.Tensor,
    l_vstar: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    return l_causal + weights.igv_lambda1 * l_environment + weights.igv_lambda2 * l_vstar


def soft_cross_entropy(pred: Prediction, a_star: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against a soft (mixed) answer distribution"""
    return -(a_star * _log_probs(pred)).sum(dim=-1).mean()


def info_nce(
    anchor: torch.Tensor,
    positive: torch.Tensor,
    negatives: Union[torch.Tensor, Sequence[torch.Tensor]],
) -> torch.Tensor:
    """
    InfoNCE with raw dot-product similarity and no temperature

    Args:
        anchor: B x D (or D) answer representations
        positive: Same shape as anchor
        negatives: N tensors shaped like anchor, or a B x N x D tensor

    Returns:
        Batch-averaged -log(exp(a.a+) / (exp(a.a+) + sum_n exp(a.a_n-)))
    """
    if not isinstance(negatives, torch.Tensor):
        if len(negatives) == 0:
            raise ConfigurationError("info_nce needs at least one negative")
        negatives = torch.stack(list(negatives), dim=-2)
    if negatives.shape[-2] == 0:
        raise ConfigurationError("info_nce needs at least one negative")

    if anchor.dim() == 1:
        anchor, positive, negatives = anchor[None], positive[None], negatives[None]

    pos_logit = (anchor * positive).sum(dim=-1, keepdim=True)
    neg_logits = (anchor.unsqueeze(-2) * negatives).sum(dim=-1)
    logits = torch.cat([pos_logit, neg_logits], dim=-1)
    target = torch.zeros(logits.shape[0], dtype=torch.long)
    return F.cross_entropy(logits, target)


def eigv_objective(l_erm: torch.Tensor, l_cl: torch.Tensor, beta: float) -> torch.Tensor:
    return l_erm + beta * l_cl
