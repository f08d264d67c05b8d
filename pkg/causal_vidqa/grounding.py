#!/usr/bin/env python3
"""
Grounding Indicator
Cross-modal attention over clips, Gumbel-Softmax clip assignment and the
select/mask scene splits built from it.
"""

import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .schema import (
    AttentionScores,
    ConfigurationError,
    DegenerateInputError,
    NumericError,
    SceneSplit,
    SplitMode,
)

PROB_FLOOR = 1e-12

logger = logging.getLogger("Grounding")


def _projection(in_size: int, out_size: int, depth: int) -> nn.Module:
    if depth == 1:
        return nn.Linear(in_size, out_size)
    return nn.Sequential(nn.Linear(in_size, out_size), nn.ReLU(), nn.Linear(out_size, out_size))


class GroundingIndicator(nn.Module):
    """
    Clip-wise causal/environment assignment conditioned on the question.

    mlp1/mlp2 score clips for the causal scene, mlp3/mlp4 for the environment;
    the two heads are independent.
    """

    def __init__(self, hidden_size: int, projection_size: Optional[int] = None, depth: int = 1):
        super().__init__()
        projection_size = projection_size or hidden_size
        self.mlp1 = _projection(hidden_size, projection_size, depth)
        self.mlp2 = _projection(hidden_size, projection_size, depth)
        self.mlp3 = _projection(hidden_size, projection_size, depth)
        self.mlp4 = _projection(hidden_size, projection_size, depth)

    def attention_scores(self, v_local: torch.Tensor, q_global: torch.Tensor) -> AttentionScores:
        """
        Probability of each clip belonging to the causal and environment scenes

        Args:
            v_local: B x K x d_h clip representations
            q_global: B x d_h question representation

        Returns:
            AttentionScores with B x K softmax distributions
        """
        if v_local.shape[1] == 0:
            raise DegenerateInputError("attention_scores needs at least one clip")
        if not bool(torch.isfinite(v_local).all()) or not bool(torch.isfinite(q_global).all()):
            raise NumericError("attention_scores received non-finite inputs")

        causal_logits = (self.mlp1(v_local) * self.mlp2(q_global).unsqueeze(1)).sum(-1)
        env_logits = (self.mlp3(v_local) * self.mlp4(q_global).unsqueeze(1)).sum(-1)
        return AttentionScores(
            p_c=torch.softmax(causal_logits, dim=-1),
            p_e=torch.softmax(env_logits, dim=-1),
        )

    forward = attention_scores


def sample_gumbel(shape, generator: Optional[torch.Generator] = None, dtype=torch.float32) -> torch.Tensor:
    """Standard Gumbel noise"""
    uniform = torch.rand(shape, generator=generator, dtype=dtype)
    uniform = uniform.clamp(PROB_FLOOR, 1.0 - 1e-7)
    return -torch.log(-torch.log(uniform))


def gumbel_indicator(
    scores: AttentionScores,
    temperature: float = 1.0,
    hard: bool = True,
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Gumbel-Softmax over [log p_c, log p_e] for each clip

    Args:
        scores: Attention scores
        temperature: Softmax temperature, must be positive
        hard: Emit one-hot rows with the soft sample's gradient
        generator: Random stream for the Gumbel noise
        noise: Explicit B x K x 2 noise, overrides sampling (zeros give argmax)

    Returns:
        B x K x 2 indicator; column 0 is causal, column 1 environment
    """
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")

    logits = torch.stack(
        [scores.p_c.clamp_min(PROB_FLOOR).log(), scores.p_e.clamp_min(PROB_FLOOR).log()], dim=-1
    )
    if noise is None:
        noise = sample_gumbel(logits.shape, generator, logits.dtype)
    y_soft = torch.softmax((logits + noise) / temperature, dim=-1)
    if not hard:
        return y_soft

    index = y_soft.argmax(dim=-1)
    y_hard = F.one_hot(index, num_classes=2).to(y_soft.dtype)
    # Forward values are exactly 0/1; gradient is the soft sample's
    return y_hard + (y_soft - y_soft.detach())


def _repair_degenerate(indicator: torch.Tensor, scores: Optional[AttentionScores]) -> tuple:
    """Move one clip across when a hard split leaves a side empty"""
    B, K, _ = indicator.shape
    causal = indicator[..., 0] > 0.5
    n_causal = causal.sum(dim=1)
    flip = torch.zeros(B, K, dtype=torch.bool)
    repaired = torch.zeros(B, dtype=torch.bool)
    if K < 2:
        return indicator, repaired

    for b in torch.nonzero((n_causal == 0) | (n_causal == K)).flatten().tolist():
        all_causal = bool(n_causal[b] == K)
        if scores is None:
            k = K - 1
        elif all_causal:
            k = int(scores.p_e[b].argmax())
        else:
            k = int(scores.p_c[b].argmax())
        flip[b, k] = True
        repaired[b] = True

    if not bool(repaired.any()):
        return indicator, repaired
    fixed = torch.where(flip.unsqueeze(-1), indicator.flip(-1), indicator)
    return fixed, repaired


def _pack_front(views: torch.Tensor, members: torch.Tensor):
    """Gather member rows to the front keeping their original order"""
    order = torch.argsort((~members).to(torch.int64), dim=1, stable=True)
    packed = torch.gather(views, 1, order.unsqueeze(-1).expand_as(views))
    return packed, members.sum(dim=1), order


def split_select(
    clips: torch.Tensor,
    indicator: torch.Tensor,
    scores: Optional[AttentionScores] = None,
) -> SceneSplit:
    """
    Partition clips into causal and environment scenes by a hard indicator

    Args:
        clips: B x K x d clip features
        indicator: B x K x 2 hard indicator
        scores: Attention scores used to pick the clip moved by degenerate-split repair

    Returns:
        SceneSplit in select mode with packed views and original positions
    """
    indicator, repaired = _repair_degenerate(indicator, scores)
    if bool(repaired.any()):
        logger.debug(f"Repaired {int(repaired.sum())} degenerate splits")

    causal_mask = indicator[..., 0] > 0.5
    causal_full = indicator[..., 0:1] * clips
    environment_full = indicator[..., 1:2] * clips

    causal, causal_lengths, causal_order = _pack_front(causal_full, causal_mask)
    environment, env_lengths, env_order = _pack_front(environment_full, ~causal_mask)

    return SceneSplit(
        indicator=indicator,
        causal=causal,
        environment=environment,
        mode=SplitMode.SELECT,
        causal_mask=causal_mask,
        causal_full=causal_full,
        environment_full=environment_full,
        causal_lengths=causal_lengths,
        environment_lengths=env_lengths,
        causal_positions=causal_order,
        environment_positions=env_order,
        repaired=repaired,
    )


def split_mask(clips: torch.Tensor, indicator: torch.Tensor) -> SceneSplit:
    """
    Row-masked causal and environment copies of the video

    Args:
        clips: B x K x d clip features (or embeddings)
        indicator: B x K x 2 indicator whose rows sum to 1

    Returns:
        SceneSplit in mask mode where causal + environment reconstructs the video
    """
    causal = indicator[..., 0:1] * clips
    environment = indicator[..., 1:2] * clips
    return SceneSplit(
        indicator=indicator,
        causal=causal,
        environment=environment,
        mode=SplitMode.MASK,
        causal_mask=indicator[..., 0] > indicator[..., 1],
        causal_full=causal,
        environment_full=environment,
    )


def dump_masks(
    path,
    ids: Sequence[str],
    scores: AttentionScores,
    indicator: torch.Tensor,
    ground_truth: Optional[torch.Tensor] = None,
    append: bool = True,
) -> Path:
    """
    Write per-instance grounding records as JSON lines

    Each line holds {id, p_c, indicator, ground_truth_mask}.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records: List[dict] = []
    for i, instance_id in enumerate(ids):
        records.append(
            {
                "id": instance_id,
                "p_c": [round(float(p), 6) for p in scores.p_c[i]],
                "indicator": [int(x) for x in (indicator[i, :, 0] > 0.5)],
                "ground_truth_mask": (
                    [int(x) for x in ground_truth[i]] if ground_truth is not None else None
                ),
            }
        )
    with open(path, "a" if append else "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
    return path
