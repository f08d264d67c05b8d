#!/usr/bin/env python3
"""
Spatio-Temporal Rationalizer
Adaptive frame and object selection with a differentiable Top-K, multi-grain
reasoning over the selected tokens, and query-based answer decoding.
"""

import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import SequenceEncoder
from .schema import (
    AnswerMode,
    ConfigurationError,
    CrossAttentionOutput,
    DecoderQuerySet,
    SelectionResult,
)


def _check_k(k: int, n: int):
    if not 1 <= k <= n:
        raise ConfigurationError(f"Top-K needs 1 <= K <= n, got K={k}, n={n}")


def hard_topk_mask(scores: torch.Tensor, k: int) -> torch.Tensor:
    """0/1 mask of the k largest entries along the last dimension"""
    _check_k(k, scores.shape[-1])
    index = torch.topk(scores, k=k, dim=-1).indices
    return torch.zeros_like(scores).scatter(-1, index, 1.0)


def perturbed_topk_samples(
    scores: torch.Tensor,
    k: int,
    sigma: float,
    samples: int,
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Hard top-k indicators of Gaussian-perturbed scores

    Args:
        scores: B x n scores

    Returns:
        Tuple of (B x samples x n hard masks, B x samples x n standard-normal noise)
    """
    _check_k(k, scores.shape[-1])
    noise = torch.randn(
        (scores.shape[0], samples, scores.shape[-1]), generator=generator, dtype=scores.dtype
    )
    perturbed = scores.unsqueeze(1) + sigma * noise
    return hard_topk_mask(perturbed, k), noise


class PerturbedTopKFunction(torch.autograd.Function):
    """Monte-Carlo mean of perturbed hard top-k masks with the perturbed-optimizer gradient"""

    @staticmethod
    def forward(ctx, scores, k: int, samples: int, sigma: float, generator=None):
        hard, noise = perturbed_topk_samples(scores, k, sigma, samples, generator)
        ctx.sigma = sigma
        ctx.save_for_backward(hard, noise)
        return hard.mean(dim=1)

    @staticmethod
    def backward(ctx, grad_output):
        hard, noise = ctx.saved_tensors
        # For Gaussian noise the score-function weight is the noise itself
        weight = (hard * grad_output.unsqueeze(1)).sum(dim=-1)
        grad_scores = (weight.unsqueeze(-1) * noise).mean(dim=1) / ctx.sigma
        return grad_scores, None, None, None, None


def perturbed_topk(
    scores: torch.Tensor,
    k: int,
    sigma: float = 0.5,
    samples: int = 100,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """
    Differentiable soft top-k mask

    Args:
        scores: n or B x n scores
        k: Number of entries to select
        sigma: Perturbation scale, must be positive
        samples: Monte-Carlo sample count
        generator: Random stream for the perturbations

    Returns:
        Soft mask with entries in [0, 1] summing to k
    """
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    squeeze = scores.dim() == 1
    if squeeze:
        scores = scores.unsqueeze(0)
    mask = PerturbedTopKFunction.apply(scores, k, samples, sigma, generator)
    return mask.squeeze(0) if squeeze else mask


class CrossAttention(nn.Module):
    """Single-head scaled dot-product attention that also returns its map"""

    def __init__(self, hidden_size: int):
        super().__init__()
        self.q_proj = nn.Linear(hidden_size, hidden_size)
        self.k_proj = nn.Linear(hidden_size, hidden_size)
        self.v_proj = nn.Linear(hidden_size, hidden_size)
        self.out_proj = nn.Linear(hidden_size, hidden_size)
        self.scale = 1.0 / math.sqrt(hidden_size)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        key_mask: Optional[torch.Tensor] = None,
    ) -> CrossAttentionOutput:
        """
        Args:
            query: B x T x H
            key: B x L x H (also used as value)
            key_mask: B x L, True for valid keys

        Returns:
            CrossAttentionOutput; queries with no valid key get a zero row and zero output.
            scores holds the pre-softmax interactions, masked keys at the dtype minimum.
        """
        logits = self.q_proj(query) @ self.k_proj(key).transpose(-1, -2) * self.scale
        scores = logits
        if key_mask is not None:
            invalid = ~key_mask.unsqueeze(1)
            scores = logits.masked_fill(invalid, torch.finfo(logits.dtype).min)
            attn = torch.softmax(logits.masked_fill(invalid, float("-inf")), dim=-1)
            attn = torch.nan_to_num(attn, nan=0.0)
        else:
            attn = torch.softmax(logits, dim=-1)
        out = self.out_proj(attn @ self.v_proj(key))
        if key_mask is not None:
            has_key = key_mask.any(dim=-1, keepdim=True).unsqueeze(-1)
            out = out * has_key.to(out.dtype)
        return CrossAttentionOutput(tokens=out, attn_map=attn, scores=scores)


class Rationalizer(nn.Module):
    """Self-attention then question cross-attention, both with residuals"""

    def __init__(self, hidden_size: int, num_heads: int = 1):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(hidden_size, num_heads, batch_first=True)
        self.cross_attn = CrossAttention(hidden_size)

    def forward(
        self,
        tokens: torch.Tensor,
        question: torch.Tensor,
        question_mask: Optional[torch.Tensor] = None,
    ) -> CrossAttentionOutput:
        attended, _ = self.self_attn(tokens, tokens, tokens, need_weights=False)
        tokens = tokens + attended
        cross = self.cross_attn(tokens, question, question_mask)
        return CrossAttentionOutput(tokens=tokens + cross.tokens, attn_map=cross.attn_map, scores=cross.scores)


def adaptive_select(
    tokens: torch.Tensor,
    attn_map: torch.Tensor,
    k: int,
    training: bool = False,
    sigma: float = 0.5,
    samples: int = 100,
    generator: Optional[torch.Generator] = None,
) -> SelectionResult:
    """
    Select the tokens behind the k strongest token-question interactions

    Interactions are ranked over the flattened T x L map; repeated token indices
    keep their first occurrence without backfilling, so fewer than k tokens may be chosen.

    Args:
        tokens: B x T x H tokens to gather from
        attn_map: B x T x L interaction scores (pre-softmax, so a single question
            token still ranks tokens)
        k: Interactions to keep (capped at T x L)
        training: Use the perturbed (differentiable) Top-K instead of the hard one

    Returns:
        SelectionResult padded to k rows
    """
    B, T, L = attn_map.shape
    flat = attn_map.reshape(B, T * L)
    k = min(k, T * L)

    if training:
        mask = perturbed_topk(flat, k, sigma, samples, generator)
        ranking = torch.topk(mask.detach(), k=k, dim=-1).indices
    else:
        mask = hard_topk_mask(flat, k)
        ranking = torch.topk(flat, k=k, dim=-1).indices

    # Probability that at least one interaction of the token is kept
    weights = 1.0 - torch.prod(1.0 - mask.view(B, T, L), dim=-1)

    indices = torch.full((B, k), -1, dtype=torch.long)
    for b in range(B):
        distinct = sorted(dict.fromkeys((ranking[b] // L).tolist()))
        indices[b, : len(distinct)] = torch.tensor(distinct, dtype=torch.long)
    valid = indices >= 0
    gather_index = indices.clamp_min(0)

    selected = torch.gather(tokens, 1, gather_index.unsqueeze(-1).expand(B, k, tokens.shape[-1]))
    picked = torch.gather(weights, 1, gather_index)
    # Straight-through: forward value 1, gradient of the selection weight
    selected = selected * (1.0 + picked - picked.detach()).unsqueeze(-1)
    selected = selected * valid.unsqueeze(-1).to(selected.dtype)

    return SelectionResult(
        selected=selected,
        indices=indices,
        valid=valid,
        weights=weights,
        counts=valid.sum(dim=1),
    )


def temporal_rationalize(
    rationalizer: Rationalizer,
    frames: torch.Tensor,
    question: torch.Tensor,
    k_f: int,
    **select_kwargs,
) -> Tuple[CrossAttentionOutput, SelectionResult]:
    """Pick question-critical frames (B x T x H) using the frame-token interaction map"""
    out = rationalizer(frames, question)
    return out, adaptive_select(out.tokens, out.scores, k_f, **select_kwargs)


def spatial_rationalize(
    rationalizer: Rationalizer,
    objects: torch.Tensor,
    question: torch.Tensor,
    k_o: int,
    **select_kwargs,
) -> Tuple[CrossAttentionOutput, SelectionResult]:
    """
    Pick question-critical objects independently within each frame

    Args:
        objects: B x C x S x H object tokens of C frames
        question: B x L x H question tokens

    Returns:
        Output and SelectionResult over B*C frames
    """
    B, C, S, H = objects.shape
    flat_objects = objects.reshape(B * C, S, H)
    flat_question = question.unsqueeze(1).expand(B, C, *question.shape[1:]).reshape(
        B * C, *question.shape[1:]
    )
    out = rationalizer(flat_objects, flat_question)
    return out, adaptive_select(out.tokens, out.scores, k_o, **select_kwargs)


class MultiGrainReasoning(nn.Module):
    """Object-to-frame cross-attention, then a transformer layer over frames and question"""

    def __init__(self, hidden_size: int, num_heads: int = 1):
        super().__init__()
        self.intra_frame = CrossAttention(hidden_size)
        self.encoder_layer = nn.TransformerEncoderLayer(
            hidden_size,
            num_heads,
            dim_feedforward=2 * hidden_size,
            dropout=0.0,
            batch_first=True,
        )

    def forward(
        self,
        frames: torch.Tensor,
        frame_valid: torch.Tensor,
        objects: torch.Tensor,
        object_valid: torch.Tensor,
        question: torch.Tensor,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            frames: B x C x H selected frames
            frame_valid: B x C
            objects: B x C x O x H selected objects per frame
            object_valid: B x C x O
            question: B x L x H

        Returns:
            Tuple of (B x (C+L) x H representations, B x (C+L) validity mask)
        """
        B, C, O, H = objects.shape
        enhanced = self.intra_frame(
            frames.reshape(B * C, 1, H),
            objects.reshape(B * C, O, H),
            object_valid.reshape(B * C, O),
        )
        frames = frames + enhanced.tokens.reshape(B, C, H)

        sequence = torch.cat([frames, question], dim=1)
        valid = torch.cat(
            [frame_valid, torch.ones(B, question.shape[1], dtype=torch.bool)], dim=1
        )
        return self.encoder_layer(sequence, src_key_padding_mask=~valid), valid


class AnswerDecoder(nn.Module):
    """Transformer decoder over answer queries without position encoding"""

    def __init__(
        self,
        hidden_size: int,
        vocab_size: int,
        num_heads: int = 1,
        num_layers: int = 1,
    ):
        super().__init__()
        layer = nn.TransformerDecoderLayer(
            hidden_size,
            num_heads,
            dim_feedforward=2 * hidden_size,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
        )
        self.decoder = nn.TransformerDecoder(layer, num_layers)
        self.mc_head = nn.Linear(hidden_size, 1)
        self.oe_query = nn.Parameter(torch.randn(hidden_size) * 0.02)
        self.oe_head = nn.Linear(hidden_size, vocab_size)

    def open_ended_queries(self, batch_size: int) -> DecoderQuerySet:
        return DecoderQuerySet(
            queries=self.oe_query.expand(batch_size, 1, self.oe_query.shape[0]),
            mode=AnswerMode.OPEN_ENDED,
        )

    def _decode(self, queries, memory, memory_valid):
        padding = None if memory_valid is None else ~memory_valid
        return self.decoder(queries, memory, memory_key_padding_mask=padding)

    def decode_mc(
        self,
        queries: torch.Tensor,
        memory: torch.Tensor,
        memory_valid: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """One logit per candidate query (B x A x H -> B x A)"""
        return self.mc_head(self._decode(queries, memory, memory_valid)).squeeze(-1)

    def decode_oe(
        self,
        memory: torch.Tensor,
        memory_valid: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Learnable query decoded to answer-vocabulary logits (B x vocab)"""
        queries = self.open_ended_queries(memory.shape[0]).queries
        return self.oe_head(self._decode(queries, memory, memory_valid)).squeeze(1)


class TranSTRModel(nn.Module):
    """Frame and object rationalization, multi-grain reasoning and answer decoding"""

    def __init__(
        self,
        input_size: int,
        hidden_size: int,
        num_answers: int,
        k_f: int = 5,
        k_o: int = 12,
        sigma: float = 0.5,
        samples: int = 100,
        num_heads: int = 1,
        decoder_layers: int = 1,
        answer_mode: AnswerMode = AnswerMode.OPEN_ENDED,
        answer_tokens: Optional[torch.Tensor] = None,
    ):
        super().__init__()
        self.k_f, self.k_o = k_f, k_o
        self.sigma, self.samples = sigma, samples
        self.answer_mode = AnswerMode(answer_mode)

        self.frame_proj = nn.Linear(input_size, hidden_size)
        self.object_proj = nn.Linear(input_size, hidden_size)
        self.question_encoder = SequenceEncoder(input_size, hidden_size)
        self.temporal = Rationalizer(hidden_size, num_heads)
        self.spatial = Rationalizer(hidden_size, num_heads)
        self.mgr = MultiGrainReasoning(hidden_size, num_heads)
        self.decoder = AnswerDecoder(hidden_size, num_answers, num_heads, decoder_layers)

        if self.answer_mode == AnswerMode.MULTI_CHOICE:
            if answer_tokens is None:
                raise ConfigurationError("Multi-choice decoding needs answer token features")
            self.candidate_proj = nn.Linear(input_size, hidden_size)
            self.register_buffer("answer_tokens", torch.as_tensor(answer_tokens, dtype=torch.float32))

    def candidate_queries(self, batch_size: int) -> DecoderQuerySet:
        """Mean-pooled answer token features projected to one query per class"""
        summaries = self.candidate_proj(self.answer_tokens.mean(dim=1))
        return DecoderQuerySet(
            queries=summaries.unsqueeze(0).expand(batch_size, *summaries.shape),
            mode=AnswerMode.MULTI_CHOICE,
        )

    def forward(
        self,
        clips: torch.Tensor,
        objects: Optional[torch.Tensor],
        tokens: torch.Tensor,
        generator: Optional[torch.Generator] = None,
    ) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
        """
        Answer logits with the selected rationale

        Args:
            clips: B x T x d frame features
            objects: B x T x S x d object features
            tokens: B x L x d question tokens
            generator: Random stream for perturbed Top-K during training

        Returns:
            Tuple of (B x num_answers logits, rationale dict with frame/object selections)
        """
        if objects is None:
            raise ConfigurationError("The rationalizer needs per-frame object features")

        select_kwargs = dict(
            training=self.training, sigma=self.sigma, samples=self.samples, generator=generator
        )
        frames = self.frame_proj(clips)
        question, _ = self.question_encoder(tokens)

        _, frame_sel = temporal_rationalize(self.temporal, frames, question, self.k_f, **select_kwargs)

        B, C = frame_sel.indices.shape
        object_tokens = self.object_proj(objects)
        gather_index = frame_sel.indices.clamp_min(0)
        frame_objects = object_tokens[torch.arange(B).unsqueeze(1), gather_index]
        _, object_sel = spatial_rationalize(
            self.spatial, frame_objects, question, self.k_o, **select_kwargs
        )

        O = object_sel.indices.shape[1]
        objects_sel = object_sel.selected.reshape(B, C, O, -1)
        object_valid = object_sel.valid.reshape(B, C, O) & frame_sel.valid.unsqueeze(-1)

        memory, memory_valid = self.mgr(
            frame_sel.selected, frame_sel.valid, objects_sel, object_valid, question
        )

        if self.answer_mode == AnswerMode.MULTI_CHOICE:
            logits = self.decoder.decode_mc(self.candidate_queries(B).queries, memory, memory_valid)
        else:
            logits = self.decoder.decode_oe(memory, memory_valid)

        rationale = {
            "frame_indices": frame_sel.indices,
            "frame_valid": frame_sel.valid,
            "object_indices": object_sel.indices.reshape(B, C, O),
            "object_valid": object_valid,
        }
        return logits, rationale


def dump_rationales(
    path,
    ids: Sequence[str],
    rationale: Dict[str, torch.Tensor],
    append: bool = True,
) -> Path:
    """Write {id, frame_indices, objects_per_frame_indices} JSON lines"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines: List[str] = []
    for i, instance_id in enumerate(ids):
        frames = rationale["frame_indices"][i]
        frame_valid = rationale["frame_valid"][i]
        per_frame = []
        for c in range(frames.shape[0]):
            if not bool(frame_valid[c]):
                continue
            objs = rationale["object_indices"][i, c][rationale["object_valid"][i, c]]
            per_frame.append([int(o) for o in objs])
        lines.append(
            json.dumps(
                {
                    "id": instance_id,
                    "frame_indices": [int(f) for f in frames[frame_valid]],
                    "objects_per_frame_indices": per_frame,
                }
            )
        )
    with open(path, "a" if append else "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
    return path
