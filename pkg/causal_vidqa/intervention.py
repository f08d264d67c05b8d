#!/usr/bin/env python3
"""
Scene Intervention
Memory bank of environment scenes, environment substitution, equivariant and
invariant mixing, and construction of contrastive positives/negatives.
"""

import logging
import math
import threading
from collections import deque
from contextlib import nullcontext
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .schema import (
    BankStateError,
    ConfigurationError,
    ContrastiveSet,
    EncodedQuestion,
    EnvironmentScene,
    MixCoefficients,
    SceneSplit,
    ShapeError,
    SplitMode,
)

DEFAULT_BANK_CAPACITY = 4096

logger = logging.getLogger("Intervention")


class MemoryBank:
    """FIFO pool of environment scenes harvested from training instances"""

    def __init__(self, capacity: int = DEFAULT_BANK_CAPACITY):
        if capacity < 1:
            raise ConfigurationError(f"bank capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries: deque = deque(maxlen=capacity)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def insert(self, scene: EnvironmentScene):
        """Add one scene, evicting the oldest at capacity"""
        if scene.features.shape[0] == 0:
            return
        with self._lock:
            self._entries.append(scene)

    def insert_split(self, split: SceneSplit, ids: Optional[Sequence[str]] = None) -> int:
        """
        Harvest the environment view of every instance in a split

        Args:
            split: Select- or mask-mode split
            ids: Source ids recorded with each scene

        Returns:
            Number of scenes inserted
        """
        inserted = 0
        env_members = ~split.causal_mask
        for b in range(split.indicator.shape[0]):
            if split.mode == SplitMode.SELECT:
                length = int(split.environment_lengths[b])
                features = split.environment[b, :length]
                positions = split.environment_positions[b, :length].tolist()
            else:
                positions = torch.nonzero(env_members[b]).flatten().tolist()
                features = split.environment_full[b, positions]
            if not positions:
                continue
            self.insert(
                EnvironmentScene(
                    features=features.detach().clone(),
                    positions=positions,
                    source_id=ids[b] if ids is not None else "",
                )
            )
            inserted += 1
        return inserted

    def sample(self, rng: np.random.Generator) -> EnvironmentScene:
        """Uniformly sample one scene"""
        with self._lock:
            if not self._entries:
                raise BankStateError("Cannot sample from an empty memory bank")
            return self._entries[int(rng.integers(len(self._entries)))]

    def fill(self, rng: np.random.Generator, batch_size: int, length: int) -> torch.Tensor:
        """Sample one scene per instance and tile each to `length` rows"""
        return torch.stack(
            [tile_to_length(self.sample(rng).features, length) for _ in range(batch_size)]
        )


class QuestionPool:
    """FIFO pool of raw question tokens used for textual negatives"""

    def __init__(self, capacity: int = DEFAULT_BANK_CAPACITY):
        self._entries: deque = deque(maxlen=capacity)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def add(self, ids: Sequence[str], tokens: torch.Tensor):
        with self._lock:
            for question_id, row in zip(ids, tokens):
                self._entries.append((question_id, row.detach().clone()))

    def sample_excluding(
        self, rng: np.random.Generator, exclude_id: str
    ) -> Tuple[str, torch.Tensor]:
        """Uniformly sample a question whose id differs from exclude_id"""
        with self._lock:
            candidates = [i for i, (qid, _) in enumerate(self._entries) if qid != exclude_id]
            if not candidates:
                raise BankStateError(f"No question in the pool other than {exclude_id}")
            return self._entries[candidates[int(rng.integers(len(candidates)))]]


def tile_to_length(features: torch.Tensor, length: int) -> torch.Tensor:
    """Cyclically tile rows of features, then truncate to `length` rows"""
    if features.shape[0] == 0:
        raise BankStateError("Cannot tile an empty environment scene")
    index = torch.arange(length) % features.shape[0]
    return features[index]


def intervene_environment(
    split: SceneSplit, bank: MemoryBank, rng: np.random.Generator
) -> torch.Tensor:
    """
    Replace the environment clips of each instance with a sampled bank scene

    Args:
        split: Select-mode split
        bank: Non-empty memory bank
        rng: Random stream for bank sampling

    Returns:
        B x K x d intervened videos; causal rows keep their original values and positions
    """
    if split.mode != SplitMode.SELECT:
        raise ConfigurationError("intervene_environment needs a select-mode split")

    fill = torch.zeros_like(split.causal_full)
    for b in range(fill.shape[0]):
        length = int(split.environment_lengths[b])
        if length == 0:
            continue
        scene = bank.sample(rng)
        positions = split.environment_positions[b, :length]
        fill[b, positions] = tile_to_length(scene.features, length).to(fill.dtype)
    return split.causal_full + fill


def sample_mix_coefficients(rng: np.random.Generator, alpha: float = 1.0) -> MixCoefficients:
    """lambda0 ~ Beta(alpha, alpha), lambda1 ~ Uniform(0, 1)"""
    if alpha <= 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    return MixCoefficients(
        lambda0=float(rng.beta(alpha, alpha)),
        lambda1=float(rng.uniform(0.0, 1.0)),
        alpha=alpha,
    )


def _mix(x1: torch.Tensor, x2: torch.Tensor, weight: float, name: str) -> torch.Tensor:
    if x1.shape != x2.shape:
        raise ShapeError(f"{name} shapes differ: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    return weight * x1 + (1.0 - weight) * x2


QuestionLike = Union[torch.Tensor, EncodedQuestion]


def _mix_question(q1: QuestionLike, q2: QuestionLike, weight: float) -> QuestionLike:
    if isinstance(q1, EncodedQuestion):
        if not isinstance(q2, EncodedQuestion):
            raise ShapeError("Both questions must be encoded the same way")
        return EncodedQuestion(
            q_local=_mix(q1.q_local, q2.q_local, weight, "q_local"),
            q_global=_mix(q1.q_global, q2.q_global, weight, "q_global"),
        )
    return _mix(q1, q2, weight, "question")


def e_intervention(
    c1: torch.Tensor,
    q1: QuestionLike,
    a1: torch.Tensor,
    c2: torch.Tensor,
    q2: QuestionLike,
    a2: torch.Tensor,
    lambda0: float,
) -> Tuple[torch.Tensor, QuestionLike, torch.Tensor]:
    """
    Equivariant mixing of causal scene, question and answer with one ratio

    Returns:
        (c_star, q_star, a_star)
    """
    return (
        _mix(c1, c2, lambda0, "causal scene"),
        _mix_question(q1, q2, lambda0),
        _mix(a1, a2, lambda0, "answer"),
    )


def i_intervention(e1: torch.Tensor, e2: torch.Tensor, lambda1: float) -> torch.Tensor:
    """Invariant mixing of two environment scenes"""
    return _mix(e1, e2, lambda1, "environment scene")


def compose(c_star: torch.Tensor, e_star: torch.Tensor) -> torch.Tensor:
    """Intervened video v* = c* + e*"""
    if c_star.shape != e_star.shape:
        raise ShapeError(f"Cannot compose {tuple(c_star.shape)} with {tuple(e_star.shape)}")
    return c_star + e_star


def negative_counts(num_negatives: int, disrupt_video: bool = True, disrupt_question: bool = True):
    """Split N negatives into (visual, textual) counts"""
    if num_negatives < 1:
        raise ConfigurationError(f"num_negatives must be >= 1, got {num_negatives}")
    if not disrupt_video and not disrupt_question:
        raise ConfigurationError("At least one of video or question disruption must be enabled")
    if not disrupt_question:
        return num_negatives, 0
    if not disrupt_video:
        return 0, num_negatives
    return math.ceil(num_negatives / 2), num_negatives // 2


def build_contrastive(
    v_star: torch.Tensor,
    q_star: EncodedQuestion,
    ground: Callable[[torch.Tensor, EncodedQuestion], SceneSplit],
    bank: MemoryBank,
    question_pool: Optional[QuestionPool],
    num_negatives: int,
    rng: np.random.Generator,
    anchor_question_ids: Sequence[str],
    encode_question: Optional[Callable[[torch.Tensor], EncodedQuestion]] = None,
    disrupt_video: bool = True,
    disrupt_question: bool = True,
    regrounding_grad: bool = False,
) -> ContrastiveSet:
    """
    Build the environment-swapped positive and causal/question-swapped negatives

    Args:
        v_star: B x K x d_h intervened videos
        q_star: Intervened question representation
        ground: Re-grounding function returning a mask-mode split
        bank: Memory bank of environment scenes (mask-mode rows)
        question_pool: Raw question tokens for textual negatives
        num_negatives: Total negatives N
        rng: Random stream for bank and pool sampling
        anchor_question_ids: Question id of each anchor, excluded from textual negatives
        encode_question: Encoder applied to sampled question tokens
        disrupt_video: Build visual negatives
        disrupt_question: Build textual negatives
        regrounding_grad: Let gradients flow through the second grounding pass

    Returns:
        ContrastiveSet with N negatives per anchor
    """
    n_visual, n_textual = negative_counts(num_negatives, disrupt_video, disrupt_question)
    B, K = v_star.shape[0], v_star.shape[1]

    context = nullcontext() if regrounding_grad else torch.no_grad()
    with context:
        regrounded = ground(v_star, q_star)
    causal_weight = regrounded.indicator[..., 0:1]
    env_weight = regrounded.indicator[..., 1:2]
    c_re, e_re = regrounded.causal_full, regrounded.environment_full

    positive = c_re + env_weight * bank.fill(rng, B, K).to(v_star.dtype)

    negatives: List[Tuple[torch.Tensor, EncodedQuestion]] = []
    for _ in range(n_visual):
        v_minus = e_re + causal_weight * bank.fill(rng, B, K).to(v_star.dtype)
        negatives.append((v_minus, q_star))

    if n_textual:
        if question_pool is None or encode_question is None:
            raise ConfigurationError("Textual negatives need a question pool and encoder")
        for _ in range(n_textual):
            tokens = torch.stack(
                [question_pool.sample_excluding(rng, qid)[1] for qid in anchor_question_ids]
            )
            negatives.append((v_star, encode_question(tokens)))

    return ContrastiveSet(
        anchor_video=v_star,
        anchor_question=q_star,
        positive=positive,
        negatives=negatives,
        regrounded=regrounded.indicator,
    )
