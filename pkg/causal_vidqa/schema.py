#!/usr/bin/env python3
"""
Schema Definitions
Centralized dataclasses, enums and error types used across the Causal VideoQA Lab.
"""

from dataclasses import dataclass, field
from enum import StrEnum
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch


# Errors
class ConfigurationError(ValueError):
    """Raised when a configuration value violates its documented range"""


class DegenerateInputError(ValueError):
    """Raised when an input has no elements to operate on"""


class ShapeError(ValueError):
    """Raised when tensor shapes do not match an operation's contract"""


class NumericError(ArithmeticError):
    """Raised when an input contains non-finite values"""


class BankStateError(RuntimeError):
    """Raised when sampling from an empty memory bank or question pool"""


class DivergenceError(RuntimeError):
    """Raised when a training loss becomes non-finite"""


class InvalidInstanceError(ValueError):
    """Raised when a loaded video or question fails its validity check"""


# Enums
class QuestionType(StrEnum):
    """String enum for synthetic question types"""

    DESCRIPTIVE = "descriptive"
    TEMPORAL = "temporal"
    CAUSAL = "causal"


class Method(StrEnum):
    """Training methods supported by the harness"""

    ERM = "erm"
    MIXUP = "mixup"
    IGV = "igv"
    EIGV = "eigv"
    TRANSTR = "transtr"


class SplitMode(StrEnum):
    """How a grounding indicator turns a video into two scenes"""

    SELECT = "select"
    MASK = "mask"


class OODMode(StrEnum):
    """Environment-answer coupling used for the OOD test split"""

    UNIFORM = "uniform"
    INVERTED = "inverted"


class AnswerMode(StrEnum):
    """Answer decoding style for the rationalizer"""

    OPEN_ENDED = "oe"
    MULTI_CHOICE = "mc"


class OptimizerKind(StrEnum):
    """Optimizer families available to the trainer"""

    SGD = "sgd"
    ADAM = "adam"


class RunStatus(StrEnum):
    """Final state of a training run"""

    COMPLETED = "completed"
    DIVERGED = "diverged"
    FAILED = "failed"


QUESTION_TYPES: List[QuestionType] = list(QuestionType)


# Synthetic data dataclasses
@dataclass
class GenConfig:
    """Parameters of the synthetic causal VideoQA generator"""

    num_videos: int = 2000
    K: int = 16
    d: int = 16
    L: int = 4
    num_answers: int = 5
    causal_span: Tuple[int, int] = (2, 5)
    bias_rho: float = 0.9
    noise_sigma: float = 0.6
    seed: int = 0
    num_objects: int = 0
    answer_token_len: int = 2
    splits: Tuple[float, float, float, float] = (0.7, 0.1, 0.1, 0.1)
    ood_mode: OODMode = OODMode.UNIFORM
    centroid_scale: float = 1.5
    position_scale: float = 0.5
    hint_scale: float = 2.0

    def validate(self) -> None:
        """Raise ConfigurationError when any documented invariant is violated"""
        lo, hi = self.causal_span
        if self.num_videos < 1:
            raise ConfigurationError(f"num_videos must be >= 1, got {self.num_videos}")
        if self.K < 2:
            raise ConfigurationError(f"K must be >= 2, got {self.K}")
        if self.d < 2:
            raise ConfigurationError(f"d must be >= 2, got {self.d}")
        if self.L < 2:
            raise ConfigurationError(f"L must be >= 2 (type token + hint), got {self.L}")
        if not 1 <= lo <= hi < self.K:
            raise ConfigurationError(
                f"causal_span must satisfy 1 <= min <= max < K, got {self.causal_span} with K={self.K}"
            )
        if not 0.0 <= self.bias_rho <= 1.0:
            raise ConfigurationError(f"bias_rho must be in [0, 1], got {self.bias_rho}")
        if self.num_answers < 2:
            raise ConfigurationError(f"num_answers must be >= 2, got {self.num_answers}")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.num_objects < 0:
            raise ConfigurationError(f"num_objects must be >= 0, got {self.num_objects}")
        if len(self.splits) != 4 or any(s < 0 for s in self.splits):
            raise ConfigurationError(f"splits must be four nonnegative fractions, got {self.splits}")
        if abs(sum(self.splits) - 1.0) > 1e-6:
            raise ConfigurationError(f"splits must sum to 1, got {sum(self.splits)}")
        OODMode(self.ood_mode)


@dataclass
class VideoInstance:
    """A video as K clip feature vectors with its generator ground truth"""

    id: str
    clips: np.ndarray
    causal_mask: Optional[np.ndarray] = None
    objects: Optional[np.ndarray] = None
    env_cluster: Optional[int] = None

    def is_valid(self) -> bool:
        """Validate clip features and the causal mask"""
        if not np.all(np.isfinite(self.clips)):
            return False
        if self.causal_mask is not None and not bool(self.causal_mask.any()):
            return False
        return True


@dataclass
class QuestionInstance:
    """A question as L token feature vectors with its type and answer label"""

    id: str
    tokens: np.ndarray
    qtype: QuestionType
    answer: int

    def is_valid(self, num_answers: int) -> bool:
        """Validate token features and answer range"""
        return bool(np.all(np.isfinite(self.tokens))) and 0 <= self.answer < num_answers


@dataclass
class CausalMechanism:
    """Fixed parameters shared by every split: centroids and question offsets"""

    causal_centroids: np.ndarray
    env_centroids: np.ndarray
    qtype_embeddings: np.ndarray
    qtype_offsets: np.ndarray
    position_codes: np.ndarray
    answer_tokens: np.ndarray
    causal_dims: int


Pair = Tuple[VideoInstance, QuestionInstance]


@dataclass
class DatasetBundle:
    """Train/val/test splits of (video, question) pairs plus the generating config"""

    train: List[Pair]
    val: List[Pair]
    test_iid: List[Pair]
    test_ood: List[Pair]
    gen_config: GenConfig
    mechanism: Optional[CausalMechanism] = None

    SPLIT_NAMES = ("train", "val", "test_iid", "test_ood")

    def split(self, name: str) -> List[Pair]:
        """Return one split by name"""
        if name not in self.SPLIT_NAMES:
            raise KeyError(f"Unknown split: {name}")
        return getattr(self, name)

    def has_ground_truth(self) -> bool:
        """Whether every instance carries a causal mask"""
        return all(
            video.causal_mask is not None
            for name in self.SPLIT_NAMES
            for video, _ in self.split(name)
        )


@dataclass
class Batch:
    """Collated tensors for a list of pairs"""

    ids: List[str]
    question_ids: List[str]
    clips: torch.Tensor
    tokens: torch.Tensor
    answers: torch.Tensor
    qtypes: List[QuestionType]
    causal_masks: Optional[torch.Tensor] = None
    objects: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return len(self.ids)


# Encoder outputs
@dataclass
class EncodedVideo:
    """Local clip representations and the holistic video representation"""

    v_local: torch.Tensor
    v_global: torch.Tensor


@dataclass
class EncodedQuestion:
    """Local token representations and the holistic question representation"""

    q_local: torch.Tensor
    q_global: torch.Tensor


# Grounding dataclasses
@dataclass
class AttentionScores:
    """Clip-wise probabilities of belonging to the causal and environment scenes"""

    p_c: torch.Tensor
    p_e: torch.Tensor


@dataclass
class SceneSplit:
    """A video split into estimated causal and environment scenes.

    In select mode `causal`/`environment` hold the member clips packed to the front
    (original order kept) with `*_lengths` valid rows and `*_positions` recording where
    each packed row came from. `causal_full`/`environment_full` hold the same views at
    their original positions with the other side zeroed, which is the mask-mode view.
    """

    indicator: torch.Tensor
    causal: torch.Tensor
    environment: torch.Tensor
    mode: SplitMode
    causal_mask: torch.Tensor
    causal_full: torch.Tensor
    environment_full: torch.Tensor
    causal_lengths: Optional[torch.Tensor] = None
    environment_lengths: Optional[torch.Tensor] = None
    causal_positions: Optional[torch.Tensor] = None
    environment_positions: Optional[torch.Tensor] = None
    repaired: Optional[torch.Tensor] = None


# Intervention dataclasses
@dataclass
class EnvironmentScene:
    """Environment clips harvested from one training instance"""

    features: torch.Tensor
    positions: List[int]
    source_id: str = ""


@dataclass
class MixCoefficients:
    """Mixing ratios for the equivariant and invariant interventions"""

    lambda0: float
    lambda1: float
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.lambda0 <= 1.0 or not 0.0 <= self.lambda1 <= 1.0:
            raise ConfigurationError(
                f"mixing ratios must lie in [0, 1], got {self.lambda0}, {self.lambda1}"
            )
        if self.alpha <= 0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")


@dataclass
class InterventionSample:
    """An intervened video/question/soft-answer triple"""

    v_star: torch.Tensor
    q_star: EncodedQuestion
    a_star: torch.Tensor
    c_star: torch.Tensor
    e_star: torch.Tensor
    provenance: Dict[str, object] = field(default_factory=dict)


@dataclass
class ContrastiveSet:
    """Anchor, environment-swapped positive and causal/question-swapped negatives"""

    anchor_video: torch.Tensor
    anchor_question: EncodedQuestion
    positive: torch.Tensor
    negatives: List[Tuple[torch.Tensor, EncodedQuestion]]
    regrounded: Optional[torch.Tensor] = None


# Objective dataclasses
@dataclass
class PredictionDistribution:
    """Answer logits and their softmax"""

    logits: torch.Tensor

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def log_probs(self) -> torch.Tensor:
        return torch.log_softmax(self.logits, dim=-1)


@dataclass
class LossWeights:
    """Weights of the IGV and EIGV aggregate objectives"""

    igv_lambda1: float = 1.0
    igv_lambda2: float = 1.0
    beta: float = 0.75

    def __post_init__(self):
        for name in ("igv_lambda1", "igv_lambda2", "beta"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative, got {getattr(self, name)}")


# Backbone dataclasses
@dataclass
class GraphState:
    """Clip and token nodes with their normalized adjacency"""

    nodes: torch.Tensor
    adjacency: torch.Tensor
    node_mask: Optional[torch.Tensor] = None


@dataclass
class FusedRepresentation:
    """Local, global and final fused representations of a scene-question pair"""

    s_local: torch.Tensor
    s_global: torch.Tensor
    s_final: torch.Tensor


# Rationalizer dataclasses
@dataclass
class CrossAttentionOutput:
    """Attended tokens, the query-by-key attention map and its pre-softmax scores"""

    tokens: torch.Tensor
    attn_map: torch.Tensor
    scores: Optional[torch.Tensor] = None


@dataclass
class SelectionResult:
    """Tokens gathered by adaptive Top-K selection.

    `indices` is padded with -1 beyond `counts`; `valid` marks real rows of `selected`.
    """

    selected: torch.Tensor
    indices: torch.Tensor
    valid: torch.Tensor
    weights: torch.Tensor
    counts: torch.Tensor


@dataclass
class DecoderQuerySet:
    """Answer queries fed to the answer decoder"""

    queries: torch.Tensor
    mode: AnswerMode


# Harness dataclasses
@dataclass
class MetricsRecord:
    """Evaluation metrics of one split, optionally at one epoch"""

    split: str
    accuracy: float
    count: int
    per_qtype_accuracy: Dict[str, float] = field(default_factory=dict)
    grounding_precision: Optional[float] = None
    grounding_recall: Optional[float] = None
    grounding_iou: Optional[float] = None
    iou_values: List[float] = field(default_factory=list)
    losses: Dict[str, float] = field(default_factory=dict)
    epoch: Optional[int] = None

    def is_valid(self) -> bool:
        """Validate that bounded metrics lie in [0, 1]"""
        bounded = [self.accuracy, self.grounding_precision, self.grounding_recall, self.grounding_iou]
        bounded += list(self.per_qtype_accuracy.values())
        return all(v is None or 0.0 <= v <= 1.0 for v in bounded)


@dataclass
class RunRecord:
    """Everything needed to reproduce and report one training run"""

    run_id: str
    method: Method
    seed: int
    config: Dict[str, object]
    epochs: List[Dict[str, object]] = field(default_factory=list)
    final_metrics: Dict[str, MetricsRecord] = field(default_factory=dict)
    checkpoint: Optional[str] = None
    wall_clock: float = 0.0
    status: RunStatus = RunStatus.COMPLETED
    message: str = "-"
