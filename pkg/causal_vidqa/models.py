#!/usr/bin/env python3
"""
Model Assemblies
ERM, mixup, invariant grounding (IGV), equivariant-invariant grounding (EIGV) and
rationalizer models behind one training/inference interface.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackbonePredictor
from .config import RunConfig
from .encoders import VideoQAEncoder
from .grounding import GroundingIndicator, gumbel_indicator, split_mask, split_select
from .intervention import (
    MemoryBank,
    QuestionPool,
    build_contrastive,
    compose,
    e_intervention,
    i_intervention,
    intervene_environment,
    sample_mix_coefficients,
)
from .objectives import (
    causal_loss,
    consistency_loss,
    eigv_objective,
    environment_loss,
    igv_objective,
    info_nce,
    soft_cross_entropy,
)
from .rationalizer import TranSTRModel
from .schema import (
    AttentionScores,
    Batch,
    ConfigurationError,
    EncodedQuestion,
    InterventionSample,
    LossWeights,
    Method,
    PredictionDistribution,
    SceneSplit,
)

logger = logging.getLogger("Models")


@dataclass
class StepContext:
    """Random streams and schedule values for one training step"""

    rng: np.random.Generator
    generator: torch.Generator
    temperature: float = 1.0


@dataclass
class GroundingOutput:
    """Predicted causal clips for a batch"""

    mask: torch.Tensor
    scores: Optional[AttentionScores] = None
    indicator: Optional[torch.Tensor] = None


def _zero_noise(scores: AttentionScores) -> torch.Tensor:
    return torch.zeros(scores.p_c.shape + (2,), dtype=scores.p_c.dtype)


class VideoQAModel(nn.Module):
    """Shared interface: training_step for the loss, predict_logits for inference"""

    method: Method = Method.ERM

    def training_step(self, batch: Batch, ctx: StepContext) -> Tuple[torch.Tensor, Dict[str, float]]:
        raise NotImplementedError

    def predict_logits(self, batch: Batch) -> torch.Tensor:
        raise NotImplementedError

    def ground(self, batch: Batch) -> Optional[GroundingOutput]:
        return None


class ERMModel(VideoQAModel):
    """Backbone trained with plain cross-entropy on the full video"""

    method = Method.ERM

    def __init__(self, input_size: int, hidden_size: int, num_answers: int, graph_layers: int = 2, fusion_rank: int = 4):
        super().__init__()
        self.num_answers = num_answers
        self.encoder = VideoQAEncoder(input_size, hidden_size)
        self.predictor = BackbonePredictor(input_size, hidden_size, num_answers, graph_layers, fusion_rank)

    def training_step(self, batch, ctx):
        question = self.encoder.encode_question(batch.tokens)
        loss = causal_loss(self.predictor.predict(batch.clips, question), batch.answers)
        return loss, {"loss": loss.item()}

    def predict_logits(self, batch):
        question = self.encoder.encode_question(batch.tokens)
        return self.predictor.predict(batch.clips, question).logits


class MixupModel(ERMModel):
    """Backbone trained on interpolated videos, questions and answers"""

    method = Method.MIXUP

    def __init__(self, *args, alpha: float = 1.0, **kwargs):
        super().__init__(*args, **kwargs)
        self.alpha = alpha

    def training_step(self, batch, ctx):
        lam = float(ctx.rng.beta(self.alpha, self.alpha))
        perm = torch.from_numpy(ctx.rng.permutation(len(batch)))
        clips = lam * batch.clips + (1.0 - lam) * batch.clips[perm]
        tokens = lam * batch.tokens + (1.0 - lam) * batch.tokens[perm]
        answers = F.one_hot(batch.answers, self.num_answers).float()
        a_mix = lam * answers + (1.0 - lam) * answers[perm]

        question = self.encoder.encode_question(tokens)
        loss = soft_cross_entropy(self.predictor.predict(clips, question), a_mix)
        return loss, {"loss": loss.item(), "lambda": lam}


class IGVModel(VideoQAModel):
    """
    Invariant grounding: split clips into causal/environment scenes, replace the
    environment from a memory bank, and train three predictions of one backbone.
    Inference answers from the causal scene only.
    """

    method = Method.IGV

    def __init__(
        self,
        input_size: int,
        hidden_size: int,
        num_answers: int,
        weights: LossWeights,
        graph_layers: int = 2,
        fusion_rank: int = 4,
        projection_depth: int = 1,
        bank_capacity: int = 4096,
        environment_grad: bool = False,
    ):
        super().__init__()
        self.weights = weights
        self.environment_grad = environment_grad
        self.encoder = VideoQAEncoder(input_size, hidden_size)
        self.grounding = GroundingIndicator(hidden_size, depth=projection_depth)
        self.predictor = BackbonePredictor(input_size, hidden_size, num_answers, graph_layers, fusion_rank)
        self.bank = MemoryBank(bank_capacity)

    def split(
        self,
        batch: Batch,
        temperature: float = 1.0,
        generator: Optional[torch.Generator] = None,
        deterministic: bool = False,
    ) -> Tuple[SceneSplit, EncodedQuestion, AttentionScores]:
        video = self.encoder.encode_video(batch.clips)
        question = self.encoder.encode_question(batch.tokens)
        scores = self.grounding.attention_scores(video.v_local, question.q_global)
        noise = _zero_noise(scores) if deterministic else None
        indicator = gumbel_indicator(scores, temperature, hard=True, generator=generator, noise=noise)
        return split_select(batch.clips, indicator, scores), question, scores

    def losses(self, batch: Batch, ctx: StepContext) -> Tuple[Dict[str, torch.Tensor], SceneSplit]:
        """
        The three IGV loss terms of one batch

        The environment term reaches the clip assignment only when environment_grad
        is set: through the clip softmax, lowering p_e on environment clips raises it
        on the causal ones and empties the causal scene. The consistency target is
        the detached causal prediction.
        """
        split, question, _ = self.split(batch, ctx.temperature, ctx.generator)
        pred_causal = self.predictor.predict(split.causal, question, split.causal_lengths)

        environment = split.environment if self.environment_grad else split.environment.detach()
        pred_env = self.predictor.predict(environment, question, split.environment_lengths)

        self.bank.insert_split(split, batch.ids)
        v_star = intervene_environment(split, self.bank, ctx.rng)
        pred_vstar = self.predictor.predict(v_star, question)
        target = PredictionDistribution(logits=pred_causal.logits.detach())

        return {
            "l_causal": causal_loss(pred_causal, batch.answers),
            "l_environment": environment_loss(pred_env),
            "l_vstar": consistency_loss(pred_vstar, target),
        }, split

    def training_step(self, batch, ctx):
        terms, split = self.losses(batch, ctx)
        loss = igv_objective(terms["l_causal"], terms["l_environment"], terms["l_vstar"], self.weights)
        stats = {"loss": loss.item()}
        stats.update({name: value.item() for name, value in terms.items()})
        stats["causal_fraction"] = split.causal_mask.float().mean().item()
        return loss, stats

    def predict_logits(self, batch):
        split, question, _ = self.split(batch, deterministic=True)
        return self.predictor.predict(split.causal, question, split.causal_lengths).logits

    def ground(self, batch):
        split, _, scores = self.split(batch, deterministic=True)
        return GroundingOutput(mask=split.causal_mask, scores=scores, indicator=split.indicator)


class EIGVModel(VideoQAModel):
    """
    Equivariant-invariant grounding: additive scene masks, mixing of causal factors
    and environments across instance pairs, soft-label risk plus a contrastive term.
    Inference runs the backbone on the full video.
    """

    method = Method.EIGV

    def __init__(
        self,
        input_size: int,
        hidden_size: int,
        num_answers: int,
        beta: float = 0.75,
        alpha: float = 1.0,
        num_negatives: int = 5,
        graph_layers: int = 2,
        fusion_rank: int = 4,
        projection_depth: int = 1,
        bank_capacity: int = 4096,
        hard: bool = True,
        use_intervener: bool = True,
        disrupt_video: bool = True,
        disrupt_question: bool = True,
        regrounding_grad: bool = False,
    ):
        super().__init__()
        self.num_answers = num_answers
        self.beta, self.alpha, self.num_negatives = beta, alpha, num_negatives
        self.hard = hard
        self.use_intervener = use_intervener
        self.disrupt_video, self.disrupt_question = disrupt_video, disrupt_question
        self.regrounding_grad = regrounding_grad

        self.encoder = VideoQAEncoder(input_size, hidden_size)
        self.grounding = GroundingIndicator(hidden_size, depth=projection_depth)
        self.predictor = BackbonePredictor(hidden_size, hidden_size, num_answers, graph_layers, fusion_rank)
        self.bank = MemoryBank(bank_capacity)
        self.question_pool = QuestionPool(bank_capacity)
        self.last_intervention: Optional[InterventionSample] = None

    def split(
        self,
        video: torch.Tensor,
        question: EncodedQuestion,
        temperature: float = 1.0,
        generator: Optional[torch.Generator] = None,
        deterministic: bool = False,
    ) -> Tuple[SceneSplit, AttentionScores]:
        scores = self.grounding.attention_scores(video, question.q_global)
        noise = _zero_noise(scores) if deterministic else None
        indicator = gumbel_indicator(
            scores, temperature, hard=self.hard or deterministic, generator=generator, noise=noise
        )
        return split_mask(video, indicator), scores

    def intervene(
        self,
        split: SceneSplit,
        question: EncodedQuestion,
        answers: torch.Tensor,
        rng: np.random.Generator,
    ) -> InterventionSample:
        """
        Mix causal scenes, questions and answers across a batch permutation by lambda0
        and environments by an independent lambda1

        Provenance records the partner index of every instance and both ratios; without
        the intervener the sample is the recomposed video with its own question and answer.
        """
        if not self.use_intervener:
            return InterventionSample(
                v_star=compose(split.causal, split.environment),
                q_star=question,
                a_star=answers,
                c_star=split.causal,
                e_star=split.environment,
                provenance={"partner": None},
            )

        perm = torch.from_numpy(rng.permutation(answers.shape[0]))
        coeffs = sample_mix_coefficients(rng, self.alpha)
        c_star, q_star, a_star = e_intervention(
            split.causal,
            question,
            answers,
            split.causal[perm],
            EncodedQuestion(q_local=question.q_local[perm], q_global=question.q_global[perm]),
            answers[perm],
            coeffs.lambda0,
        )
        e_star = i_intervention(split.environment, split.environment[perm], coeffs.lambda1)
        return InterventionSample(
            v_star=compose(c_star, e_star),
            q_star=q_star,
            a_star=a_star,
            c_star=c_star,
            e_star=e_star,
            provenance={"partner": perm.tolist(), "lambda0": coeffs.lambda0, "lambda1": coeffs.lambda1},
        )

    def training_step(self, batch, ctx):
        video = self.encoder.embed_video_linear(batch.clips)
        question = self.encoder.encode_question(batch.tokens)
        split, _ = self.split(video, question, ctx.temperature, ctx.generator)
        answers = F.one_hot(batch.answers, self.num_answers).to(video.dtype)

        sample = self.intervene(split, question, answers, ctx.rng)
        self.last_intervention = sample
        v_star, q_star = sample.v_star, sample.q_star
        components: Dict[str, float] = {}
        if sample.provenance["partner"] is not None:
            components.update(lambda0=sample.provenance["lambda0"], lambda1=sample.provenance["lambda1"])

        pred = self.predictor.predict(v_star, q_star)
        l_erm = soft_cross_entropy(pred, sample.a_star)

        self.bank.insert_split(split, batch.ids)
        self.question_pool.add(batch.question_ids, batch.tokens)

        l_cl = torch.zeros((), dtype=l_erm.dtype)
        if self.beta > 0:
            contrastive = build_contrastive(
                v_star,
                q_star,
                lambda v, q: self.split(v, q, ctx.temperature, ctx.generator)[0],
                self.bank,
                self.question_pool,
                self.num_negatives,
                ctx.rng,
                batch.question_ids,
                encode_question=self.encoder.encode_question,
                disrupt_video=self.disrupt_video,
                disrupt_question=self.disrupt_question,
                regrounding_grad=self.regrounding_grad,
            )
            anchor = pred.probs
            positive = self.predictor.predict(contrastive.positive, q_star).probs
            negatives = [self.predictor.predict(v, q).probs for v, q in contrastive.negatives]
            l_cl = info_nce(anchor, positive, negatives)

        loss = eigv_objective(l_erm, l_cl, self.beta)
        components.update(
            loss=loss.item(),
            l_erm=l_erm.item(),
            l_cl=l_cl.item(),
            causal_fraction=split.causal_mask.float().mean().item(),
        )
        return loss, components

    def predict_logits(self, batch):
        video = self.encoder.embed_video_linear(batch.clips)
        question = self.encoder.encode_question(batch.tokens)
        return self.predictor.predict(video, question).logits

    def ground(self, batch):
        video = self.encoder.embed_video_linear(batch.clips)
        question = self.encoder.encode_question(batch.tokens)
        split, scores = self.split(video, question, deterministic=True)
        return GroundingOutput(mask=split.causal_mask, scores=scores, indicator=split.indicator)


class TranSTRVideoQA(VideoQAModel):
    """Rationalizer trained with cross-entropy; its selected frames serve as grounding"""

    method = Method.TRANSTR

    def __init__(self, **kwargs):
        super().__init__()
        self.model = TranSTRModel(**kwargs)

    def training_step(self, batch, ctx):
        logits, rationale = self.model(batch.clips, batch.objects, batch.tokens, ctx.generator)
        loss = causal_loss(logits, batch.answers)
        return loss, {
            "loss": loss.item(),
            "frames_selected": rationale["frame_valid"].sum(dim=1).float().mean().item(),
        }

    def predict_logits(self, batch):
        return self.model(batch.clips, batch.objects, batch.tokens)[0]

    def rationale(self, batch) -> Dict[str, torch.Tensor]:
        return self.model(batch.clips, batch.objects, batch.tokens)[1]

    def ground(self, batch):
        rationale = self.rationale(batch)
        B, K = batch.clips.shape[0], batch.clips.shape[1]
        mask = torch.zeros(B, K, dtype=torch.bool)
        for b in range(B):
            mask[b, rationale["frame_indices"][b][rationale["frame_valid"][b]]] = True
        return GroundingOutput(mask=mask)


def build_model(
    config: RunConfig,
    input_size: int,
    num_answers: int,
    answer_tokens: Optional[np.ndarray] = None,
) -> VideoQAModel:
    """
    Instantiate the model for config.method

    Args:
        config: Validated run configuration
        input_size: Clip/token feature size d
        num_answers: Answer class count
        answer_tokens: Per-class answer token features for multi-choice decoding

    Returns:
        Model exposing training_step / predict_logits / ground
    """
    m, hidden = config.model, config.model.hidden_size
    common = dict(graph_layers=m.graph_layers, fusion_rank=m.fusion_rank)

    if config.method == Method.ERM:
        return ERMModel(input_size, hidden, num_answers, **common)
    if config.method == Method.MIXUP:
        return MixupModel(input_size, hidden, num_answers, alpha=config.intervention.alpha, **common)
    if config.method == Method.IGV:
        return IGVModel(
            input_size,
            hidden,
            num_answers,
            config.effective_loss_weights(),
            projection_depth=m.projection_depth,
            bank_capacity=config.intervention.bank_capacity,
            environment_grad=config.grounding.environment_grad,
            **common,
        )
    if config.method == Method.EIGV:
        iv = config.intervention
        return EIGVModel(
            input_size,
            hidden,
            num_answers,
            beta=config.loss.beta,
            alpha=iv.alpha,
            num_negatives=iv.num_negatives,
            projection_depth=m.projection_depth,
            bank_capacity=iv.bank_capacity,
            hard=config.grounding.hard,
            use_intervener=iv.use_intervener,
            disrupt_video=iv.disrupt_video,
            disrupt_question=iv.disrupt_question,
            regrounding_grad=config.grounding.regrounding_grad,
            **common,
        )
    if config.method == Method.TRANSTR:
        r = config.rationalizer
        return TranSTRVideoQA(
            input_size=input_size,
            hidden_size=hidden,
            num_answers=num_answers,
            k_f=r.K_f,
            k_o=r.K_o,
            sigma=r.sigma,
            samples=r.samples,
            num_heads=m.num_heads,
            decoder_layers=r.decoder_layers,
            answer_mode=r.answer_mode,
            answer_tokens=answer_tokens,
        )
    raise ConfigurationError(f"Unknown method: {config.method}")
