#!/usr/bin/env python3
"""
Synthetic Causal VideoQA Generator
Builds datasets whose answers depend only on question-critical clips, with a
tunable spurious coupling between environment clips and answers.

Feature layout: the first d//2 dimensions carry causal content, the rest carry
environment content and clip position codes. Answers are computed from the
generated causal clips by oracle_answer, so the stored label is always the
oracle's label.
"""

import argparse
import json
import logging
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import chi2_contingency

from .schema import (
    QUESTION_TYPES,
    CausalMechanism,
    ConfigurationError,
    DatasetBundle,
    DegenerateInputError,
    GenConfig,
    OODMode,
    Pair,
    QuestionInstance,
    QuestionType,
    VideoInstance,
)

SPLIT_CODES = {"train": 0, "val": 1, "test_iid": 2, "test_ood": 3}
MECHANISM_STREAM = 97

# Answer offset applied on top of the nearest causal centroid, per question type
QTYPE_OFFSETS = {
    QuestionType.DESCRIPTIVE: 0,
    QuestionType.TEMPORAL: 1,
    QuestionType.CAUSAL: 2,
}


def build_mechanism(config: GenConfig) -> CausalMechanism:
    """
    Draw the causal-mechanism parameters shared by every split

    Args:
        config: Generator configuration

    Returns:
        CausalMechanism with centroids, question-type embeddings and position codes
    """
    rng = np.random.default_rng([config.seed, MECHANISM_STREAM])
    d, d_c = config.d, config.d // 2

    causal_centroids = np.zeros((config.num_answers, d))
    causal_centroids[:, :d_c] = config.centroid_scale * rng.standard_normal(
        (config.num_answers, d_c)
    )

    env_centroids = np.zeros((config.num_answers, d))
    env_centroids[:, d_c:] = config.centroid_scale * rng.standard_normal(
        (config.num_answers, d - d_c)
    )

    position_codes = np.zeros((config.K, d))
    position_codes[:, d_c:] = rng.standard_normal((config.K, d - d_c))

    return CausalMechanism(
        causal_centroids=causal_centroids,
        env_centroids=env_centroids,
        qtype_embeddings=rng.standard_normal((len(QUESTION_TYPES), d)),
        qtype_offsets=np.array([QTYPE_OFFSETS[q] for q in QUESTION_TYPES]),
        position_codes=position_codes,
        answer_tokens=rng.standard_normal(
            (config.num_answers, config.answer_token_len, d)
        ).astype("<f4"),
        causal_dims=d_c,
    )


def oracle_answer(
    causal_clips: np.ndarray,
    question: QuestionInstance,
    mechanism: CausalMechanism,
) -> int:
    """
    Ground-truth answer from causal clips and the question type only

    Args:
        causal_clips: n x d features of the causal clips (order irrelevant)
        question: Question whose type selects the answer offset
        mechanism: Shared causal-mechanism parameters

    Returns:
        Answer class index
    """
    causal_clips = np.asarray(causal_clips, dtype=np.float64)
    if causal_clips.ndim != 2 or causal_clips.shape[0] == 0:
        raise DegenerateInputError("oracle_answer needs at least one causal clip")

    d_c = mechanism.causal_dims
    summary = causal_clips[:, :d_c].mean(axis=0)
    distances = ((mechanism.causal_centroids[:, :d_c] - summary) ** 2).sum(axis=1)
    nearest = int(np.argmin(distances))

    offset = int(mechanism.qtype_offsets[QUESTION_TYPES.index(QuestionType(question.qtype))])
    return (nearest + offset) % len(mechanism.causal_centroids)


def split_sizes(config: GenConfig) -> Dict[str, int]:
    """Instance count per split; rounding remainder goes to the OOD split"""
    sizes = {}
    remaining = config.num_videos
    for name, frac in zip(list(SPLIT_CODES)[:-1], config.splits[:-1]):
        sizes[name] = int(round(config.num_videos * frac))
        remaining -= sizes[name]
    sizes["test_ood"] = max(remaining, 0)
    return sizes


class SyntheticVideoQAGenerator:
    """
    Generator for synthetic causal VideoQA datasets with:
    - Exact oracle answers from causal clips
    - Controllable environment-answer coupling (bias_rho)
    - Per-instance random streams derived from (seed, split, index)
    - Optional thread-parallel instance generation
    """

    def __init__(
        self,
        config: GenConfig,
        use_parallel: bool = False,
        max_workers: Optional[int] = None,
    ):
        """Initialize generator with a validated configuration"""
        config.validate()
        self.config = config
        self.use_parallel = use_parallel
        self.max_workers = max_workers
        self.mechanism = build_mechanism(config)
        self.logger = logging.getLogger("SynthGen")
        self.stats = {
            "instances": 0,
            "env_matches_answer": 0,
            "objects_generated": 0,
        }
        # Thread-safe lock for statistics updates
        self._stats_lock = threading.Lock()

    def _update_stats(self, **kwargs):
        """Thread-safe method to update statistics"""
        with self._stats_lock:
            for key, value in kwargs.items():
                if key in self.stats:
                    self.stats[key] += value

    def _env_cluster(self, rng: np.random.Generator, answer: int, split: str) -> int:
        """Environment cluster id for one instance"""
        n = self.config.num_answers
        if split == "test_ood":
            if self.config.ood_mode == OODMode.INVERTED:
                return int((answer + rng.integers(1, n)) % n)
            return int(rng.integers(n))
        if rng.random() < self.config.bias_rho:
            return answer
        return int(rng.integers(n))

    def generate_instance(self, split: str, index: int) -> Pair:
        """
        Generate one (video, question) pair

        Args:
            split: Split name, selects the environment coupling rule
            index: Instance index within the split

        Returns:
            Tuple of VideoInstance and QuestionInstance
        """
        cfg, mech = self.config, self.mechanism
        rng = np.random.default_rng([cfg.seed, SPLIT_CODES[split], index])
        K, d, L, d_c = cfg.K, cfg.d, cfg.L, mech.causal_dims

        lo, hi = cfg.causal_span
        n_causal = int(rng.integers(lo, hi + 1))
        positions = np.sort(rng.choice(K, size=n_causal, replace=False))
        causal_mask = np.zeros(K, dtype=bool)
        causal_mask[positions] = True

        qtype = QUESTION_TYPES[int(rng.integers(len(QUESTION_TYPES)))]
        target = int(rng.integers(cfg.num_answers))

        clips = np.zeros((K, d))
        clips[causal_mask, :d_c] = mech.causal_centroids[target, :d_c] + (
            cfg.noise_sigma * rng.standard_normal((n_causal, d_c))
        )

        tokens = np.zeros((L, d))
        tokens[0] = mech.qtype_embeddings[QUESTION_TYPES.index(qtype)]
        hint = cfg.hint_scale * mech.position_codes[positions].mean(axis=0)
        tokens[1:] = hint
        tokens += cfg.noise_sigma * rng.standard_normal((L, d))

        video_id = f"{split}-{index:05d}"
        question = QuestionInstance(
            id=f"{video_id}-q", tokens=tokens.astype("<f4"), qtype=qtype, answer=0
        )
        # Label from the float32 features that are actually stored
        causal_f32 = clips[causal_mask].astype("<f4")
        question.answer = oracle_answer(causal_f32, question, mech)

        env_cluster = self._env_cluster(rng, question.answer, split)
        n_env = K - n_causal
        clips[~causal_mask, d_c:] = mech.env_centroids[env_cluster, d_c:] + (
            cfg.noise_sigma * rng.standard_normal((n_env, d - d_c))
        )
        # Position codes live in environment dimensions only
        clips += cfg.position_scale * mech.position_codes

        objects = None
        if cfg.num_objects > 0:
            objects = self._generate_objects(rng, clips)
            self._update_stats(objects_generated=K * cfg.num_objects)

        self._update_stats(
            instances=1, env_matches_answer=int(env_cluster == question.answer)
        )

        video = VideoInstance(
            id=video_id,
            clips=clips.astype("<f4"),
            causal_mask=causal_mask,
            objects=objects,
            env_cluster=env_cluster,
        )
        return video, question

    def _generate_objects(self, rng: np.random.Generator, clips: np.ndarray) -> np.ndarray:
        """Per-clip object features: a few noisy copies of the clip among distractors"""
        K, d = clips.shape
        S = self.config.num_objects
        objects = self.config.noise_sigma * rng.standard_normal((K, S, d))
        for k in range(K):
            n_rel = int(rng.integers(1, max(1, S // 2) + 1))
            slots = rng.choice(S, size=n_rel, replace=False)
            objects[k, slots] += clips[k]
        return objects.astype("<f4")

    def generate_split(self, split: str, count: int) -> List[Pair]:
        """Generate all instances of one split in index order"""
        if not self.use_parallel:
            return [self.generate_instance(split, i) for i in range(count)]

        results: Dict[int, Pair] = {}
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            future_to_index = {
                executor.submit(self.generate_instance, split, i): i for i in range(count)
            }
            for future in as_completed(future_to_index):
                index = future_to_index[future]
                results[index] = future.result()

        # Sort results to maintain index order
        return [results[i] for i in sorted(results)]

    def generate(self) -> DatasetBundle:
        """Generate every split"""
        start_time = time.time()
        sizes = split_sizes(self.config)
        self.logger.info(
            f"Generating {self.config.num_videos} instances "
            f"(K={self.config.K}, d={self.config.d}, rho={self.config.bias_rho})"
        )

        splits = {name: self.generate_split(name, n) for name, n in sizes.items()}
        bundle = DatasetBundle(
            train=splits["train"],
            val=splits["val"],
            test_iid=splits["test_iid"],
            test_ood=splits["test_ood"],
            gen_config=self.config,
            mechanism=self.mechanism,
        )

        elapsed = time.time() - start_time
        self.logger.info(f"Generation completed in {elapsed:.1f}s")
        self._print_stats(bundle)
        return bundle

    def _print_stats(self, bundle: DatasetBundle):
        """Print generation statistics"""
        self.logger.info("=" * 60)
        self.logger.info("GENERATION STATISTICS")
        self.logger.info("=" * 60)
        for name in DatasetBundle.SPLIT_NAMES:
            pairs = bundle.split(name)
            if not pairs:
                self.logger.info(f"{name}: 0 instances")
                continue
            coupling = np.mean([v.env_cluster == q.answer for v, q in pairs])
            self.logger.info(f"{name}: {len(pairs)} instances, env==answer {coupling:.3f}")
        self.logger.info(f"Total instances: {self.stats['instances']}")
        self.logger.info(f"Objects generated: {self.stats['objects_generated']}")
        self.logger.info("=" * 60)


def generate_dataset(
    config: GenConfig, use_parallel: bool = False, max_workers: Optional[int] = None
) -> DatasetBundle:
    """
    Generate a synthetic causal VideoQA dataset

    Args:
        config: Generator configuration (validated here)
        use_parallel: Generate instances in a thread pool
        max_workers: Worker threads when use_parallel is set

    Returns:
        DatasetBundle with train/val/test_iid/test_ood splits
    """
    return SyntheticVideoQAGenerator(config, use_parallel, max_workers).generate()


def coupling_report(pairs: Sequence[Pair], num_answers: int) -> Dict[str, float]:
    """
    Environment-answer dependence of a split

    Args:
        pairs: Generated pairs carrying env_cluster
        num_answers: Number of answer classes

    Returns:
        Dictionary with match rate, chi-square statistic, p-value and mutual information
    """
    table = np.zeros((num_answers, num_answers))
    for video, question in pairs:
        if video.env_cluster is None:
            raise ConfigurationError("coupling_report needs generator-labelled pairs")
        table[video.env_cluster, question.answer] += 1

    total = table.sum()
    if total == 0:
        return {"match_rate": 0.0, "chi2": 0.0, "p_value": 1.0, "mutual_information": 0.0}

    # Drop empty rows/columns so the expected-frequency table has no zeros
    reduced = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
    if min(reduced.shape) < 2:
        chi2, p_value = 0.0, 1.0
    else:
        chi2, p_value, _, _ = chi2_contingency(reduced, correction=False)

    joint = table / total
    outer = joint.sum(axis=1, keepdims=True) @ joint.sum(axis=0, keepdims=True)
    nonzero = joint > 0
    mutual_information = float((joint[nonzero] * np.log(joint[nonzero] / outer[nonzero])).sum())

    return {
        "match_rate": float(np.trace(table) / total),
        "chi2": float(chi2),
        "p_value": float(p_value),
        "mutual_information": mutual_information,
    }


def main():
    """Main entry point"""
    from .config import gen_config_from_dict, load_config, setup_logger
    from .dataset_io import save_bundle

    parser = argparse.ArgumentParser(description="Generate a synthetic causal VideoQA dataset")
    parser.add_argument("--config", default="config.json", help="Path to config file")
    parser.add_argument("--out", required=True, help="Output dataset directory")
    args = parser.parse_args()

    try:
        config = load_config(args.config)
        setup_logger("SynthGen", config.get("logging"))
        data_section = config.get("data", {})
        bundle = generate_dataset(
            gen_config_from_dict(data_section),
            use_parallel=data_section.get("use_parallel", False),
            max_workers=data_section.get("max_workers"),
        )
        path = save_bundle(bundle, args.out)
        report = coupling_report(bundle.train, bundle.gen_config.num_answers)
        print(json.dumps({"dataset": str(path), "train_coupling": report}, indent=2))
    except KeyboardInterrupt:
        print("\n\nGeneration interrupted by user")
        sys.exit(1)
    except Exception as e:
        print(f"\n❌ Fatal error: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
