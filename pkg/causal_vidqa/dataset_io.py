#!/usr/bin/env python3
"""
Dataset Containers
Versioned on-disk dataset format, external feature-file loading and batching.

A dataset directory holds:
- header.json: format version, generator config echo and array shapes
- arrays.npz: little-endian float32 features, int32 labels, bit-packed masks
- manifest.json: ordered video and question ids per split
"""

import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import torch

from .schema import (
    QUESTION_TYPES,
    Batch,
    CausalMechanism,
    ConfigurationError,
    DatasetBundle,
    GenConfig,
    InvalidInstanceError,
    OODMode,
    Pair,
    QuestionInstance,
    QuestionType,
    VideoInstance,
)

FORMAT_VERSION = 1
HEADER_FILENAME = "header.json"
ARRAYS_FILENAME = "arrays.npz"
MANIFEST_FILENAME = "manifest.json"

MECHANISM_FIELDS = (
    "causal_centroids",
    "env_centroids",
    "qtype_embeddings",
    "qtype_offsets",
    "position_codes",
    "answer_tokens",
)

logger = logging.getLogger("DatasetIO")


def _split_arrays(pairs: Sequence[Pair], config: GenConfig) -> Dict[str, np.ndarray]:
    """Stack one split into fixed-dtype arrays"""
    K, d, L = config.K, config.d, config.L
    arrays = {
        "clips": np.zeros((len(pairs), K, d), dtype="<f4"),
        "tokens": np.zeros((len(pairs), L, d), dtype="<f4"),
        "answers": np.zeros(len(pairs), dtype="<i4"),
        "qtypes": np.zeros(len(pairs), dtype="<i4"),
        "env_clusters": np.full(len(pairs), -1, dtype="<i4"),
        "masks": np.zeros((len(pairs), K), dtype=bool),
    }
    if config.num_objects > 0:
        arrays["objects"] = np.zeros((len(pairs), K, config.num_objects, d), dtype="<f4")

    for i, (video, question) in enumerate(pairs):
        arrays["clips"][i] = video.clips
        arrays["tokens"][i] = question.tokens
        arrays["answers"][i] = question.answer
        arrays["qtypes"][i] = QUESTION_TYPES.index(QuestionType(question.qtype))
        if video.env_cluster is not None:
            arrays["env_clusters"][i] = video.env_cluster
        if video.causal_mask is not None:
            arrays["masks"][i] = video.causal_mask
        if "objects" in arrays and video.objects is not None:
            arrays["objects"][i] = video.objects

    arrays["masks"] = np.packbits(arrays["masks"], axis=1)
    return arrays


def save_bundle(bundle: DatasetBundle, out_dir) -> Path:
    """
    Write a dataset bundle to a directory

    Args:
        bundle: Dataset to persist
        out_dir: Target directory (created if missing)

    Returns:
        Path of the dataset directory
    """
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    config = bundle.gen_config

    arrays: Dict[str, np.ndarray] = {}
    manifest = {}
    for name in DatasetBundle.SPLIT_NAMES:
        pairs = bundle.split(name)
        for key, value in _split_arrays(pairs, config).items():
            arrays[f"{name}__{key}"] = value
        manifest[name] = {
            "video_ids": [v.id for v, _ in pairs],
            "question_ids": [q.id for _, q in pairs],
        }

    if bundle.mechanism is not None:
        for key in MECHANISM_FIELDS:
            arrays[f"mechanism__{key}"] = np.asarray(getattr(bundle.mechanism, key))

    header = {
        "format_version": FORMAT_VERSION,
        "gen_config": asdict(config),
        "has_ground_truth": bundle.has_ground_truth(),
        "has_mechanism": bundle.mechanism is not None,
        "causal_dims": bundle.mechanism.causal_dims if bundle.mechanism else None,
        "shapes": {key: list(value.shape) for key, value in arrays.items()},
    }

    np.savez(out_path / ARRAYS_FILENAME, **arrays)
    with open(out_path / HEADER_FILENAME, "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2, default=str)
    with open(out_path / MANIFEST_FILENAME, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)

    logger.info(f"Dataset saved to: {out_path}")
    return out_path


def _gen_config_from_header(echo: Dict) -> GenConfig:
    echo = dict(echo)
    echo["causal_span"] = tuple(echo["causal_span"])
    echo["splits"] = tuple(echo["splits"])
    echo["ood_mode"] = OODMode(echo["ood_mode"])
    return GenConfig(**echo)


def validate_pairs(pairs: List[Pair], num_answers: int, split: str) -> List[Pair]:
    """Raise InvalidInstanceError on the first video or question that fails is_valid"""
    for video, question in pairs:
        if not video.is_valid():
            raise InvalidInstanceError(f"Invalid video {video.id} in split {split}")
        if not question.is_valid(num_answers):
            raise InvalidInstanceError(
                f"Invalid question {question.id} in split {split} (answer {question.answer}, {num_answers} classes)"
            )
    return pairs


def load_bundle(path) -> DatasetBundle:
    """
    Read a dataset directory written by save_bundle

    Args:
        path: Dataset directory

    Returns:
        DatasetBundle identical to the one saved
    """
    path = Path(path)
    try:
        with open(path / HEADER_FILENAME, "r", encoding="utf-8") as f:
            header = json.load(f)
        with open(path / MANIFEST_FILENAME, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"Not a dataset directory: {path}")

    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(
            f"Unsupported dataset format version: {header.get('format_version')}"
        )

    config = _gen_config_from_header(header["gen_config"])
    has_truth = header.get("has_ground_truth", True)

    with np.load(path / ARRAYS_FILENAME) as data:
        arrays = {key: data[key] for key in data.files}

    splits: Dict[str, List[Pair]] = {}
    for name in DatasetBundle.SPLIT_NAMES:
        ids = manifest[name]
        masks = np.unpackbits(arrays[f"{name}__masks"], axis=1, count=config.K).astype(bool)
        objects = arrays.get(f"{name}__objects")
        pairs = []
        for i, (video_id, question_id) in enumerate(zip(ids["video_ids"], ids["question_ids"])):
            env_cluster = int(arrays[f"{name}__env_clusters"][i])
            video = VideoInstance(
                id=video_id,
                clips=arrays[f"{name}__clips"][i],
                causal_mask=masks[i] if has_truth else None,
                objects=objects[i] if objects is not None else None,
                env_cluster=env_cluster if env_cluster >= 0 else None,
            )
            question = QuestionInstance(
                id=question_id,
                tokens=arrays[f"{name}__tokens"][i],
                qtype=QUESTION_TYPES[int(arrays[f"{name}__qtypes"][i])],
                answer=int(arrays[f"{name}__answers"][i]),
            )
            pairs.append((video, question))
        splits[name] = validate_pairs(pairs, config.num_answers, name)

    mechanism = None
    if header.get("has_mechanism"):
        mechanism = CausalMechanism(
            **{key: arrays[f"mechanism__{key}"] for key in MECHANISM_FIELDS},
            causal_dims=header["causal_dims"],
        )

    return DatasetBundle(**splits, gen_config=config, mechanism=mechanism)


def load_feature_bundle(path, seed: int = 0, splits=(0.7, 0.1, 0.1, 0.1)) -> DatasetBundle:
    """
    Load externally extracted features into a DatasetBundle without ground truth

    The .npz file must hold `clips` (N x K x d), `tokens` (N x L x d) and `answers` (N).
    Optional arrays: `qtypes` (N, int index), `objects` (N x K x S x d),
    `split` (N, one of train/val/test_iid/test_ood) and `answer_tokens`.

    Args:
        path: Feature file path
        seed: Seed for the random split when no `split` array is present
        splits: Split fractions used for the random split

    Returns:
        DatasetBundle with causal_mask set to None on every video
    """
    with np.load(path, allow_pickle=False) as data:
        arrays = {key: data[key] for key in data.files}

    for key in ("clips", "tokens", "answers"):
        if key not in arrays:
            raise ConfigurationError(f"Feature file {path} is missing '{key}'")

    clips = arrays["clips"].astype("<f4")
    tokens = arrays["tokens"].astype("<f4")
    answers = arrays["answers"].astype(int)
    n, K, d = clips.shape
    if tokens.shape[0] != n or answers.shape[0] != n or tokens.shape[2] != d:
        raise ConfigurationError("Feature arrays disagree on instance count or feature size")

    qtypes = arrays.get("qtypes", np.zeros(n, dtype=int))
    objects = arrays.get("objects")

    if "split" in arrays:
        assignment = [str(s) for s in arrays["split"]]
    else:
        rng = np.random.default_rng(seed)
        order = rng.permutation(n)
        bounds = np.cumsum([int(round(n * f)) for f in splits[:-1]])
        assignment = [""] * n
        for rank, i in enumerate(order):
            assignment[i] = DatasetBundle.SPLIT_NAMES[int(np.searchsorted(bounds, rank, side="right"))]

    grouped: Dict[str, List[Pair]] = {name: [] for name in DatasetBundle.SPLIT_NAMES}
    for i in range(n):
        name = assignment[i]
        if name not in grouped:
            raise ConfigurationError(f"Unknown split name in feature file: {name}")
        video_id = f"{name}-{i:05d}"
        grouped[name].append(
            (
                VideoInstance(
                    id=video_id,
                    clips=clips[i],
                    objects=objects[i].astype("<f4") if objects is not None else None,
                ),
                QuestionInstance(
                    id=f"{video_id}-q",
                    tokens=tokens[i],
                    qtype=QUESTION_TYPES[int(qtypes[i])],
                    answer=int(answers[i]),
                ),
            )
        )

    num_answers = int(answers.max()) + 1 if n else 2
    config = GenConfig(
        num_videos=n,
        K=K,
        d=d,
        L=tokens.shape[1],
        num_answers=max(num_answers, 2),
        causal_span=(1, max(K - 1, 1)),
        num_objects=objects.shape[2] if objects is not None else 0,
        seed=seed,
        splits=tuple(splits),
    )

    mechanism = None
    if "answer_tokens" in arrays:
        answer_tokens = arrays["answer_tokens"].astype("<f4")
        mechanism = CausalMechanism(
            causal_centroids=np.zeros((0, d)),
            env_centroids=np.zeros((0, d)),
            qtype_embeddings=np.zeros((0, d)),
            qtype_offsets=np.zeros(0, dtype=int),
            position_codes=np.zeros((0, d)),
            answer_tokens=answer_tokens,
            causal_dims=0,
        )

    for name, pairs in grouped.items():
        validate_pairs(pairs, config.num_answers, name)

    logger.info(f"Loaded {n} feature instances from {path}")
    return DatasetBundle(**grouped, gen_config=config, mechanism=mechanism)


def collate(pairs: Sequence[Pair]) -> Batch:
    """
    Stack pairs into batch tensors

    Args:
        pairs: Non-empty list of (video, question) pairs

    Returns:
        Batch with float32 features and int64 answers
    """
    if not pairs:
        raise ConfigurationError("Cannot collate an empty list of pairs")

    videos = [v for v, _ in pairs]
    questions = [q for _, q in pairs]

    causal_masks = None
    if all(v.causal_mask is not None for v in videos):
        causal_masks = torch.from_numpy(np.stack([v.causal_mask for v in videos]).astype(bool))

    objects = None
    if all(v.objects is not None for v in videos):
        objects = torch.from_numpy(np.stack([v.objects for v in videos]).astype(np.float32))

    return Batch(
        ids=[v.id for v in videos],
        question_ids=[q.id for q in questions],
        clips=torch.from_numpy(np.stack([v.clips for v in videos]).astype(np.float32)),
        tokens=torch.from_numpy(np.stack([q.tokens for q in questions]).astype(np.float32)),
        answers=torch.tensor([q.answer for q in questions], dtype=torch.long),
        qtypes=[QuestionType(q.qtype) for q in questions],
        causal_masks=causal_masks,
        objects=objects,
    )


def iterate_batches(
    pairs: Sequence[Pair],
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
) -> Iterator[Batch]:
    """
    Yield batches in order, or shuffled by rng

    Args:
        pairs: Pairs to batch
        batch_size: Maximum batch size
        rng: When given, a permutation drawn from it sets the order

    Yields:
        Batch objects
    """
    order = rng.permutation(len(pairs)) if rng is not None else np.arange(len(pairs))
    for start in range(0, len(pairs), batch_size):
        yield collate([pairs[i] for i in order[start:start + batch_size]])
