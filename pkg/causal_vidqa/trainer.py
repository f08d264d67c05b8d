#!/usr/bin/env python3
"""
Training Harness
Seeded training loops for every method, split evaluation with grounding metrics,
versioned checkpoints and multi-run sweeps with registry deduplication.
"""

import copy
import itertools
import json
import logging
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig
from .dataset_io import iterate_batches
from .grounding import dump_masks
from .metrics import accuracy, grounding_scores, per_qtype_accuracy
from .models import StepContext, TranSTRVideoQA, VideoQAModel, build_model
from .rationalizer import dump_rationales
from .report import RUN_RECORD_FILENAME, load_run_record, save_run_record
from .run_registry import RunRegistry
from .schema import (
    AnswerMode,
    ConfigurationError,
    DatasetBundle,
    DivergenceError,
    Method,
    MetricsRecord,
    NumericError,
    OptimizerKind,
    Pair,
    RunRecord,
    RunStatus,
)

CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_FILENAME = "checkpoint.pt"
METRICS_FILENAME = "metrics.jsonl"
LAMBDA_GRID_BASE = 1.3


def set_seed(seed: int) -> Tuple[np.random.Generator, torch.Generator]:
    """
    Seed torch's global stream (parameter init) and return the run's own streams

    Returns:
        Tuple of (numpy generator for batching/intervention, torch generator for Gumbel/Top-K noise)
    """
    torch.manual_seed(seed)
    return np.random.default_rng([seed, 1]), torch.Generator().manual_seed(seed)


def make_run_id(config: RunConfig) -> str:
    return f"{config.method}_s{config.seed}_{config.config_hash()[:8]}"


def evaluate_model(
    model: VideoQAModel,
    pairs: Sequence[Pair],
    split: str,
    batch_size: int = 64,
    dump_dir: Optional[Path] = None,
    write_masks: bool = True,
    write_rationales: bool = True,
    epoch: Optional[int] = None,
) -> MetricsRecord:
    """
    Accuracy and grounding metrics of a model on one split

    Args:
        model: Trained model (switched to eval mode here)
        pairs: Split instances
        split: Split name recorded in the result
        batch_size: Evaluation batch size
        dump_dir: When set, per-instance masks/rationales are written below it
        write_masks: Dump grounding masks for models that ground
        write_rationales: Dump selected frames/objects for the rationalizer
        epoch: Training epoch the parameters come from, recorded in the result

    Returns:
        MetricsRecord; grounding fields stay None without ground-truth masks or a grounding model

    Raises:
        NumericError: if a bounded metric falls outside [0, 1]
    """
    if not pairs:
        return MetricsRecord(split=split, accuracy=0.0, count=0, epoch=epoch)

    mask_path = rationale_path = None
    if dump_dir is not None:
        mask_path = Path(dump_dir) / f"masks_{split}.jsonl"
        rationale_path = Path(dump_dir) / f"rationales_{split}.jsonl"
        mask_path.unlink(missing_ok=True)
        rationale_path.unlink(missing_ok=True)

    model.eval()
    predictions, answers, qtypes = [], [], []
    pred_masks, true_masks = [], []
    ce_total = 0.0

    with torch.no_grad():
        for batch in iterate_batches(pairs, batch_size):
            logits = model.predict_logits(batch)
            ce_total += float(F.cross_entropy(logits, batch.answers, reduction="sum"))
            predictions.append(logits.argmax(dim=-1))
            answers.append(batch.answers)
            qtypes.extend(batch.qtypes)

            grounding = model.ground(batch)
            if grounding is not None and batch.causal_masks is not None:
                pred_masks.append(grounding.mask)
                true_masks.append(batch.causal_masks)
            if grounding is not None and grounding.scores is not None and mask_path and write_masks:
                dump_masks(mask_path, batch.ids, grounding.scores, grounding.indicator, batch.causal_masks)
            if isinstance(model, TranSTRVideoQA) and rationale_path and write_rationales:
                dump_rationales(rationale_path, batch.ids, model.rationale(batch))

    predictions, answers = torch.cat(predictions), torch.cat(answers)
    record = MetricsRecord(
        split=split,
        accuracy=accuracy(predictions, answers),
        count=len(pairs),
        per_qtype_accuracy=per_qtype_accuracy(predictions, answers, qtypes),
        losses={"cross_entropy": ce_total / len(pairs)},
        epoch=epoch,
    )
    if pred_masks:
        precision, recall, iou = grounding_scores(torch.cat(pred_masks), torch.cat(true_masks))
        record.grounding_precision = float(precision.mean())
        record.grounding_recall = float(recall.mean())
        record.grounding_iou = float(iou.mean())
        record.iou_values = [round(float(v), 6) for v in iou]
    if not record.is_valid():
        raise NumericError(
            f"Metrics for {split} fall outside [0, 1]: accuracy={record.accuracy} iou={record.grounding_iou}"
        )
    return record


def save_checkpoint(model: VideoQAModel, config: RunConfig, path, input_size: int, num_answers: int) -> Path:
    """
    Save model parameters with the configuration needed to rebuild the model

    The memory bank and question pool are not parameters and are never stored.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "method": str(config.method),
            "config": config.to_dict(),
            "input_size": input_size,
            "num_answers": num_answers,
            "state_dict": model.state_dict(),
        },
        path,
    )
    return path


def load_checkpoint(path) -> Tuple[VideoQAModel, RunConfig]:
    """
    Rebuild a model from a checkpoint written by save_checkpoint

    Returns:
        Tuple of (model in eval mode, its RunConfig)
    """
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigurationError(f"Unsupported checkpoint format version: {version}")

    config = RunConfig.from_echo(payload["config"])
    state_dict = payload["state_dict"]
    model = build_model(
        config,
        payload["input_size"],
        payload["num_answers"],
        answer_tokens=state_dict.get("model.answer_tokens"),
    )
    model.load_state_dict(state_dict)
    model.eval()
    return model, config


def evaluate_checkpoint(path, bundle: DatasetBundle, split: str, dump_dir: Optional[Path] = None) -> MetricsRecord:
    """Evaluate a saved checkpoint on one split of a dataset"""
    model, config = load_checkpoint(path)
    return evaluate_model(
        model,
        bundle.split(split),
        split,
        batch_size=config.training.batch_size,
        dump_dir=dump_dir,
        write_masks=config.grounding.dump_masks,
        write_rationales=config.rationalizer.dump_rationales,
    )


class Trainer:
    """Runs one (config, seed) training run and persists its artifacts"""

    def __init__(self, config: RunConfig, bundle: DatasetBundle, output_dir, run_id: Optional[str] = None):
        """
        Initialize trainer

        Args:
            config: Run configuration (validated here)
            bundle: Dataset splits
            output_dir: Root directory; artifacts go to output_dir/runs/<run_id>/
            run_id: Override for the derived run identifier
        """
        config.validate()
        self.config = config
        self.bundle = bundle
        self.logger = logging.getLogger("Trainer")
        self.run_id = run_id or make_run_id(config)
        self.run_dir = Path(output_dir) / "runs" / self.run_id
        self.input_size, self.num_answers, self.answer_tokens = self._check_data()

    def _check_data(self) -> Tuple[int, int, Optional[np.ndarray]]:
        """Verify the dataset carries what the configured method needs"""
        if not self.bundle.train:
            raise ConfigurationError("The train split is empty")
        video, _ = self.bundle.train[0]
        answer_tokens = None

        if self.config.method == Method.TRANSTR:
            if video.objects is None:
                raise ConfigurationError("transtr needs per-frame object features (set data.num_objects > 0)")
            if self.config.rationalizer.answer_mode == AnswerMode.MULTI_CHOICE:
                mechanism = self.bundle.mechanism
                if mechanism is None or mechanism.answer_tokens is None or mechanism.answer_tokens.size == 0:
                    raise ConfigurationError("Multi-choice decoding needs answer token features in the dataset")
                answer_tokens = mechanism.answer_tokens

        return int(video.clips.shape[1]), int(self.bundle.gen_config.num_answers), answer_tokens

    def _build_optimizer(self, model: VideoQAModel):
        t = self.config.training
        if t.optimizer == OptimizerKind.ADAM:
            optimizer = torch.optim.Adam(model.parameters(), lr=t.lr, weight_decay=t.weight_decay)
            scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
                optimizer, mode="max", factor=t.lr_factor, patience=t.lr_patience
            )
            return optimizer, scheduler
        optimizer = torch.optim.SGD(
            model.parameters(), lr=t.lr, momentum=t.momentum, weight_decay=t.weight_decay
        )
        return optimizer, None

    def evaluate(
        self, model: VideoQAModel, split: str, dump: bool = False, epoch: Optional[int] = None
    ) -> MetricsRecord:
        return evaluate_model(
            model,
            self.bundle.split(split),
            split,
            batch_size=self.config.training.batch_size,
            dump_dir=self.run_dir / "dumps" if dump else None,
            write_masks=self.config.grounding.dump_masks,
            write_rationales=self.config.rationalizer.dump_rationales,
            epoch=epoch,
        )

    def _train_epoch(self, model, optimizer, ctx: StepContext, epoch: int) -> Dict[str, float]:
        model.train()
        sums: Dict[str, float] = defaultdict(float)
        steps = 0
        for step, batch in enumerate(iterate_batches(self.bundle.train, self.config.training.batch_size, ctx.rng)):
            optimizer.zero_grad()
            loss, components = model.training_step(batch, ctx)
            if not torch.isfinite(loss):
                detail = ", ".join(f"{k}={v:.4g}" for k, v in components.items())
                raise DivergenceError(f"Non-finite loss at epoch {epoch} step {step}: {detail}")
            loss.backward()
            if self.config.training.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), self.config.training.grad_clip)
            optimizer.step()
            for key, value in components.items():
                sums[key] += value
            steps += 1
        return {key: value / max(steps, 1) for key, value in sorted(sums.items())}

    def train(self) -> RunRecord:
        """
        Train, keep the best-validation parameters, checkpoint and evaluate

        Returns:
            RunRecord; status is DIVERGED (with a diagnostic message) on a non-finite loss
        """
        cfg = self.config
        start_time = time.time()
        self.run_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = self.run_dir / METRICS_FILENAME

        rng, generator = set_seed(cfg.seed)
        model = build_model(cfg, self.input_size, self.num_answers, self.answer_tokens)
        optimizer, scheduler = self._build_optimizer(model)
        record = RunRecord(run_id=self.run_id, method=cfg.method, seed=cfg.seed, config=cfg.to_dict())

        self.logger.info("=" * 60)
        self.logger.info(f"TRAINING {self.run_id}")
        self.logger.info("=" * 60)

        best_accuracy, best_state, best_epoch = -1.0, None, None
        has_val = bool(self.bundle.val)

        try:
            with open(metrics_path, "w", encoding="utf-8") as metrics_file:
                for epoch in range(cfg.training.epochs):
                    ctx = StepContext(rng, generator, cfg.grounding.temperature_at(epoch, cfg.training.epochs))
                    losses = self._train_epoch(model, optimizer, ctx, epoch)

                    row = {
                        "run_id": self.run_id,
                        "method": str(cfg.method),
                        "seed": cfg.seed,
                        "epoch": epoch,
                        "temperature": round(ctx.temperature, 6),
                        "lr": optimizer.param_groups[0]["lr"],
                        "losses": losses,
                    }
                    if has_val:
                        val = self.evaluate(model, "val", epoch=epoch)
                        row["val_accuracy"] = val.accuracy
                        row["val_grounding_iou"] = val.grounding_iou
                        if val.accuracy > best_accuracy:
                            best_accuracy, best_state = val.accuracy, copy.deepcopy(model.state_dict())
                            best_epoch = epoch
                        if scheduler is not None:
                            scheduler.step(val.accuracy)

                    metrics_file.write(json.dumps(row, sort_keys=True) + "\n")
                    record.epochs.append(row)
                    self.logger.info(
                        f"epoch {epoch:3d} | loss {losses.get('loss', float('nan')):.4f}"
                        + (f" | val {row['val_accuracy']:.3f}" if has_val else "")
                    )

        except DivergenceError as e:
            self.logger.error(f"❌ {self.run_id} diverged: {e}")
            record.status = RunStatus.DIVERGED
            record.message = str(e)
            record.wall_clock = time.time() - start_time
            save_run_record(record, self.run_dir / RUN_RECORD_FILENAME)
            return record

        if best_state is not None:
            model.load_state_dict(best_state)
        final_epoch = best_epoch if best_epoch is not None else cfg.training.epochs - 1

        checkpoint = save_checkpoint(
            model, cfg, self.run_dir / CHECKPOINT_FILENAME, self.input_size, self.num_answers
        )
        record.checkpoint = str(checkpoint)

        for split in cfg.training.eval_splits:
            if not self.bundle.split(split):
                self.logger.warning(f"Split {split} is empty, skipping evaluation")
                continue
            metrics = self.evaluate(model, split, dump=True, epoch=final_epoch)
            record.final_metrics[split] = metrics
            iou = f" | IoU {metrics.grounding_iou:.3f}" if metrics.grounding_iou is not None else ""
            self.logger.info(f"📊 {split}: accuracy {metrics.accuracy:.3f}{iou}")

        record.wall_clock = time.time() - start_time
        save_run_record(record, self.run_dir / RUN_RECORD_FILENAME)
        self.logger.info(f"✅ {self.run_id} finished in {record.wall_clock:.1f}s")
        return record


def train(config: RunConfig, bundle: DatasetBundle, output_dir) -> RunRecord:
    """Train one run; see Trainer.train"""
    return Trainer(config, bundle, output_dir).train()


def lambda_grid(lo: int, hi: int, base: float = LAMBDA_GRID_BASE) -> List[float]:
    """Loss weights base**i for i in [lo, hi]"""
    return [round(base**i, 6) for i in range(lo, hi + 1)]


def _merge(base: Dict, override: Dict) -> Dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def expand_sweep_grid(sweep_config: Dict) -> List[Dict]:
    """
    Cartesian product of the configured sweep axes as config overrides

    Args:
        sweep_config: The config's sweep section. Recognized axes: methods, seeds,
            lambda_grid {weight, lo, hi} (other IGV weight held at 1), alpha_grid,
            negatives_grid, igv_presets.

    Returns:
        List of nested override dictionaries, one per run
    """
    axes: List[List[Dict]] = [
        [{"training": {"method": m}} for m in sweep_config.get("methods", [])],
        [{"training": {"seed": s}} for s in sweep_config.get("seeds", [])],
    ]

    lam = sweep_config.get("lambda_grid")
    if lam:
        weight = lam.get("weight", "igv_lambda1")
        if weight not in ("igv_lambda1", "igv_lambda2"):
            raise ConfigurationError(f"lambda_grid.weight must be igv_lambda1 or igv_lambda2, got {weight}")
        other = "igv_lambda2" if weight == "igv_lambda1" else "igv_lambda1"
        axes.append(
            [{"loss": {weight: v, other: 1.0}} for v in lambda_grid(lam.get("lo", -3), lam.get("hi", 3))]
        )
    axes.append([{"intervention": {"alpha": a}} for a in sweep_config.get("alpha_grid", [])])
    axes.append([{"intervention": {"num_negatives": n}} for n in sweep_config.get("negatives_grid", [])])
    axes.append([{"loss": {"igv_preset": p}} for p in sweep_config.get("igv_presets", [])])

    axes = [axis for axis in axes if axis]
    overrides = []
    for combo in itertools.product(*axes):
        override: Dict = {}
        for part in combo:
            override = _merge(override, part)
        overrides.append(override)
    return overrides


def _run_sweep_member(raw_config: Dict, bundle: DatasetBundle, output_dir: str) -> RunRecord:
    """Process-pool entry point for one sweep run"""
    config = RunConfig.from_dict(raw_config)
    try:
        return train(config, bundle, output_dir)
    except Exception as e:
        return RunRecord(
            run_id=make_run_id(config),
            method=config.method,
            seed=config.seed,
            config=config.to_dict(),
            status=RunStatus.FAILED,
            message=f"{type(e).__name__}: {e}",
        )


def sweep(
    base_config: Dict,
    bundle: DatasetBundle,
    grid: Sequence[Dict],
    output_dir,
    registry: Optional[RunRegistry] = None,
    max_workers: int = 1,
) -> List[RunRecord]:
    """
    Run every grid member not already completed

    Args:
        base_config: Parsed config.json document
        bundle: Dataset shared by all runs
        grid: Overrides from expand_sweep_grid
        output_dir: Root output directory
        registry: Completed-run registry; finished runs are loaded instead of re-run
        max_workers: Training processes (1 runs in-process)

    Returns:
        RunRecords ordered by run id
    """
    logger = logging.getLogger("Trainer")
    output_dir = Path(output_dir)
    records: List[RunRecord] = []
    pending: List[Tuple[Dict, RunConfig]] = []

    for override in grid:
        raw = _merge(base_config, override)
        config = RunConfig.from_dict(raw)
        config.validate()
        config_hash = config.config_hash()
        if registry is not None and not registry.should_run(config_hash, config.method, config.seed):
            path = output_dir / "runs" / make_run_id(config) / RUN_RECORD_FILENAME
            if path.exists():
                records.append(load_run_record(path))
                continue
            logger.warning(f"Registry lists {make_run_id(config)} as completed but its record is missing")
        pending.append((raw, config))

    logger.info(f"Sweep: {len(pending)} runs to execute, {len(records)} already completed")

    def _register(record: RunRecord, config: RunConfig):
        records.append(record)
        if registry is not None:
            path = output_dir / "runs" / record.run_id / RUN_RECORD_FILENAME
            registry.mark_completed(record, config.config_hash(), str(path))

    if max_workers <= 1:
        for raw, config in pending:
            _register(_run_sweep_member(raw, bundle, str(output_dir)), config)
    else:
        with ProcessPoolExecutor(max_workers=max_workers) as executor:
            futures = {
                executor.submit(_run_sweep_member, raw, bundle, str(output_dir)): config
                for raw, config in pending
            }
            for future in as_completed(futures):
                _register(future.result(), futures[future])

    return sorted(records, key=lambda r: r.run_id)
