#!/usr/bin/env python3
"""
Causal VideoQA Lab Pipeline
Runs the complete experiment: Generate → Train → Evaluate → Report, plus sweeps
that skip runs already recorded in the run registry.
"""

import argparse
import json
import logging
import sys
import time
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

# Setup path for imports
sys.path.insert(0, str(Path(__file__).parent))

from causal_vidqa.config import (
    DEFAULT_CONFIG_PATH,
    RunConfig,
    gen_config_from_dict,
    load_config,
    load_env_file,
    resolve_output_root,
    setup_logger,
)
from causal_vidqa.dataset_io import load_bundle, load_feature_bundle, save_bundle
from causal_vidqa.report import emit_report, load_run_records
from causal_vidqa.run_registry import RunRegistry
from causal_vidqa.schema import DatasetBundle, MetricsRecord, RunRecord, RunStatus
from causal_vidqa.synthgen import coupling_report, generate_dataset
from causal_vidqa.trainer import Trainer, evaluate_checkpoint, expand_sweep_grid, sweep

# Filename constants
DATASET_DIRNAME = "dataset"
REPORT_DIRNAME = "report"
REGISTRY_FILENAME = "runs.db"

# Display constants
LOG_SEPARATOR_WIDTH = 60


class LabPipeline:
    """Orchestrates dataset generation, training, evaluation and reporting"""

    def __init__(self, config_path: str = DEFAULT_CONFIG_PATH):
        """
        Initialize the lab pipeline

        Args:
            config_path: Path to configuration file
        """
        self.config_path = config_path
        load_env_file()
        self.config = load_config(config_path)
        self.output_dir = resolve_output_root(self.config)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.logs_dir = Path(self.config.get("output", {}).get("logs_dir", "logs"))

        self.logger = setup_logger("LabPipeline", self.config.get("logging"), self.logs_dir)
        for component in ("Trainer", "SynthGen", "RunRegistry", "Report"):
            setup_logger(component, self.config.get("logging"), self.logs_dir)

        self.logger.info("=" * LOG_SEPARATOR_WIDTH)
        self.logger.info("CAUSAL VIDEOQA LAB STARTING")
        self.logger.info("=" * LOG_SEPARATOR_WIDTH)

    def _banner(self, title: str):
        self.logger.info("\n" + "=" * LOG_SEPARATOR_WIDTH)
        self.logger.info(title)
        self.logger.info("=" * LOG_SEPARATOR_WIDTH)

    def _write_status_log(self, status: str, duration: float, metrics: Dict, error_msg: str = "-"):
        """
        Write simple status line to weekly log file

        Args:
            status: SUCCESS, DIVERGED or FAILED
            duration: Elapsed time in seconds
            metrics: Dictionary with run metrics
            error_msg: Error message if failed, otherwise "-"
        """
        if not self.config.get("logging", {}).get("enable_status_file_logging", True):
            return

        now = datetime.now()
        year, week, _ = now.isocalendar()
        self.logs_dir.mkdir(parents=True, exist_ok=True)
        status_file = self.logs_dir / f"status_{year}-{week:02d}.log"

        def _fmt(value) -> str:
            return f"{value:.3f}" if isinstance(value, float) else "-"

        metrics_str = (
            f"method:{metrics.get('method', '-')} seed:{metrics.get('seed', '-')} "
            f"iid:{_fmt(metrics.get('iid'))} ood:{_fmt(metrics.get('ood'))} iou:{_fmt(metrics.get('iou'))}"
        )
        timestamp_str = now.strftime("%Y-%m-%d %H:%M:%S")
        log_line = f"{timestamp_str} | {status:7s} | {duration:5.1f}s | {metrics_str} | {error_msg}\n"

        with open(status_file, "a", encoding="utf-8") as f:
            f.write(log_line)

    @staticmethod
    def _status_metrics(record: RunRecord) -> Dict:
        iid = record.final_metrics.get("test_iid")
        ood = record.final_metrics.get("test_ood")
        return {
            "method": str(record.method),
            "seed": record.seed,
            "iid": iid.accuracy if iid else None,
            "ood": ood.accuracy if ood else None,
            "iou": ood.grounding_iou if ood else None,
        }

    def run_config(self, overrides: Optional[Dict] = None) -> RunConfig:
        """Typed run configuration with optional training-section overrides"""
        raw = json.loads(json.dumps(self.config))
        raw.setdefault("training", {}).update({k: v for k, v in (overrides or {}).items() if v is not None})
        config = RunConfig.from_dict(raw)
        config.validate()
        return config

    def load_dataset(self, path: str) -> DatasetBundle:
        """Load a generated dataset directory or an external feature .npz file"""
        path = Path(path)
        if path.is_dir():
            return load_bundle(path)
        data = self.config.get("data", {})
        return load_feature_bundle(path, seed=data.get("seed", 0), splits=tuple(data.get("splits", (0.7, 0.1, 0.1, 0.1))))

    def run_generate(self, out_dir: Optional[str] = None) -> Optional[str]:
        """
        Generate and save the synthetic dataset

        Returns:
            Path to the dataset directory, or None if failed
        """
        self._banner("STEP 1: GENERATING SYNTHETIC DATASET")
        try:
            data_section = self.config.get("data", {})
            bundle = generate_dataset(
                gen_config_from_dict(data_section),
                use_parallel=data_section.get("use_parallel", False),
                max_workers=data_section.get("max_workers"),
            )
            out_dir = Path(out_dir) if out_dir else self.output_dir / DATASET_DIRNAME
            path = save_bundle(bundle, out_dir)

            report = coupling_report(bundle.train, bundle.gen_config.num_answers)
            self.logger.info(
                f"✅ Generated {sum(len(bundle.split(s)) for s in DatasetBundle.SPLIT_NAMES)} instances"
            )
            self.logger.info(
                f"📊 Train env/answer coupling: match {report['match_rate']:.3f}, "
                f"chi2 {report['chi2']:.1f} (p={report['p_value']:.3g})"
            )
            self.logger.info(f"📁 Saved to: {path}")
            return str(path)

        except Exception as e:
            self.logger.error(f"❌ Generation failed: {e}", exc_info=True)
            return None

    def run_training(self, dataset_path: str, overrides: Optional[Dict] = None) -> Optional[RunRecord]:
        """
        Train one run

        Args:
            dataset_path: Dataset directory or feature file
            overrides: Training-section overrides (method, seed)

        Returns:
            RunRecord (possibly DIVERGED), or None if the run could not start
        """
        self._banner("STEP 2: TRAINING")
        try:
            config = self.run_config(overrides)
            record = Trainer(config, self.load_dataset(dataset_path), self.output_dir).train()
            if record.status == RunStatus.DIVERGED:
                self.logger.error(f"❌ Training diverged: {record.message}")
            return record

        except Exception as e:
            self.logger.error(f"❌ Training failed: {e}", exc_info=True)
            return None

    def run_evaluation(
        self, checkpoint: str, dataset_path: str, splits: Optional[List[str]] = None
    ) -> Dict[str, MetricsRecord]:
        """
        Evaluate a saved checkpoint on dataset splits

        Returns:
            Dictionary from split name to metrics (empty if failed)
        """
        self._banner("STEP 3: EVALUATING CHECKPOINT")
        try:
            bundle = self.load_dataset(dataset_path)
            splits = splits or self.run_config().training.eval_splits
            results = {}
            dump_dir = Path(checkpoint).parent / "eval_dumps"
            for split in splits:
                if not bundle.split(split):
                    self.logger.warning(f"Split {split} is empty, skipping")
                    continue
                results[split] = evaluate_checkpoint(checkpoint, bundle, split, dump_dir=dump_dir)
                self.logger.info(f"📊 {split}: accuracy {results[split].accuracy:.3f}")

            out_file = Path(checkpoint).parent / "eval.json"
            with open(out_file, "w", encoding="utf-8") as f:
                json.dump({s: vars(m) for s, m in results.items()}, f, indent=2, sort_keys=True)
            self.logger.info(f"📁 Saved to: {out_file}")
            return results

        except Exception as e:
            self.logger.error(f"❌ Evaluation failed: {e}", exc_info=True)
            return {}

    def run_report(self, runs_dir: Optional[str] = None, out_dir: Optional[str] = None) -> Optional[str]:
        """
        Build the report bundle from all saved run records

        Returns:
            Report directory, or None if failed
        """
        self._banner("STEP 4: REPORTING")
        try:
            records = load_run_records(runs_dir or self.output_dir / "runs")
            out_dir = Path(out_dir) if out_dir else self.output_dir / REPORT_DIRNAME
            emit_report(records, out_dir)
            self.logger.info(f"✅ Report for {len(records)} runs")
            self.logger.info(f"📁 Saved to: {out_dir}")
            return str(out_dir)

        except Exception as e:
            self.logger.error(f"❌ Reporting failed: {e}", exc_info=True)
            return None

    def run_sweep(self, dataset_path: str, max_workers: Optional[int] = None) -> List[RunRecord]:
        """
        Run the configured sweep grid, skipping completed runs

        Returns:
            RunRecords of every grid member
        """
        self._banner("SWEEP")
        sweep_config = self.config.get("sweep", {})
        start_time = time.time()
        try:
            grid = expand_sweep_grid(sweep_config)
            registry = RunRegistry(sweep_config.get("registry_path", str(self.output_dir / REGISTRY_FILENAME)))
            records = sweep(
                self.config,
                self.load_dataset(dataset_path),
                grid,
                self.output_dir,
                registry=registry,
                max_workers=max_workers or sweep_config.get("max_workers", 1),
            )
            for record in records:
                self._write_status_log(
                    "SUCCESS" if record.status == RunStatus.COMPLETED else str(record.status).upper(),
                    record.wall_clock,
                    self._status_metrics(record),
                    record.message[:50],
                )

            stats = registry.get_statistics()
            self.logger.info(f"⏱️  Sweep time: {time.time() - start_time:.1f}s")
            self.logger.info(f"📊 Registry: {stats.get('total_runs', 0)} runs {stats.get('by_status', {})}")
            return records

        except Exception as e:
            self.logger.error(f"❌ Sweep failed: {e}", exc_info=True)
            self._write_status_log("FAILED", time.time() - start_time, {}, str(e)[:50])
            return []

    def run(self, dataset_path: Optional[str] = None, overrides: Optional[Dict] = None) -> bool:
        """
        Run the complete pipeline

        Args:
            dataset_path: Existing dataset; falls back to training.dataset_path, then generation
            overrides: Training-section overrides (method, seed)

        Returns:
            True if pipeline completed successfully, False otherwise
        """
        start_time = time.time()
        metrics: Dict = {}

        try:
            dataset_path = (
                dataset_path or self.config.get("training", {}).get("dataset_path") or self.run_generate()
            )
            if not dataset_path:
                self.logger.error("Pipeline failed at generation step")
                self._write_status_log("FAILED", time.time() - start_time, metrics, "Generation failed")
                return False

            record = self.run_training(dataset_path, overrides)
            if record is None or record.status != RunStatus.COMPLETED:
                self.logger.error("Pipeline failed at training step")
                status = "DIVERGED" if record is not None else "FAILED"
                message = record.message[:50] if record is not None else "Training failed"
                self._write_status_log(status, time.time() - start_time, metrics, message)
                return False
            metrics = self._status_metrics(record)

            results = self.run_evaluation(record.checkpoint, dataset_path)
            if not results:
                self.logger.error("Pipeline failed at evaluation step")
                self._write_status_log("FAILED", time.time() - start_time, metrics, "Evaluation failed")
                return False

            report_dir = self.run_report()
            elapsed = time.time() - start_time
            self._write_status_log("SUCCESS", elapsed, metrics)

            self._banner("PIPELINE COMPLETED SUCCESSFULLY")
            self.logger.info(f"⏱️  Total time: {elapsed:.1f}s")
            self.logger.info(f"📁 Dataset: {dataset_path}")
            self.logger.info(f"📁 Checkpoint: {record.checkpoint}")
            self.logger.info(f"📁 Report: {report_dir}")
            for split, m in results.items():
                self.logger.info(f"   {split:9s} accuracy {m.accuracy:.3f}")
            self.logger.info("=" * LOG_SEPARATOR_WIDTH)
            return True

        except KeyboardInterrupt:
            self.logger.info("\n\n⚠️  Pipeline interrupted by user")
            self._write_status_log("FAILED", time.time() - start_time, metrics, "Interrupted by user")
            return False
        except Exception as e:
            self.logger.error(f"❌ Pipeline failed: {e}", exc_info=True)
            self._write_status_log("FAILED", time.time() - start_time, metrics, str(e)[:50])
            return False


def main():
    """Main entry point"""
    parser = argparse.ArgumentParser(description="Causal VideoQA lab: generate, train, evaluate, sweep, report")
    parser.add_argument(
        "--config",
        default=DEFAULT_CONFIG_PATH,
        help=f"Path to config file (default: {DEFAULT_CONFIG_PATH})",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    gen_parser = subparsers.add_parser("generate", help="Generate the synthetic dataset")
    gen_parser.add_argument("--out", help="Dataset output directory")

    for name in ("train", "pipeline"):
        sub = subparsers.add_parser(name, help="Train one run" if name == "train" else "Generate, train, evaluate, report")
        sub.add_argument("--dataset", required=(name == "train"), help="Dataset directory or feature .npz")
        sub.add_argument("--method", help="Override training.method")
        sub.add_argument("--seed", type=int, help="Override training.seed")

    eval_parser = subparsers.add_parser("eval", help="Evaluate a checkpoint")
    eval_parser.add_argument("--checkpoint", required=True, help="Checkpoint file")
    eval_parser.add_argument("--dataset", required=True, help="Dataset directory or feature .npz")
    eval_parser.add_argument("--split", action="append", help="Split to evaluate (repeatable)")

    sweep_parser = subparsers.add_parser("sweep", help="Run the configured sweep grid")
    sweep_parser.add_argument("--dataset", required=True, help="Dataset directory or feature .npz")
    sweep_parser.add_argument("--workers", type=int, help="Training processes")

    report_parser = subparsers.add_parser("report", help="Build the report bundle")
    report_parser.add_argument("--runs-dir", help="Directory searched for run records")
    report_parser.add_argument("--out", help="Report output directory")

    args = parser.parse_args()

    pipeline = LabPipeline(config_path=args.config)

    if args.command == "generate":
        success = pipeline.run_generate(args.out) is not None
    elif args.command == "train":
        record = pipeline.run_training(args.dataset, {"method": args.method, "seed": args.seed})
        success = record is not None and record.status == RunStatus.COMPLETED
    elif args.command == "eval":
        success = bool(pipeline.run_evaluation(args.checkpoint, args.dataset, args.split))
    elif args.command == "sweep":
        records = pipeline.run_sweep(args.dataset, args.workers)
        success = bool(records) and all(r.status == RunStatus.COMPLETED for r in records)
    elif args.command == "report":
        success = pipeline.run_report(args.runs_dir, args.out) is not None
    else:
        success = pipeline.run(args.dataset, {"method": args.method, "seed": args.seed})

    sys.exit(0 if success else 1)


if __name__ == "__main__":
    main()
