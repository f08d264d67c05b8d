#!/usr/bin/env python3
"""
Report Emission
Persists run records and turns a set of them into JSONL metrics, CSV summary tables
and plots (loss curves, IID-vs-OOD bars, grounding IoU distribution).
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .schema import Method, MetricsRecord, RunRecord, RunStatus  # noqa: E402

logger = logging.getLogger("Report")

RUN_RECORD_FILENAME = "run_record.json"

SUMMARY_COLUMNS = ["method", "split", "accuracy_mean", "accuracy_std", "grounding_iou_mean", "runs"]
FINAL_COLUMNS = [
    "run_id",
    "method",
    "seed",
    "split",
    "accuracy",
    "count",
    "grounding_precision",
    "grounding_recall",
    "grounding_iou",
]


def save_run_record(record: RunRecord, path) -> Path:
    """Write a run record as JSON"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(asdict(record), f, indent=2, sort_keys=True)
    return path


def load_run_record(path) -> RunRecord:
    """Read a run record written by save_run_record"""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    data["method"] = Method(data["method"])
    data["status"] = RunStatus(data["status"])
    data["final_metrics"] = {
        split: MetricsRecord(**metrics) for split, metrics in data.get("final_metrics", {}).items()
    }
    return RunRecord(**data)


def load_run_records(runs_dir) -> List[RunRecord]:
    """All run records below a directory, ordered by run id"""
    records = []
    for path in sorted(Path(runs_dir).rglob(RUN_RECORD_FILENAME)):
        try:
            records.append(load_run_record(path))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            logger.warning(f"Skipping unreadable run record {path}: {e}")
    return sorted(records, key=lambda r: r.run_id)


def _final_rows(records: Sequence[RunRecord]) -> List[Dict]:
    rows = []
    for record in records:
        for split in sorted(record.final_metrics):
            m = record.final_metrics[split]
            rows.append(
                {
                    "run_id": record.run_id,
                    "method": str(record.method),
                    "seed": record.seed,
                    "split": split,
                    "accuracy": m.accuracy,
                    "count": m.count,
                    "grounding_precision": m.grounding_precision,
                    "grounding_recall": m.grounding_recall,
                    "grounding_iou": m.grounding_iou,
                }
            )
    return rows


def summarize(records: Sequence[RunRecord]) -> pd.DataFrame:
    """Method x split summary of final metrics over runs (seeds)"""
    final = pd.DataFrame(_final_rows(records), columns=FINAL_COLUMNS)
    if final.empty:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    final = final.astype({"accuracy": float, "grounding_iou": float})
    summary = (
        final.groupby(["method", "split"], sort=True)
        .agg(
            accuracy_mean=("accuracy", "mean"),
            accuracy_std=("accuracy", lambda s: s.std(ddof=0)),
            grounding_iou_mean=("grounding_iou", "mean"),
            runs=("run_id", "count"),
        )
        .reset_index()
    )
    return summary[SUMMARY_COLUMNS]


def _write_metrics_jsonl(records: Sequence[RunRecord], path: Path):
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            for row in record.epochs:
                f.write(json.dumps({"kind": "epoch", **row}, sort_keys=True) + "\n")
        for row in _final_rows(records):
            f.write(json.dumps({"kind": "final", **row}, sort_keys=True) + "\n")


def _no_data(ax, title: str):
    ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes)
    ax.set_title(title)


def _plot_loss_curves(records: Sequence[RunRecord], path: Path):
    fig, ax = plt.subplots(figsize=(8, 5))
    plotted = False
    for record in records:
        points = [(row["epoch"], row["losses"]["loss"]) for row in record.epochs if "loss" in row.get("losses", {})]
        if points:
            epochs, losses = zip(*points)
            ax.plot(epochs, losses, label=record.run_id)
            plotted = True
    if plotted:
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        ax.set_title("Training loss")
        ax.legend(fontsize="small")
    else:
        _no_data(ax, "Training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _plot_iid_vs_ood(summary: pd.DataFrame, path: Path):
    fig, ax = plt.subplots(figsize=(7, 5))
    table = summary[summary["split"].isin(["test_iid", "test_ood"])]
    if table.empty:
        _no_data(ax, "IID vs OOD accuracy")
    else:
        pivot = table.pivot(index="method", columns="split", values="accuracy_mean")
        pivot.plot.bar(ax=ax, rot=0)
        ax.set_ylabel("accuracy")
        ax.set_ylim(0.0, 1.0)
        ax.set_title("IID vs OOD accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _plot_grounding_iou(records: Sequence[RunRecord], path: Path):
    fig, ax = plt.subplots(figsize=(7, 5))
    by_method: Dict[str, List[float]] = {}
    for record in records:
        for metrics in record.final_metrics.values():
            if metrics.iou_values:
                by_method.setdefault(str(record.method), []).extend(metrics.iou_values)
    if by_method:
        for method in sorted(by_method):
            ax.hist(by_method[method], bins=20, range=(0.0, 1.0), alpha=0.5, label=method)
        ax.set_xlabel("grounding IoU")
        ax.set_ylabel("instances")
        ax.set_title("Grounding IoU distribution")
        ax.legend()
    else:
        _no_data(ax, "Grounding IoU distribution")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def emit_report(records: Sequence[RunRecord], out_dir) -> Dict[str, Path]:
    """
    Write the report bundle for a set of runs

    Args:
        records: Run records (any order; sorted by run id here)
        out_dir: Report directory

    Returns:
        Mapping from artifact name to its path
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = sorted(records, key=lambda r: r.run_id)

    paths = {
        "metrics": out_dir / "metrics.jsonl",
        "summary": out_dir / "summary.csv",
        "accuracy_table": out_dir / "accuracy_table.csv",
        "loss_curves": out_dir / "loss_curves.png",
        "iid_vs_ood": out_dir / "iid_vs_ood.png",
        "grounding_iou": out_dir / "grounding_iou.png",
    }

    _write_metrics_jsonl(records, paths["metrics"])

    summary = summarize(records)
    summary.to_csv(paths["summary"], index=False, float_format="%.6f")

    if summary.empty:
        pd.DataFrame(columns=["method"]).to_csv(paths["accuracy_table"], index=False)
    else:
        table = summary.pivot_table(index="method", columns="split", values="accuracy_mean", aggfunc="mean")
        table.to_csv(paths["accuracy_table"], float_format="%.6f")

    _plot_loss_curves(records, paths["loss_curves"])
    _plot_iid_vs_ood(summary, paths["iid_vs_ood"])
    _plot_grounding_iou(records, paths["grounding_iou"])

    logger.info(f"📊 Report for {len(records)} runs written to {out_dir}")
    return paths


def main():
    """Main entry point"""
    parser = argparse.ArgumentParser(description="Build the report bundle from saved run records")
    parser.add_argument("--runs-dir", required=True, help="Directory searched for run records")
    parser.add_argument("--out", required=True, help="Report output directory")
    args = parser.parse_args()

    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    try:
        paths = emit_report(load_run_records(args.runs_dir), args.out)
        print(json.dumps({name: str(path) for name, path in paths.items()}, indent=2))
    except Exception as e:
        print(f"\n❌ Fatal error: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
